//! Property suites exposed through `hbfl verify <suite>`.
//!
//! Every suite draws its random instances from streams keyed by the suite
//! seed, so a failing case can be replayed from the report alone.

use std::time::Instant;

use hbfl_core::data::SynthSpec;
use hbfl_core::mixture::{self, MixClientPosterior, MixtureGlobalPosterior, Responsibilities};
use hbfl_core::niw::{self, NiwClientPosterior, NiwGlobalPosterior, NiwHyperParams};
use hbfl_core::nn::{self, Batch, MlpArch, ParamVector};
use hbfl_core::rng::{self, Rng};
use hbfl_core::runtime::{
    convergence_diagnostic, fedavg_aggregate, fedprox_client_loss_grad, FederatedConfig, LrSchedule, Strategy,
};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::experiment::build_simulation;
use crate::spec::{DatasetSpec, EvaluationSpec, ExperimentSpec, ModelSpec, PartitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Reductions,
    Oracles,
    Samplers,
    Convergence,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Reductions, Suite::Oracles, Suite::Samplers, Suite::Convergence];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Reductions => "reductions",
            Suite::Oracles => "oracles",
            Suite::Samplers => "samplers",
            Suite::Convergence => "convergence",
        }
    }

    fn key(self) -> u64 {
        match self {
            Suite::Reductions => 101,
            Suite::Oracles => 102,
            Suite::Samplers => 103,
            Suite::Convergence => 104,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|v| v.name()).collect();
            CliError::Spec(format!("unknown suite `{s}`; valid values: {}", names.join(", ")))
        })
    }
}

pub type NiwServerFn = fn(
    &[ParamVector],
    &NiwGlobalPosterior,
    &NiwHyperParams,
    usize,
    f64,
    f64,
) -> hbfl_core::Result<(ParamVector, Vec<f64>)>;

/// Implementations under test; swapped for a mutant in negative controls.
#[derive(Clone, Copy)]
pub struct Targets {
    pub niw_server_update: NiwServerFn,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            niw_server_update: niw::niw_server_update,
        }
    }
}

/// Mutant whose variance update divides by `nu0 + N + 1` instead of
/// `nu0 + N`.
pub fn tampered_niw_server_update(
    means: &[ParamVector],
    global: &NiwGlobalPosterior,
    hyper: &NiwHyperParams,
    total_clients: usize,
    p_keep: f64,
    epsilon: f64,
) -> hbfl_core::Result<(ParamVector, Vec<f64>)> {
    let (m0, mut v0) = niw::niw_server_update(means, global, hyper, total_clients, p_keep, epsilon)?;
    let n = total_clients as f64;
    v0.iter_mut().for_each(|v| *v *= (hyper.nu0 + n) / (hyper.nu0 + n + 1.0));
    Ok((m0, v0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub passed: bool,
    /// Largest error statistic seen (its meaning is given by `metric`).
    pub worst: f64,
    pub tolerance: f64,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
    /// First failing case, with the stream key needed to regenerate it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failing_case: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub elapsed_ms: u64,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    /// One line per check.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}/{}: worst {:.3e} (tol {:.1e}, {} trials)",
                    if c.passed { "PASS" } else { "FAIL" },
                    self.suite,
                    c.name,
                    c.worst,
                    c.tolerance,
                    c.trials
                )
            })
            .collect()
    }
}

struct Check {
    report: CheckReport,
}

impl Check {
    fn new(name: &str, metric: &str, tolerance: f64) -> Self {
        Self {
            report: CheckReport {
                name: name.into(),
                trials: 0,
                passed: true,
                worst: 0.0,
                tolerance,
                metric: metric.into(),
                note: None,
                failing_case: None,
            },
        }
    }

    fn record(&mut self, err: f64, case: impl FnOnce() -> Value) {
        let r = &mut self.report;
        r.trials += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        r.worst = r.worst.max(err);
        if err > r.tolerance && r.failing_case.is_none() {
            r.passed = false;
            r.failing_case = Some(case());
        }
    }

    fn fail(&mut self, case: Value) {
        self.report.trials += 1;
        self.report.worst = f64::INFINITY;
        self.report.passed = false;
        self.report.failing_case.get_or_insert(case);
    }

    fn done(self) -> CheckReport {
        self.report
    }
}

pub fn run_suite(suite: Suite, seed: u64, targets: &Targets) -> Result<SuiteReport> {
    let timer = Instant::now();
    let checks = match suite {
        Suite::Reductions => reductions(seed)?,
        Suite::Oracles => oracles(seed, targets)?,
        Suite::Samplers => samplers(seed)?,
        Suite::Convergence => convergence(seed)?,
    };
    Ok(SuiteReport {
        suite: suite.name().into(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        elapsed_ms: timer.elapsed().as_millis() as u64,
        checks,
    })
}

fn stream(seed: u64, suite: Suite, check: u64, trial: usize) -> Rng {
    rng::stream(seed, &[suite.key(), check, trial as u64])
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normals(r: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(r)).collect()
}

/// `max_k |a_k - b_k| / max(max_k |b_k|, floor)`.
fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(floor, f64::max);
    diff / scale
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    rel_err(&[a], &[b], 1e-300)
}

/// A random MLP with at most `max_params` parameters.
fn random_arch(r: &mut Rng, max_params: usize) -> MlpArch {
    loop {
        let depth = r.random_range(1..=2);
        let mut sizes = vec![r.random_range(2..=6)];
        for _ in 0..depth {
            sizes.push(r.random_range(2..=6));
        }
        sizes.push(r.random_range(2..=4));
        let arch = MlpArch::new(sizes).expect("valid sizes");
        if arch.num_params() <= max_params {
            return arch;
        }
    }
}

fn random_batch(arch: &MlpArch, r: &mut Rng) -> Batch {
    let n = r.random_range(1..=8);
    let inputs = normals(r, n * arch.input_dim(), 1.0);
    let labels = (0..n).map(|_| r.random_range(0..arch.num_classes())).collect();
    Batch::new(inputs, labels, arch.input_dim()).expect("consistent batch")
}

fn random_means(r: &mut Rng, count: usize, d: usize) -> Vec<ParamVector> {
    (0..count).map(|_| ParamVector::from(normals(r, d, 1.0))).collect()
}

fn vecs(v: &[ParamVector]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.to_vec()).collect()
}

// ---------------------------------------------------------------- reductions

const REDUCTION_TRIALS: usize = 100;
const REDUCTION_TOL: f64 = 1e-9;

fn reductions(seed: u64) -> Result<Vec<CheckReport>> {
    let s = Suite::Reductions;

    let mut a = Check::new("niw_server_mean_is_shrunk_fedavg", "relative error", REDUCTION_TOL);
    for t in 0..REDUCTION_TRIALS {
        let mut r = stream(seed, s, 1, t);
        let d = r.random_range(1..=100);
        let n = r.random_range(1..=10);
        let means = random_means(&mut r, n, d);
        let eps = r.random_range(0.0..0.1);
        let hyper = NiwHyperParams::standard(d);
        let global = niw::niw_init(d, r.random_range(n..=10_000), &hyper)?;
        let (m0, _) = niw::niw_server_update(&means, &global, &hyper, n, 1.0, eps)?;
        let avg = fedavg_aggregate(&means)?;
        let expected: Vec<f64> = avg.iter().map(|v| v * n as f64 / (n as f64 + 1.0)).collect();
        a.record(rel_err(&m0, &expected, 1e-12), || json!({"trial": t, "d": d, "n": n, "means": vecs(&means)}));
    }

    let mut b = Check::new("niw_client_gradient_is_fedprox", "relative error", REDUCTION_TOL);
    for t in 0..REDUCTION_TRIALS {
        let mut r = stream(seed, s, 2, t);
        let arch = random_arch(&mut r, 100);
        let d = arch.num_params();
        let m = ParamVector::from(normals(&mut r, d, 0.5));
        let m0 = ParamVector::from(normals(&mut r, d, 0.5));
        let alpha = r.random_range(0.1..3.0);
        let data_size = r.random_range(1..=500);
        let n0 = r.random_range(10..10_000) as f64 + d as f64 + 2.0;
        let global = NiwGlobalPosterior {
            m0: m0.clone(),
            v0_diag: vec![alpha; d],
            l0: n0 - d as f64 - 1.0,
            n0,
            d,
        };
        let batch = random_batch(&arch, &mut r);
        let client = NiwClientPosterior {
            m: m.clone(),
            p_keep: 1.0,
            epsilon: 1e-4,
        };
        let (l_niw, g_niw) = niw::niw_client_loss_grad(&client, &batch, &global, data_size, &arch, &mut r)?;
        let mu = (n0 + d as f64 + 1.0) / (alpha * data_size as f64);
        let (l_prox, g_prox) = fedprox_client_loss_grad(&m, &batch, &m0, mu, &arch)?;
        let err = rel_err(&g_niw, &g_prox, 1e-12).max(scalar_rel(l_niw, l_prox));
        b.record(err, || json!({"trial": t, "arch": arch.layer_sizes(), "alpha": alpha, "data_size": data_size}));
    }

    let mut c = Check::new("mixture_single_prototype_m_step", "relative error", REDUCTION_TOL);
    for t in 0..REDUCTION_TRIALS {
        let mut r = stream(seed, s, 3, t);
        let d = r.random_range(1..=100);
        let n = r.random_range(1..=10);
        let sigma_sq = r.random_range(0.01..10.0);
        let means = random_means(&mut r, n, d);
        let resp = Responsibilities { c: vec![vec![1.0]; n] };
        let got = mixture::mix_m_step(&means, &resp, sigma_sq, n)?;
        let expected: Vec<f64> = (0..d)
            .map(|k| means.iter().map(|m| m[k]).sum::<f64>() / (n as f64 + sigma_sq))
            .collect();
        c.record(rel_err(&got[0], &expected, 1e-12), || {
            json!({"trial": t, "sigma_sq": sigma_sq, "means": vecs(&means)})
        });
    }

    let mut dd = Check::new("mixture_single_prototype_gradient_is_fedprox", "relative error", REDUCTION_TOL);
    for t in 0..REDUCTION_TRIALS {
        let mut r = stream(seed, s, 4, t);
        let arch = random_arch(&mut r, 100);
        let d = arch.num_params();
        let m = ParamVector::from(normals(&mut r, d, 0.5));
        let proto = ParamVector::from(normals(&mut r, d, 0.5));
        let sigma_sq = r.random_range(0.01..10.0);
        let data_size = r.random_range(1..=500);
        let global = MixtureGlobalPosterior {
            prototypes: vec![proto.clone()],
            sigma_sq,
            epsilon: 1e-4,
            gating: ParamVector::zeros(0),
        };
        let batch = random_batch(&arch, &mut r);
        let client = MixClientPosterior {
            m: m.clone(),
            epsilon: 1e-4,
        };
        let (l_mix, g_mix) = mixture::mix_client_loss_grad(&client, &batch, &global, data_size, &arch)?;
        let mu = 1.0 / (sigma_sq * data_size as f64);
        let (l_prox, g_prox) = fedprox_client_loss_grad(&m, &batch, &proto, mu, &arch)?;
        let err = rel_err(&g_mix, &g_prox, 1e-12).max(scalar_rel(l_mix, l_prox));
        dd.record(err, || json!({"trial": t, "arch": arch.layer_sizes(), "sigma_sq": sigma_sq, "data_size": data_size}));
    }
    Ok(vec![a.done(), b.done(), c.done(), dd.done()])
}

// ------------------------------------------------------------------- oracles

/// Explicit per-coordinate server objective in `(m, u = ln v)`, with the
/// client expectation `E(theta - m)^2 = p (m_i - m)^2 + (1 - p) m^2 + eps^2`.
struct ServerCoordinate<'a> {
    mi: &'a [f64],
    scale: f64,
    mu0: f64,
    s0: f64,
    lambda0: f64,
    nu0: f64,
    n0: f64,
    p: f64,
    eps: f64,
}

impl ServerCoordinate<'_> {
    fn expected(&self, m: f64) -> f64 {
        self.mi
            .iter()
            .map(|&x| self.p * (x - m).powi(2) + (1.0 - self.p) * m * m + self.eps * self.eps)
            .sum()
    }

    fn value(&self, m: f64, u: f64) -> f64 {
        let w = (-u).exp();
        let dev = self.mu0 - m;
        0.5 * (self.n0 * self.s0 * w + self.nu0 * u + self.lambda0 * self.n0 * dev * dev * w)
            + self.scale * 0.5 * (self.n0 * self.expected(m) * w + self.mi.len() as f64 * u)
    }

    fn grad(&self, m: f64, u: f64) -> (f64, f64) {
        let w = (-u).exp();
        let dev = self.mu0 - m;
        let de: f64 = self
            .mi
            .iter()
            .map(|&x| -2.0 * self.p * (x - m) + 2.0 * (1.0 - self.p) * m)
            .sum();
        let gm = -self.lambda0 * self.n0 * dev * w + self.scale * 0.5 * self.n0 * de * w;
        let gu = 0.5 * (-self.n0 * self.s0 * w + self.nu0 - self.lambda0 * self.n0 * dev * dev * w)
            + self.scale * 0.5 * (-self.n0 * self.expected(m) * w + self.mi.len() as f64);
        (gm, gu)
    }

    /// Diagonally preconditioned gradient descent with Armijo backtracking.
    fn minimize(&self) -> (f64, f64) {
        let nf = self.mi.len() as f64;
        let mut m = self.mi.iter().sum::<f64>() / nf;
        let mut u = 0.0;
        for _ in 0..20_000 {
            let (gm, gu) = self.grad(m, u);
            let w = (-u).exp();
            let hmm = self.n0 * w * (self.lambda0 + self.scale * nf);
            let dev = self.mu0 - m;
            let huu = 0.5 * w * self.n0 * (self.s0 + self.lambda0 * dev * dev + self.scale * self.expected(m));
            let (dm, du) = (-gm / hmm, -gu / huu);
            let f0 = self.value(m, u);
            let slope = gm * dm + gu * du;
            let mut t = 1.0;
            while t > 1e-20 && self.value(m + t * dm, u + t * du) > f0 + 1e-4 * t * slope {
                t *= 0.5;
            }
            m += t * dm;
            u += t * du;
            if (t * dm).abs() <= 1e-15 * m.abs().max(1e-300) && (t * du).abs() <= 1e-15 {
                break;
            }
        }
        (m, u.exp())
    }
}

const GRAD_TOL: f64 = 1e-5;
const GRAD_TRIALS: usize = 20;

/// Gradient error against central differences, normalised by the largest
/// gradient entry. Coordinates where the difference quotient itself is
/// unstable under halving `h` (a ReLU kink inside the stencil) are skipped
/// and counted.
fn fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> (f64, usize) {
    let quotient = |k: usize, h: f64| {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    };
    let scale = grad.iter().map(|g| g.abs()).fold(1e-8, f64::max);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for k in 0..x.len() {
        let a = quotient(k, 1e-6);
        let b = quotient(k, 5e-7);
        if (a - b).abs() > 1e-4 * scale {
            skipped += 1;
            continue;
        }
        worst = worst.max((grad[k] - a).abs() / scale);
    }
    (worst, skipped)
}

struct FdCheck {
    check: Check,
    coords: usize,
    skipped: usize,
}

impl FdCheck {
    fn new(name: &str) -> Self {
        Self {
            check: Check::new(name, "max |g - fd| / max |g|", GRAD_TOL),
            coords: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], case: impl FnOnce() -> Value) {
        let (err, skipped) = fd_error(f, x, grad);
        self.coords += x.len();
        self.skipped += skipped;
        self.check.record(err, case);
    }

    fn done(mut self) -> CheckReport {
        // More than 2% unusable coordinates means the check did not really run.
        if self.skipped * 50 > self.coords {
            self.check.fail(json!({"reason": "too many non-differentiable coordinates"}));
        }
        let mut r = self.check.done();
        r.note = Some(format!("{} of {} coordinates skipped at kinks", self.skipped, self.coords));
        r
    }
}

fn oracles(seed: u64, targets: &Targets) -> Result<Vec<CheckReport>> {
    let s = Suite::Oracles;
    let mut out = Vec::new();

    let mut gd = Check::new("niw_server_matches_gradient_descent", "relative error", 1e-4);
    for t in 0..50 {
        let mut r = stream(seed, s, 1, t);
        let d = r.random_range(1..=20);
        let nf = r.random_range(1..=5);
        let n = nf + r.random_range(0..=3);
        let means = random_means(&mut r, nf, d);
        let hyper = NiwHyperParams {
            mu0: normals(&mut r, d, 0.3),
            sigma0_diag: (0..d).map(|_| r.random_range(0.5..2.0)).collect(),
            lambda0: r.random_range(0.5..2.0),
            nu0: d as f64 + 2.0 + r.random_range(0.0..3.0),
        };
        let p = r.random_range(0.5..=1.0);
        let eps = r.random_range(0.0..0.1);
        let mut global = niw::niw_init(d, r.random_range(10..1000), &hyper)?;
        global.m0 = ParamVector::from(normals(&mut r, d, 1.0));
        let (m0, v0) = (targets.niw_server_update)(&means, &global, &hyper, n, p, eps)?;
        let mut m_ref = vec![0.0; d];
        let mut v_ref = vec![0.0; d];
        for k in 0..d {
            let mi: Vec<f64> = means.iter().map(|m| m[k]).collect();
            let (m, v) = ServerCoordinate {
                mi: &mi,
                scale: n as f64 / nf as f64,
                mu0: hyper.mu0[k],
                s0: hyper.sigma0_diag[k],
                lambda0: hyper.lambda0,
                nu0: hyper.nu0,
                n0: global.n0,
                p,
                eps,
            }
            .minimize();
            m_ref[k] = m;
            v_ref[k] = v.max(niw::V_MIN);
        }
        let err = rel_err(&m0, &m_ref, 1e-12).max(rel_err(&v0, &v_ref, 1e-12));
        gd.record(err, || {
            json!({"trial": t, "d": d, "n": n, "p": p, "eps": eps, "hyper": hyper, "n0": global.n0,
                   "means": vecs(&means), "m0": m0.to_vec(), "v0": v0, "m_ref": m_ref, "v_ref": v_ref})
        });
    }
    out.push(gd.done());

    let mut k1 = Check::new("mixture_single_prototype_m_step_closed_form", "relative error", 1e-12);
    for t in 0..50 {
        let mut r = stream(seed, s, 2, t);
        let d = r.random_range(1..=20);
        let n = r.random_range(1..=5);
        let sigma_sq = r.random_range(0.01..10.0);
        let means = random_means(&mut r, n, d);
        let resp = Responsibilities { c: vec![vec![1.0]; n] };
        let got = mixture::mix_m_step(&means, &resp, sigma_sq, n)?;
        let expected: Vec<f64> = (0..d)
            .map(|k| means.iter().map(|m| m[k]).sum::<f64>() / (n as f64 + sigma_sq))
            .collect();
        k1.record(rel_err(&got[0], &expected, 1e-12), || json!({"trial": t, "sigma_sq": sigma_sq}));
    }
    out.push(k1.done());

    let mut em = Check::new("em_step_never_increases_objective", "increase / max(1, |objective|)", 1e-10);
    for t in 0..100 {
        let mut r = stream(seed, s, 3, t);
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=20);
        let n = r.random_range(1..=10);
        let sigma_sq = r.random_range(0.05..5.0);
        let centers = random_means(&mut r, k, d);
        let means: Vec<ParamVector> = (0..n)
            .map(|_| {
                let c = &centers[r.random_range(0..k)];
                c.iter().map(|v| v + 0.5 * normal(&mut r)).collect::<Vec<_>>().into()
            })
            .collect();
        let protos = random_means(&mut r, k, d);
        let before = mixture::mix_server_objective(&protos, &means, sigma_sq);
        let resp = mixture::mix_e_step(&means, &protos, sigma_sq)?;
        let updated = mixture::mix_m_step(&means, &resp, sigma_sq, n)?;
        let after = mixture::mix_server_objective(&updated, &means, sigma_sq);
        let rise = (after - before) / before.abs().max(1.0);
        em.record(rise, || json!({"trial": t, "k": k, "d": d, "n": n, "before": before, "after": after}));
    }
    out.push(em.done());

    let mut ce = FdCheck::new("cross_entropy_gradient");
    for t in 0..GRAD_TRIALS {
        let mut r = stream(seed, s, 4, t);
        let arch = random_arch(&mut r, 100);
        let x = nn::init_params(&arch, &mut r);
        let batch = random_batch(&arch, &mut r);
        let (_, g) = nn::loss_and_grad(&x, &arch, &batch, None)?;
        let f = |p: &[f64]| nn::loss_and_grad(p, &arch, &batch, None).map(|v| v.0).unwrap_or(f64::NAN);
        ce.record(&f, &x, &g, || json!({"trial": t, "arch": arch.layer_sizes()}));
    }
    out.push(ce.done());

    let mut np = FdCheck::new("niw_client_objective_gradient");
    for t in 0..GRAD_TRIALS {
        let mut r = stream(seed, s, 5, t);
        let arch = random_arch(&mut r, 100);
        let d = arch.num_params();
        let x = nn::init_params(&arch, &mut r);
        let global = NiwGlobalPosterior {
            m0: ParamVector::from(normals(&mut r, d, 0.5)),
            v0_diag: (0..d).map(|_| r.random_range(0.2..2.0)).collect(),
            l0: 101.0,
            n0: 100.0 + d as f64 + 2.0,
            d,
        };
        let p = r.random_range(0.5..=1.0);
        let data_size = r.random_range(5..=200);
        let mask = nn::sample_dropout_mask(p, &arch, &mut r);
        let batch = random_batch(&arch, &mut r);
        let obj = niw::niw_client_objective(&x, &batch, &global, p, data_size, &arch, &mask)?;
        let g = obj.total_grad(&x);
        let f = |q: &[f64]| {
            niw::niw_client_objective(q, &batch, &global, p, data_size, &arch, &mask)
                .map(|o| o.loss)
                .unwrap_or(f64::NAN)
        };
        np.record(&f, &x, &g, || json!({"trial": t, "arch": arch.layer_sizes(), "p": p}));
    }
    out.push(np.done());

    let mut lse = FdCheck::new("mixture_log_sum_exp_penalty_gradient");
    for t in 0..GRAD_TRIALS {
        let mut r = stream(seed, s, 6, t);
        let d = r.random_range(1..=50);
        let k = r.random_range(1..=4);
        let sigma_sq = r.random_range(0.1..2.0);
        let x = normals(&mut r, d, 1.0);
        let protos: Vec<ParamVector> = (0..k)
            .map(|_| x.iter().map(|v| v + 0.3 * normal(&mut r)).collect::<Vec<_>>().into())
            .collect();
        let (_, g) = mixture::mix_penalty(&x, &protos, sigma_sq)?;
        let f = |q: &[f64]| mixture::mix_penalty(q, &protos, sigma_sq).map(|v| v.0).unwrap_or(f64::NAN);
        lse.record(&f, &x, &g, || json!({"trial": t, "d": d, "k": k, "sigma_sq": sigma_sq}));
    }
    out.push(lse.done());

    let mut prox = FdCheck::new("fedprox_objective_gradient");
    for t in 0..GRAD_TRIALS {
        let mut r = stream(seed, s, 7, t);
        let arch = random_arch(&mut r, 100);
        let d = arch.num_params();
        let x = nn::init_params(&arch, &mut r);
        let anchor = ParamVector::from(normals(&mut r, d, 0.5));
        let mu = r.random_range(0.001..1.0);
        let batch = random_batch(&arch, &mut r);
        let (_, g) = fedprox_client_loss_grad(&x, &batch, &anchor, mu, &arch)?;
        let f = |q: &[f64]| {
            fedprox_client_loss_grad(q, &batch, &anchor, mu, &arch)
                .map(|v| v.0)
                .unwrap_or(f64::NAN)
        };
        prox.record(&f, &x, &g, || json!({"trial": t, "arch": arch.layer_sizes(), "mu": mu}));
    }
    out.push(prox.done());
    Ok(out)
}

// ------------------------------------------------------------------ samplers

fn samplers(seed: u64) -> Result<Vec<CheckReport>> {
    let s = Suite::Samplers;
    let mut r = stream(seed, s, 1, 0);
    let d = 8;
    let nu = 50.0;
    let global = NiwGlobalPosterior {
        m0: ParamVector::from(normals(&mut r, d, 1.0)),
        v0_diag: (0..d).map(|_| r.random_range(0.5..2.0)).collect(),
        l0: 20.0,
        n0: nu + d as f64 - 1.0,
        d,
    };
    let scale = niw::student_t_scale(&global)?;
    let draws = 20_000;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let samples: Vec<ParamVector> = (0..draws)
        .map(|_| niw::niw_sample_global(&global, &mut r))
        .collect::<hbfl_core::Result<_>>()?;
    for x in &samples {
        for k in 0..d {
            sum[k] += x[k];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / draws as f64).collect();
    for x in &samples {
        for k in 0..d {
            sum_sq[k] += (x[k] - mean[k]).powi(2);
        }
    }
    let mut loc = Check::new("student_t_location", "|mean - m0| / standard error", 4.0);
    let mut var = Check::new("student_t_variance", "|var / (scale nu/(nu-2)) - 1|", 0.05);
    for k in 0..d {
        let v_theory = scale[k] * nu / (nu - 2.0);
        let se = (v_theory / draws as f64).sqrt();
        loc.record((mean[k] - global.m0[k]).abs() / se, || json!({"coordinate": k, "mean": mean[k]}));
        let v = sum_sq[k] / (draws - 1) as f64;
        var.record((v / v_theory - 1.0).abs(), || json!({"coordinate": k, "variance": v, "theory": v_theory}));
    }

    let arch = MlpArch::new(vec![20, 30, 10])?;
    let mut keep = Check::new("dropout_keep_rate", "|rate - p| / standard error", 3.0);
    for (i, p) in [0.5, 0.9, 1.0 - 0.001].into_iter().enumerate() {
        let mut r = stream(seed, s, 2, i);
        let mut kept = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            let (k, n) = nn::sample_dropout_mask(p, &arch, &mut r).column_counts(&arch);
            kept += k;
            total += n;
        }
        let rate = kept as f64 / total as f64;
        let se = (p * (1.0 - p) / total as f64).sqrt();
        keep.record((rate - p).abs() / se, || json!({"p_keep": p, "rate": rate, "columns": total}));
    }
    Ok(vec![loc.done(), var.done(), keep.done()])
}

// --------------------------------------------------------------- convergence

/// The synthetic NIW run used by the convergence check.
pub fn convergence_spec(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        dataset: DatasetSpec::Synthetic(SynthSpec {
            num_clusters: 2,
            classes: 3,
            dims: 5,
            per_class: 100,
            shift_scale: 1.0,
            class_sep: 3.0,
            permute_labels: false,
        }),
        partition: PartitionSpec::Cluster {},
        train_fraction: 0.9,
        model: ModelSpec { hidden: vec![8] },
        federated: FederatedConfig {
            strategy: Strategy::Niw,
            num_clients: 10,
            fraction: 1.0,
            rounds: 200,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            batch_size: 20,
            eval_every: 0,
            seed,
            ..Default::default()
        },
        evaluation: EvaluationSpec {
            personalize: false,
            ..Default::default()
        },
        checkpoint_every: 0,
        output_dir: std::env::temp_dir(),
    }
}

fn convergence(seed: u64) -> Result<Vec<CheckReport>> {
    let spec = convergence_spec(seed);
    let burn_in = 10;
    let mut sim = build_simulation(&spec, None)?;
    while !sim.is_finished() {
        sim.run_round()?;
    }
    let objectives: Vec<f64> = sim.records().iter().filter_map(|r| r.objective).collect();
    let fit = convergence_diagnostic(&objectives, burn_in)?;
    let mut check = Check::new(
        "running_average_objective_non_increasing",
        "rounds after burn-in where the running average rose",
        0.0,
    );
    check.record(fit.violations.len() as f64, || {
        json!({"seed": seed, "violations": fit.violations, "objectives": objectives})
    });
    let mut r = check.done();
    r.note = Some(format!(
        "fit excess ~ b + c/sqrt(T): c = {:.6e}, b = {:.6e}, rms residual = {:.6e} over {} rounds",
        fit.c,
        fit.intercept,
        fit.residual,
        objectives.len()
    ));
    Ok(vec![r])
}
