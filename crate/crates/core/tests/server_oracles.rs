//! Server steps against independent numerical oracles.

mod common;

use common::normals;
use hbfl_core::mixture;
use hbfl_core::niw::{self, NiwHyperParams};
use hbfl_core::nn::ParamVector;
use hbfl_core::rng;
use proptest::prelude::*;
use rand::Rng as _;

/// Plain gradient descent on one coordinate of the server objective in
/// `(m, ln v)`, where a client's expected squared deviation from `m` under
/// its dropout posterior is `p (m_i - m)^2 + (1 - p) m^2 + eps^2`.
#[allow(clippy::too_many_arguments)]
fn descend(mi: &[f64], scale: f64, mu0: f64, s0: f64, lambda0: f64, nu0: f64, n0: f64, p: f64, eps: f64) -> (f64, f64) {
    let nf = mi.len() as f64;
    let f = |m: f64, u: f64| {
        let w = (-u).exp();
        let e: f64 = mi.iter().map(|x| p * (x - m).powi(2) + (1.0 - p) * m * m + eps * eps).sum();
        0.5 * (n0 * s0 * w + nu0 * u + lambda0 * n0 * (mu0 - m).powi(2) * w) + scale * 0.5 * (n0 * e * w + nf * u)
    };
    // Work in units where the objective's curvature is O(1).
    let k = n0 * (lambda0 + scale * nf);
    let (mut m, mut u) = (mi.iter().sum::<f64>() / nf, (n0 / (nu0 + scale * nf)).ln());
    let h = 1e-5;
    for _ in 0..200_000 {
        let w = (-u).exp();
        let gm = (f(m + h, u) - f(m - h, u)) / (2.0 * h);
        let gu = (f(m, u + h) - f(m, u - h)) / (2.0 * h);
        let (sm, su) = (0.5 * gm / (k * w), gu / (nu0 + scale * nf));
        let mut t = 1.0;
        let f0 = f(m, u);
        while f(m - t * sm, u - t * su) > f0 - 1e-4 * t * (gm * sm + gu * su) && t > 1e-12 {
            t *= 0.5;
        }
        m -= t * sm;
        u -= t * su;
        if (t * sm).abs() < 1e-14 && (t * su).abs() < 1e-14 {
            break;
        }
    }
    (m, u.exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn niw_closed_form_matches_descent(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let d = r.random_range(1..=20);
        let nf = r.random_range(1..=5);
        let n = nf + r.random_range(0..=2);
        let means: Vec<ParamVector> = (0..nf).map(|_| normals(&mut r, d, 1.0).into()).collect();
        let hyper = NiwHyperParams {
            mu0: normals(&mut r, d, 0.3),
            sigma0_diag: (0..d).map(|_| r.random_range(0.5..2.0)).collect(),
            lambda0: r.random_range(0.5..2.0),
            nu0: d as f64 + 2.0 + r.random_range(0.0..2.0),
        };
        let p = r.random_range(0.5..=1.0);
        let eps = r.random_range(0.0..0.05);
        let global = niw::niw_init(d, r.random_range(10..500), &hyper).unwrap();
        let (m0, v0) = niw::niw_server_update(&means, &global, &hyper, n, p, eps).unwrap();
        for k in 0..d {
            let mi: Vec<f64> = means.iter().map(|m| m[k]).collect();
            let (m, v) = descend(&mi, n as f64 / nf as f64, hyper.mu0[k], hyper.sigma0_diag[k], hyper.lambda0, hyper.nu0, global.n0, p, eps);
            prop_assert!((m0[k] - m).abs() <= 1e-4 * m.abs().max(1e-2), "m0[{k}] = {} vs {m}", m0[k]);
            prop_assert!((v0[k] - v).abs() <= 1e-4 * v, "v0[{k}] = {} vs {v}", v0[k]);
        }
    }

    #[test]
    fn em_step_never_increases_objective(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=20);
        let n = r.random_range(1..=10);
        let sigma_sq = r.random_range(0.05..5.0);
        let means: Vec<ParamVector> = (0..n).map(|_| normals(&mut r, d, 1.5).into()).collect();
        let protos: Vec<ParamVector> = (0..k).map(|_| normals(&mut r, d, 1.0).into()).collect();
        let before = mixture::mix_server_objective(&protos, &means, sigma_sq);
        let resp = mixture::mix_e_step(&means, &protos, sigma_sq).unwrap();
        let after_protos = mixture::mix_m_step(&means, &resp, sigma_sq, n).unwrap();
        let after = mixture::mix_server_objective(&after_protos, &means, sigma_sq);
        prop_assert!(after <= before + 1e-10 * before.abs().max(1.0), "{before} -> {after}");
    }

    #[test]
    fn partial_participation_em_decreases_scaled_objective(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let (k, d, nf) = (r.random_range(1..=3), r.random_range(1..=10), r.random_range(1..=5));
        let n = nf + r.random_range(0..=20);
        let sigma_sq = r.random_range(0.05..2.0);
        let means: Vec<ParamVector> = (0..nf).map(|_| normals(&mut r, d, 1.0).into()).collect();
        let protos: Vec<ParamVector> = (0..k).map(|_| normals(&mut r, d, 1.0).into()).collect();
        let before = mixture::mix_server_objective_partial(&protos, &means, sigma_sq, n);
        let resp = mixture::mix_e_step(&means, &protos, sigma_sq).unwrap();
        let next = mixture::mix_m_step(&means, &resp, sigma_sq, n).unwrap();
        let after = mixture::mix_server_objective_partial(&next, &means, sigma_sq, n);
        prop_assert!(after <= before + 1e-10 * before.abs().max(1.0));
    }
}

#[test]
fn hand_evaluated_server_example() {
    // p = 1, N = N_f = 2, eps = 0, n0 = 5, d = 2.
    let hyper = NiwHyperParams::standard(2);
    let mut global = niw::niw_init(2, 0, &hyper).unwrap();
    global.n0 = 5.0;
    let means = vec![ParamVector::from(vec![1.0, 0.0]), ParamVector::from(vec![0.0, 1.0])];
    let (m0, v0) = niw::niw_server_update(&means, &global, &hyper, 2, 1.0, 0.0).unwrap();
    for k in 0..2 {
        assert!((m0[k] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v0[k] - 25.0 / 18.0).abs() < 1e-12, "{}", v0[k]);
    }
    let (m, v) = descend(&[1.0, 0.0], 1.0, 0.0, 1.0, 1.0, 4.0, 5.0, 1.0, 0.0);
    assert!((m - 1.0 / 3.0).abs() < 1e-8 && (v - 25.0 / 18.0).abs() < 1e-8, "{m} {v}");
}

#[test]
fn server_objective_is_minimized_by_closed_form() {
    let mut r = rng::stream(5, &[]);
    let d = 6;
    let hyper = NiwHyperParams::standard(d);
    let global = niw::niw_init(d, 200, &hyper).unwrap();
    let means: Vec<ParamVector> = (0..3).map(|_| normals(&mut r, d, 1.0).into()).collect();
    let (m0, v0) = niw::niw_server_update(&means, &global, &hyper, 5, 0.9, 1e-3).unwrap();
    let best = niw::niw_server_objective(&m0, &v0, &means, &hyper, global.n0, 5, 0.9, 1e-3).unwrap();
    for _ in 0..50 {
        let m: Vec<f64> = m0.iter().map(|v| v + 0.01 * r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = v0.iter().map(|x| x * (1.0 + 0.01 * r.random_range(-1.0..1.0))).collect();
        let other = niw::niw_server_objective(&m, &v, &means, &hyper, global.n0, 5, 0.9, 1e-3).unwrap();
        assert!(other >= best, "{other} < {best}");
    }
}
