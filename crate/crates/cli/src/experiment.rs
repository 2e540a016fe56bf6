//! Running experiments and persisting their outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hbfl_core::data::{
    dirichlet_partition, group_partition, load_idx, read_container, shard_partition, synth_generate, ClientSplit,
    LabeledDataset, Partition,
};
use hbfl_core::rng::{self, purpose};
use hbfl_core::runtime::{convergence_diagnostic, RoundRecord, Simulation, SimulationState};
use hbfl_core::MlpArch;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{CliError, Result};
use crate::spec::{DatasetSpec, ExperimentSpec, PartitionSpec};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.hbfl";
pub const METRICS_VERSION_LINE: &str = "# hbfl-metrics v1";
pub const SUMMARY_FORMAT: &str = "hbfl-summary v1";

/// Build identifier compiled into the binary (`git describe`, or "unknown").
pub const BUILD_ID: &str = env!("HBFL_BUILD_ID");

/// Training data, optional held-out test data and per-client splits.
pub struct PreparedData {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub splits: Vec<ClientSplit>,
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let seed = spec.federated.seed;
    let (train, test, groups) = match &spec.dataset {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                _ => None,
            };
            (train, test, None)
        }
        DatasetSpec::Synthetic(s) => {
            let data = synth_generate(s, &mut rng::stream(seed, &[purpose::SYNTH]))?;
            (data.dataset, None, Some(data.cluster))
        }
        DatasetSpec::Container { path } => {
            let (data, cluster) = read_container(path)?;
            (data, None, Some(cluster))
        }
    };
    let n = spec.federated.num_clients;
    let mut r = rng::stream(seed, &[purpose::PARTITION]);
    let partition: Partition = match &spec.partition {
        PartitionSpec::Shard { shards_per_client } => shard_partition(train.labels(), n, *shards_per_client, &mut r)?,
        PartitionSpec::Dirichlet { alpha } => dirichlet_partition(train.labels(), n, *alpha, &mut r)?,
        PartitionSpec::Cluster {} => {
            let groups = groups.ok_or_else(|| CliError::Spec("cluster partition needs cluster tags".into()))?;
            group_partition(&groups, n, &mut r)?
        }
    };
    partition.validate(train.len())?;
    let splits = partition.split(
        train.labels(),
        spec.train_fraction,
        &mut rng::stream(seed, &[purpose::PARTITION, 1]),
    );
    Ok(PreparedData { train, test, splits })
}

pub fn architecture(spec: &ExperimentSpec, data: &LabeledDataset) -> Result<MlpArch> {
    let mut sizes = vec![data.input_dim()];
    sizes.extend_from_slice(&spec.model.hidden);
    sizes.push(data.num_classes());
    Ok(MlpArch::new(sizes)?)
}

/// Builds a fresh simulation, or one continuing from `state`.
pub fn build_simulation(spec: &ExperimentSpec, state: Option<SimulationState>) -> Result<Simulation> {
    let data = prepare_data(spec)?;
    let arch = architecture(spec, &data.train)?;
    let config = spec.federated.clone();
    Ok(match state {
        None => Simulation::new(config, arch, data.train, data.splits, data.test)?,
        Some(s) => Simulation::resume(config, arch, data.train, data.splits, data.test, s)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics table: a version comment line, a header, one row per record.
pub fn metrics_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "global_acc",
        "mean_client_loss",
        "server_objective",
        "wall_ms",
        "objective",
    ])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_opt(r.global_acc),
            r.mean_client_loss.to_string(),
            fmt_opt(r.server_objective),
            r.wall_ms.to_string(),
            fmt_opt(r.objective),
        ])?;
    }
    let body = w.into_inner().map_err(|e| CliError::Spec(format!("csv buffer: {e}")))?;
    Ok(format!("{METRICS_VERSION_LINE}\n{}", String::from_utf8_lossy(&body)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalSummary {
    pub epochs: usize,
    pub mean: f64,
    pub std: f64,
    /// Global predictive accuracy on the same client test splits.
    pub global_mean: f64,
    pub clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub c: f64,
    pub intercept: f64,
    pub residual: f64,
    pub burn_in: usize,
    pub monotone: bool,
    pub violations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub build_id: String,
    pub strategy: String,
    pub rounds_completed: usize,
    /// Last evaluated global accuracy.
    pub global_acc: Option<f64>,
    pub personalized: Option<PersonalSummary>,
    pub convergence: Option<ConvergenceSummary>,
    /// Why the convergence fit is absent, if it is.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub convergence_note: Option<String>,
    pub spec: ExperimentSpec,
}

pub fn summarize(spec: &ExperimentSpec, sim: &Simulation) -> Result<Summary> {
    let records = sim.records();
    let global_acc = records.iter().rev().find_map(|r| r.global_acc);
    let personalized = if spec.evaluation.personalize {
        let rep = sim.evaluate_personalized(spec.evaluation.personal_epochs)?;
        Some(PersonalSummary {
            epochs: rep.epochs,
            mean: rep.mean,
            std: rep.std,
            global_mean: rep.global_mean,
            clients: rep.clients.len(),
        })
    } else {
        None
    };
    let objectives: Vec<f64> = records.iter().filter_map(|r| r.objective).collect();
    let (convergence, convergence_note) = match convergence_diagnostic(&objectives, spec.evaluation.burn_in) {
        Ok(fit) => (
            Some(ConvergenceSummary {
                c: fit.c,
                intercept: fit.intercept,
                residual: fit.residual,
                burn_in: fit.burn_in,
                monotone: fit.monotone(),
                violations: fit.violations.clone(),
            }),
            None,
        ),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(Summary {
        format: SUMMARY_FORMAT.into(),
        build_id: BUILD_ID.into(),
        strategy: spec.federated.strategy.name().into(),
        rounds_completed: sim.completed_rounds(),
        global_acc,
        personalized,
        convergence,
        convergence_note,
        spec: spec.clone(),
    })
}

/// Paths of a run's outputs.
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join(SUMMARY_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    fn save_progress(&self, spec: &ExperimentSpec, sim: &Simulation) -> Result<()> {
        write_atomic(&self.metrics(), metrics_csv(sim.records())?.as_bytes())?;
        checkpoint::save(
            &self.checkpoint(),
            &Checkpoint {
                spec: spec.clone(),
                state: sim.state().clone(),
            },
        )
    }
}

fn drive(
    spec: &ExperimentSpec,
    mut sim: Simulation,
    on_round: &mut dyn FnMut(&RoundRecord),
) -> Result<Summary> {
    let out = Outputs::new(&spec.output_dir)?;
    out.save_progress(spec, &sim)?;
    let every = spec.checkpoint_every;
    while !sim.is_finished() {
        on_round(sim.run_round()?);
        if every > 0 && sim.completed_rounds() % every == 0 {
            out.save_progress(spec, &sim)?;
        }
    }
    out.save_progress(spec, &sim)?;
    let summary = summarize(spec, &sim)?;
    write_atomic(&out.summary(), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Runs `spec` from scratch, writing metrics, checkpoints and the summary
/// into its output directory.
pub fn run_experiment(spec: &ExperimentSpec, on_round: &mut dyn FnMut(&RoundRecord)) -> Result<Summary> {
    let sim = build_simulation(spec, None)?;
    drive(spec, sim, on_round)
}

/// Continues the run saved in `path`; `adjust` may change the stored spec
/// (e.g. more rounds or another output directory) before resuming.
pub fn resume_experiment(
    path: &Path,
    adjust: impl FnOnce(&mut ExperimentSpec) -> Result<()>,
    on_round: &mut dyn FnMut(&RoundRecord),
) -> Result<Summary> {
    let Checkpoint { mut spec, state } = checkpoint::load(path)?;
    adjust(&mut spec)?;
    let sim = build_simulation(&spec, Some(state))?;
    drive(&spec, sim, on_round)
}

/// Per-client label histograms of the spec's partition, as CSV text:
/// `client,split,count,label_0,...`.
pub fn partition_report(spec: &ExperimentSpec) -> Result<String> {
    let data = prepare_data(spec)?;
    let classes = data.train.num_classes();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["client".to_string(), "split".into(), "count".into()];
    header.extend((0..classes).map(|c| format!("label_{c}")));
    w.write_record(&header)?;
    for (id, s) in data.splits.iter().enumerate() {
        for (name, idx) in [("train", &s.train), ("test", &s.test)] {
            let mut row = vec![id.to_string(), name.to_string(), idx.len().to_string()];
            row.extend(data.train.histogram(idx).iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
    }
    let body = w.into_inner().map_err(|e| CliError::Spec(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8_lossy(&body).into_owned())
}
