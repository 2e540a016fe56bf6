//! Experiment specification files.

use std::path::{Path, PathBuf};

use hbfl_core::data::SynthSpec;
use hbfl_core::runtime::FederatedConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that overrides the spec's output directory.
pub const OUT_DIR_ENV: &str = "HBFL_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image/label files; without test files the clients' test splits
    /// form the global test set.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    Synthetic(SynthSpec),
    /// A synthetic dataset saved in the binary container format.
    Container { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Shard { shards_per_client: usize },
    Dirichlet { alpha: f64 },
    /// One synthetic cluster per client group (`client % clusters`).
    Cluster {},
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Shard { shards_per_client: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Personalize every client at the end of the run.
    pub personalize: bool,
    pub personal_epochs: usize,
    /// Rounds excluded from the convergence monotonicity check.
    pub burn_in: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            personalize: true,
            personal_epochs: 5,
            burn_in: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![256] }
    }
}

/// A fully resolved experiment. `federated.strategy` is required in the
/// file; every other field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    /// Fraction of each client's rows used for training (rest: personal test).
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub model: ModelSpec,
    pub federated: FederatedConfig,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    /// Save a checkpoint every this many rounds (0: only at the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("hbfl-out")
}

/// Command-line overrides; each replaces the corresponding spec value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub strategy: Option<hbfl_core::runtime::Strategy>,
}

impl ExperimentSpec {
    /// Parses and validates spec text. Relative dataset paths are resolved
    /// against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Spec(format!("invalid JSON: {e}")))?;
        if value.pointer("/federated/strategy").is_none() {
            return Err(CliError::Spec("missing field `federated.strategy`".into()));
        }
        let mut spec: ExperimentSpec = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Spec(format!("at `{path}`: {}", e.into_inner()))
        })?;
        spec.resolve_paths(base_dir);
        spec.federated.personal_lr.get_or_insert(spec.federated.lr);
        spec.validate()?;
        Ok(spec)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.as_mut().map(fix);
                test_labels.as_mut().map(fix);
            }
            DatasetSpec::Container { path } => fix(path),
            DatasetSpec::Synthetic(_) => {}
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.federated.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(CliError::Spec(format!(
                "at `train_fraction`: must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::Spec("at `model.hidden`: layer widths must be ≥ 1".into()));
        }
        match (&self.dataset, &self.partition) {
            (DatasetSpec::Idx { test_images, test_labels, .. }, _) if test_images.is_some() != test_labels.is_some() => {
                Err(CliError::Spec(
                    "at `dataset.idx`: test_images and test_labels must be given together".into(),
                ))
            }
            (DatasetSpec::Idx { .. }, PartitionSpec::Cluster {}) => Err(CliError::Spec(
                "at `partition.cluster`: needs a synthetic dataset with cluster tags".into(),
            )),
            (_, PartitionSpec::Shard { shards_per_client: 0 }) => {
                Err(CliError::Spec("at `partition.shard.shards_per_client`: must be ≥ 1".into()))
            }
            (_, PartitionSpec::Dirichlet { alpha }) if !(*alpha > 0.0) => Err(CliError::Spec(format!(
                "at `partition.dirichlet.alpha`: must be > 0, got {alpha}"
            ))),
            _ => Ok(()),
        }
    }

    /// Applies command-line flags, then the output-directory environment
    /// variable unless `--out` was given.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.federated.seed = seed;
        }
        if let Some(rounds) = o.rounds {
            self.federated.rounds = rounds;
        }
        if let Some(strategy) = o.strategy {
            self.federated.strategy = strategy;
        }
        match (&o.out, std::env::var_os(OUT_DIR_ENV)) {
            (Some(out), _) => self.output_dir = out.clone(),
            (None, Some(env)) if !env.is_empty() => self.output_dir = PathBuf::from(env),
            _ => {}
        }
        self.validate()
    }
}

pub fn parse_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentSpec::from_json(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hbfl_core::optim::StepRule;
    use hbfl_core::runtime::{LrSchedule, Strategy, WarmStart};

    fn parse(text: &str) -> Result<ExperimentSpec> {
        ExperimentSpec::from_json(text, Path::new("/base"))
    }

    const MINIMAL: &str = r#"{
        "dataset": {"idx": {"train_images": "a", "train_labels": "b"}},
        "federated": {"strategy": "niw"}
    }"#;

    #[test]
    fn minimal_spec_gets_documented_defaults() {
        let s = parse(MINIMAL).unwrap();
        let f = &s.federated;
        assert_eq!(f.strategy, Strategy::Niw);
        assert_eq!(f.p_keep, 1.0 - 0.001);
        assert_eq!(f.epsilon, 1e-4);
        assert_eq!(f.sigma_sq, 0.1);
        assert_eq!(f.k, 2);
        assert_eq!(f.mu_prox, 0.01);
        assert_eq!((f.batch_size, f.lr), (50, 0.1));
        assert_eq!((f.num_clients, f.fraction, f.local_epochs), (100, 0.1, 1));
        assert_eq!(f.lr_schedule, LrSchedule::StepDecay { milestones: vec![0.5], factor: 0.1 });
        assert_eq!(f.warm_start, WarmStart::FromServer);
        assert_eq!(f.step_rule, StepRule::Explicit);
        assert_eq!(f.eval_samples, 1);
        assert!(f.body_update);
        assert_eq!(f.personal_lr, Some(0.1));
        assert_eq!(s.partition, PartitionSpec::Shard { shards_per_client: 5 });
        assert_eq!(s.evaluation.personal_epochs, 5);
        assert_eq!(s.train_fraction, 0.9);
        assert_eq!(s.model.hidden, vec![256]);
        match &s.dataset {
            DatasetSpec::Idx { train_images, .. } => assert_eq!(train_images, Path::new("/base/a")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_participants_rejected() {
        let text = MINIMAL.replace(r#""strategy": "niw""#, r#""strategy": "niw", "fraction": 0.0"#);
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("N_f must be ≥ 1"), "{err}");
    }

    #[test]
    fn unknown_strategy_lists_variants() {
        let text = MINIMAL.replace("\"niw\"", "\"fedsgd\"");
        let err = parse(&text).unwrap_err().to_string();
        for v in ["niw", "mixture", "fedavg", "fedprox", "fedbabu"] {
            assert!(err.contains(v), "{err}");
        }
        assert!(err.contains("federated.strategy"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = MINIMAL.replace(r#""strategy": "niw""#, r#""strategy": "niw", "learning_rate": 1"#);
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("federated"), "{err}");
        let text = MINIMAL.replace("\"federated\"", "\"extra\": 1, \"federated\"");
        assert!(parse(&text).unwrap_err().to_string().contains("extra"));
    }

    #[test]
    fn missing_strategy_rejected() {
        let text = MINIMAL.replace(r#""strategy": "niw""#, "");
        assert!(parse(&text).unwrap_err().to_string().contains("federated.strategy"));
    }

    #[test]
    fn flags_override_file() {
        let mut s = parse(MINIMAL).unwrap();
        s.apply(&Overrides {
            seed: Some(9),
            out: Some(PathBuf::from("/tmp/x")),
            rounds: Some(3),
            strategy: Some(Strategy::FedAvg),
        })
        .unwrap();
        assert_eq!(s.federated.seed, 9);
        assert_eq!(s.federated.rounds, 3);
        assert_eq!(s.federated.strategy, Strategy::FedAvg);
        assert_eq!(s.output_dir, PathBuf::from("/tmp/x"));
    }
}
