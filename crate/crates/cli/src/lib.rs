//! Experiment front-end: spec files, runs, checkpoints and the
//! verification suites.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod spec;
pub mod verify;

pub use error::{CliError, Result};
pub use experiment::{run_experiment, resume_experiment, Summary};
pub use spec::{parse_spec, ExperimentSpec, Overrides};
