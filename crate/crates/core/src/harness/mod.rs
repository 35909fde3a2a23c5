//! Configuration, orchestration and persistence of experiments.

pub mod config;
pub mod criteria;
pub mod fit;
pub mod manifest;
pub mod run;

pub use config::{parse_pair, validate_config, DerivedParams, ExperimentConfig, Mode, NormalizedConfig};
pub use criteria::CriterionOutcome;
pub use fit::{loglog_fit, SlopeFit};
pub use manifest::RunManifest;
pub use run::{run, SweepPoint, SweepSummary};
