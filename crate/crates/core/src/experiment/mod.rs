//! Experiment drivers behind the command-line interface.

pub mod ablate;
pub mod config;
pub mod gradcheck_suite;
pub mod inspect;
pub mod run;

pub use ablate::{ablate_with, mean_std, run_ablation, AblationResult, RowResult, RunCache, Suite, SuiteRow};
pub use gradcheck_suite::{run_gradcheck_suite, CheckOutcome, SuiteReport};
pub use inspect::{inspect_routing, RoutingInspection};
pub use config::{DataSource, ExperimentConfig, KEYS};
pub use run::{execute, load_dataset, render_report, run_experiment, run_id, write_outputs, RunOutcome};
