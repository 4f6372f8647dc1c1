//! Config-driven orchestration: training, attacks, ablations, reports and the
//! feature-transport demo.

pub mod ablation;
pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod train;
pub mod transport;

pub use ablation::{ablation, parse_toggles, AblationRow, Toggle};
pub use attack::{prepare_decoders, read_csv, run_attack_suite, write_csv, ReportRow, CSV_COLUMNS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, MetricSnapshot};
pub use config::{
    prepare_data, AttackSpec, DataSource, DatasetSpec, DefenseConfig, EvalConfig, ExperimentConfig, PreparedData, TrainingConfig,
    OUTPUT_ENV,
};
pub use report::{build_report, measure_information, render_table};
pub use train::{train_target, EpochRecord, Target, TrainOutcome};
pub use transport::{transport_demo, Dtype, EdgeClient, FeatureFrame, SessionLog};
