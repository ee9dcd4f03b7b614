//! Experiment protocol: configuration, phases and report emission.

mod config;
mod report;
mod run;

pub use config::{AssistMode, CacheChoice, ExperimentConfig, GridChoice};
pub use report::{
    emit_report, reference, AssistedFragment, BaselineFragment, ChosenParams, CrossFragment, DiscreteFragment,
    Exemplar, HeadSummary, Report, TransferFragment, PARAMS_CSV_HEADER, SUMMARY_CSV_HEADER,
};
pub use run::{assistant_file, cover_seed, Experiment, DETECTOR_A_FILE, DETECTOR_B_FILE};
