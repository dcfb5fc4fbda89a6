//! Simulation of longitudinal biomarkers, event times and censoring, the
//! known-parameter joint-model predictor, and the replicate driver that
//! scores Super Learner ensembles under three censoring mechanisms.

mod config;
mod generate;
mod joint;
mod study;

pub use config::{
    default_library, CensoringConfig, CovariateLaw, EventTruth, Generator, LongitudinalTruth, MeasurementLaw, Process,
    Scenario, SimConfig,
};
pub use generate::{
    apply_censoring, gen_event_joint, gen_event_landmark, gen_longitudinal, in_window_censoring,
    invert_cumulative_hazard, to_dataset, Censoring, SimSubject,
};
pub use joint::{BaselineHazard, JointModel};
pub use study::{
    calibrate, gen_population, run_study, simulate_dataset, stream, study_csv, Calibration, ReplicateProcess,
    StudyFailure, StudyResults, StudyRow, STUDY_COLUMNS,
};
