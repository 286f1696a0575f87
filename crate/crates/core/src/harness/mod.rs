//! Training, evaluation, reporting and gradient-check drivers behind the CLI.

mod config;
mod data;
mod gradcheck;
mod optim;
mod report;
mod run;
mod train;

pub use config::{Method, RunConfig};
pub use data::{SplitData, TrainingData, MAX_QUESTION_LEN};
pub use gradcheck::{
    diffcore_suites, loss_suites, model_suite, run_all, GradcheckOptions, SuiteResult, FD_EPS,
    LOSS_POINTS, LOSS_TOLERANCE, MODEL_TOLERANCE, OP_TOLERANCE,
};
pub use optim::Adam;
pub use train::{batch_gradients, predict_split, train, EpochRecord, StepLosses, TrainOutcome};
pub use report::{inconsistency_listing, mean_std, method_label, method_table, report, sweep_table};
pub use run::{
    read_predictions, read_run, run_evaluation, run_training, run_training_on, write_evaluation,
    RunRecord, RunSummary, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE, METRICS_FILE,
    MODEL_CONFIG_FILE, PREDICTIONS_FILE, SUMMARY_FILE,
};
