//! Run configuration, the optimizer and the train / eval / self-check drivers.

mod config;
mod inspect;
mod objective;
mod optim;
mod run;
mod selfcheck;

pub use config::{ArchConfig, EvalConfig, OptimizerConfig, Paths, RunConfig};
pub use inspect::{inspect_batch, BatchInspection};
pub use objective::{forward, BatchInput, Forward, Selector};
pub use optim::{learning_rate, AdamW};
pub use run::{
    evaluate, print_json, run_eval, run_train, sha256_file, train, EvalReport, Evaluation, Manifest, StageReport,
    TrainOutcome,
};
pub use selfcheck::{
    cascade_oracle, rank_oracle, run_selfcheck, sentence_loss_oracle, token_loss_oracle, GradFixture, Mutation,
    SelfCheckReport, SuiteResult, GRAD_EPS, GRAD_THRESHOLD, ORACLE_THRESHOLD,
};
