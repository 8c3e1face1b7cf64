//! Training, evaluation and verification orchestration behind the CLI.

mod agent;
mod config;
mod detector;
mod gradcheck;
mod manifest;

pub use agent::{
    ablation_rows, ablation_table, agent_corpora, agent_log_csv, backward, evaluate, load_agent, new_agent,
    rollout, save_agent_run, save_evaluation, train_agent, Agent, AgentCorpora, AgentLogRow, AgentModelConfig,
    AgentRun, BevCache, EpisodeTrace, Evaluation, Rollout, RolloutMode, StepRecord, TEMPORAL_PREFIX,
};
pub use config::{AgentTrainConfig, CorpusConfig, DetectorTrainConfig, ModelDims, RunConfig, Schedule};
pub use detector::{
    category_names, evaluate_detector, held_out_scenes, load_detector, loss_csv, new_detector, save_detector_run,
    train_detector, training_scenes, DetectorLossRow, DetectorRun,
};
pub use gradcheck::{grad_check_suite, BlockResult, GradCheckSuite, GRAD_CHECK_BLOCKS, GRAD_CHECK_THRESHOLD};
pub use manifest::{sha256_hex, write_artifact, Manifest, MANIFEST_FILE};
