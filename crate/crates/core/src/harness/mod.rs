//! Orchestration: run configuration, checkpoints, training, evaluation and
//! the command implementations used by the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointTensor, FORMAT_VERSION, MAGIC};
pub use commands::{
    cmd_ablate, cmd_ask, cmd_datagen, cmd_eval, cmd_params, cmd_tokenizer_train, cmd_train, load_model, AblationRow,
    AskAnswer, DatagenArgs, DatagenSummary, ParamsReport, TrainSummary,
};
pub use config::{parse_pairs, read_pairs, EvalSplit, Profile, RunConfig, KEYS};
pub use model::{count_model_parameters, vision_parameter_count, AnswerHead, PreparedInput, VqaModel};
pub use train::{evaluate, fit, prepare_samples, DatasetDir, EpochRecord, Sample, TrainOutcome};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ENDOQA_OUTPUT";
