//! End-to-end active generation: configuration, the round loop, the random
//! baseline and run metrics.

mod config;
mod metrics;
mod run;

pub use config::{BufferConfig, CpeConfig, ModelConfig, PretrainConfig, RunConfig, SamplerBlock};
pub use metrics::{
    best_so_far, metrics, read_rounds, write_plot_data, CurvePoint, RoundRecord, RoundWriter, Summary, ROUNDS_HEADER,
};
pub use run::{baseline_random, pretrain, propose_batch, run, run_loop, Proposal, RunOutput, Strategy};
