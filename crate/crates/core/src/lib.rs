//! Active flow matching.
//!
//! Discrete flow matching over fixed-length token sequences, fine-tuned each
//! round of an active generation loop toward a fitness superlevel set with
//! importance-weighted forward-, reverse- or symmetric-KL objectives.
//!
//! Module map:
//! - [`flow_path`]: vocabularies, schedulers, sources and conditional paths.
//! - [`dynamics`]: velocities and CTMC samplers.
//! - [`denoiser`]: endpoint models and cross-entropy losses.
//! - [`cpe`]: class-probability estimator and threshold schedules.
//! - [`proposal`]: replay buffer, mixture proposal and importance weights.
//! - [`objectives`]: the three training objectives and the per-round loop.
//! - [`landscape`]: procedural motif fitness landscapes.
//! - [`oracle`]: exact enumeration on tiny instances.
//! - [`harness`]: end-to-end driver, metrics and configuration.

pub mod checkpoint;
pub mod cpe;
pub mod denoiser;
pub mod dynamics;
pub mod error;
pub mod flow_path;
pub mod harness;
pub mod landscape;
pub mod objectives;
pub mod oracle;
pub mod proposal;
pub mod rng;
pub mod verify;

pub use error::{AfmError, Result};
pub use flow_path::{Scheduler, Sequence, SourceDistribution, SourceKind, Token, Vocab};
