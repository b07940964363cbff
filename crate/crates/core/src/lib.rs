//! Multi-stage evolutionary merging of low-rank task experts, with a
//! metadata-driven curriculum for in-context prompting.
//!
//! The pipeline, bottom-up:
//!
//! - [`checkpoint`]: the `EMCP` tensor container every model passes through.
//! - [`tasks`]: the 15-task registry, synthetic task suite, prompt format and
//!   weak-data extraction.
//! - [`toymodel`]: a two-layer classifier with LoRA adapters and the expert
//!   training loop.
//! - [`metrics`]: accuracy, macro/micro F1 and the fitness similarity kernel.
//! - [`merge`]: weighted model merging on the probability simplex.
//! - [`evolution`]: the genetic search over merge weights, single and two-stage.
//! - [`curriculum`]: difficulty scores, task ranking and exemplar prompts.

pub mod checkpoint;
pub mod curriculum;
pub mod evolution;
pub mod merge;
pub mod metrics;
pub mod rng;
pub mod tasks;
pub mod toymodel;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Tensor, TensorMap};
pub use tasks::{LabeledExample, Metric, TaskGroup, TaskMeta, WeakSet};
