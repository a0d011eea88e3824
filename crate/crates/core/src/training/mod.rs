//! Loss, optimizer, the differentiable pipeline and the pre-training loop.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pretrain;

pub use checkpoint::Checkpoint;
pub use eval::{evaluate_frames, render_view, Metrics, RenderedView};
pub use graph::{forward, volume_stack, Forward, ForwardOptions, Normals, RayBatch, VolumeInput};
pub use loss::{loss, ClassEmbedding, LossParts, LossWeights, RayPrediction, RayTarget};
pub use model::{Model, ParamGroup, ParamInfo};
pub use optim::{AdamW, Schedule};
pub use pretrain::{StepLog, Trainer};
