//! Toy decoder-only transformer over mixed visual/text sequences.

mod arch;
mod checkpoint;
mod model;
mod params;
mod sequence;
mod train;

pub use arch::{ArchConfig, Precision};
pub use checkpoint::{blob_checksum, ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    layer_macs, CaptureFlags, LayerCheckpoint, Model, PrefillResult, PrefillRun, Slot, VisualTreatment,
};
pub use params::{LayerParams, Params};
pub use sequence::MultimodalSequence;
pub use train::{loss_and_grad, mean_loss, train, Optimizer, TrainConfig};
