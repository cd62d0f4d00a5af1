//! The two-tower shape-completion network and its baselines.
//!
//! Both towers encode the current frame with a stride-2 3D CNN. The frame
//! tower's embedding `e_i` goes straight to the decoder; the context tower
//! adds a positional encoding and runs the variant's sequence block
//! (Performer layers for `mvp`, exact attention for `mvt`, an LSTM cell for
//! `lstm`, a dense layer for `single_view`). The decoder maps `e_i + c_i`
//! to a sigmoid occupancy grid in the current camera frame.
//!
//! [`MvpModel::forward_batch`] runs whole sequences on a tape for training;
//! [`MvpModel::forward_step`] streams one frame at a time through a
//! [`SequenceState`]. Both compute the same predictions.

mod checkpoint;
mod config;
mod network;
mod state;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant, TRAIN_VIEW_CHOICES};
pub use network::{positional_encoding, MvpModel, PREDICTION_EPS};
pub use state::{History, SequenceState};
pub use train::{sequence_loss, train, LogRow, Sample, TrainConfig, TrainReport};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;
