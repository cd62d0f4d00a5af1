//! Dense f64 tensors, a reverse-mode tape, 3D convolutions and Adam.
//!
//! Sized for toy-resolution 3D CNNs and per-frame attention: everything is
//! row-major `Vec<f64>` and every differentiable op has a hand-written
//! backward rule checked against central finite differences.

mod adam;
pub mod conv;
pub mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv3d, conv_transpose3d, conv_output_extent, conv_transpose_output_extent};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
