//! Kernelized causal attention over a stream of per-frame tokens.
//!
//! The compact associative memory `(M, m)` holds the prefix sums
//! `M = sum_j phi(k_j)^T v_j` and `m = sum_j phi(k_j)^T`; a query reads
//! `phi(q) M / phi(q) m`. Its size depends only on the feature count and
//! the value width, never on how many frames were absorbed. The quadratic
//! [`exact_causal_attention`] computes the same normalized kernel average
//! directly and serves as the transformer (MVT) baseline and as the oracle.

mod causal;
mod feature_map;
mod memory;

pub use causal::{
    causal_linear_attention, causal_linear_attention_features, exact_attention_row,
    exact_causal_attention,
};
pub use feature_map::{KernelFeatureMap, KernelKind};
pub use memory::{AssociativeMemory, DENOM_EPS};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
