use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dot;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Attention kernel `K(q, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `exp(q . k)`, linearized with FAVOR+ positive random features.
    Softmax,
    /// `relu(q) . relu(k)`, linearized exactly by `phi = relu`.
    Relu,
}

impl KernelKind {
    pub fn eval(self, q: &[f64], k: &[f64]) -> f64 {
        match self {
            KernelKind::Softmax => dot(q, k).exp(),
            KernelKind::Relu => q
                .iter()
                .zip(k)
                .map(|(a, b)| a.max(0.0) * b.max(0.0))
                .sum(),
        }
    }
}

/// Feature map `phi: R^{d_qk} -> R^m` with `K(q,k) = E[phi(q) . phi(k)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFeatureMap {
    kind: KernelKind,
    feature_count: usize,
    qk_dim: usize,
    /// `m x d_qk` Gaussian rows; softmax kind only.
    projection: Vec<f64>,
    seed: u64,
    orthogonal: bool,
}

impl KernelFeatureMap {
    pub fn relu(qk_dim: usize) -> Self {
        Self {
            kind: KernelKind::Relu,
            feature_count: qk_dim,
            qk_dim,
            projection: Vec::new(),
            seed: 0,
            orthogonal: false,
        }
    }

    /// FAVOR+ positive random features with i.i.d. unit-Gaussian rows.
    pub fn softmax_favor(qk_dim: usize, feature_count: usize, seed: u64) -> Result<Self> {
        Self::softmax_with(qk_dim, feature_count, seed, false)
    }

    /// FAVOR+ with rows orthogonalized in blocks of `d_qk` (Gram-Schmidt),
    /// each row rescaled to the norm of an independent Gaussian vector.
    pub fn softmax_favor_orthogonal(qk_dim: usize, feature_count: usize, seed: u64) -> Result<Self> {
        Self::softmax_with(qk_dim, feature_count, seed, true)
    }

    /// Builds the map a model config asks for.
    pub fn for_kernel(kind: KernelKind, qk_dim: usize, feature_count: usize, seed: u64, orthogonal: bool) -> Result<Self> {
        match kind {
            KernelKind::Relu => Ok(Self::relu(qk_dim)),
            KernelKind::Softmax => Self::softmax_with(qk_dim, feature_count, seed, orthogonal),
        }
    }

    fn softmax_with(qk_dim: usize, feature_count: usize, seed: u64, orthogonal: bool) -> Result<Self> {
        if qk_dim == 0 || feature_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map needs positive dims, got d_qk={qk_dim} m={feature_count}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut projection: Vec<f64> = (0..feature_count * qk_dim).map(|_| gauss()).collect();
        if orthogonal {
            for block in projection.chunks_mut(qk_dim * qk_dim) {
                let rows = block.len() / qk_dim;
                for i in 0..rows {
                    for j in 0..i {
                        let (done, rest) = block.split_at_mut(i * qk_dim);
                        let prev = &done[j * qk_dim..(j + 1) * qk_dim];
                        let cur = &mut rest[..qk_dim];
                        let c = dot(cur, prev);
                        for (x, p) in cur.iter_mut().zip(prev) {
                            *x -= c * p;
                        }
                    }
                    let row = &mut block[i * qk_dim..(i + 1) * qk_dim];
                    let norm = dot(row, row).sqrt();
                    for x in row.iter_mut() {
                        *x /= norm;
                    }
                }
            }
            for row in projection.chunks_mut(qk_dim) {
                let target = (0..qk_dim).map(|_| gauss().powi(2)).sum::<f64>().sqrt();
                for x in row.iter_mut() {
                    *x *= target;
                }
            }
        }
        Ok(Self {
            kind: KernelKind::Softmax,
            feature_count,
            qk_dim,
            projection,
            seed,
            orthogonal,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn qk_dim(&self) -> usize {
        self.qk_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    /// Row `i` of the projection (the random direction `omega_i`).
    pub fn omega(&self, i: usize) -> &[f64] {
        &self.projection[i * self.qk_dim..(i + 1) * self.qk_dim]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.qk_dim {
            return Err(Error::shape(
                "feature_map_apply",
                format!("expected length {}, got {}", self.qk_dim, x.len()),
            ));
        }
        Ok(self.apply_unchecked(x))
    }

    pub(crate) fn apply_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            KernelKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            KernelKind::Softmax => {
                let half_sq = 0.5 * dot(x, x);
                let scale = 1.0 / (self.feature_count as f64).sqrt();
                (0..self.feature_count)
                    .map(|i| scale * (dot(self.omega(i), x) - half_sq).exp())
                    .collect()
            }
        }
    }

    /// Applies the map to every row of an `[L, d_qk]` matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if cols != self.qk_dim {
            return Err(Error::shape(
                "feature_map_apply",
                format!("expected {} columns, got {:?}", self.qk_dim, x.shape()),
            ));
        }
        let data: Vec<f64> = (0..rows).flat_map(|i| self.apply_unchecked(x.row(i))).collect();
        Tensor::new(vec![rows, self.feature_count], data)
    }
}
