use super::{dot, KernelFeatureMap};
use crate::{Error, Result};

/// Floor on the retrieval denominator `phi(q) . m`.
pub const DENOM_EPS: f64 = 1e-9;

/// Compact associative memory: the prefix sums of `phi(k_j)^T v_j` and
/// `phi(k_j)^T` over every absorbed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociativeMemory {
    feature_count: usize,
    value_dim: usize,
    /// `m x d`, row-major.
    matrix: Box<[f64]>,
    normalizer: Box<[f64]>,
    count: usize,
}

impl AssociativeMemory {
    pub fn new(feature_count: usize, value_dim: usize) -> Self {
        Self {
            feature_count,
            value_dim,
            matrix: vec![0.0; feature_count * value_dim].into_boxed_slice(),
            normalizer: vec![0.0; feature_count].into_boxed_slice(),
            count: 0,
        }
    }

    pub fn for_map(map: &KernelFeatureMap, value_dim: usize) -> Self {
        Self::new(map.feature_count(), value_dim)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn normalizer(&self) -> &[f64] {
        &self.normalizer
    }

    /// Bytes held by this memory, inline and on the heap.
    pub fn byte_size(&self) -> usize {
        std::mem::size_of::<Self>() + std::mem::size_of_val(&*self.matrix) + std::mem::size_of_val(&*self.normalizer)
    }

    /// Absorbs one frame: `M += phi(k)^T v`, `m += phi(k)^T`.
    pub fn update(&mut self, map: &KernelFeatureMap, key: &[f64], value: &[f64]) -> Result<()> {
        if !key.iter().chain(value).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("memory_update key/value".into()));
        }
        if map.feature_count() != self.feature_count {
            return Err(Error::shape(
                "memory_update",
                format!("map has {} features, memory {}", map.feature_count(), self.feature_count),
            ));
        }
        let phi = map.apply(key)?;
        self.update_features(&phi, value)
    }

    /// Absorbs a frame whose key features were already computed.
    pub fn update_features(&mut self, phi_key: &[f64], value: &[f64]) -> Result<()> {
        if phi_key.len() != self.feature_count || value.len() != self.value_dim {
            return Err(Error::shape(
                "memory_update",
                format!(
                    "memory is {}x{}, got features {} value {}",
                    self.feature_count,
                    self.value_dim,
                    phi_key.len(),
                    value.len()
                ),
            ));
        }
        if !phi_key.iter().chain(value).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("memory_update features/value".into()));
        }
        for (i, &p) in phi_key.iter().enumerate() {
            self.normalizer[i] += p;
            let row = &mut self.matrix[i * self.value_dim..(i + 1) * self.value_dim];
            for (r, v) in row.iter_mut().zip(value) {
                *r += p * v;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// `phi(q) M / max(phi(q) . m, DENOM_EPS)`.
    pub fn query(&self, map: &KernelFeatureMap, query: &[f64]) -> Result<Vec<f64>> {
        let phi = self.query_features(map, query)?;
        let (num, den) = self.read(&phi);
        Ok(finish(num, den.max(DENOM_EPS)))
    }

    /// Like [`query`](Self::query) but returns `fallback` when every
    /// attention weight is exactly zero (relu features with disjoint
    /// support). This is the rule the batch attention paths apply with the
    /// current frame's value as fallback.
    pub fn query_or(&self, map: &KernelFeatureMap, query: &[f64], fallback: &[f64]) -> Result<Vec<f64>> {
        if fallback.len() != self.value_dim {
            return Err(Error::shape("memory_query", "fallback length differs from value width"));
        }
        let phi = self.query_features(map, query)?;
        Ok(self.read_or(&phi, fallback))
    }

    pub(crate) fn read_or(&self, phi: &[f64], fallback: &[f64]) -> Vec<f64> {
        let (num, den) = self.read(phi);
        if den == 0.0 {
            fallback.to_vec()
        } else {
            finish(num, den.max(DENOM_EPS))
        }
    }

    fn query_features(&self, map: &KernelFeatureMap, query: &[f64]) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyMemory);
        }
        if !query.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("memory_query query".into()));
        }
        map.apply(query)
    }

    fn read(&self, phi: &[f64]) -> (Vec<f64>, f64) {
        let mut num = vec![0.0; self.value_dim];
        for (i, &p) in phi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row = &self.matrix[i * self.value_dim..(i + 1) * self.value_dim];
            for (n, r) in num.iter_mut().zip(row) {
                *n += p * r;
            }
        }
        (num, dot(phi, &self.normalizer))
    }
}

fn finish(mut num: Vec<f64>, den: f64) -> Vec<f64> {
    for n in &mut num {
        *n /= den;
    }
    num
}
