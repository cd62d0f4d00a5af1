use super::config::{ModelConfig, Variant};
use crate::attention::AssociativeMemory;

/// Stored keys and values of one exact-attention layer.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(super) enum StateKind {
    Memory(Vec<AssociativeMemory>),
    History(Vec<History>),
    Recurrent(Vec<(Vec<f64>, Vec<f64>)>),
    Stateless,
}

/// Everything a model carries from one frame to the next.
#[derive(Debug, Clone)]
pub struct SequenceState {
    variant: Variant,
    pub(super) frame_index: usize,
    pub(super) kind: StateKind,
}

impl SequenceState {
    pub(super) fn new(variant: Variant, kind: StateKind) -> Self {
        Self {
            variant,
            frame_index: 0,
            kind,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Frames absorbed so far.
    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Bytes of numeric state held.
    pub fn byte_size(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        match &self.kind {
            StateKind::Memory(m) => m.iter().map(AssociativeMemory::byte_size).sum(),
            StateKind::History(h) => h.iter().map(|h| (h.keys.len() + h.values.len()) * f).sum(),
            StateKind::Recurrent(c) => c.iter().map(|(h, c)| (h.len() + c.len()) * f).sum(),
            StateKind::Stateless => 0,
        }
    }

    pub(super) fn fits(&self, cfg: &ModelConfig) -> bool {
        match &self.kind {
            StateKind::Memory(m) => m.len() == cfg.layers && m.iter().all(|m| m.value_dim() == cfg.latent_dim),
            StateKind::History(h) => h.len() == cfg.layers,
            StateKind::Recurrent(c) => c.len() == cfg.layers && c.iter().all(|(h, _)| h.len() == cfg.latent_dim),
            StateKind::Stateless => true,
        }
    }
}
