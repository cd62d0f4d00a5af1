use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fscore_with, jaccard, FScore};
use crate::model::MvpModel;
use crate::voxel::{marching_cubes, sample_surface_points, VoxelGrid};
use crate::{Error, ExecMode, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bin_threshold: f64,
    /// F-score distance as a fraction of the grid's world-space diagonal.
    pub fscore_fraction: f64,
    pub surface_samples: usize,
    pub isolevel: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_threshold: 0.5,
            fscore_fraction: 0.01,
            surface_samples: 2048,
            isolevel: 0.5,
            seed: 0,
        }
    }
}

/// Where predictions come from.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Streams each sequence through `forward_step`.
    Model(&'a MvpModel),
    /// Returns the targets (test hook).
    Oracle,
    /// Predicts nothing anywhere.
    Empty,
}

pub struct SequenceInput<'a> {
    pub id: String,
    pub split: String,
    pub inputs: &'a [VoxelGrid],
    pub targets: &'a [VoxelGrid],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub seq_id: String,
    pub split: String,
    pub frame: usize,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    /// Marching cubes found no surface in the prediction or the target.
    pub empty_mesh: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub sequences: usize,
    pub frames: usize,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub empty_mesh_frames: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<FrameRow>,
    /// Predictions per sequence, kept when requested.
    pub predictions: Vec<Vec<VoxelGrid>>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricReport {
    /// Per-sequence means in first-seen order, `(seq_id, jaccard, fscore)`.
    pub fn sequence_means(&self) -> Vec<(String, f64, f64)> {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if order.last() != Some(&r.seq_id) && !order.contains(&r.seq_id) {
                order.push(r.seq_id.clone());
            }
        }
        order
            .into_iter()
            .map(|id| {
                let rows: Vec<&FrameRow> = self.rows.iter().filter(|r| r.seq_id == id).collect();
                let j = mean(rows.iter().map(|r| r.jaccard));
                let f = mean(rows.iter().map(|r| r.fscore));
                (id, j, f)
            })
            .collect()
    }

    /// Means over frames, grouped by split.
    pub fn summary(&self) -> BTreeMap<String, SplitSummary> {
        let mut out = BTreeMap::new();
        let mut splits: Vec<&str> = self.rows.iter().map(|r| r.split.as_str()).collect();
        splits.sort_unstable();
        splits.dedup();
        for s in splits {
            let rows: Vec<&FrameRow> = self.rows.iter().filter(|r| r.split == s).collect();
            let mut ids: Vec<&str> = rows.iter().map(|r| r.seq_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            out.insert(
                s.to_string(),
                SplitSummary {
                    sequences: ids.len(),
                    frames: rows.len(),
                    jaccard: mean(rows.iter().map(|r| r.jaccard)),
                    precision: mean(rows.iter().map(|r| r.precision)),
                    recall: mean(rows.iter().map(|r| r.recall)),
                    fscore: mean(rows.iter().map(|r| r.fscore)),
                    empty_mesh_frames: rows.iter().filter(|r| r.empty_mesh).count(),
                },
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seq_id,frame,jaccard,precision,recall,fscore\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.seq_id, r.frame, r.jaccard, r.precision, r.recall, r.fscore);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn predict(p: Predictor<'_>, seq: &SequenceInput<'_>) -> Result<Vec<VoxelGrid>> {
    match p {
        Predictor::Oracle => Ok(seq.targets.to_vec()),
        Predictor::Empty => seq.inputs.iter().map(|g| g.with_values(&vec![0.0; g.len()])).collect(),
        Predictor::Model(m) => {
            let mut state = m.new_state();
            seq.inputs.iter().map(|f| m.forward_step(&mut state, f)).collect()
        }
    }
}

/// Jaccard and F-score for one predicted frame.
pub fn score_frame(pred: &VoxelGrid, target: &VoxelGrid, cfg: &EvalConfig, seed: u64) -> Result<(f64, FScore, bool)> {
    let j = jaccard(pred, target, cfg.bin_threshold)?;
    let mp = marching_cubes(pred, cfg.isolevel)?;
    let mt = marching_cubes(target, cfg.isolevel)?;
    if mp.is_empty() || mt.is_empty() {
        let zero = FScore {
            precision: 0.0,
            recall: 0.0,
            fscore: 0.0,
        };
        return Ok((j, zero, true));
    }
    // The same seed on both sides makes identical meshes sample identical points.
    let pp = sample_surface_points(&mp, cfg.surface_samples, seed)?;
    let pt = sample_surface_points(&mt, cfg.surface_samples, seed)?;
    let d = cfg.fscore_fraction * target.extent() * 3f64.sqrt();
    Ok((j, fscore_with(&pp, &pt, d, ExecMode::Sequential)?, false))
}

/// Scores every frame of every sequence; sequences run in parallel under
/// `exec`. Set `keep_predictions` to retain the predicted grids.
pub fn evaluate(
    predictor: Predictor<'_>,
    sequences: &[SequenceInput<'_>],
    cfg: &EvalConfig,
    exec: ExecMode,
    keep_predictions: bool,
) -> Result<MetricReport> {
    if let Predictor::Model(m) = predictor {
        for s in sequences {
            if let Some(g) = s.inputs.iter().chain(s.targets).find(|g| g.resolution() != m.config().resolution) {
                return Err(Error::ResolutionMismatch(format!(
                    "{} has {}³ grids, model expects {}³",
                    s.id,
                    g.resolution(),
                    m.config().resolution
                )));
            }
        }
    }
    let per_seq = exec.map(sequences.len(), |i| -> Result<(Vec<FrameRow>, Vec<VoxelGrid>)> {
        let seq = &sequences[i];
        if seq.inputs.len() != seq.targets.len() {
            return Err(Error::shape("evaluate", format!("{}: inputs and targets differ in length", seq.id)));
        }
        let preds = predict(predictor, seq)?;
        let mut rows = Vec::with_capacity(preds.len());
        for (f, (p, t)) in preds.iter().zip(seq.targets).enumerate() {
            let seed = cfg.seed.wrapping_add((i * 1000 + f) as u64);
            let (j, fs, empty) = score_frame(p, t, cfg, seed)?;
            if empty {
                log::warn!("{} frame {f}: empty mesh, F-score recorded as 0", seq.id);
            }
            rows.push(FrameRow {
                seq_id: seq.id.clone(),
                split: seq.split.clone(),
                frame: f,
                jaccard: j,
                precision: fs.precision,
                recall: fs.recall,
                fscore: fs.fscore,
                empty_mesh: empty,
            });
        }
        Ok((rows, preds))
    });
    let mut report = MetricReport::default();
    for r in per_seq {
        let (rows, preds) = r?;
        report.rows.extend(rows);
        if keep_predictions {
            report.predictions.push(preds);
        }
    }
    Ok(report)
}
