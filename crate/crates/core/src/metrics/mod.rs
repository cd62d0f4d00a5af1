//! Jaccard similarity, F-score at a distance threshold, and per-sequence
//! evaluation.

mod report;

use std::collections::HashMap;

use nalgebra::Point3;

pub use report::{evaluate, EvalConfig, FrameRow, MetricReport, Predictor, SequenceInput, SplitSummary};

use crate::voxel::{PointCloud, VoxelGrid};
use crate::{Error, ExecMode, Result};

/// `|A∩B| / |A∪B|` over raw scores binarized at `threshold`; two empty sets
/// score 1.
pub fn jaccard_scores<T: Copy + Into<f64>>(a: &[T], b: &[T], threshold: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("jaccard", format!("{} vs {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into() >= threshold, y.into() >= threshold);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn jaccard(a: &VoxelGrid, b: &VoxelGrid, threshold: f64) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(Error::ResolutionMismatch(format!("{}³ vs {}³", a.resolution(), b.resolution())));
    }
    jaccard_scores(a.values(), b.values(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Bucket grid over one cloud for fixed-radius "any neighbor" queries.
struct CellIndex<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> CellIndex<'a> {
    fn new(points: &'a [Point3<f64>], radius: f64) -> Self {
        // Slightly oversized cells keep every neighbor within one cell step.
        let cell = radius * (1.0 + 1e-6);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, buckets }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / cell).floor() as i64)
    }

    fn any_within(&self, q: &Point3<f64>, r2: f64) -> bool {
        let k = Self::key(q, self.cell);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if ids.iter().any(|&i| (self.points[i] - q).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn matched_fraction(from: &[Point3<f64>], to: &CellIndex<'_>, r2: f64, exec: ExecMode) -> f64 {
    let hits = exec.map(from.len(), |i| to.any_within(&from[i], r2) as usize);
    hits.iter().sum::<usize>() as f64 / from.len() as f64
}

/// Precision: share of `pred` within `d` (inclusive) of some `gt` point.
/// Recall: the same from `gt` to `pred`.
pub fn fscore(pred: &PointCloud, gt: &PointCloud, d: f64) -> Result<FScore> {
    fscore_with(pred, gt, d, ExecMode::default())
}

pub fn fscore_with(pred: &PointCloud, gt: &PointCloud, d: f64, exec: ExecMode) -> Result<FScore> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidArgument(format!("distance threshold must be positive, got {d}")));
    }
    let r2 = d * d;
    let precision = matched_fraction(pred.points(), &CellIndex::new(gt.points(), d), r2, exec);
    let recall = matched_fraction(gt.points(), &CellIndex::new(pred.points(), d), r2, exec);
    let fscore = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}
