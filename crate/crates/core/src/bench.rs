//! Attention-block throughput: the per-frame cost of one streaming step
//! after `L - 1` frames, for the compact memory (mvp) and for exact
//! attention over the stored history (mvt).

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{exact_attention_row, AssociativeMemory, KernelFeatureMap, KernelKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub qk_dim: usize,
    pub value_dim: usize,
    pub feature_count: usize,
    pub kernel: KernelKind,
    /// Steps timed per trial.
    pub steps: usize,
    /// Trials per length; the median is reported.
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![16, 32, 64, 128, 256],
            qk_dim: 32,
            value_dim: 128,
            feature_count: 64,
            kernel: KernelKind::Softmax,
            steps: 200,
            trials: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    /// Median seconds per mvp step.
    pub mvp_step: f64,
    /// Median seconds per mvt step.
    pub mvt_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn row(&self, length: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.length == length)
    }

    /// `(mvp, mvt)` step-time ratios between lengths `long` and `short`.
    pub fn ratios(&self, short: usize, long: usize) -> Option<(f64, f64)> {
        let (a, b) = (self.row(short)?, self.row(long)?);
        Some((b.mvp_step / a.mvp_step, b.mvt_step / a.mvt_step))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,mvp_step_s,mvt_step_s\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:e}\n", r.length, r.mvp_step, r.mvt_step));
        }
        s
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<f64> {
    (0..n * w).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn time_per_step(steps: usize, trials: usize, mut f: impl FnMut(usize)) -> f64 {
    f(0);
    let samples = (0..trials)
        .map(|_| {
            let t = Instant::now();
            for i in 0..steps {
                f(i);
            }
            t.elapsed().as_secs_f64() / steps as f64
        })
        .collect();
    median(samples)
}

/// Times single-threaded streaming steps at every configured length.
pub fn attention_throughput(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.lengths.contains(&0) || cfg.steps == 0 || cfg.trials == 0 {
        return Err(Error::InvalidArgument("lengths, steps and trials must be positive".into()));
    }
    let (dqk, d) = (cfg.qk_dim, cfg.value_dim);
    let map = KernelFeatureMap::for_kernel(cfg.kernel, dqk, cfg.feature_count, cfg.seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe_q = random_rows(&mut rng, cfg.steps, dqk);
    let probe_k = random_rows(&mut rng, cfg.steps, dqk);
    let probe_v = random_rows(&mut rng, cfg.steps, d);
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        let keys = random_rows(&mut rng, len - 1, dqk);
        let values = random_rows(&mut rng, len - 1, d);

        let mut memory = AssociativeMemory::for_map(&map, d);
        for (k, v) in keys.chunks(dqk).zip(values.chunks(d)) {
            memory.update(&map, k, v)?;
        }
        let mut failed = None;
        let mvp_step = time_per_step(cfg.steps, cfg.trials, |i| {
            let (q, k, v) = (&probe_q[i * dqk..][..dqk], &probe_k[i * dqk..][..dqk], &probe_v[i * d..][..d]);
            let out = memory.update(&map, k, v).and_then(|_| memory.query_or(&map, q, v));
            match out {
                Ok(o) => {
                    black_box(o);
                }
                Err(e) => failed = Some(e),
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }

        let (mut hk, mut hv) = (keys.clone(), values.clone());
        let mvt_step = time_per_step(cfg.steps, cfg.trials, |i| {
            let (q, k, v) = (&probe_q[i * dqk..][..dqk], &probe_k[i * dqk..][..dqk], &probe_v[i * d..][..d]);
            hk.extend_from_slice(k);
            hv.extend_from_slice(v);
            black_box(exact_attention_row(q, &hk, &hv, cfg.kernel));
            hk.truncate((len - 1) * dqk);
            hv.truncate((len - 1) * d);
        });
        rows.push(BenchRow { length: len, mvp_step, mvt_step });
    }
    Ok(BenchReport { config: cfg.clone(), rows })
}
