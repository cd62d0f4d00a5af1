use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::MvpModel;
use super::BCE_EPS;
use crate::metrics::jaccard_scores;
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::scenes::ViewSequence;
use crate::voxel::{VoxelGrid, OCCUPANCY_THRESHOLD};
use crate::{Error, Result};

/// Inputs and targets of one sequence.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: Vec<VoxelGrid>,
    pub targets: Vec<VoxelGrid>,
}

impl From<&ViewSequence> for Sample {
    fn from(s: &ViewSequence) -> Self {
        Self {
            inputs: s.frames.clone(),
            targets: s.targets.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_bad_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            adam: AdamConfig::default(),
            log_every: 10,
            eval_every: 100,
            seed: 0,
            max_bad_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Step of the best validation Jaccard (the last step without validation data).
    pub best_step: usize,
    pub best_val_jaccard: Option<f64>,
    pub best_params: Vec<Tensor>,
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,loss,jaccard\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.split, r.loss, r.jaccard);
        }
        s
    }
}

/// Flattened `[N·L, 1, r, r, r]` inputs and targets for `samples`, each cut
/// to its first `len` frames.
fn stack(model: &MvpModel, samples: &[&Sample], len: usize) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<&VoxelGrid> = samples.iter().flat_map(|s| s.inputs[..len].iter()).collect();
    let targets: Vec<&VoxelGrid> = samples.iter().flat_map(|s| s.targets[..len].iter()).collect();
    Ok((model.stack(&inputs)?, model.stack(&targets)?))
}

fn mean_frame_jaccard(pred: &Tensor, target: &Tensor, vol: usize) -> Result<f64> {
    let frames = pred.len() / vol;
    let mut total = 0.0;
    for f in 0..frames {
        let s = f * vol..(f + 1) * vol;
        total += jaccard_scores(&pred.data()[s.clone()], &target.data()[s], OCCUPANCY_THRESHOLD)?;
    }
    Ok(total / frames as f64)
}

/// Mean BCE over all frames and voxels of one sequence.
pub fn sequence_loss(model: &MvpModel, sample: &Sample) -> Result<f64> {
    let len = sample.inputs.len();
    if len == 0 || sample.targets.len() != len {
        return Err(Error::EmptySequence);
    }
    let (x, y) = stack(model, &[sample], len)?;
    let (tape, _, _, loss) = model.loss_graph(&x, &y, len)?;
    Ok(tape.value(loss).data()[0])
}

fn evaluate_split(model: &MvpModel, samples: &[Sample], len: usize, batch: usize) -> Result<(f64, f64)> {
    let vol = model.config().resolution.pow(3);
    let (mut loss, mut jac, mut frames) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack(model, &refs, len)?;
        let mut tape = model.new_tape();
        let vars = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pred = model.forward_batch(&mut tape, &vars, xv, len)?;
        let l = tape.bce_mean(pred, &y, BCE_EPS)?;
        let n = refs.len() * len;
        loss += tape.value(l).data()[0] * n as f64;
        jac += mean_frame_jaccard(tape.value(pred), &y, vol)? * n as f64;
        frames += n;
    }
    Ok((loss / frames as f64, jac / frames as f64))
}

/// Adam on the sequence loss over shuffled training sequences, using the
/// first `train_views` frames of each. Validation runs every `eval_every`
/// steps and the best-scoring weights are returned in the report; `model`
/// ends with the final weights.
pub fn train(model: &mut MvpModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("batch_size, log_every and eval_every must be positive".into()));
    }
    let full = train_set[0].inputs.len();
    let len = model.config().train_views.min(full);
    for s in train_set.iter().chain(val_set) {
        if s.inputs.len() != full || s.targets.len() != full {
            return Err(Error::InvalidArgument(format!(
                "all sequences must have {full} frames and targets"
            )));
        }
    }
    let vol = model.config().resolution.pow(3);
    let mut adam = AdamState::new(cfg.adam, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport {
        log: Vec::new(),
        best_step: 0,
        best_val_jaccard: None,
        best_params: model.params().to_vec(),
        skipped_steps: 0,
    };
    let mut bad = 0;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_set.len()) {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&train_set[order.pop().expect("refilled")]);
        }
        let (x, y) = stack(model, &batch, len)?;
        let (mut tape, vars, pred, loss) = model.loss_graph(&x, &y, len)?;
        let loss_value = tape.value(loss).data()[0];
        let batch_jaccard = if step % cfg.log_every == 0 || step == cfg.steps {
            Some(mean_frame_jaccard(tape.value(pred), &y, vol)?)
        } else {
            None
        };
        let step_result = if loss_value.is_finite() {
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam.step(model.params_mut(), &g)
        } else {
            Err(Error::NonFinite(format!("loss at step {step}")))
        };
        if let Err(e) = step_result {
            if !matches!(e, Error::NonFinite(_)) {
                return Err(e);
            }
            bad += 1;
            report.skipped_steps += 1;
            log::warn!("step {step} skipped: {e}");
            if bad >= cfg.max_bad_steps {
                return Err(Error::TrainingAborted(bad));
            }
            continue;
        }
        bad = 0;
        if let Some(j) = batch_jaccard {
            report.log.push(LogRow {
                step,
                split: "train".into(),
                loss: loss_value,
                jaccard: j,
            });
        }
        if !val_set.is_empty() && (step % cfg.eval_every == 0 || step == cfg.steps) {
            let (l, j) = evaluate_split(model, val_set, len, cfg.batch_size)?;
            report.log.push(LogRow {
                step,
                split: "val".into(),
                loss: l,
                jaccard: j,
            });
            if report.best_val_jaccard.is_none_or(|b| j > b) {
                report.best_val_jaccard = Some(j);
                report.best_step = step;
                report.best_params = model.params().to_vec();
            }
        }
    }
    if val_set.is_empty() {
        report.best_step = cfg.steps;
        report.best_params = model.params().to_vec();
    }
    Ok(report)
}

