use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant, STRIDE};
use super::state::{SequenceState, StateKind};
use crate::attention::{exact_attention_row, KernelFeatureMap, KernelKind};
use crate::numerics::{conv_transpose_output_extent, Tape, Tensor, Var};
use crate::scenes::derive_seed;
use crate::voxel::VoxelGrid;
use crate::{Error, ExecMode, Result};

const RMS_EPS: f64 = 1e-6;
/// Predictions handed out as grids are kept this far from 0 and 1.
pub const PREDICTION_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<Dense>,
    out: Dense,
}

#[derive(Debug, Clone)]
enum Mixer {
    Attention { wq: usize, wk: usize, wv: usize },
    Lstm { wx: usize, wh: usize, b: usize },
}

#[derive(Debug, Clone)]
struct Layer {
    g1: usize,
    mixer: Mixer,
    wo: usize,
    g2: usize,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    frame: Encoder,
    context: Option<Encoder>,
    single: Option<Dense>,
    layers: Vec<Layer>,
    dec_in: Dense,
    dec: Vec<Dense>,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// Normal weights with variance `gain / fan_in`.
    fn normal(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> usize {
        let t = Tensor::randn(shape, (gain / fan_in as f64).sqrt(), &mut self.rng);
        self.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.add(name, Tensor::full(shape, 1.0))
    }

    fn dense(&mut self, name: &str, fan_in: usize, out: usize, gain: f64) -> Dense {
        Dense {
            w: self.normal(format!("{name}.w"), &[fan_in, out], fan_in, gain),
            b: self.zeros(format!("{name}.b"), &[out]),
        }
    }

    fn encoder(&mut self, name: &str, cfg: &ModelConfig, bottleneck: usize) -> Encoder {
        let k = cfg.conv_kernel;
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            let fan = in_ch * k * k * k;
            convs.push(Dense {
                w: self.normal(format!("{name}.conv{i}.w"), &[c, in_ch, k, k, k], fan, 2.0),
                b: self.zeros(format!("{name}.conv{i}.b"), &[c]),
            });
            in_ch = c;
        }
        let out = self.dense(&format!("{name}.dense"), bottleneck, cfg.latent_dim, 2.0);
        Encoder { convs, out }
    }
}

/// Sinusoidal encoding of frame index `t` in `d` dimensions.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = t as f64 / rate;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// How the sequence block sees its rows.
pub(super) enum Mode<'a> {
    /// `rows = batch × seq_len`, sequence-major.
    Batch { seq_len: usize },
    /// One row, the next frame of a running sequence.
    Step(&'a mut SequenceState),
}

#[derive(Debug, Clone)]
pub struct MvpModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    feature_maps: Vec<Arc<KernelFeatureMap>>,
    exec: ExecMode,
}

impl MvpModel {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let bottleneck = config.bottleneck()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 10, 0)),
        };
        let frame = b.encoder("frame", &config, bottleneck);
        let (mut context, mut single, mut layers) = (None, None, Vec::new());
        if config.variant == Variant::SingleView {
            single = Some(b.dense("single", d, d, 2.0));
        } else {
            if !config.share_towers {
                context = Some(b.encoder("context", &config, bottleneck));
            }
            for l in 0..config.layers {
                let p = format!("layer{l}");
                let g1 = b.ones(format!("{p}.norm1"), &[d]);
                let mixer = if config.variant == Variant::Lstm {
                    let wx = b.normal(format!("{p}.lstm.wx"), &[d, 4 * d], d, 1.0);
                    let wh = b.normal(format!("{p}.lstm.wh"), &[d, 4 * d], d, 1.0);
                    // Forget gate starts open.
                    let mut bias = Tensor::zeros(&[4 * d]);
                    bias.data_mut()[d..2 * d].fill(1.0);
                    let bi = b.add(format!("{p}.lstm.b"), bias);
                    Mixer::Lstm { wx, wh, b: bi }
                } else {
                    Mixer::Attention {
                        wq: b.normal(format!("{p}.attn.wq"), &[d, config.qk_dim], d, 1.0),
                        wk: b.normal(format!("{p}.attn.wk"), &[d, config.qk_dim], d, 1.0),
                        wv: b.normal(format!("{p}.attn.wv"), &[d, d], d, 1.0),
                    }
                };
                let wo = b.normal(format!("{p}.wo"), &[d, d], d, 1.0);
                let g2 = b.ones(format!("{p}.norm2"), &[d]);
                let ff1 = b.dense(&format!("{p}.ff1"), d, config.ff_dim, 2.0);
                let ff2 = b.dense(&format!("{p}.ff2"), config.ff_dim, d, 1.0);
                layers.push(Layer {
                    g1,
                    mixer,
                    wo,
                    g2,
                    ff1,
                    ff2,
                });
            }
        }
        let dec_in = b.dense("decoder.dense", d, bottleneck, 2.0);
        let k = config.conv_kernel;
        let mut chans: Vec<usize> = config.conv_channels.iter().rev().copied().collect();
        chans.push(1);
        let mut dec = Vec::new();
        for (i, pair) in chans.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let last = i + 2 == chans.len();
            let fan = (cin * k * k * k).div_ceil(STRIDE * STRIDE * STRIDE);
            dec.push(Dense {
                w: b.normal(format!("decoder.deconv{i}.w"), &[cin, cout, k, k, k], fan, if last { 1.0 } else { 2.0 }),
                b: b.zeros(format!("decoder.deconv{i}.b"), &[cout]),
            });
        }
        let feature_maps = if config.variant == Variant::Mvp {
            (0..config.layers)
                .map(|l| {
                    KernelFeatureMap::for_kernel(
                        config.kernel,
                        config.qk_dim,
                        config.feature_count,
                        derive_seed(config.seed, 11, l as u64),
                        config.orthogonal_features,
                    )
                    .map(Arc::new)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            layout: Layout {
                frame,
                context,
                single,
                layers,
                dec_in,
                dec,
            },
            feature_maps,
            exec: ExecMode::default(),
        })
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all weights; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("set_params", format!("{} tensors, expected {}", params.len(), self.params.len())));
        }
        for ((new, old), name) in params.iter().zip(&self.params).zip(&self.names) {
            if new.shape() != old.shape() {
                return Err(Error::shape("set_params", format!("{name}: {:?} vs {:?}", new.shape(), old.shape())));
            }
            if !new.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn new_tape(&self) -> Tape {
        Tape::with_exec(self.exec)
    }

    /// Puts every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    pub fn new_state(&self) -> SequenceState {
        let cfg = &self.config;
        let kind = match cfg.variant {
            Variant::Mvp => StateKind::Memory(
                self.feature_maps
                    .iter()
                    .map(|m| crate::attention::AssociativeMemory::for_map(m, cfg.latent_dim))
                    .collect(),
            ),
            Variant::Mvt => StateKind::History(vec![Default::default(); cfg.layers]),
            Variant::Lstm => StateKind::Recurrent(vec![(vec![0.0; cfg.latent_dim], vec![0.0; cfg.latent_dim]); cfg.layers]),
            Variant::SingleView => StateKind::Stateless,
        };
        SequenceState::new(cfg.variant, kind)
    }

    fn check_frame(&self, grid: &VoxelGrid) -> Result<()> {
        if grid.resolution() != self.config.resolution {
            return Err(Error::ResolutionMismatch(format!(
                "frame is {}³, model expects {}³",
                grid.resolution(),
                self.config.resolution
            )));
        }
        Ok(())
    }

    /// Stacks grids into `[N, 1, r, r, r]`.
    pub fn stack(&self, grids: &[&VoxelGrid]) -> Result<Tensor> {
        let r = self.config.resolution;
        let mut data = Vec::with_capacity(grids.len() * r * r * r);
        for g in grids {
            self.check_frame(g)?;
            data.extend(g.values().iter().map(|&v| v as f64));
        }
        Tensor::new(vec![grids.len(), 1, r, r, r], data)
    }

    fn encode(&self, tape: &mut Tape, v: &[Var], enc: &Encoder, x: Var) -> Result<Var> {
        let pad = self.config.conv_kernel / 2;
        let mut h = x;
        for c in &enc.convs {
            h = tape.conv3d(h, v[c.w], STRIDE, pad)?;
            h = tape.add_bias(h, v[c.b])?;
            h = tape.relu(h);
        }
        let n = tape.value(h).shape()[0];
        let h = tape.reshape(h, &[n, self.config.bottleneck()?])?;
        let h = tape.dense(h, v[enc.out.w], v[enc.out.b])?;
        Ok(tape.relu(h))
    }

    fn decode(&self, tape: &mut Tape, v: &[Var], z: Var) -> Result<Var> {
        let cfg = &self.config;
        let (k, pad) = (cfg.conv_kernel, cfg.conv_kernel / 2);
        let extents = cfg.encoder_extents()?;
        let n = tape.value(z).shape()[0];
        let h = tape.dense(z, v[self.layout.dec_in.w], v[self.layout.dec_in.b])?;
        let h = tape.relu(h);
        let s = *extents.last().expect("non-empty");
        let mut h = tape.reshape(h, &[n, *cfg.conv_channels.last().expect("non-empty"), s, s, s])?;
        for (i, stage) in self.layout.dec.iter().enumerate() {
            let cur = extents[extents.len() - 1 - i];
            let want = extents[extents.len() - 2 - i];
            let base = conv_transpose_output_extent(cur, k, STRIDE, pad, 0)
                .ok_or_else(|| Error::InvalidArgument("decoder geometry".into()))?;
            let out_pad = want.checked_sub(base).filter(|&p| p < STRIDE).ok_or_else(|| {
                Error::InvalidArgument(format!("decoder cannot restore extent {want} from {cur}"))
            })?;
            h = tape.conv_transpose3d(h, v[stage.w], STRIDE, pad, out_pad)?;
            h = tape.add_bias(h, v[stage.b])?;
            if i + 1 < self.layout.dec.len() {
                h = tape.relu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }

    fn lstm_cell(&self, tape: &mut Tape, x: Var, h: Option<Var>, c: Option<Var>, v: &[Var], m: (usize, usize, usize)) -> Result<(Var, Var)> {
        let d = self.config.latent_dim;
        let (wx, wh, b) = m;
        let mut gates = tape.dense(x, v[wx], v[b])?;
        if let Some(h) = h {
            let r = tape.matmul(h, v[wh])?;
            gates = tape.add(gates, r)?;
        }
        let i = tape.slice_cols(gates, 0, d)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, d, d)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * d, d)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * d, d)?;
        let o = tape.sigmoid(o);
        let mut c_new = tape.mul(i, g)?;
        if let Some(c) = c {
            let keep = tape.mul(f, c)?;
            c_new = tape.add(keep, c_new)?;
        }
        let t = tape.tanh(c_new);
        let h_new = tape.mul(o, t)?;
        Ok((h_new, c_new))
    }

    /// The history-dependent stack of the context tower.
    fn sequence_block(&self, tape: &mut Tape, v: &[Var], mut h: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let qk_scale = (cfg.qk_dim as f64).powf(-0.25);
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let n = tape.rms_norm(h, RMS_EPS)?;
            let n = tape.mul_bias(n, v[layer.g1])?;
            let mixed = match (&layer.mixer, &mut *mode) {
                (&Mixer::Attention { wq, wk, wv }, mode) => {
                    let q = tape.matmul(n, v[wq])?;
                    let q = tape.scale(q, qk_scale);
                    let k = tape.matmul(n, v[wk])?;
                    let k = tape.scale(k, qk_scale);
                    let val = tape.matmul(n, v[wv])?;
                    match mode {
                        Mode::Batch { seq_len } => {
                            if cfg.variant == Variant::Mvp {
                                let (fq, fk) = match cfg.kernel {
                                    KernelKind::Softmax => (
                                        tape.favor_features(q, self.feature_maps[l].clone())?,
                                        tape.favor_features(k, self.feature_maps[l].clone())?,
                                    ),
                                    KernelKind::Relu => (tape.relu(q), tape.relu(k)),
                                };
                                tape.causal_linear_attention(fq, fk, val, *seq_len)?
                            } else {
                                tape.causal_exact_attention(q, k, val, *seq_len, cfg.kernel)?
                            }
                        }
                        Mode::Step(state) => {
                            let (qv, kv, vv) = (tape.value(q).data(), tape.value(k).data(), tape.value(val).data());
                            let out = match &mut state.kind {
                                StateKind::Memory(mems) => {
                                    let map = &self.feature_maps[l];
                                    mems[l].update_features(&map.apply(kv)?, vv)?;
                                    mems[l].read_or(&map.apply(qv)?, vv)
                                }
                                StateKind::History(hist) => {
                                    hist[l].keys.extend_from_slice(kv);
                                    hist[l].values.extend_from_slice(vv);
                                    exact_attention_row(qv, &hist[l].keys, &hist[l].values, cfg.kernel)
                                }
                                _ => return Err(Error::InvalidArgument("state does not match the model variant".into())),
                            };
                            tape.constant(Tensor::new(vec![1, d], out)?)
                        }
                    }
                }
                (&Mixer::Lstm { wx, wh, b }, Mode::Batch { seq_len }) => {
                    let rows = tape.value(n).shape()[0];
                    let (len, batch) = (*seq_len, rows / *seq_len);
                    let (mut hs, mut hp, mut cp) = (Vec::with_capacity(len), None, None);
                    for t in 0..len {
                        let idx: Vec<usize> = (0..batch).map(|s| s * len + t).collect();
                        let x = tape.gather_rows(n, &idx)?;
                        let (hn, cn) = self.lstm_cell(tape, x, hp, cp, v, (wx, wh, b))?;
                        hs.push(hn);
                        (hp, cp) = (Some(hn), Some(cn));
                    }
                    let all = tape.concat_rows(&hs)?;
                    let perm: Vec<usize> = (0..rows).map(|r| (r % len) * batch + r / len).collect();
                    tape.gather_rows(all, &perm)?
                }
                (&Mixer::Lstm { wx, wh, b }, Mode::Step(state)) => {
                    let StateKind::Recurrent(cells) = &mut state.kind else {
                        return Err(Error::InvalidArgument("state does not match the model variant".into()));
                    };
                    let (hp, cp) = if state.frame_index == 0 {
                        (None, None)
                    } else {
                        (
                            Some(tape.constant(Tensor::new(vec![1, d], cells[l].0.clone())?)),
                            Some(tape.constant(Tensor::new(vec![1, d], cells[l].1.clone())?)),
                        )
                    };
                    let (hn, cn) = self.lstm_cell(tape, n, hp, cp, v, (wx, wh, b))?;
                    cells[l] = (tape.value(hn).data().to_vec(), tape.value(cn).data().to_vec());
                    hn
                }
            };
            let o = tape.matmul(mixed, v[layer.wo])?;
            h = tape.add(h, o)?;
            let n2 = tape.rms_norm(h, RMS_EPS)?;
            let n2 = tape.mul_bias(n2, v[layer.g2])?;
            let f = tape.dense(n2, v[layer.ff1.w], v[layer.ff1.b])?;
            let f = tape.relu(f);
            let f = tape.dense(f, v[layer.ff2.w], v[layer.ff2.b])?;
            h = tape.add(h, f)?;
        }
        Ok(h)
    }

    /// Full network on `x [N, 1, r, r, r]`; `frame_index[n]` is row `n`'s
    /// position in its sequence. Returns sigmoid occupancy `[N, 1, r, r, r]`.
    pub(super) fn forward(&self, tape: &mut Tape, v: &[Var], x: Var, frame_index: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        let cfg = &self.config;
        let e = self.encode(tape, v, &self.layout.frame, x)?;
        let c = if let Some(s) = &self.layout.single {
            let c = tape.dense(e, v[s.w], v[s.b])?;
            tape.relu(c)
        } else {
            let mut ctx = match &self.layout.context {
                Some(enc) => self.encode(tape, v, enc, x)?,
                None => e,
            };
            if cfg.positional_encoding {
                let pe: Vec<f64> = frame_index.iter().flat_map(|&t| positional_encoding(t, cfg.latent_dim)).collect();
                let pe = tape.constant(Tensor::new(vec![frame_index.len(), cfg.latent_dim], pe)?);
                ctx = tape.add(ctx, pe)?;
            }
            self.sequence_block(tape, v, ctx, mode)?
        };
        let z = tape.add(e, c)?;
        self.decode(tape, v, z)
    }

    /// Batched forward over `inputs [B·L, 1, r, r, r]` holding `B` sequences
    /// of `seq_len` consecutive frames.
    pub fn forward_batch(&self, tape: &mut Tape, vars: &[Var], inputs: Var, seq_len: usize) -> Result<Var> {
        let n = tape.value(inputs).shape()[0];
        if seq_len == 0 || !n.is_multiple_of(seq_len) {
            return Err(Error::shape("forward_batch", format!("{n} frames in sequences of {seq_len}")));
        }
        let index: Vec<usize> = (0..n).map(|i| i % seq_len).collect();
        self.forward(tape, vars, inputs, &index, &mut Mode::Batch { seq_len })
    }

    fn to_grids(&self, pred: &Tensor, like: &[&VoxelGrid]) -> Result<Vec<VoxelGrid>> {
        let vol = self.config.resolution.pow(3);
        like.iter()
            .enumerate()
            .map(|(i, g)| {
                let vals: Vec<f64> = pred.data()[i * vol..(i + 1) * vol]
                    .iter()
                    .map(|p| p.clamp(PREDICTION_EPS, 1.0 - PREDICTION_EPS))
                    .collect();
                g.with_values(&vals)
            })
            .collect()
    }

    /// Predictions for every frame of one sequence (batched path).
    pub fn predict_sequence(&self, frames: &[VoxelGrid]) -> Result<Vec<VoxelGrid>> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let refs: Vec<&VoxelGrid> = frames.iter().collect();
        let raw = self.predict_raw(&[&refs[..]])?;
        self.to_grids(&raw, &refs)
    }

    /// Raw sigmoid outputs `[B·L, 1, r, r, r]` for equally long sequences.
    pub fn predict_raw(&self, sequences: &[&[&VoxelGrid]]) -> Result<Tensor> {
        let len = sequences.first().map_or(0, |s| s.len());
        if len == 0 || sequences.iter().any(|s| s.len() != len) {
            return Err(Error::EmptySequence);
        }
        let flat: Vec<&VoxelGrid> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
        let mut tape = self.new_tape();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(self.stack(&flat)?);
        let y = self.forward_batch(&mut tape, &vars, x, len)?;
        Ok(tape.value(y).clone())
    }

    /// Absorbs one frame into `state` and predicts its full occupancy.
    pub fn forward_step(&self, state: &mut SequenceState, frame: &VoxelGrid) -> Result<VoxelGrid> {
        let raw = self.forward_step_raw(state, frame)?;
        Ok(self.to_grids(&raw, &[frame])?.remove(0))
    }

    pub fn forward_step_raw(&self, state: &mut SequenceState, frame: &VoxelGrid) -> Result<Tensor> {
        if state.variant() != self.config.variant || !state.fits(&self.config) {
            return Err(Error::InvalidArgument(format!(
                "{} state passed to a {} model",
                state.variant(),
                self.config.variant
            )));
        }
        let mut tape = self.new_tape();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(self.stack(&[frame])?);
        let index = [state.frame_index];
        // Work on a copy so a failed step leaves the caller's state intact.
        let mut next = state.clone();
        let y = self.forward(&mut tape, &vars, x, &index, &mut Mode::Step(&mut next))?;
        next.frame_index += 1;
        *state = next;
        Ok(tape.value(y).clone())
    }

    /// Mean BCE over frames and voxels on a fresh tape; returns the tape,
    /// the bound parameters, the prediction and the loss node.
    pub fn loss_graph(&self, inputs: &Tensor, targets: &Tensor, seq_len: usize) -> Result<(Tape, Vec<Var>, Var, Var)> {
        let mut tape = self.new_tape();
        let vars = self.bind(&mut tape, true);
        let x = tape.constant(inputs.clone());
        let y = self.forward_batch(&mut tape, &vars, x, seq_len)?;
        let loss = tape.bce_mean(y, targets, super::BCE_EPS)?;
        Ok((tape, vars, y, loss))
    }

    /// Loss value and gradient of every parameter.
    pub fn loss_and_gradients(&self, inputs: &Tensor, targets: &Tensor, seq_len: usize) -> Result<(f64, Vec<Tensor>)> {
        let (mut tape, vars, _, loss) = self.loss_graph(inputs, targets, seq_len)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, g))
    }
}
