use mvp_core::attention::KernelKind;
use mvp_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train, ModelConfig, MvpModel, Sample,
    TrainConfig, Variant,
};
use mvp_core::voxel::VoxelGrid;
use mvp_core::Error;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [Variant; 4] = [Variant::Mvp, Variant::Mvt, Variant::Lstm, Variant::SingleView];

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        resolution: 8,
        latent_dim: 16,
        qk_dim: 8,
        feature_count: 16,
        layers: 2,
        ff_dim: 16,
        conv_channels: vec![4, 8],
        train_views: 6,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn random_frames(r: usize, n: usize, seed: u64) -> Vec<VoxelGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = (0..r * r * r).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            VoxelGrid::from_values(r, v, Point3::origin(), 0.3 / r as f64).unwrap()
        })
        .collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn closed_form_count(cfg: &ModelConfig) -> usize {
    let (d, k3) = (cfg.latent_dim, cfg.conv_kernel.pow(3));
    let mut extent = cfg.resolution;
    let mut conv = 0;
    let mut deconv = 0;
    let mut prev = 1;
    for &c in &cfg.conv_channels {
        conv += c * prev * k3 + c;
        deconv += prev * c * k3 + prev;
        prev = c;
        extent = extent.div_ceil(2);
    }
    let bottleneck = prev * extent.pow(3);
    let encoder = conv + bottleneck * d + d;
    let decoder = d * bottleneck + bottleneck + deconv;
    let ff = d * cfg.ff_dim + cfg.ff_dim + cfg.ff_dim * d + d;
    let mixer = match cfg.variant {
        Variant::Mvp | Variant::Mvt => 2 * d * cfg.qk_dim + d * d,
        Variant::Lstm => 2 * d * 4 * d + 4 * d,
        Variant::SingleView => 0,
    };
    let body = match cfg.variant {
        Variant::SingleView => d * d + d,
        _ => encoder + cfg.layers * (2 * d + mixer + d * d + ff),
    };
    encoder + body + decoder
}

#[test]
fn parameter_count_matches_closed_form() {
    for v in VARIANTS {
        for cfg in [ModelConfig { variant: v, ..ModelConfig::default() }, small(v)] {
            let m = MvpModel::new(cfg.clone()).unwrap();
            assert_eq!(m.param_count(), closed_form_count(&cfg), "{v}");
        }
    }
}

#[test]
fn construction_is_deterministic() {
    let a = MvpModel::new(small(Variant::Mvp)).unwrap();
    let b = MvpModel::new(small(Variant::Mvp)).unwrap();
    assert_eq!(a.params(), b.params());
    let c = MvpModel::new(ModelConfig { seed: 4, ..small(Variant::Mvp) }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn single_view_has_no_sequence_parameters() {
    let m = MvpModel::new(small(Variant::SingleView)).unwrap();
    assert!(m.param_names().iter().all(|n| !n.starts_with("layer") && !n.starts_with("context")));
    let shared = MvpModel::new(ModelConfig { share_towers: true, ..small(Variant::Mvp) }).unwrap();
    assert!(shared.param_names().iter().all(|n| !n.starts_with("context")));
}

#[test]
fn streaming_matches_batched_for_every_variant() {
    let frames = random_frames(8, 5, 1);
    for v in VARIANTS {
        for kernel in [KernelKind::Softmax, KernelKind::Relu] {
            let m = MvpModel::new(ModelConfig { kernel, ..small(v) }).unwrap();
            let batched = m.predict_sequence(&frames).unwrap();
            let mut state = m.new_state();
            for (i, f) in frames.iter().enumerate() {
                let step = m.forward_step(&mut state, f).unwrap();
                let diff = max_diff(step.values(), batched[i].values());
                assert!(diff < 1e-6, "{v} {kernel:?} frame {i}: {diff}");
            }
            assert_eq!(state.frame_index(), frames.len());
        }
    }
}

#[test]
fn state_size_constant_for_mvp_and_linear_for_mvt() {
    let frames = random_frames(8, 6, 2);
    let mvp = MvpModel::new(small(Variant::Mvp)).unwrap();
    let mvt = MvpModel::new(small(Variant::Mvt)).unwrap();
    let (mut sp, mut st) = (mvp.new_state(), mvt.new_state());
    let p0 = sp.byte_size();
    let mut sizes = Vec::new();
    for f in &frames {
        mvp.forward_step(&mut sp, f).unwrap();
        mvt.forward_step(&mut st, f).unwrap();
        assert_eq!(sp.byte_size(), p0);
        sizes.push(st.byte_size());
    }
    let step = sizes[0];
    assert!(step > 0);
    for (i, s) in sizes.iter().enumerate() {
        assert_eq!(*s, step * (i + 1));
    }
}

#[test]
fn predictions_ignore_future_frames() {
    let frames = random_frames(8, 5, 3);
    let mut altered = frames.clone();
    altered[3] = random_frames(8, 1, 99).remove(0);
    altered[4] = random_frames(8, 1, 98).remove(0);
    for v in VARIANTS {
        let m = MvpModel::new(small(v)).unwrap();
        let a = m.predict_sequence(&frames).unwrap();
        let b = m.predict_sequence(&altered).unwrap();
        for i in 0..3 {
            assert_eq!(a[i].values(), b[i].values(), "{v} frame {i}");
        }
        assert_ne!(a[3].values(), b[3].values(), "{v}");
    }
}

#[test]
fn predictions_stay_strictly_inside_unit_interval() {
    let frames = random_frames(8, 4, 4);
    for v in VARIANTS {
        let m = MvpModel::new(small(v)).unwrap();
        for g in m.predict_sequence(&frames).unwrap() {
            assert!(g.values().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let frames = random_frames(8, 4, 5);
    let targets = random_frames(8, 4, 6);
    for v in VARIANTS {
        let m = MvpModel::new(small(v)).unwrap();
        let refs: Vec<&VoxelGrid> = frames.iter().collect();
        let trefs: Vec<&VoxelGrid> = targets.iter().collect();
        let (x, y) = (m.stack(&refs).unwrap(), m.stack(&trefs).unwrap());
        let (_, grads) = m.loss_and_gradients(&x, &y, 4).unwrap();
        for (g, name) in grads.iter().zip(m.param_names()) {
            assert!(g.data().iter().any(|&e| e != 0.0), "{v}: {name} has zero gradient");
        }
    }
}

#[test]
fn relu_linear_attention_equals_exact_attention() {
    let frames = random_frames(8, 6, 7);
    let mvp = MvpModel::new(ModelConfig { kernel: KernelKind::Relu, ..small(Variant::Mvp) }).unwrap();
    let mut mvt = MvpModel::new(ModelConfig { kernel: KernelKind::Relu, ..small(Variant::Mvt) }).unwrap();
    mvt.set_params(mvp.params().to_vec()).unwrap();
    let refs: Vec<&VoxelGrid> = frames.iter().collect();
    let a = mvp.predict_raw(&[&refs[..]]).unwrap();
    let b = mvt.predict_raw(&[&refs[..]]).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        variant: Variant::Mvp,
        resolution: 4,
        latent_dim: 6,
        qk_dim: 4,
        feature_count: 8,
        layers: 1,
        ff_dim: 6,
        conv_channels: vec![2],
        train_views: 3,
        seed: 11,
        ..ModelConfig::default()
    };
    // Continuous inputs keep conv pre-activations off the ReLU kink at zero.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames: Vec<VoxelGrid> = (0..3)
        .map(|_| {
            let v = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
            VoxelGrid::from_values(4, v, Point3::origin(), 0.1).unwrap()
        })
        .collect();
    let targets = random_frames(4, 3, 9);
    let mut m = MvpModel::new(cfg).unwrap();
    let x = m.stack(&frames.iter().collect::<Vec<_>>()).unwrap();
    let y = m.stack(&targets.iter().collect::<Vec<_>>()).unwrap();
    let (_, grads) = m.loss_and_gradients(&x, &y, 3).unwrap();
    let loss_at = |m: &MvpModel| m.loss_and_gradients(&x, &y, 3).unwrap().0;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for p in 0..m.params().len() {
        for i in 0..m.params()[p].len() {
            let orig = m.params()[p].data()[i];
            m.params_mut()[p].data_mut()[i] = orig + h;
            let up = loss_at(&m);
            m.params_mut()[p].data_mut()[i] = orig - h;
            let down = loss_at(&m);
            m.params_mut()[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[p].data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let frames = random_frames(8, 3, 10);
    let m = MvpModel::new(small(Variant::Mvp)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mvpc");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path, Some(m.config())).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    let a = m.predict_sequence(&frames).unwrap();
    let b = back.predict_sequence(&frames).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn checkpoint_rejects_flipped_byte_and_mismatch() {
    let m = MvpModel::new(small(Variant::Mvp)).unwrap();
    let mut bytes = encode_checkpoint(&m).unwrap();
    let mid = bytes.len() - 100;
    bytes[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::Checksum { .. })));

    let bytes = encode_checkpoint(&m).unwrap();
    let expected = ModelConfig { resolution: 16, ..small(Variant::Mvp) };
    let err = decode_checkpoint(&bytes, Some(&expected)).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch { .. }));
    let msg = err.to_string();
    assert!(msg.contains("resolution 8") && msg.contains("resolution 16"), "{msg}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad, None), Err(Error::BadMagic { .. })));
    let mut old = bytes;
    old[4] = 9;
    assert!(matches!(decode_checkpoint(&old, None), Err(Error::Version { found: 9, .. })));
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            inputs: random_frames(8, 6, seed + 2 * i as u64),
            targets: random_frames(8, 6, seed + 2 * i as u64 + 1),
        })
        .collect()
}

#[test]
fn zero_steps_keep_initialization() {
    let mut m = MvpModel::new(small(Variant::Mvp)).unwrap();
    let init = m.params().to_vec();
    let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
    let report = train(&mut m, &samples(2, 0), &samples(1, 50), &cfg).unwrap();
    assert_eq!(report.best_params, init);
    assert_eq!(m.params(), &init[..]);
    assert!(report.log.is_empty());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = TrainConfig {
        steps: 12,
        batch_size: 2,
        log_every: 4,
        eval_every: 6,
        adam: mvp_core::numerics::AdamConfig { lr: 3e-3, ..Default::default() },
        ..TrainConfig::default()
    };
    let (train_set, val_set) = (samples(3, 0), samples(1, 100));
    let run = || {
        let mut m = MvpModel::new(small(Variant::Mvp)).unwrap();
        train(&mut m, &train_set, &val_set, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.to_csv(), b.to_csv());
    assert!(a.to_csv().starts_with("step,split,loss,jaccard\n"));
    let train_rows: Vec<_> = a.log.iter().filter(|r| r.split == "train").collect();
    assert_eq!(train_rows.len(), 3);
    assert_eq!(a.log.iter().filter(|r| r.split == "val").count(), 2);
    assert!(a.best_val_jaccard.is_some());
    assert!([6, 12].contains(&a.best_step));
}

#[test]
fn train_views_truncates_sequences() {
    let mut m = MvpModel::new(ModelConfig { train_views: 3, ..small(Variant::Mvt) }).unwrap();
    let cfg = TrainConfig { steps: 1, batch_size: 1, ..TrainConfig::default() };
    let report = train(&mut m, &samples(1, 0), &[], &cfg).unwrap();
    assert_eq!(report.best_step, 1);
    assert_eq!(report.best_params, m.params());
}
