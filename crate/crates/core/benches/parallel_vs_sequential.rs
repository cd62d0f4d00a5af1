use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvp_core::metrics::{evaluate, EvalConfig, Predictor, SequenceInput};
use mvp_core::model::{ModelConfig, MvpModel};
use mvp_core::numerics::{conv3d, Tensor};
use mvp_core::scenes::{generate, DatasetConfig, SceneConfig};
use mvp_core::ExecMode;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn label(m: ExecMode) -> &'static str {
    match m {
        ExecMode::Sequential => "sequential",
        ExecMode::Parallel => "parallel",
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[12, 8, 16, 16, 16], 1.0, &mut rng);
    let w = Tensor::randn(&[16, 8, 3, 3, 3], 0.1, &mut rng);
    let mut g = c.benchmark_group("conv3d");
    for m in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(m)), |b| b.iter(|| conv3d(&x, &w, 2, 1, m).unwrap()));
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let data = generate(
        &DatasetConfig {
            num_objects: 3,
            sequences_per_object: 1,
            scene: SceneConfig { seq_len: 6, ..SceneConfig::default() },
            ..DatasetConfig::default()
        },
        ExecMode::Sequential,
    )
    .unwrap();
    let seq = &data.sequences[0];
    let mut g = c.benchmark_group("loss_and_gradients");
    g.sample_size(10);
    for m in MODES {
        let model = MvpModel::new(ModelConfig::default()).unwrap().with_exec(m);
        let x = model.stack(&seq.frames.iter().collect::<Vec<_>>()).unwrap();
        let y = model.stack(&seq.targets.iter().collect::<Vec<_>>()).unwrap();
        g.bench_function(BenchmarkId::from_parameter(label(m)), |b| {
            b.iter(|| model.loss_and_gradients(&x, &y, seq.frames.len()).unwrap())
        });
    }
    g.finish();
}

fn dataset_and_eval(c: &mut Criterion) {
    let cfg = DatasetConfig {
        num_objects: 6,
        sequences_per_object: 1,
        scene: SceneConfig { seq_len: 4, ..SceneConfig::default() },
        ..DatasetConfig::default()
    };
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    for m in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(m)), |b| b.iter(|| generate(&cfg, m).unwrap()));
    }
    g.finish();

    let data = generate(&cfg, ExecMode::Sequential).unwrap();
    let seqs: Vec<SequenceInput<'_>> = data
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| SequenceInput {
            id: i.to_string(),
            split: "train".into(),
            inputs: &s.frames,
            targets: &s.targets,
        })
        .collect();
    let mut g = c.benchmark_group("evaluate_oracle");
    g.sample_size(10);
    for m in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(m)), |b| {
            b.iter(|| evaluate(Predictor::Oracle, &seqs, &EvalConfig::default(), m, false).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, training_step, dataset_and_eval);
criterion_main!(benches);
