use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mvp_core::attention::KernelKind;
use mvp_core::bench::{attention_throughput, BenchConfig};
use mvp_core::metrics::{evaluate, EvalConfig, MetricReport, Predictor, SequenceInput};
use mvp_core::model::{load_checkpoint, save_checkpoint, train as train_model, ModelConfig, MvpModel, Sample, TrainConfig, Variant};
use mvp_core::scenes::{generate, read_manifest, read_sequence_grids, write_dataset, DatasetConfig, DatasetManifest, Protocol, Split};
use mvp_core::voxel::{marching_cubes, write_off, write_pgm, write_vxg, VoxelGrid};
use mvp_core::{Error, ExecMode};

use crate::config::{explicitly_set, layered, prepare_out, usage, write_json, write_provenance, CliError, CliResult};
use crate::Common;

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Number of procedural objects.
    #[arg(long)]
    objects: Option<usize>,
    /// Grid resolution.
    #[arg(long)]
    res: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    sequences_per_object: Option<usize>,
}

pub fn gen_data(a: GenDataArgs, argv: &[String]) -> CliResult<()> {
    let c = &a.common;
    let mut cfg: DatasetConfig = layered(&DatasetConfig::default(), c.config.as_deref(), &c.overrides, &["scene"])?;
    cfg.seed = c.seed;
    if let Some(p) = a.protocol {
        cfg.protocol = p;
    }
    if let Some(n) = a.objects {
        cfg.num_objects = n;
    }
    if let Some(r) = a.res {
        cfg.scene.resolution = r;
    }
    if let Some(l) = a.views {
        cfg.scene.seq_len = l;
    }
    if let Some(k) = a.sequences_per_object {
        cfg.sequences_per_object = k;
    }
    // Validate before touching the output directory.
    mvp_core::scenes::build_manifest(&cfg)?;
    prepare_out(&c.out, c.force)?;
    let data = generate(&cfg, ExecMode::default())?;
    write_dataset(&c.out, &data)?;
    write_provenance(&c.out, argv, "gen-data", &cfg, c.seed)?;
    let m = &data.manifest;
    let count = |s: Split| m.objects.iter().filter(|o| o.split == s).count();
    println!(
        "{}: {} objects (train {}, val {}, test {}), {} sequences, {} frames at {}³ -> {}",
        m.protocol,
        m.objects.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        m.sequences.len(),
        m.sequences.len() * m.seq_len,
        m.resolution,
        c.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Mvp,
    Mvt,
    Lstm,
    SingleView,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Mvp => Variant::Mvp,
            VariantArg::Mvt => Variant::Mvt,
            VariantArg::Lstm => Variant::Lstm,
            VariantArg::SingleView => Variant::SingleView,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Leading frames of each sequence used for training (3, 6 or 12).
    #[arg(long)]
    train_views: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// `(sequence id, inputs, targets)`.
type LoadedSequence = (String, Vec<VoxelGrid>, Vec<VoxelGrid>);

fn load_split(dir: &Path, m: &DatasetManifest, split: Split) -> CliResult<Vec<LoadedSequence>> {
    m.sequences_in(split)
        .map(|(_, e)| {
            let (inputs, targets) = read_sequence_grids(dir, m, e)?;
            Ok((e.id.clone(), inputs, targets))
        })
        .collect()
}

pub fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let c = &a.common;
    let mut cfg: RunConfig = layered(&RunConfig::default(), c.config.as_deref(), &c.overrides, &["model", "train"])?;
    let manifest = read_manifest(&a.data)?;
    if explicitly_set(c.config.as_deref(), &c.overrides, "model", "resolution")? {
        if cfg.model.resolution != manifest.resolution {
            return Err(CliError::Core(Error::ResolutionMismatch(format!(
                "config resolution {} does not match dataset resolution {}",
                cfg.model.resolution, manifest.resolution
            ))));
        }
    } else {
        cfg.model.resolution = manifest.resolution;
    }
    cfg.model.seed = c.seed;
    cfg.train.seed = c.seed;
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(t) = a.train_views {
        cfg.model.train_views = t;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.adam.lr = lr;
    }
    cfg.model.validate()?;
    if cfg.model.train_views > manifest.seq_len {
        log::warn!(
            "train_views {} exceeds the dataset's {} frames; using all frames",
            cfg.model.train_views,
            manifest.seq_len
        );
    }
    let to_samples = |v: Vec<LoadedSequence>| -> Vec<Sample> {
        v.into_iter().map(|(_, inputs, targets)| Sample { inputs, targets }).collect()
    };
    let train_set = to_samples(load_split(&a.data, &manifest, Split::Train)?);
    let val_set = to_samples(load_split(&a.data, &manifest, Split::Val)?);
    if train_set.is_empty() {
        return Err(usage(format!("{} has no training sequences", a.data.display())));
    }
    prepare_out(&c.out, c.force)?;
    if cfg.model.variant == Variant::SingleView {
        println!("note: single_view predicts each frame on its own; sequence state is unused");
    }
    let mut model = MvpModel::new(cfg.model.clone())?;
    println!(
        "training {} ({} parameters) on {} sequences, validating on {}, {} steps",
        cfg.model.variant,
        model.param_count(),
        train_set.len(),
        val_set.len(),
        cfg.train.steps
    );
    let report = train_model(&mut model, &train_set, &val_set, &cfg.train)?;
    std::fs::write(c.out.join("metrics.csv"), report.to_csv()).map_err(|e| CliError::Core(Error::io(c.out.join("metrics.csv"), e)))?;
    let final_path = c.out.join("last.mvpc");
    save_checkpoint(&model, &final_path)?;
    model.set_params(report.best_params.clone())?;
    save_checkpoint(&model, &c.out.join("model.mvpc"))?;
    write_json(&c.out.join("config.json"), &cfg)?;
    write_provenance(&c.out, argv, "train", &cfg, c.seed)?;
    match report.best_val_jaccard {
        Some(j) => println!("best validation Jaccard {j:.4} at step {}", report.best_step),
        None => println!("no validation split; kept the final weights"),
    }
    if report.skipped_steps > 0 {
        println!("{} non-finite steps skipped", report.skipped_steps);
    }
    println!("checkpoint written to {}", c.out.join("model.mvpc").display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Export {
    Meshes,
    Grids,
    Slices,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Predict the targets themselves (pipeline check).
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, value_delimiter = ',')]
    export: Vec<Export>,
}

#[derive(Debug, Serialize)]
struct OccludedSummary {
    frames: usize,
    jaccard: f64,
    fscore: f64,
}

fn occluded_summary(report: &MetricReport, protocol: Protocol, seq_len: usize) -> Option<OccludedSummary> {
    let rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| protocol == Protocol::ObjectHiding && protocol.curtain_coverage(r.frame, seq_len) >= 1.0)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(OccludedSummary {
        frames: rows.len(),
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
        fscore: rows.iter().map(|r| r.fscore).sum::<f64>() / n,
    })
}

fn export(out: &Path, kinds: &[Export], report: &MetricReport, seqs: &[SequenceInput<'_>], iso: f64) -> CliResult<()> {
    for kind in kinds {
        let dir = out.join(match kind {
            Export::Meshes => "meshes",
            Export::Grids => "grids",
            Export::Slices => "slices",
        });
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Core(Error::io(&dir, e)))?;
        for (seq, preds) in seqs.iter().zip(&report.predictions) {
            for (f, (p, t)) in preds.iter().zip(seq.targets).enumerate() {
                let stem = format!("{}_{f:03}", seq.id);
                match kind {
                    Export::Meshes => write_off(dir.join(format!("{stem}.off")), &marching_cubes(p, iso)?)?,
                    Export::Grids => {
                        write_vxg(dir.join(format!("{stem}_pred.vxg")), p)?;
                        write_vxg(dir.join(format!("{stem}_gt.vxg")), t)?;
                    }
                    Export::Slices => {
                        write_pgm(dir.join(format!("{stem}_pred.pgm")), p)?;
                        write_pgm(dir.join(format!("{stem}_gt.pgm")), t)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let c = &a.common;
    let mut cfg: EvalConfig = layered(&EvalConfig::default(), c.config.as_deref(), &c.overrides, &[])?;
    cfg.seed = c.seed;
    let manifest = read_manifest(&a.data)?;
    if manifest.sequences_in(a.split).next().is_none() {
        return Err(CliError::Core(Error::InvalidArgument(format!(
            "dataset {} has no {} sequences",
            a.data.display(),
            a.split
        ))));
    }
    let model = match &a.checkpoint {
        Some(path) => {
            let m = load_checkpoint(path, None)?;
            if m.config().resolution != manifest.resolution {
                return Err(CliError::Core(Error::ResolutionMismatch(format!(
                    "checkpoint resolution {} does not match dataset resolution {}",
                    m.config().resolution,
                    manifest.resolution
                ))));
            }
            Some(m)
        }
        None => None,
    };
    let loaded = load_split(&a.data, &manifest, a.split)?;
    prepare_out(&c.out, c.force)?;
    let seqs: Vec<SequenceInput<'_>> = loaded
        .iter()
        .map(|(id, inputs, targets)| SequenceInput {
            id: id.clone(),
            split: a.split.to_string(),
            inputs,
            targets,
        })
        .collect();
    let predictor = match &model {
        Some(m) => Predictor::Model(m),
        None => Predictor::Oracle,
    };
    let report = evaluate(predictor, &seqs, &cfg, ExecMode::default(), !a.export.is_empty())?;
    report.write_csv(&c.out.join("frames.csv"))?;
    let occluded = occluded_summary(&report, manifest.protocol, manifest.seq_len);
    let summary = report.summary();
    write_json(
        &c.out.join("summary.json"),
        &json!({ "splits": summary, "fully_occluded": occluded }),
    )?;
    export(&c.out, &a.export, &report, &seqs, cfg.isolevel)?;
    let source = match &a.checkpoint {
        Some(p) => p.display().to_string(),
        None => "oracle".into(),
    };
    write_provenance(
        &c.out,
        argv,
        "eval",
        &json!({ "eval": cfg, "checkpoint": source, "data": a.data, "split": a.split, "model": model.as_ref().map(|m| m.config()) }),
        c.seed,
    )?;
    for (split, s) in &summary {
        println!(
            "{split}: {} sequences, {} frames, Jaccard {:.4}, F-score {:.4} ({} frames without a mesh)",
            s.sequences, s.frames, s.jaccard, s.fscore, s.empty_mesh_frames
        );
    }
    if let Some(o) = occluded {
        println!("fully occluded frames: {}, Jaccard {:.4}", o.frames, o.jaccard);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Softmax,
    Relu,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64, 128, 256])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    trials: usize,
    #[arg(long, value_enum, default_value = "softmax")]
    kernel: KernelArg,
    #[arg(long, env = "MVP_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write `bench.csv` and provenance here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

pub fn bench(a: BenchArgs, argv: &[String]) -> CliResult<()> {
    let cfg = BenchConfig {
        lengths: a.lengths.clone(),
        steps: a.steps,
        trials: a.trials,
        kernel: match a.kernel {
            KernelArg::Softmax => KernelKind::Softmax,
            KernelArg::Relu => KernelKind::Relu,
        },
        seed: a.seed,
        ..BenchConfig::default()
    };
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let report = attention_throughput(&cfg)?;
    println!("{:>6} {:>14} {:>14}", "L", "mvp step (us)", "mvt step (us)");
    for r in &report.rows {
        println!("{:>6} {:>14.3} {:>14.3}", r.length, r.mvp_step * 1e6, r.mvt_step * 1e6);
    }
    let (lo, hi) = (*cfg.lengths.iter().min().expect("non-empty"), *cfg.lengths.iter().max().expect("non-empty"));
    if let Some((p, t)) = report.ratios(lo, hi) {
        println!("time(L={hi}) / time(L={lo}): mvp {p:.2}, mvt {t:.2}");
    }
    if let Some(out) = &a.out {
        let path = out.join("bench.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| CliError::Core(Error::io(&path, e)))?;
        write_provenance(out, argv, "bench", &cfg, a.seed)?;
    }
    Ok(())
}
