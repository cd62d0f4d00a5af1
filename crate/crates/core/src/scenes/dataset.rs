use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objects::{gen_object, ObjectKind, SolidObject};
use super::protocols::{make_sequence, Protocol, SceneConfig, ViewSequence};
use crate::voxel::{read_vxg, write_vxg, VoxelGrid};
use crate::{Error, ExecMode, Result};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub protocol: Protocol,
    pub num_objects: usize,
    pub sequences_per_object: usize,
    /// Train / validation / test shares of the objects.
    pub split: [f64; 3],
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::CameraPan,
            num_objects: 10,
            sequences_per_object: 2,
            split: [0.8, 0.1, 0.1],
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: usize,
    pub kind: ObjectKind,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub objects: Vec<usize>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub protocol: Protocol,
    pub resolution: usize,
    pub seq_len: usize,
    pub scene: SceneConfig,
    pub seed: u64,
    pub objects: Vec<ObjectEntry>,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn sequences_in(&self, split: Split) -> impl Iterator<Item = (usize, &SequenceEntry)> {
        self.sequences.iter().enumerate().filter(move |(_, s)| s.split == split)
    }

    pub fn object(&self, id: usize) -> Result<SolidObject> {
        let e = self
            .objects
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest has no object {id}")))?;
        Ok(gen_object(e.kind, e.seed))
    }
}

/// A manifest plus its generated sequences (same order).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<ViewSequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ViewSequence> {
        self.manifest.sequences_in(split).map(|(i, _)| &self.sequences[i]).collect()
    }
}

/// Independent seed for item `index` of sub-stream `stream`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 2);
    rng.next_u64()
}

/// Assigns each of `n` objects to a split.
///
/// Validation and test each get `round(share · n)` objects, at least one
/// when their share is positive; train takes the rest and must not end up
/// empty.
pub fn split_objects(n: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let share = |r: f64| if r > 0.0 { ((r * n as f64).round() as usize).max(1) } else { 0 };
    let (val, test) = (share(ratios[1]), share(ratios[2]));
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < needed || val + test >= n && ratios[0] > 0.0 {
        return Err(Error::InvalidArgument(format!("{n} objects cannot fill splits {ratios:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    for (rank, &obj) in order.iter().enumerate() {
        if rank < val {
            out[obj] = Split::Val;
        } else if rank < val + test {
            out[obj] = Split::Test;
        }
    }
    Ok(out)
}

pub fn build_manifest(cfg: &DatasetConfig) -> Result<DatasetManifest> {
    if cfg.sequences_per_object == 0 {
        return Err(Error::InvalidArgument("sequences_per_object must be at least 1".into()));
    }
    if cfg.protocol.objects_per_scene() == 2 && cfg.num_objects < 2 {
        return Err(Error::InvalidArgument(format!("{} needs at least 2 objects", cfg.protocol)));
    }
    let splits = split_objects(cfg.num_objects, cfg.split, derive_seed(cfg.seed, 0, 0))?;
    let objects: Vec<ObjectEntry> = (0..cfg.num_objects)
        .map(|id| ObjectEntry {
            id,
            kind: ObjectKind::ALL[id % ObjectKind::ALL.len()],
            seed: derive_seed(cfg.seed, 1, id as u64),
            split: splits[id],
        })
        .collect();
    let mut sequences = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let members: Vec<usize> = objects.iter().filter(|o| o.split == split).map(|o| o.id).collect();
        for (pos, &obj) in members.iter().enumerate() {
            for k in 0..cfg.sequences_per_object {
                let mut ids = vec![obj];
                if cfg.protocol.objects_per_scene() == 2 {
                    // Partners come from the same split; a lone object pairs with itself.
                    ids.push(members[(pos + 1 + k) % members.len()]);
                }
                let index = sequences.len();
                sequences.push(SequenceEntry {
                    id: format!("{}_{index:05}", cfg.protocol),
                    objects: ids,
                    split,
                    seed: derive_seed(cfg.seed, 2, index as u64),
                });
            }
        }
    }
    Ok(DatasetManifest {
        version: GENERATOR_VERSION,
        protocol: cfg.protocol,
        resolution: cfg.scene.resolution,
        seq_len: cfg.scene.seq_len,
        scene: cfg.scene,
        seed: cfg.seed,
        objects,
        sequences,
    })
}

pub fn generate_sequence(manifest: &DatasetManifest, entry: &SequenceEntry) -> Result<ViewSequence> {
    let objects = entry
        .objects
        .iter()
        .map(|&id| manifest.object(id))
        .collect::<Result<Vec<_>>>()?;
    make_sequence(manifest.protocol, &objects, &manifest.scene, entry.seed)
}

pub fn generate(cfg: &DatasetConfig, exec: ExecMode) -> Result<Dataset> {
    let manifest = build_manifest(cfg)?;
    let sequences = exec
        .map(manifest.sequences.len(), |i| generate_sequence(&manifest, &manifest.sequences[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, sequences })
}

fn grid_name(seq: &str, frame: usize, kind: &str) -> String {
    format!("{seq}_{frame}_{kind}.vxg")
}

/// Writes `manifest.json` and `grids/{seq_id}_{frame}_{in|gt}.vxg`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let grids = dir.join("grids");
    std::fs::create_dir_all(&grids).map_err(|e| Error::io(&grids, e))?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&data.manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for (entry, seq) in data.manifest.sequences.iter().zip(&data.sequences) {
        for (i, (f, t)) in seq.frames.iter().zip(&seq.targets).enumerate() {
            write_vxg(grids.join(grid_name(&entry.id, i, "in")), f)?;
            write_vxg(grids.join(grid_name(&entry.id, i, "gt")), t)?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.version != GENERATOR_VERSION {
        return Err(Error::Version {
            expected: GENERATOR_VERSION,
            found: m.version,
        });
    }
    Ok(m)
}

/// Grids of one stored sequence as `(inputs, targets)`.
pub fn read_sequence_grids(dir: &Path, manifest: &DatasetManifest, entry: &SequenceEntry) -> Result<(Vec<VoxelGrid>, Vec<VoxelGrid>)> {
    let grids = dir.join("grids");
    let mut inputs = Vec::with_capacity(manifest.seq_len);
    let mut targets = Vec::with_capacity(manifest.seq_len);
    for i in 0..manifest.seq_len {
        for (kind, out) in [("in", &mut inputs), ("gt", &mut targets)] {
            let g = read_vxg(grids.join(grid_name(&entry.id, i, kind)))?;
            if g.resolution() != manifest.resolution {
                return Err(Error::ResolutionMismatch(format!(
                    "{} frame {i} is {}³, manifest says {}³",
                    entry.id,
                    g.resolution(),
                    manifest.resolution
                )));
            }
            out.push(g);
        }
    }
    Ok((inputs, targets))
}
