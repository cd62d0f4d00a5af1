use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{render_depth_view, Camera, Intrinsics};
use super::objects::SolidObject;
use crate::voxel::{voxelize, VoxelGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    CameraPan,
    TwoObjectPan,
    ObjectHiding,
    ObjectReveal,
    SlideBehind,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::CameraPan,
        Protocol::TwoObjectPan,
        Protocol::ObjectHiding,
        Protocol::ObjectReveal,
        Protocol::SlideBehind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::CameraPan => "camera_pan",
            Protocol::TwoObjectPan => "two_object_pan",
            Protocol::ObjectHiding => "object_hiding",
            Protocol::ObjectReveal => "object_reveal",
            Protocol::SlideBehind => "slide_behind",
        }
    }

    pub fn objects_per_scene(self) -> usize {
        match self {
            Protocol::TwoObjectPan | Protocol::SlideBehind => 2,
            _ => 1,
        }
    }

    /// Fraction of the object's visible columns behind the curtain at frame `i`.
    ///
    /// The hiding sweep starts uncovered and reaches full cover with the last
    /// `max(1, L/4)` frames fully occluded; reveal plays the same schedule
    /// backwards. Other protocols have no curtain.
    pub fn curtain_coverage(self, i: usize, len: usize) -> f64 {
        let hiding = |i: usize| {
            let tail = (len / 4).max(1);
            let sweep = len.saturating_sub(tail);
            if sweep == 0 {
                1.0
            } else {
                (i as f64 / sweep as f64).min(1.0)
            }
        };
        match self {
            Protocol::ObjectHiding => hiding(i),
            Protocol::ObjectReveal => hiding(len - 1 - i),
            _ => 0.0,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownProtocol(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub resolution: usize,
    /// Side of the cubic grid extent, meters.
    pub extent: f64,
    pub seq_len: usize,
    pub intrinsics: Intrinsics,
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            extent: 0.30,
            seq_len: 12,
            intrinsics: Intrinsics::default(),
            camera_distance: 0.5,
            camera_elevation_deg: 30.0,
        }
    }
}

impl SceneConfig {
    pub fn voxel_size(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    fn camera_at(&self, centroid: Point3<f64>, azimuth: f64) -> Result<Camera> {
        let e = self.camera_elevation_deg.to_radians();
        let offset = Vector3::new(e.cos() * azimuth.cos(), e.cos() * azimuth.sin(), e.sin()) * self.camera_distance;
        Camera::look_at(centroid + offset, centroid)
    }
}

#[derive(Debug, Clone)]
pub struct ViewSequence {
    pub protocol: Protocol,
    /// Partial inputs, one per frame, each in its own camera frame.
    pub frames: Vec<VoxelGrid>,
    /// Full occupancy in the same grid as the matching frame.
    pub targets: Vec<VoxelGrid>,
    pub cameras: Vec<Camera>,
    pub coverage: Vec<f64>,
    /// Surface points that fell outside the grid, per frame.
    pub dropped: Vec<usize>,
    /// Mean surface points per occupied input voxel, per frame.
    pub points_per_voxel: Vec<f64>,
}

impl ViewSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Grid aligned with the camera axes, centered on `centroid`.
fn camera_grid(cfg: &SceneConfig, camera: &Camera, centroid: Point3<f64>) -> Result<VoxelGrid> {
    let c = camera.to_camera(&centroid);
    VoxelGrid::zeros(cfg.resolution, c - Vector3::repeat(cfg.extent / 2.0), cfg.voxel_size())
}

fn solid_target(grid: &VoxelGrid, camera: &Camera, objects: &[SolidObject]) -> Result<VoxelGrid> {
    let r = grid.resolution();
    let mut out = grid.clone();
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let w = camera.to_world(&grid.voxel_center(x, y, z));
                if objects.iter().any(|o| o.contains(&w)) {
                    out.set(x, y, z, 1.0)?;
                }
            }
        }
    }
    Ok(out)
}

fn union(a: &VoxelGrid, b: &VoxelGrid) -> Result<VoxelGrid> {
    let values: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| x.max(y) as f64)
        .collect();
    a.with_values(&values)
}

/// Removes the leftmost `coverage` share of the occupied x columns.
fn apply_curtain(grid: &VoxelGrid, coverage: f64) -> Result<VoxelGrid> {
    if coverage <= 0.0 {
        return Ok(grid.clone());
    }
    let r = grid.resolution();
    let mut columns = (0..r).filter(|&x| (0..r * r).any(|yz| grid.get(x, yz % r, yz / r) > 0.0));
    let Some(first) = columns.next() else {
        return Ok(grid.clone());
    };
    let last = columns.next_back().unwrap_or(first);
    let covered = ((last - first + 1) as f64 * coverage).ceil() as usize;
    let mut out = grid.clone();
    for x in first..(first + covered).min(r) {
        for yz in 0..r * r {
            out.set(x, yz % r, yz / r, 0.0)?;
        }
    }
    Ok(out)
}

struct Frame {
    input: VoxelGrid,
    target: VoxelGrid,
    dropped: usize,
    points_per_voxel: f64,
}

fn observe(cfg: &SceneConfig, camera: &Camera, objects: &[SolidObject], centroid: Point3<f64>) -> Result<Frame> {
    let grid = camera_grid(cfg, camera, centroid)?;
    let cloud = render_depth_view(objects, camera, &cfg.intrinsics)?;
    let v = voxelize(&cloud, cfg.resolution, grid.origin(), grid.voxel_size())?;
    let solid = solid_target(&grid, camera, objects)?;
    // Surface voxels seen from this camera count as occupied in the target.
    let target = union(&solid, &v.grid)?;
    Ok(Frame {
        input: v.grid,
        target,
        dropped: v.dropped,
        points_per_voxel: v.points_per_voxel,
    })
}

/// Generates one sequence of `cfg.seq_len` views under `protocol`.
///
/// `objects` are taken as centered on the world origin (as produced by
/// `gen_object`); the protocol places them. Two-object protocols need
/// exactly two objects, the others exactly one.
pub fn make_sequence(protocol: Protocol, objects: &[SolidObject], cfg: &SceneConfig, seed: u64) -> Result<ViewSequence> {
    if cfg.seq_len == 0 {
        return Err(Error::EmptySequence);
    }
    if objects.len() != protocol.objects_per_scene() {
        return Err(Error::InvalidArgument(format!(
            "{protocol} needs {} object(s), got {}",
            protocol.objects_per_scene(),
            objects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.seq_len;
    let azimuth0 = rng.random_range(0.0..2.0 * PI);
    let mut seq = ViewSequence {
        protocol,
        frames: Vec::with_capacity(len),
        targets: Vec::with_capacity(len),
        cameras: Vec::with_capacity(len),
        coverage: Vec::with_capacity(len),
        dropped: Vec::with_capacity(len),
        points_per_voxel: Vec::with_capacity(len),
    };
    let push = |seq: &mut ViewSequence, camera: Camera, frame: Frame, coverage: f64| -> Result<()> {
        seq.frames.push(apply_curtain(&frame.input, coverage)?);
        seq.targets.push(frame.target);
        seq.cameras.push(camera);
        seq.coverage.push(coverage);
        seq.dropped.push(frame.dropped);
        seq.points_per_voxel.push(frame.points_per_voxel);
        Ok(())
    };
    match protocol {
        Protocol::CameraPan | Protocol::TwoObjectPan => {
            let scene: Vec<SolidObject> = if protocol == Protocol::TwoObjectPan {
                let dir = rng.random_range(0.0..2.0 * PI);
                let sep = rng.random_range(0.04..0.06);
                let offset = Vector3::new(dir.cos(), dir.sin(), 0.0) * sep;
                vec![
                    objects[0].clone().scaled(0.6).translated(offset),
                    objects[1].clone().scaled(0.6).translated(-offset),
                ]
            } else {
                objects.to_vec()
            };
            let centroid = Point3::origin();
            for i in 0..len {
                let camera = cfg.camera_at(centroid, azimuth0 + 2.0 * PI * i as f64 / len as f64)?;
                let frame = observe(cfg, &camera, &scene, centroid)?;
                push(&mut seq, camera, frame, 0.0)?;
            }
        }
        Protocol::ObjectHiding | Protocol::ObjectReveal => {
            let centroid = Point3::origin();
            let camera = cfg.camera_at(centroid, azimuth0)?;
            let frame = observe(cfg, &camera, objects, centroid)?;
            for i in 0..len {
                let f = Frame {
                    input: frame.input.clone(),
                    target: frame.target.clone(),
                    ..frame
                };
                push(&mut seq, camera, f, protocol.curtain_coverage(i, len))?;
            }
        }
        Protocol::SlideBehind => {
            let occluder = objects[0].clone().scaled(0.7);
            let mover = objects[1].clone().scaled(0.45);
            let camera = cfg.camera_at(Point3::origin(), azimuth0)?;
            let sight = (Point3::origin() - camera.position()).normalize();
            let right = sight.cross(&Vector3::z()).normalize();
            let standoff = rng.random_range(0.08..0.12);
            let start = rng.random_range(0.05..0.08) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let track = sight * standoff;
            let centroid = Point3::from(track / 2.0);
            for i in 0..len {
                let s = if len == 1 { 0.0 } else { i as f64 / (len - 1) as f64 };
                let x = start * (1.0 - 2.0 * s);
                let scene = [occluder.clone(), mover.clone().translated(track + right * x)];
                let frame = observe(cfg, &camera, &scene, centroid)?;
                push(&mut seq, camera, frame, 0.0)?;
            }
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::super::objects::{gen_object, ObjectKind};
    use super::*;

    fn cfg(len: usize) -> SceneConfig {
        SceneConfig {
            seq_len: len,
            ..Default::default()
        }
    }

    #[test]
    fn pan_steps_are_equal() {
        let obj = gen_object(ObjectKind::Box, 3);
        let s = make_sequence(Protocol::CameraPan, &[obj], &cfg(12), 1).unwrap();
        for w in s.cameras.windows(2) {
            let (a, b) = (w[0].position(), w[1].position());
            let ang = a.xy().coords.normalize().dot(&b.xy().coords.normalize()).acos();
            assert!((ang.to_degrees() - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn partial_inputs_inside_targets() {
        let objs = [gen_object(ObjectKind::LShape, 1), gen_object(ObjectKind::Cylinder, 2)];
        for p in Protocol::ALL {
            let scene = &objs[..p.objects_per_scene()];
            let s = make_sequence(p, scene, &cfg(6), 9).unwrap();
            assert_eq!(s.len(), 6);
            for (f, t) in s.frames.iter().zip(&s.targets) {
                assert!(f.values().iter().zip(t.values()).all(|(&a, &b)| a <= b), "{p}");
                assert!(t.occupied_count() > 0);
            }
        }
    }

    #[test]
    fn hiding_ends_empty_with_fixed_target() {
        let obj = gen_object(ObjectKind::Sphere, 4);
        let s = make_sequence(Protocol::ObjectHiding, std::slice::from_ref(&obj), &cfg(12), 2).unwrap();
        assert!(s.frames[0].occupied_count() > 0);
        assert_eq!(s.frames[11].occupied_count(), 0);
        assert!(s.targets.iter().all(|t| t == &s.targets[0]));
        let counts: Vec<usize> = s.frames.iter().map(|f| f.occupied_count()).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));

        let r = make_sequence(Protocol::ObjectReveal, &[obj], &cfg(12), 2).unwrap();
        assert_eq!(r.frames[0].occupied_count(), 0);
        // Reversing the hiding schedule gives the reveal masks.
        for i in 0..12 {
            assert_eq!(r.frames[i], s.frames[11 - i]);
        }
    }

    #[test]
    fn coverage_schedule() {
        let c: Vec<f64> = (0..12).map(|i| Protocol::ObjectHiding.curtain_coverage(i, 12)).collect();
        assert_eq!(c[0], 0.0);
        assert_eq!(c.iter().filter(|&&x| x == 1.0).count(), 3);
        assert_eq!(Protocol::ObjectHiding.curtain_coverage(0, 1), 1.0);
        assert_eq!(Protocol::CameraPan.curtain_coverage(3, 12), 0.0);
    }

    #[test]
    fn deterministic_and_validated() {
        let obj = gen_object(ObjectKind::Union, 5);
        let a = make_sequence(Protocol::CameraPan, std::slice::from_ref(&obj), &cfg(3), 7).unwrap();
        let b = make_sequence(Protocol::CameraPan, std::slice::from_ref(&obj), &cfg(3), 7).unwrap();
        assert_eq!(a.frames, b.frames);
        assert!(make_sequence(Protocol::TwoObjectPan, std::slice::from_ref(&obj), &cfg(3), 7).is_err());
        assert!(make_sequence(Protocol::CameraPan, &[obj], &cfg(0), 7).is_err());
        assert!(matches!("spin".parse::<Protocol>(), Err(Error::UnknownProtocol(_))));
        assert_eq!("slide_behind".parse::<Protocol>().unwrap(), Protocol::SlideBehind);
    }

    #[test]
    fn slide_mover_gets_occluded() {
        let objs = [gen_object(ObjectKind::Box, 11), gen_object(ObjectKind::Sphere, 12)];
        let s = make_sequence(Protocol::SlideBehind, &objs, &cfg(12), 3).unwrap();
        // Targets keep both objects, so the target never shrinks below the
        // visible input while the mover passes behind the occluder.
        let vis: Vec<usize> = s.frames.iter().map(|f| f.occupied_count()).collect();
        let tgt: Vec<usize> = s.targets.iter().map(|f| f.occupied_count()).collect();
        assert!(vis.iter().zip(&tgt).all(|(v, t)| v < t));
        let hidden: Vec<usize> = tgt.iter().zip(&vis).map(|(t, v)| t - v).collect();
        assert!(hidden.iter().max() > hidden.iter().min());
    }
}
