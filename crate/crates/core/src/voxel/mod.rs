//! Occupancy grids, voxelization, marching cubes, surface sampling and the
//! `.vxg` file format.
//!
//! A [`VoxelGrid`] stores `r³` occupancy scores with x varying fastest.
//! Voxel `(i, j, k)` spans `origin + [i, i+1) × voxel_size` along each axis
//! and its value is sampled at the voxel center.

mod io;
mod marching;
mod sample;
mod tables;

use nalgebra::{Point3, Vector3};

pub use io::{decode_vxg, encode_vxg, pgm_montage, read_vxg, write_off, write_pgm, write_vxg, MAX_RESOLUTION, VXG_MAGIC};
pub use marching::{marching_cubes, DEFAULT_ISOLEVEL};
pub use sample::sample_surface_points;

use crate::{Error, Result};

/// Scores at or above this count as occupied.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// Metadata is held at `f32` precision so that a file round trip is exact.
fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    values: Vec<f32>,
    origin: Point3<f64>,
    voxel_size: f64,
}

impl VoxelGrid {
    pub fn zeros(resolution: usize, origin: Point3<f64>, voxel_size: f64) -> Result<Self> {
        let n = checked_volume(resolution)?;
        Self::from_values(resolution, vec![0.0; n], origin, voxel_size)
    }

    pub fn from_values(resolution: usize, values: Vec<f32>, origin: Point3<f64>, voxel_size: f64) -> Result<Self> {
        let n = checked_volume(resolution)?;
        if values.len() != n {
            return Err(Error::shape("voxel grid", format!("{} values for resolution {resolution}", values.len())));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel_size must be positive, got {voxel_size}")));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("grid origin".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(Self {
            resolution,
            values,
            origin: origin.map(quantize),
            voxel_size: quantize(voxel_size),
        })
    }

    /// Builds a grid from 64-bit scores (e.g. network output).
    pub fn from_f64(resolution: usize, values: &[f64], origin: Point3<f64>, voxel_size: f64) -> Result<Self> {
        Self::from_values(resolution, values.iter().map(|&v| v as f32).collect(), origin, voxel_size)
    }

    /// Same geometry as `self`, new values.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        Self::from_f64(self.resolution, values, self.origin, self.voxel_size)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("occupancy {v} outside [0, 1]")));
        }
        let i = self.index(x, y, z);
        self.values[i] = v;
        Ok(())
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        self.origin + Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * self.voxel_size
    }

    /// Index of the voxel containing `p`, or `None` outside the grid.
    pub fn locate(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let rel = (p - self.origin) / self.voxel_size;
        let r = self.resolution as f64;
        let mut out = [0; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            if !(f >= 0.0 && f < r) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn binarize(&self, threshold: f64) -> Self {
        let values = self.values.iter().map(|&v| if v as f64 >= threshold { 1.0 } else { 0.0 }).collect();
        Self { values, ..self.clone() }
    }

    pub fn occupied(&self) -> impl Iterator<Item = bool> + '_ {
        self.values.iter().map(|&v| v as f64 >= OCCUPANCY_THRESHOLD)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied().filter(|&o| o).count()
    }

    /// Centers of occupied voxels.
    pub fn occupied_centers(&self) -> PointCloud {
        let r = self.resolution;
        let mut points = Vec::new();
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    if self.get(x, y, z) as f64 >= OCCUPANCY_THRESHOLD {
                        points.push(self.voxel_center(x, y, z));
                    }
                }
            }
        }
        PointCloud { points }
    }

    /// World-space side length of the whole grid.
    pub fn extent(&self) -> f64 {
        self.voxel_size * self.resolution as f64
    }
}

fn checked_volume(r: usize) -> Result<usize> {
    if r == 0 || r > MAX_RESOLUTION {
        return Err(Error::DimensionOverflow(format!("resolution {r} not in 1..={MAX_RESOLUTION}")));
    }
    Ok(r * r * r)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed tetrahedron sum; positive for outward-wound closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i].coords);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_counts(&self) -> std::collections::HashMap<(usize, usize), usize> {
        let mut counts = std::collections::HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed_manifold(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }
}

#[derive(Debug, Clone)]
pub struct Voxelization {
    pub grid: VoxelGrid,
    /// Points that fell outside the grid.
    pub dropped: usize,
    /// Mean number of in-grid points per occupied voxel (0 for an empty grid).
    pub points_per_voxel: f64,
}

/// Marks every voxel that receives at least one point.
pub fn voxelize(cloud: &PointCloud, resolution: usize, origin: Point3<f64>, voxel_size: f64) -> Result<Voxelization> {
    let mut grid = VoxelGrid::zeros(resolution, origin, voxel_size)?;
    let mut dropped = 0;
    let mut inside = 0;
    for p in cloud.points() {
        match grid.locate(p) {
            Some([x, y, z]) => {
                let i = grid.index(x, y, z);
                grid.values[i] = 1.0;
                inside += 1;
            }
            None => dropped += 1,
        }
    }
    let occupied = grid.occupied_count();
    let points_per_voxel = if occupied == 0 { 0.0 } else { inside as f64 / occupied as f64 };
    Ok(Voxelization {
        grid,
        dropped,
        points_per_voxel,
    })
}
