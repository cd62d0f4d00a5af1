use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::tables::TRI_TABLE;
use super::{Mesh, VoxelGrid};
use crate::{Error, Result};

pub const DEFAULT_ISOLEVEL: f64 = 0.5;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 0, 1],
    [0, 0, 1],
    [0, 1, 0],
    [1, 1, 0],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Extracts the `isolevel` surface of `grid`, sampled at voxel centers.
///
/// The field is surrounded by a one-voxel zero border first, so solids that
/// touch the grid boundary still produce closed meshes. Vertices on shared
/// cell edges are merged.
pub fn marching_cubes(grid: &VoxelGrid, isolevel: f64) -> Result<Mesh> {
    if !(isolevel > 0.0 && isolevel < 1.0) {
        return Err(Error::InvalidArgument(format!("isolevel {isolevel} not in (0, 1)")));
    }
    let r = grid.resolution();
    let p = r + 2;
    let field = |x: usize, y: usize, z: usize| -> f64 {
        if x == 0 || y == 0 || z == 0 || x > r || y > r || z > r {
            0.0
        } else {
            grid.get(x - 1, y - 1, z - 1) as f64
        }
    };
    // Padded sample (x, y, z) sits at the center of original voxel (x-1, y-1, z-1).
    let position = |c: [usize; 3]| -> Point3<f64> {
        let offset = Vector3::new(c[0] as f64 - 0.5, c[1] as f64 - 0.5, c[2] as f64 - 0.5);
        grid.origin() + offset * grid.voxel_size()
    };

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    for z in 0..p - 1 {
        for y in 0..p - 1 {
            for x in 0..p - 1 {
                let corner = CORNERS.map(|o| [x + o[0], y + o[1], z + o[2]]);
                let vals = corner.map(|c| field(c[0], c[1], c[2]));
                let mut case = 0usize;
                for (i, &v) in vals.iter().enumerate() {
                    if v >= isolevel {
                        case |= 1 << i;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut cell = [usize::MAX; 12];
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3) {
                    if tri[0] == 255 {
                        break;
                    }
                    let mut idx = [0; 3];
                    for (slot, &e) in idx.iter_mut().zip(tri) {
                        let e = e as usize;
                        if cell[e] == usize::MAX {
                            let (a, b) = EDGES[e];
                            let (ca, cb) = (corner[a], corner[b]);
                            let lo = if ca <= cb { ca } else { cb };
                            let axis = (0..3).find(|&k| ca[k] != cb[k]).expect("axis-aligned edge");
                            let key = ((lo[2] * p + lo[1]) * p + lo[0], axis);
                            cell[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                let t = (isolevel - vals[a]) / (vals[b] - vals[a]);
                                let pa = position(ca);
                                vertices.push(pa + (position(cb) - pa) * t);
                                vertices.len() - 1
                            });
                        }
                        *slot = cell[e];
                    }
                    let t = idx;
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
                    let area2 = (b - a).cross(&(c - a)).norm();
                    if area2 <= 1e-12 * grid.voxel_size() * grid.voxel_size() {
                        continue;
                    }
                    triangles.push(t);
                }
            }
        }
    }
    Mesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r: usize) -> VoxelGrid {
        VoxelGrid::zeros(r, Point3::origin(), 1.0).unwrap()
    }

    #[test]
    fn empty_and_full_fields() {
        assert!(marching_cubes(&grid(8), 0.5).unwrap().is_empty());
        // A full grid still closes against the zero border.
        let full = VoxelGrid::from_values(4, vec![1.0; 64], Point3::origin(), 1.0).unwrap();
        let m = marching_cubes(&full, 0.5).unwrap();
        assert!(m.is_closed_manifold());
    }

    #[test]
    fn single_voxel_is_a_sphere() {
        let mut g = grid(5);
        g.set(2, 2, 2, 1.0).unwrap();
        let m = marching_cubes(&g, 0.5).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed_manifold());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn solid_cube_volume() {
        let mut g = VoxelGrid::zeros(16, Point3::origin(), 0.02).unwrap();
        for z in 5..10 {
            for y in 5..10 {
                for x in 5..10 {
                    g.set(x, y, z, 1.0).unwrap();
                }
            }
        }
        let m = marching_cubes(&g, 0.5).unwrap();
        let expected = (5.0 * g.voxel_size()).powi(3);
        let rel = (m.signed_volume() - expected).abs() / expected;
        assert!(rel < 0.15, "{rel}");
        assert!(m.is_closed_manifold());
    }

    #[test]
    fn isolevel_bounds() {
        assert!(marching_cubes(&grid(2), 0.0).is_err());
        assert!(marching_cubes(&grid(2), 1.0).is_err());
    }
}
