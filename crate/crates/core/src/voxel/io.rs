use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use super::{Mesh, VoxelGrid};
use crate::{Error, Result};

pub const VXG_MAGIC: [u8; 4] = *b"VXG1";
/// Largest resolution accepted when reading or building a grid.
pub const MAX_RESOLUTION: usize = 1024;
const HEADER_LEN: usize = 4 + 4 + 12 + 4;

pub fn encode_vxg(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.len());
    out.extend_from_slice(&VXG_MAGIC);
    out.extend_from_slice(&(grid.resolution() as u32).to_le_bytes());
    for c in grid.origin().iter() {
        out.extend_from_slice(&(*c as f32).to_le_bytes());
    }
    out.extend_from_slice(&(grid.voxel_size() as f32).to_le_bytes());
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_vxg(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != VXG_MAGIC {
        return Err(Error::BadMagic {
            expected: VXG_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let r = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if r == 0 || r > MAX_RESOLUTION {
        return Err(Error::DimensionOverflow(format!("header declares resolution {r}, limit {MAX_RESOLUTION}")));
    }
    let count = r * r * r;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after a {r}³ payload",
            bytes.len() - expected
        )));
    }
    let origin = Point3::new(f32_at(bytes, 8) as f64, f32_at(bytes, 12) as f64, f32_at(bytes, 16) as f64);
    let voxel_size = f32_at(bytes, 20) as f64;
    let values = (0..count).map(|i| f32_at(bytes, HEADER_LEN + 4 * i)).collect();
    VoxelGrid::from_values(r, values, origin, voxel_size)
}

pub fn write_vxg(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_vxg(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_vxg(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vxg(&bytes)
}

/// ASCII OFF with triangular faces.
pub fn write_off(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "OFF\n{} {} 0", mesh.vertices().len(), mesh.triangles().len());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Binary PGM of all z slices side by side (width `r·r`, height `r`), y down.
pub fn pgm_montage(grid: &VoxelGrid) -> Vec<u8> {
    let r = grid.resolution();
    let mut out = format!("P5\n{} {}\n255\n", r * r, r).into_bytes();
    for y in 0..r {
        for z in 0..r {
            for x in 0..r {
                out.push((grid.get(x, y, z) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pgm_montage(grid)).map_err(|e| Error::io(path, e))
}
