use nalgebra::Point3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mesh, PointCloud};
use crate::{Error, Result};

/// Area-uniform samples on the surface of `mesh`.
pub fn sample_surface_points(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let areas: Vec<f64> = (0..mesh.triangles().len()).map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    if mesh.is_empty() || total.is_nan() || total <= 0.0 {
        return Err(Error::EmptyMesh);
    }
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangles()[pick.sample(&mut rng)].map(|i| mesh.vertices()[i]);
            let s = rng.random::<f64>().sqrt();
            let u = rng.random::<f64>();
            Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - u)) + c.coords * (s * u))
        })
        .collect();
    PointCloud::new(points)
}
