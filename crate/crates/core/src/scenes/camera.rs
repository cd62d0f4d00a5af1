use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::objects::SolidObject;
use crate::voxel::PointCloud;
use crate::{Error, Result};

/// Square pinhole depth sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_deg: 40.0,
        }
    }
}

impl Intrinsics {
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Unit camera-frame direction through the center of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let f = self.focal_px();
        let x = (u as f64 + 0.5 - self.width as f64 / 2.0) / f;
        let y = (v as f64 + 0.5 - self.height as f64 / 2.0) / f;
        Vector3::new(x, y, 1.0).normalize()
    }
}

/// Camera frame: x right, y down, z forward. The world is z up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    position: Point3<f64>,
    /// World → camera rotation.
    rotation: Rotation3<f64>,
}

impl Camera {
    pub fn look_at(position: Point3<f64>, target: Point3<f64>) -> Result<Self> {
        let forward = target - position;
        let right = forward.cross(&Vector3::z());
        if forward.norm() == 0.0 || right.norm() < 1e-12 * forward.norm() {
            return Err(Error::InvalidArgument("camera looks straight up or down, or at itself".into()));
        }
        let forward = forward.normalize();
        let right = right.normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Self {
            position,
            rotation: Rotation3::from_matrix_unchecked(m),
        })
    }

    pub fn position(&self) -> Point3<f64> {
        self.position
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        self.rotation
    }

    pub fn to_camera(&self, world: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * (world - self.position))
    }

    pub fn to_world(&self, cam: &Point3<f64>) -> Point3<f64> {
        self.position + self.rotation.inverse() * cam.coords
    }
}

/// First-hit camera-frame points with the index of the object hit.
pub fn render_depth_hits(
    objects: &[SolidObject],
    camera: &Camera,
    intrinsics: &Intrinsics,
) -> Result<Vec<(Point3<f64>, usize)>> {
    if objects.iter().any(|o| o.contains(&camera.position)) {
        return Err(Error::InvalidArgument("camera is inside an object".into()));
    }
    let to_world = camera.rotation.inverse();
    let mut hits = Vec::new();
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            let d_cam = intrinsics.ray(u, v);
            let d = to_world * d_cam;
            let first = objects
                .iter()
                .enumerate()
                .filter_map(|(i, o)| o.ray_hit(&camera.position, &d).map(|t| (t, i)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((t, i)) = first {
                hits.push((Point3::from(d_cam * t), i));
            }
        }
    }
    Ok(hits)
}

/// 2.5D view: visible surface points in the camera frame.
pub fn render_depth_view(objects: &[SolidObject], camera: &Camera, intrinsics: &Intrinsics) -> Result<PointCloud> {
    let hits = render_depth_hits(objects, camera, intrinsics)?;
    PointCloud::new(hits.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera() -> Camera {
        Camera::look_at(Point3::new(0.0, -0.5, 0.0), Point3::origin()).unwrap()
    }

    #[test]
    fn look_at_axes() {
        let cam = front_camera();
        let p = cam.to_camera(&Point3::origin());
        assert!((p - Point3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
        // World up maps to camera -y; world +x is camera right.
        let up = cam.to_camera(&Point3::new(0.0, -0.5, 1.0));
        assert!(up.y < 0.0);
        let right = cam.to_camera(&Point3::new(1.0, -0.5, 0.0));
        assert!(right.x > 0.0);
        let w = cam.to_world(&Point3::new(0.1, 0.2, 0.3));
        assert!((cam.to_camera(&w) - Point3::new(0.1, 0.2, 0.3)).norm() < 1e-12);
        assert!(Camera::look_at(Point3::new(0.0, 0.0, 1.0), Point3::origin()).is_err());
    }

    #[test]
    fn sphere_points_face_camera() {
        let cam = front_camera();
        let pc = render_depth_view(&[SolidObject::sphere(0.05)], &cam, &Intrinsics::default()).unwrap();
        assert!(pc.len() > 100);
        let center = Point3::new(0.0, 0.0, 0.5);
        for p in pc.points() {
            let n = (p - center).normalize();
            // Outward normal points back towards the camera.
            assert!(n.dot(&p.coords.normalize()) <= 1e-9);
            assert!(((p - center).norm() - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn box_face_on_is_planar() {
        let cam = front_camera();
        let pc = render_depth_view(&[SolidObject::cuboid([0.04, 0.04, 0.04])], &cam, &Intrinsics::default()).unwrap();
        assert!(pc.len() > 100);
        for p in pc.points() {
            assert!((p.z - 0.46).abs() < 1e-9);
        }
    }

    #[test]
    fn hidden_object_contributes_nothing() {
        let cam = front_camera();
        let front = SolidObject::cuboid([0.1, 0.02, 0.1]);
        let back = SolidObject::sphere(0.03).translated(Vector3::new(0.0, 0.1, 0.0));
        let hits = render_depth_hits(&[front, back], &cam, &Intrinsics::default()).unwrap();
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|&(_, i)| i == 0));
    }

    #[test]
    fn empty_scene_and_camera_inside() {
        let cam = front_camera();
        assert!(render_depth_view(&[], &cam, &Intrinsics::default()).unwrap().is_empty());
        let big = SolidObject::sphere(1.0);
        assert!(render_depth_view(&[big], &cam, &Intrinsics::default()).is_err());
    }
}
