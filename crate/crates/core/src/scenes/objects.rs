use std::f64::consts::PI;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Objects are shrunk until they fit a ball of this radius (meters) about
/// their origin, which keeps them inside a 0.30 m grid from any viewpoint.
pub const MAX_OBJECT_RADIUS: f64 = 0.13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Sphere,
    Cylinder,
    LShape,
    Union,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 5] = [
        ObjectKind::Box,
        ObjectKind::Sphere,
        ObjectKind::Cylinder,
        ObjectKind::LShape,
        ObjectKind::Union,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned box with the given half extents.
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
    /// Cylinder along the local z axis.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    fn contains(&self, p: &Point3<f64>) -> bool {
        match *self {
            Shape::Box { half } => (0..3).all(|a| p[a].abs() <= half[a]),
            Shape::Sphere { radius } => p.coords.norm_squared() <= radius * radius,
            Shape::Cylinder { radius, half_height } => {
                p.z.abs() <= half_height && p.x * p.x + p.y * p.y <= radius * radius
            }
        }
    }

    /// Entry distance of a ray starting outside the shape.
    fn ray_entry(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Box { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let (u, v) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                    t0 = t0.max(u.min(v));
                    t1 = t1.min(u.max(v));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Shape::Sphere { radius } => {
                let a = d.norm_squared();
                let b = o.coords.dot(d);
                let c = o.coords.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<f64> = None;
                let mut keep = |t: f64| {
                    if t > 0.0 && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        if (o.z + t * d.z).abs() <= half_height {
                            keep(t);
                        }
                    }
                }
                if d.z != 0.0 {
                    for cap in [-half_height, half_height] {
                        let t = (cap - o.z) / d.z;
                        let (x, y) = (o.x + t * d.x, o.y + t * d.y);
                        if x * x + y * y <= radius * radius {
                            keep(t);
                        }
                    }
                }
                best
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { half } => Vector3::from(half).norm(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, half_height } => radius.hypot(half_height),
        }
    }

    /// Local axis-aligned half extents.
    fn half_extents(&self) -> Vector3<f64> {
        match *self {
            Shape::Box { half } => Vector3::from(half),
            Shape::Sphere { radius } => Vector3::repeat(radius),
            Shape::Cylinder { radius, half_height } => Vector3::new(radius, radius, half_height),
        }
    }

    fn scaled(&self, f: f64) -> Shape {
        match *self {
            Shape::Box { half } => Shape::Box { half: half.map(|h| h * f) },
            Shape::Sphere { radius } => Shape::Sphere { radius: radius * f },
            Shape::Cylinder { radius, half_height } => Shape::Cylinder {
                radius: radius * f,
                half_height: half_height * f,
            },
        }
    }
}

/// A shape placed in its object's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Primitive frame → object frame.
    pub pose: Isometry3<f64>,
}

impl Primitive {
    pub fn at(shape: Shape, offset: Vector3<f64>) -> Self {
        Self {
            shape,
            pose: Isometry3::from_parts(Translation3::from(offset), UnitQuaternion::identity()),
        }
    }
}

/// Union of primitives with a rigid pose in the world (z up).
#[derive(Debug, Clone, PartialEq)]
pub struct SolidObject {
    pub kind: ObjectKind,
    pub primitives: Vec<Primitive>,
    /// Object frame → world.
    pub pose: Isometry3<f64>,
}

impl SolidObject {
    pub fn new(kind: ObjectKind, primitives: Vec<Primitive>) -> Self {
        Self {
            kind,
            primitives,
            pose: Isometry3::identity(),
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(ObjectKind::Sphere, vec![Primitive::at(Shape::Sphere { radius }, Vector3::zeros())])
    }

    pub fn cuboid(half: [f64; 3]) -> Self {
        Self::new(ObjectKind::Box, vec![Primitive::at(Shape::Box { half }, Vector3::zeros())])
    }

    pub fn with_pose(mut self, pose: Isometry3<f64>) -> Self {
        self.pose = pose;
        self
    }

    pub fn translated(mut self, t: Vector3<f64>) -> Self {
        self.pose = Isometry3::from_parts(Translation3::from(t), UnitQuaternion::identity()) * self.pose;
        self
    }

    pub fn center(&self) -> Point3<f64> {
        self.pose * Point3::origin()
    }

    pub fn contains(&self, world: &Point3<f64>) -> bool {
        let local = self.pose.inverse_transform_point(world);
        self.primitives
            .iter()
            .any(|p| p.shape.contains(&p.pose.inverse_transform_point(&local)))
    }

    /// Distance along a unit world ray to the first surface, if any.
    pub fn ray_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.pose.inverse_transform_point(origin);
        let d = self.pose.inverse_transform_vector(dir);
        self.primitives
            .iter()
            .filter_map(|p| {
                let po = p.pose.inverse_transform_point(&o);
                let pd = p.pose.inverse_transform_vector(&d);
                p.shape.ray_entry(&po, &pd)
            })
            .min_by(f64::total_cmp)
    }

    /// Radius of a ball about the object origin containing the object.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.pose.translation.vector.norm() + p.shape.bounding_radius())
            .fold(0.0, f64::max)
    }

    /// Uniform scale about the object origin.
    pub fn scaled(mut self, f: f64) -> Self {
        for p in &mut self.primitives {
            p.shape = p.shape.scaled(f);
            p.pose.translation.vector *= f;
        }
        self
    }

    /// Shifts primitives so the object-frame bounding box is centered on the origin.
    fn recentered(mut self) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            let h = p.shape.half_extents();
            let rot = p.pose.rotation.to_rotation_matrix();
            let reach = rot.matrix().abs() * h;
            let c = p.pose.translation.vector;
            lo = lo.inf(&(c - reach));
            hi = hi.sup(&(c + reach));
        }
        let mid = (lo + hi) / 2.0;
        for p in &mut self.primitives {
            p.pose.translation.vector -= mid;
        }
        self
    }
}

fn random_shape(rng: &mut ChaCha8Rng, which: usize) -> Shape {
    match which {
        0 => Shape::Box {
            half: [rng.random_range(0.03..0.08), rng.random_range(0.03..0.08), rng.random_range(0.03..0.08)],
        },
        1 => Shape::Sphere {
            radius: rng.random_range(0.04..0.08),
        },
        _ => Shape::Cylinder {
            radius: rng.random_range(0.03..0.06),
            half_height: rng.random_range(0.04..0.09),
        },
    }
}

/// A random object of `kind`, centered on the world origin with a random
/// rotation about the vertical axis. Deterministic in `seed`.
///
/// Dimension ranges (meters): box half extents 0.03–0.08; sphere radius
/// 0.04–0.08; cylinder radius 0.03–0.06, half height 0.04–0.09; L-shape bar
/// thickness 0.015–0.025 with arms 0.05–0.08; unions of 2–3 primitives at
/// 0.7 scale offset by up to 0.03.
pub fn gen_object(kind: ObjectKind, seed: u64) -> SolidObject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitives = match kind {
        ObjectKind::Box => vec![Primitive::at(random_shape(&mut rng, 0), Vector3::zeros())],
        ObjectKind::Sphere => vec![Primitive::at(random_shape(&mut rng, 1), Vector3::zeros())],
        ObjectKind::Cylinder => vec![Primitive::at(random_shape(&mut rng, 2), Vector3::zeros())],
        ObjectKind::LShape => {
            let t = rng.random_range(0.015..0.025);
            let a = rng.random_range(0.05..0.08);
            let b = rng.random_range(0.05..0.08);
            vec![
                Primitive::at(Shape::Box { half: [a, t, t] }, Vector3::zeros()),
                Primitive::at(Shape::Box { half: [t, t, b] }, Vector3::new(a - t, 0.0, b - t)),
            ]
        }
        ObjectKind::Union => {
            let n = rng.random_range(2..=3);
            (0..n)
                .map(|_| {
                    let which = rng.random_range(0..3);
                    let shape = random_shape(&mut rng, which).scaled(0.7);
                    let offset = Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03));
                    Primitive::at(shape, offset)
                })
                .collect()
        }
    };
    let mut obj = SolidObject::new(kind, primitives).recentered();
    let r = obj.bounding_radius();
    if r > MAX_OBJECT_RADIUS {
        obj = obj.scaled(MAX_OBJECT_RADIUS / r);
    }
    let yaw = rng.random_range(0.0..2.0 * PI);
    obj.with_pose(Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
    ))
}
