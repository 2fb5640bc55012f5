//! Synthetic depth-camera stand-in: seeded uniform sampling of object surfaces.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SceneObject, SceneState, Shape, SimError};
use crate::geometry::Vec3;
use crate::pointcloud::{ColoredPoint, ColoredPointCloud};

/// A flat patch parameterized over `[0, 1]^2`, with an optional rejection test
/// on the sampled local point.
struct Patch<'a> {
    area: f64,
    sample: Box<dyn Fn(f64, f64) -> Vec3 + 'a>,
    keep: Box<dyn Fn(Vec3) -> bool + 'a>,
}

impl<'a> Patch<'a> {
    fn new(area: f64, sample: impl Fn(f64, f64) -> Vec3 + 'a) -> Self {
        Self { area, sample: Box::new(sample), keep: Box::new(|_| true) }
    }

    fn with_keep(mut self, keep: impl Fn(Vec3) -> bool + 'a) -> Self {
        self.keep = Box::new(keep);
        self
    }
}

fn box_faces<'a>(h: Vec3) -> Vec<Patch<'a>> {
    let (x, y, z) = (h.x, h.y, h.z);
    let lerp = |a: f64, t: f64| -a + 2.0 * a * t;
    vec![
        Patch::new(4.0 * y * z, move |u, v| Vec3::new(x, lerp(y, u), lerp(z, v))),
        Patch::new(4.0 * y * z, move |u, v| Vec3::new(-x, lerp(y, u), lerp(z, v))),
        Patch::new(4.0 * x * z, move |u, v| Vec3::new(lerp(x, u), y, lerp(z, v))),
        Patch::new(4.0 * x * z, move |u, v| Vec3::new(lerp(x, u), -y, lerp(z, v))),
        Patch::new(4.0 * x * y, move |u, v| Vec3::new(lerp(x, u), lerp(y, v), z)),
        Patch::new(4.0 * x * y, move |u, v| Vec3::new(lerp(x, u), lerp(y, v), -z)),
    ]
}

fn disk<'a>(r_in: f64, r_out: f64, z: f64) -> Patch<'a> {
    let area = std::f64::consts::PI * (r_out * r_out - r_in * r_in);
    Patch::new(area, move |u, v| {
        let r = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
        let a = TAU * v;
        Vec3::new(r * a.cos(), r * a.sin(), z)
    })
}

fn tube<'a>(r: f64, z0: f64, z1: f64) -> Patch<'a> {
    Patch::new(TAU * r * (z1 - z0), move |u, v| {
        let a = TAU * u;
        Vec3::new(r * a.cos(), r * a.sin(), z0 + (z1 - z0) * v)
    })
}

fn in_cross(p: Vec3, yaw: f64, half_span: f64, half_width: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    let u = c * p.x + s * p.y;
    let v = -s * p.x + c * p.y;
    (u.abs() < half_span && v.abs() < half_width) || (u.abs() < half_width && v.abs() < half_span)
}

fn patches<'a>(shape: Shape) -> Vec<Patch<'a>> {
    match shape {
        Shape::Box { size } => box_faces(size * 0.5),
        Shape::Cylinder { radius, length } => {
            let h = length / 2.0;
            vec![tube(radius, -h, h), disk(0.0, radius, h), disk(0.0, radius, -h)]
        }
        Shape::Cup { radius, height, wall } => {
            let h = height / 2.0;
            let inner = radius - wall;
            vec![
                tube(radius, -h, h),
                tube(inner, -h + wall, h),
                disk(inner, radius, h),
                disk(0.0, inner, -h + wall),
                disk(0.0, radius, -h),
            ]
        }
        Shape::Cross { span, width, height } => {
            let hw = width / 2.0;
            // bar along x keeps what lies outside the central square; bar along
            // y drops its side walls that fall inside the other bar
            let a = box_faces(Vec3::new(span / 2.0, hw, height / 2.0))
                .into_iter()
                .map(|p| p.with_keep(move |q| q.x.abs() >= hw));
            let b = box_faces(Vec3::new(hw, span / 2.0, height / 2.0))
                .into_iter()
                .enumerate()
                .map(|(i, p)| if i < 2 { p.with_keep(move |q| q.y.abs() >= hw) } else { p });
            a.chain(b).collect()
        }
        Shape::CrossHoleBlock { size, span, width, clearance, hole_yaw } => {
            let h = size * 0.5;
            let (hs, hw) = (span / 2.0 + clearance, width / 2.0 + clearance);
            let mut faces = box_faces(h);
            let top = faces.remove(4).with_keep(move |q| !in_cross(q, hole_yaw, hs, hw));
            let bottom = faces.remove(4).with_keep(move |q| !in_cross(q, hole_yaw, hs, hw));
            faces.push(top);
            faces.push(bottom);
            // hole walls, walking the cross outline
            let outline = [
                (hs, hw),
                (hw, hw),
                (hw, hs),
                (-hw, hs),
                (-hw, hw),
                (-hs, hw),
                (-hs, -hw),
                (-hw, -hw),
                (-hw, -hs),
                (hw, -hs),
                (hw, -hw),
                (hs, -hw),
            ];
            let (s, c) = hole_yaw.sin_cos();
            let rot = move |(u, v): (f64, f64)| (c * u - s * v, s * u + c * v);
            for i in 0..outline.len() {
                let a = rot(outline[i]);
                let b = rot(outline[(i + 1) % outline.len()]);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let hz = h.z;
                faces.push(Patch::new(len * size.z, move |u, v| {
                    Vec3::new(a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u, -hz + 2.0 * hz * v)
                }));
            }
            faces
        }
    }
}

/// Total surface area sampled for a shape, before rejection.
pub fn sampled_area(shape: Shape) -> f64 {
    patches(shape).iter().map(|p| p.area).sum()
}

fn sample_object(o: &SceneObject, density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<ColoredPoint>) {
    for patch in patches(o.shape) {
        let expected = patch.area * density;
        let mut count = expected.floor() as usize;
        if rng.random::<f64>() < expected - expected.floor() {
            count += 1;
        }
        for _ in 0..count {
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let local = (patch.sample)(u, v);
            if (patch.keep)(local) {
                out.push(ColoredPoint::new(o.pose.transform_point(local), o.color));
            }
        }
    }
}

/// Sample every object surface at `points_per_m2`. The gripper and the table
/// are not rendered.
pub fn render_cloud(scene: &SceneState, points_per_m2: f64, seed: u64) -> Result<ColoredPointCloud, SimError> {
    if !(points_per_m2 > 0.0 && points_per_m2.is_finite()) {
        return Err(SimError::NonPositiveDensity(points_per_m2));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for o in &scene.objects {
        sample_object(o, points_per_m2, &mut rng, &mut points);
    }
    Ok(ColoredPointCloud::new(points))
}
