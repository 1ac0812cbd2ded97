//! Procedural labeled street scenes, ray-cast through the raster's pixel centres
//! so every pixel holds at most one point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kitti::PointCloud;
use crate::projection::ProjectionConfig;

pub const CAR: u8 = 0;
pub const ROAD: u8 = 8;
pub const SIDEWALK: u8 = 10;
pub const BUILDING: u8 = 12;
pub const VEGETATION: u8 = 14;
pub const TRUNK: u8 = 15;
pub const POLE: u8 = 17;

/// Classes the generator emits.
pub const SYNTHETIC_CLASSES: [u8; 7] = [CAR, ROAD, SIDEWALK, BUILDING, VEGETATION, TRUNK, POLE];

/// Sensor height above the ground plane, meters.
pub const SENSOR_HEIGHT: f64 = 1.73;
const MAX_RANGE: f64 = 80.0;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Cylinder { cx: f64, cy: f64, radius: f64, z0: f64, z1: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    label: u8,
}

fn hit_box(d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if 0.0 < min[k] || 0.0 > max[k] {
                return None;
            }
            continue;
        }
        let (a, b) = (min[k] / d[k], max[k] / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn hit_cylinder(d: [f64; 3], cx: f64, cy: f64, r: f64, z0: f64, z1: f64) -> Option<f64> {
    let a = d[0] * d[0] + d[1] * d[1];
    if a < 1e-12 {
        return None;
    }
    let b = -2.0 * (d[0] * cx + d[1] * cy);
    let c = cx * cx + cy * cy - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    let z = t * d[2];
    (t > 0.0 && z >= z0 && z <= z1).then_some(t)
}

impl Object {
    fn hit(&self, d: [f64; 3]) -> Option<f64> {
        match self.shape {
            Shape::Box { min, max } => hit_box(d, min, max),
            Shape::Cylinder { cx, cy, radius, z0, z1 } => hit_cylinder(d, cx, cy, radius, z0, z1),
        }
    }
}

struct Scene {
    road_half: f64,
    objects: Vec<Object>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let ground = -SENSOR_HEIGHT;
        let road_half = rng.random_range(3.5..5.0);
        let walk = rng.random_range(2.0..3.0);
        let facade = road_half + walk;
        let mut objects = Vec::new();
        for side in [-1.0, 1.0] {
            let mut x = -70.0 + rng.random_range(0.0..6.0);
            while x < 70.0 {
                let len = rng.random_range(8.0..20.0);
                let top = rng.random_range(4.0..12.0);
                let (y0, y1) = if side > 0.0 { (facade, facade + 10.0) } else { (-facade - 10.0, -facade) };
                objects.push(Object { shape: Shape::Box { min: [x, y0, ground], max: [x + len, y1, top] }, label: BUILDING });
                x += len + rng.random_range(0.0..4.0);
            }
        }
        let lane = road_half * 0.55;
        for _ in 0..rng.random_range(3..7) {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let x: f64 = rng.random_range(4.0..30.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let y = side * lane;
            let (l, w, h) = (4.2, 1.8, rng.random_range(1.4..1.8));
            objects.push(Object {
                shape: Shape::Box { min: [x - l / 2.0, y - w / 2.0, ground], max: [x + l / 2.0, y + w / 2.0, ground + h] },
                label: CAR,
            });
        }
        for _ in 0..rng.random_range(3..6) {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let x = rng.random_range(-25.0..25.0);
            objects.push(Object {
                shape: Shape::Cylinder { cx: x, cy: side * (road_half + 0.4), radius: 0.2, z0: ground, z1: ground + 5.5 },
                label: POLE,
            });
        }
        for _ in 0..rng.random_range(2..5) {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let x = rng.random_range(-30.0..30.0);
            let y = side * (facade - 1.0);
            let trunk_top = ground + 2.2;
            objects.push(Object {
                shape: Shape::Cylinder { cx: x, cy: y, radius: 0.3, z0: ground, z1: trunk_top },
                label: TRUNK,
            });
            let r = rng.random_range(1.2..1.8);
            objects.push(Object {
                shape: Shape::Box { min: [x - r, y - r, trunk_top], max: [x + r, y + r, trunk_top + 2.0 * r] },
                label: VEGETATION,
            });
        }
        Self { road_half, objects }
    }

    /// Nearest hit `(t, label)` along unit direction `d` from the sensor.
    fn cast(&self, d: [f64; 3]) -> Option<(f64, u8)> {
        let mut best: Option<(f64, u8)> = None;
        if d[2] < 0.0 {
            let t = -SENSOR_HEIGHT / d[2];
            let y = (t * d[1]).abs();
            let label = if y < self.road_half { ROAD } else { SIDEWALK };
            best = Some((t, label));
        }
        for o in &self.objects {
            if let Some(t) = o.hit(d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, o.label));
                }
            }
        }
        best.filter(|&(t, _)| t <= MAX_RANGE)
    }
}

fn remission_of(label: u8) -> f32 {
    match label {
        ROAD => 0.15,
        SIDEWALK => 0.3,
        BUILDING => 0.45,
        CAR => 0.6,
        POLE => 0.75,
        TRUNK => 0.35,
        VEGETATION => 0.25,
        _ => 0.5,
    }
}

/// One labeled scene: one ray per pixel centre of `proj`, nearest surface kept.
pub fn synthetic_scene(seed: u64, proj: &ProjectionConfig) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng);
    let mut pc = PointCloud { labels: Some(Vec::new()), ..Default::default() };
    for v in 0..proj.height {
        let phi = proj.row_elevation(v as f64);
        for u in 0..proj.width {
            let theta = proj.column_azimuth(u as f64);
            let d = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
            if let Some((t, label)) = scene.cast(d) {
                pc.xyz.push([(t * d[0]) as f32, (t * d[1]) as f32, (t * d[2]) as f32]);
                let noise: f32 = rng.random_range(-0.05..0.05);
                pc.remission.push((remission_of(label) + noise).clamp(0.0, 1.0));
                pc.labels.as_mut().expect("labels").push(label);
            }
        }
    }
    pc
}

/// `n` scenes with seeds `seed, seed + 1, ...`.
pub fn synthetic_dataset(n: usize, seed: u64, proj: &ProjectionConfig) -> Vec<PointCloud> {
    (0..n as u64).map(|i| synthetic_scene(seed.wrapping_add(i), proj)).collect()
}
