//! Analytic scene geometry and the ground-truth ray caster.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Motion, SceneSpec};
use crate::semantics::ClassTable;
use crate::types::Camera;

const SUN: [f64; 3] = [0.4, -0.3, 0.85];
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Axis-aligned box given by its bottom center and full size.
    Box { base: Vector3<f64>, size: Vector3<f64> },
    /// Vertical cylinder standing on its base point.
    Cylinder { base: Vector3<f64>, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Track {
    velocity: Vector3<f64>,
    motion: Motion,
    amplitude: f64,
    period: f64,
}

#[derive(Debug, Clone)]
pub struct Object {
    pub id: usize,
    pub name: String,
    pub class: usize,
    color: [f64; 3],
    shape: Shape,
    track: Option<Track>,
}

#[derive(Debug, Clone)]
pub struct World {
    objects: Vec<Object>,
    extent: f64,
    road_half_width: f64,
    texture_seed: u64,
    cell: f64,
}

/// Closest surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub color: [f64; 3],
    pub class: usize,
    pub normal: Vector3<f64>,
}

fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let mut z = seed
        .wrapping_add((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Background color for rays that escape the scene.
pub fn sky_color(dir: &Vector3<f64>) -> [f64; 3] {
    let horizon = [0.86, 0.9, 0.97];
    let zenith = [0.35, 0.55, 0.9];
    let lat = dir.z.clamp(-1.0, 1.0).asin().max(0.0);
    let s = (lat / std::f64::consts::FRAC_PI_2 * 1.5).min(1.0);
    [0, 1, 2].map(|k| horizon[k] + (zenith[k] - horizon[k]) * s)
}

/// Camera of frame `f`: moves forward along +y, sways in yaw, tilted down.
pub fn camera_at(spec: &SceneSpec, f: usize) -> Camera {
    let c = &spec.camera;
    let s = f as f64 / (spec.frames - 1).max(1) as f64;
    let center = Vector3::new(c.start[0], c.start[1] + c.travel * s, c.start[2]);
    let yaw = c.yaw_amplitude * (2.0 * std::f64::consts::PI * s).sin();
    let forward = Vector3::new(yaw.sin() * c.pitch.cos(), yaw.cos() * c.pitch.cos(), -c.pitch.sin());
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Camera {
        fx: c.fx,
        fy: c.fx,
        cx: (spec.width as f64 - 1.0) / 2.0,
        cy: (spec.height as f64 - 1.0) / 2.0,
        rotation,
        translation: -(rotation * center),
        width: spec.width,
        height: spec.height,
        near: c.near,
        far: c.far,
    }
}

impl World {
    pub fn build(spec: &SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_C17E);
        let mut objects = Vec::new();
        let b = &spec.buildings;
        let road = spec.ground.road_half_width;
        for side in [-1.0, 1.0] {
            let mut y = -4.0;
            for _ in 0..b.per_side {
                let size = Vector3::from([0, 1, 2].map(|k| rng.gen_range(b.min_size[k]..=b.max_size[k])));
                let x = side * (road + b.setback + size.x / 2.0);
                let base = Vector3::new(x, y + size.y / 2.0, 0.0);
                y += size.y + rng.gen_range(1.0..3.0);
                let tone = rng.gen_range(0.45..0.8);
                let tint = [rng.gen_range(0.9..1.1), rng.gen_range(0.85..1.0), rng.gen_range(0.75..0.95)];
                objects.push(Object {
                    id: objects.len(),
                    name: format!("building {}", objects.len()),
                    class: ClassTable::BUILDING,
                    color: tint.map(|c: f64| (c * tone).min(1.0)),
                    shape: Shape::Box { base, size },
                    track: None,
                });
            }
            for i in 0..b.trees_per_side {
                let x = side * (road + 0.9);
                let y = 3.0 + 6.0 * i as f64 + rng.gen_range(0.0..2.0);
                objects.push(Object {
                    id: objects.len(),
                    name: format!("tree {}", objects.len()),
                    class: ClassTable::VEGETATION,
                    color: [rng.gen_range(0.1..0.25), rng.gen_range(0.45..0.65), rng.gen_range(0.1..0.2)],
                    shape: Shape::Cylinder {
                        base: Vector3::new(x, y, 0.0),
                        radius: rng.gen_range(0.5..0.8),
                        height: rng.gen_range(2.5..4.0),
                    },
                    track: None,
                });
            }
        }
        for (i, v) in spec.vehicles.iter().enumerate() {
            objects.push(Object {
                id: objects.len(),
                name: format!("vehicle {i}"),
                class: ClassTable::VEHICLE,
                color: v.color,
                shape: Shape::Box {
                    base: Vector3::from(v.start),
                    size: Vector3::from(v.size),
                },
                track: Some(Track {
                    velocity: Vector3::from(v.velocity),
                    motion: v.motion,
                    amplitude: v.amplitude,
                    period: v.period,
                }),
            });
        }
        for (i, p) in spec.pedestrians.iter().enumerate() {
            objects.push(Object {
                id: objects.len(),
                name: format!("pedestrian {i}"),
                class: ClassTable::PEDESTRIAN,
                color: p.color,
                shape: Shape::Cylinder {
                    base: Vector3::from(p.start),
                    radius: p.radius,
                    height: p.height,
                },
                track: Some(Track {
                    velocity: Vector3::from(p.velocity),
                    motion: Motion::Linear,
                    amplitude: 0.0,
                    period: 1.0,
                }),
            });
        }
        Self {
            objects,
            extent: spec.ground.extent,
            road_half_width: road,
            texture_seed: spec.ground.texture_seed,
            cell: spec.ground.cell,
        }
    }

    /// Objects that move over time.
    pub fn movers(&self) -> Vec<&Object> {
        self.objects.iter().filter(|o| o.track.is_some()).collect()
    }

    fn offset(&self, o: &Object, t: f64) -> Vector3<f64> {
        match o.track {
            None => Vector3::zeros(),
            Some(tr) => {
                let mut d = tr.velocity * t;
                if tr.motion == Motion::Sinusoidal {
                    d.x += tr.amplitude * (2.0 * std::f64::consts::PI * t / tr.period).sin();
                }
                d
            }
        }
    }

    pub fn object_center(&self, id: usize, t: f64) -> Vector3<f64> {
        let o = &self.objects[id];
        let off = self.offset(o, t);
        match o.shape {
            Shape::Box { base, size } => base + off + Vector3::new(0.0, 0.0, size.z / 2.0),
            Shape::Cylinder { base, height, .. } => base + off + Vector3::new(0.0, 0.0, height / 2.0),
        }
    }

    fn ground_color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let cx = (p.x / self.cell).floor() as i64;
        let cy = (p.y / self.cell).floor() as i64;
        let n = hash01(self.texture_seed, cx, cy) - 0.5;
        if p.x.abs() < self.road_half_width {
            if p.x.abs() < 0.12 && p.y.rem_euclid(3.0) < 1.5 {
                return [0.92, 0.9, 0.75];
            }
            let g = 0.3 + 0.08 * n;
            [g, g, g * 1.05]
        } else {
            let g = 0.6 + 0.1 * n;
            [g, g * 0.97, g * 0.92]
        }
    }

    fn surface_color(&self, o: &Object, local: &Vector3<f64>, normal: &Vector3<f64>) -> [f64; 3] {
        match (o.class, o.shape) {
            (ClassTable::BUILDING, Shape::Box { .. }) if normal.z.abs() < 0.5 => {
                let along = if normal.x.abs() > 0.5 { local.y } else { local.x };
                let window = along.rem_euclid(1.6) < 0.8 && (local.z.rem_euclid(2.0) - 0.9).abs() < 0.45;
                if window {
                    o.color.map(|c| c * 0.45)
                } else {
                    o.color
                }
            }
            (ClassTable::VEHICLE, Shape::Box { size, .. }) => {
                if local.z > 0.55 * size.z && local.z < 0.9 * size.z && normal.z.abs() < 0.5 {
                    [0.12, 0.14, 0.18]
                } else if local.z < 0.25 * size.z {
                    [0.08, 0.08, 0.08]
                } else {
                    o.color
                }
            }
            _ => o.color,
        }
    }
}

fn shade(color: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let l = Vector3::from(SUN).normalize();
    let k = 0.45 + 0.55 * normal.dot(&l).max(0.0);
    color.map(|c| (c * k).clamp(0.0, 1.0))
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let t1 = (lo[k] - o[k]) / d[k];
        let t2 = (hi[k] - o[k]) / d[k];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > tmin {
            tmin = near;
            axis = k;
            sign = if d[k] > 0.0 { -1.0 } else { 1.0 };
        }
        tmax = tmax.min(far);
    }
    if tmin > tmax || tmin <= HIT_EPS {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((tmin, n))
}

fn ray_cylinder(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    base: &Vector3<f64>,
    radius: f64,
    height: f64,
) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let (ox, oy) = (o.x - base.x, o.y - base.y);
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (ox * d.x + oy * d.y);
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = o.z + t * d.z - base.z;
            if t > HIT_EPS && (0.0..=height).contains(&z) {
                let n = Vector3::new(ox + t * d.x, oy + t * d.y, 0.0) / radius;
                best = Some((t, n));
            }
        }
    }
    if d.z < 0.0 {
        let t = (base.z + height - o.z) / d.z;
        let (px, py) = (ox + t * d.x, oy + t * d.y);
        if t > HIT_EPS && px * px + py * py <= radius * radius && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, Vector3::z()));
        }
    }
    best
}

/// Nearest surface hit along a unit direction at time `t`.
pub fn trace(world: &World, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |dist: f64, color: [f64; 3], class: usize, normal: Vector3<f64>| {
        if best.is_none_or(|b| dist < b.distance) {
            best = Some(Hit {
                distance: dist,
                color: shade(color, &normal),
                class,
                normal,
            });
        }
    };
    if dir.z < 0.0 {
        let dist = -origin.z / dir.z;
        let p = origin + dir * dist;
        if dist > HIT_EPS && p.x.abs() <= world.extent && p.y.abs() <= world.extent {
            consider(dist, world.ground_color(&p), ClassTable::ROAD, Vector3::z());
        }
    }
    for o in &world.objects {
        let off = world.offset(o, t);
        match o.shape {
            Shape::Box { base, size } => {
                let b = base + off;
                let lo = Vector3::new(b.x - size.x / 2.0, b.y - size.y / 2.0, b.z);
                let hi = Vector3::new(b.x + size.x / 2.0, b.y + size.y / 2.0, b.z + size.z);
                if let Some((dist, n)) = ray_box(origin, dir, &lo, &hi) {
                    let local = origin + dir * dist - lo;
                    consider(dist, world.surface_color(o, &local, &n), o.class, n);
                }
            }
            Shape::Cylinder { base, radius, height } => {
                let b = base + off;
                if let Some((dist, n)) = ray_cylinder(origin, dir, &b, radius, height) {
                    let local = origin + dir * dist - b;
                    consider(dist, world.surface_color(o, &local, &n), o.class, n);
                }
            }
        }
    }
    best
}
