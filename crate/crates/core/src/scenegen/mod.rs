//! Procedural dynamic street scenes with exact ray-traced ground truth.

mod dataset;
mod init;
mod world;

pub use dataset::{load, save, Dataset, FileRecord, FrameRecord, Manifest, MANIFEST_NAME};
pub use init::{init_scene_from_dataset, init_scene_from_points, lidar_points, InitOptions, LidarPoint};
pub use world::{camera_at, trace, Hit, World};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::to_u8;
use crate::semantics::ClassTable;
use crate::types::{DepthSample, FrameSample, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    /// Camera center at the first frame.
    pub start: [f64; 3],
    /// Forward travel along +y over the whole sequence.
    pub travel: f64,
    /// Peak yaw (radians) of a slow sinusoidal sway.
    pub yaw_amplitude: f64,
    /// Downward tilt in radians.
    pub pitch: f64,
    pub fx: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0, 1.6],
            travel: 2.5,
            yaw_amplitude: 0.04,
            pitch: 0.12,
            fx: 48.0,
            near: 0.1,
            far: 80.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundSpec {
    /// Half-size of the square ground plane.
    pub extent: f64,
    pub road_half_width: f64,
    pub texture_seed: u64,
    /// Side of one texture cell.
    pub cell: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            extent: 40.0,
            road_half_width: 3.5,
            texture_seed: 7,
            cell: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildingSpec {
    /// Buildings per side of the road.
    pub per_side: usize,
    pub min_size: [f64; 3],
    pub max_size: [f64; 3],
    /// Gap between road edge and facade.
    pub setback: f64,
    pub trees_per_side: usize,
}

impl Default for BuildingSpec {
    fn default() -> Self {
        Self {
            per_side: 4,
            min_size: [3.0, 4.0, 3.0],
            max_size: [5.0, 7.0, 8.0],
            setback: 2.0,
            trees_per_side: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Linear,
    Sinusoidal,
}

/// A moving box. Position at normalized time `t` is
/// `start + velocity * t`, plus `amplitude * sin(2π t / period)` along x for
/// sinusoidal motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    /// Bottom-center at `t = 0`.
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub size: [f64; 3],
    pub color: [f64; 3],
    #[serde(default = "linear")]
    pub motion: Motion,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub period: f64,
}

fn linear() -> Motion {
    Motion::Linear
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedestrianSpec {
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Fraction of pixels sampled as sparse depth per frame.
    pub lidar_fraction: f64,
    pub camera: CameraSpec,
    pub ground: GroundSpec,
    pub buildings: BuildingSpec,
    pub vehicles: Vec<VehicleSpec>,
    pub pedestrians: Vec<PedestrianSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 24,
            width: 64,
            height: 64,
            lidar_fraction: 0.05,
            camera: CameraSpec::default(),
            ground: GroundSpec::default(),
            buildings: BuildingSpec::default(),
            vehicles: vec![
                VehicleSpec {
                    start: [-4.5, 9.0, 0.0],
                    velocity: [8.0, 0.0, 0.0],
                    size: [3.6, 1.7, 1.4],
                    color: [0.85, 0.15, 0.12],
                    motion: Motion::Linear,
                    amplitude: 0.0,
                    period: 1.0,
                },
                VehicleSpec {
                    start: [1.8, 24.0, 0.0],
                    velocity: [0.0, -10.0, 0.0],
                    size: [1.8, 3.8, 1.5],
                    color: [0.15, 0.3, 0.85],
                    motion: Motion::Sinusoidal,
                    amplitude: 0.3,
                    period: 1.0,
                },
            ],
            pedestrians: vec![PedestrianSpec {
                start: [-2.5, 7.0, 0.0],
                velocity: [1.5, 0.0, 0.0],
                radius: 0.3,
                height: 1.7,
                color: [0.95, 0.8, 0.25],
            }],
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("scene spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.frames < 2 {
            v.push(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.width < 11 || self.height < 11 {
            v.push(format!("resolution {}x{} below the 11x11 minimum", self.width, self.height));
        }
        if !(self.lidar_fraction > 0.0 && self.lidar_fraction <= 1.0) {
            v.push(format!("lidar_fraction {} must be in (0, 1]", self.lidar_fraction));
        }
        let c = &self.camera;
        if !(c.fx > 0.0 && c.near > 0.0 && c.near < c.far) {
            v.push("camera requires fx > 0 and 0 < near < far".to_string());
        }
        let b = &self.buildings;
        if (0..3).any(|k| !(b.min_size[k] > 0.0 && b.min_size[k] <= b.max_size[k])) {
            v.push("building size ranges must satisfy 0 < min <= max".to_string());
        }
        for (i, veh) in self.vehicles.iter().enumerate() {
            if veh.size.iter().any(|s| !(*s > 0.0)) {
                v.push(format!("vehicle {i} has a non-positive size"));
            }
        }
        for (i, p) in self.pedestrians.iter().enumerate() {
            if !(p.radius > 0.0 && p.height > 0.0) {
                v.push(format!("pedestrian {i} has a non-positive radius or height"));
            }
        }
        v
    }
}

/// Renders every frame of `spec`. Fails when the spec is invalid, when some
/// frame sees no geometry, or when a moving object stays out of view in more
/// than a fifth of the frames.
pub fn generate(spec: &SceneSpec) -> Result<Dataset> {
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let world = World::build(spec);
    let table = ClassTable::default_urban();
    let frames: Vec<Result<FrameSample>> = (0..spec.frames)
        .into_par_iter()
        .map(|f| render_frame(spec, &world, f))
        .collect();
    let frames = frames.into_iter().collect::<Result<Vec<_>>>()?;

    let movers = world.movers();
    for (name, visible) in movers.iter().map(|m| (m.name.clone(), coverage(spec, &world, m.id))) {
        if (visible as f64) < 0.8 * spec.frames as f64 {
            return Err(Error::config(format!(
                "{name} is in view in only {visible} of {} frames (need 80%)",
                spec.frames
            )));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        class_table: table,
        frames,
    })
}

fn coverage(spec: &SceneSpec, world: &World, object: usize) -> usize {
    (0..spec.frames)
        .filter(|&f| {
            let t = f as f64 / (spec.frames - 1) as f64;
            let cam = camera_at(spec, f);
            let c = cam.to_camera(&world.object_center(object, t));
            if c.z <= cam.near {
                return false;
            }
            let u = cam.fx * c.x / c.z + cam.cx;
            let v = cam.fy * c.y / c.z + cam.cy;
            u >= 0.0 && u <= (cam.width - 1) as f64 && v >= 0.0 && v <= (cam.height - 1) as f64
        })
        .count()
}

fn render_frame(spec: &SceneSpec, world: &World, f: usize) -> Result<FrameSample> {
    let t = f as f64 / (spec.frames - 1) as f64;
    let cam = camera_at(spec, f);
    let (w, h) = (spec.width, spec.height);
    let mut image = Image::new(w, h);
    let mut semantic = vec![0u8; w * h];
    let mut dense = vec![0f32; w * h];
    let origin = cam.center();
    let forward = cam.rotation.row(2).transpose();
    for v in 0..h {
        for u in 0..w {
            let dir = cam.pixel_ray_world(u as f64, v as f64);
            let p = v * w + u;
            let (rgb, class, depth) = match trace(world, &origin, &dir, t) {
                Some(hit) => {
                    let z = hit.distance * dir.dot(&forward);
                    let z = if z < cam.far { z } else { 0.0 };
                    (hit.color, hit.class, z)
                }
                None => (world::sky_color(&dir), ClassTable::SKY, 0.0),
            };
            for ch in 0..3 {
                image.data[p * 3 + ch] = to_u8(rgb[ch]) as f64 / 255.0;
            }
            semantic[p] = class as u8;
            dense[p] = depth as f32;
        }
    }
    let hits: Vec<usize> = (0..w * h)
        .filter(|&p| dense[p] > cam.near as f32 && (dense[p] as f64) < cam.far)
        .collect();
    if hits.is_empty() {
        return Err(Error::config(format!("frame {f} sees no geometry; check camera and objects")));
    }
    let want = ((w * h) as f64 * spec.lidar_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(f as u64));
    let mut pool = hits;
    let take = want.min(pool.len());
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..take].to_vec();
    chosen.sort_unstable();
    let depth = chosen
        .into_iter()
        .map(|p| DepthSample {
            u: p % w,
            v: p / w,
            depth: dense[p] as f64,
        })
        .collect();
    Ok(FrameSample {
        index: f,
        image,
        semantic,
        depth,
        dense_depth: dense,
        camera: cam,
        t,
    })
}
