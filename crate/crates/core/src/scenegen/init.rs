//! Gaussian initialization from lidar points plus random points in a ball.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::knn::KnnIndex;
use crate::math::{sh_coeff_count, IDENTITY_QUAT};
use crate::semantics::{refresh_partitions, seed_logits, ClassTable};
use crate::types::{Gaussian, Scene, SkyTexture, SCALE_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    /// Unlabeled points drawn uniformly in the scene's bounding ball.
    pub random_points: usize,
    /// Lidar points are evenly subsampled down to this count.
    pub max_lidar_points: usize,
    pub opacity: f64,
    /// Neighbors averaged for the initial isotropic scale.
    pub scale_neighbors: usize,
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            random_points: 2000,
            max_lidar_points: 1000,
            opacity: 0.1,
            scale_neighbors: 3,
            seed: 0,
        }
    }
}

/// A labeled, colored world-space point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub class: usize,
}

/// Back-projects the sparse depth of every frame not in `exclude`.
pub fn lidar_points(data: &Dataset, exclude: &[usize]) -> Vec<LidarPoint> {
    let mut out = Vec::new();
    for f in data.frames.iter().filter(|f| !exclude.contains(&f.index)) {
        let cam = &f.camera;
        let rt = cam.rotation.transpose();
        for s in &f.depth {
            let p_cam = cam.pixel_ray_camera(s.u as f64, s.v as f64) * s.depth;
            out.push(LidarPoint {
                position: rt * (p_cam - cam.translation),
                color: f.image.pixel(s.u, s.v),
                class: f.semantic[s.v * cam.width + s.u] as usize,
            });
        }
    }
    out
}

pub fn init_scene_from_points(
    points: &[LidarPoint],
    table: &ClassTable,
    opts: &InitOptions,
    sh_degree: usize,
    time_embed_dim: usize,
) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::config("cannot initialize from an empty point cloud"));
    }
    let k = table.len();
    let chosen: Vec<&LidarPoint> = if points.len() > opts.max_lidar_points && opts.max_lidar_points > 0 {
        (0..opts.max_lidar_points)
            .map(|i| &points[i * points.len() / opts.max_lidar_points])
            .collect()
    } else {
        points.iter().collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1217_5EED);
    let centroid = chosen.iter().map(|p| p.position).sum::<Vector3<f64>>() / chosen.len() as f64;
    let radius = chosen.iter().map(|p| (p.position - centroid).norm()).fold(0.0, f64::max);

    let mut positions: Vec<Vector3<f64>> = chosen.iter().map(|p| p.position).collect();
    let mut colors: Vec<[f64; 3]> = chosen.iter().map(|p| p.color).collect();
    let mut labels: Vec<Option<usize>> = chosen.iter().map(|p| Some(p.class)).collect();
    for _ in 0..opts.random_points {
        let dir = loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-6 && n <= 1.0 {
                break v / n;
            }
        };
        let r = radius * rng.gen::<f64>().cbrt();
        positions.push(centroid + dir * r);
        colors.push([rng.gen(), rng.gen(), rng.gen()]);
        labels.push(None);
    }

    let index = KnnIndex::build(positions.clone(), 0);
    let ncoef = sh_coeff_count(sh_degree);
    let mut gaussians = Vec::with_capacity(positions.len());
    for (i, mu) in positions.iter().enumerate() {
        let nb = index.query(i, opts.scale_neighbors);
        let s = if nb.is_empty() {
            0.1
        } else {
            nb.iter().map(|&j| (positions[j] - mu).norm()).sum::<f64>() / nb.len() as f64
        };
        let mut color = vec![0.0; 3 * ncoef];
        color[..3].copy_from_slice(&colors[i]);
        gaussians.push(Gaussian {
            mu: *mu,
            rot: IDENTITY_QUAT,
            scale: Vector3::repeat(s.max(SCALE_EPS)),
            opacity: opts.opacity,
            color,
            sem_logits: seed_logits(labels[i], k)?,
            time_embed: None,
        });
    }
    let mut scene = Scene {
        gaussians,
        dyn_idx: vec![],
        static_idx: vec![],
        ground_idx: vec![],
        sky_idx: vec![],
        sky: SkyTexture::constant(SkyTexture::DEFAULT_WIDTH, SkyTexture::DEFAULT_HEIGHT, [0.5; 3]),
        class_table: table.clone(),
        sh_degree,
        time_embed_dim,
    };
    refresh_partitions(&mut scene);
    Ok(scene)
}

/// Builds the initial scene from the lidar of all frames except `holdout`.
pub fn init_scene_from_dataset(
    data: &Dataset,
    holdout: &[usize],
    opts: &InitOptions,
    sh_degree: usize,
    time_embed_dim: usize,
) -> Result<Scene> {
    let pts = lidar_points(data, holdout);
    init_scene_from_points(&pts, &data.class_table, opts, sh_degree, time_embed_dim)
}
