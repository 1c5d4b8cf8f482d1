//! The six training objectives and their gradients.

use log::warn;
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::knn::{all_neighbors, KnnIndex};
use crate::math::pairwise_sum;
use crate::ssim::ssim;
use crate::types::{DepthSample, LossWeights, Scene};

/// Uniform mass added to every class before normalizing a pixel's
/// composited semantic distribution.
pub const SEM_EPS: f64 = 1e-6;
/// Added to rendered depth before inversion.
pub const DEPTH_EPS: f64 = 1e-6;
/// Pixels with less accumulated opacity carry no depth supervision.
pub const DEPTH_MIN_ALPHA: f64 = 0.05;

fn same_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { context, expected: a, got: b });
    }
    Ok(())
}

/// Mean absolute difference and its gradient with respect to `rendered`.
pub fn l1_loss(rendered: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len("l1 image", gt.len(), rendered.len())?;
    let n = rendered.len().max(1) as f64;
    let diffs: Vec<f64> = rendered.iter().zip(gt).map(|(r, g)| (r - g).abs()).collect();
    let grad = rendered
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            let d = r - g;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((pairwise_sum(&diffs) / n, grad))
}

/// `1 - SSIM` and its gradient with respect to `rendered`.
pub fn ssim_loss(width: usize, height: usize, rendered: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim(width, height, rendered, gt, true)?;
    let g = g.unwrap().into_iter().map(|x| -x).collect();
    Ok((1.0 - v, g))
}

/// Where the unoccupied part of each pixel goes in the semantic
/// distribution: `(alpha buffer, class id)`.
pub type Background<'a> = Option<(&'a [f64], usize)>;

/// Cross-entropy of the renormalized composited class mass against the
/// ground-truth class map. Returns gradients on the semantic buffer and on
/// the alpha buffer (the latter is zero without a background class).
pub fn semantic_ce_loss(
    sem: &[f64],
    num_classes: usize,
    gt: &[u8],
    background: Background<'_>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let k = num_classes;
    same_len("semantic buffer", gt.len() * k, sem.len())?;
    if let Some((alpha, class)) = background {
        same_len("alpha buffer", gt.len(), alpha.len())?;
        if class >= k {
            return Err(Error::config(format!("background class {class} >= {k}")));
        }
    }
    if let Some(&bad) = gt.iter().find(|&&c| c as usize >= k) {
        return Err(Error::config(format!("semantic id {bad} >= {k}")));
    }
    let n = gt.len().max(1) as f64;
    let mut terms = Vec::with_capacity(gt.len());
    let mut g_sem = vec![0.0; sem.len()];
    let mut g_alpha = vec![0.0; gt.len()];
    for (p, &cls) in gt.iter().enumerate() {
        let cls = cls as usize;
        let mut mass: Vec<f64> = sem[p * k..(p + 1) * k].to_vec();
        if let Some((alpha, bg)) = background {
            mass[bg] += 1.0 - alpha[p];
        }
        let total: f64 = mass.iter().sum::<f64>() + k as f64 * SEM_EPS;
        let target = mass[cls] + SEM_EPS;
        terms.push(total.ln() - target.ln());
        let mut g_mass = vec![1.0 / (n * total); k];
        g_mass[cls] -= 1.0 / (n * target);
        g_sem[p * k..(p + 1) * k].copy_from_slice(&g_mass);
        if let Some((_, bg)) = background {
            g_alpha[p] = -g_mass[bg];
        }
    }
    Ok((pairwise_sum(&terms) / n, g_sem, g_alpha))
}

/// Mean inverse-depth L1 over supervised pixels whose accumulated opacity is
/// at least `DEPTH_MIN_ALPHA`. Returns the loss, the depth-buffer gradient
/// and the number of pixels used.
pub fn inv_depth_loss(
    depth: &[f64],
    alpha: &[f64],
    width: usize,
    samples: &[DepthSample],
) -> Result<(f64, Vec<f64>, usize)> {
    same_len("alpha buffer", depth.len(), alpha.len())?;
    let mut used = Vec::with_capacity(samples.len());
    for s in samples {
        if !(s.depth > 0.0) {
            return Err(Error::config(format!("non-positive depth sample {} at ({}, {})", s.depth, s.u, s.v)));
        }
        let p = s.v * width + s.u;
        if p >= depth.len() || s.u >= width {
            return Err(Error::config(format!("depth sample ({}, {}) outside the image", s.u, s.v)));
        }
        if alpha[p] >= DEPTH_MIN_ALPHA {
            used.push((p, s.depth));
        }
    }
    let mut grad = vec![0.0; depth.len()];
    if used.is_empty() {
        return Ok((0.0, grad, 0));
    }
    let n = used.len() as f64;
    let mut terms = Vec::with_capacity(used.len());
    for &(p, d_gt) in &used {
        let inv = 1.0 / (depth[p] + DEPTH_EPS);
        let r = inv - 1.0 / d_gt;
        terms.push(r.abs());
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[p] += sign * -inv * inv / n;
    }
    Ok((pairwise_sum(&terms) / n, grad, used.len()))
}

/// Mean opacity of sky Gaussians, with the per-Gaussian gradient.
pub fn sky_opacity_loss(scene: &Scene) -> (f64, Vec<(usize, f64)>) {
    if scene.sky_idx.is_empty() {
        return (0.0, Vec::new());
    }
    let n = scene.sky_idx.len() as f64;
    let vals: Vec<f64> = scene.sky_idx.iter().map(|&i| scene.gaussians[i].opacity).collect();
    let grads = scene.sky_idx.iter().map(|&i| (i, 1.0 / n)).collect();
    (pairwise_sum(&vals) / n, grads)
}

/// KNN neighborhoods over the ground Gaussians, fixed between rebuilds.
#[derive(Debug, Clone)]
pub struct GroundNeighbors {
    /// Gaussian index of each ground point.
    pub ids: Vec<usize>,
    /// Neighbors of each ground point, as positions in `ids`.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

impl GroundNeighbors {
    pub fn build(scene: &Scene, k: usize, iter: usize) -> Self {
        let ids = scene.ground_idx.clone();
        let points = ids.iter().map(|&i| scene.gaussians[i].mu).collect();
        let index = KnnIndex::build(points, iter);
        let neighbors = if ids.len() > k { all_neighbors(&index, k) } else { Vec::new() };
        Self { ids, neighbors, k }
    }

    pub fn from_index(ids: Vec<usize>, index: &KnnIndex, k: usize) -> Self {
        let neighbors = if ids.len() > k { all_neighbors(index, k) } else { Vec::new() };
        Self { ids, neighbors, k }
    }
}

/// Sum over ground Gaussians of the squared distance between a Gaussian's
/// scale and the mean scale of its neighbors. Gradients flow to the center
/// and to every neighbor.
pub fn ground_consistency_loss(scene: &Scene, nb: &GroundNeighbors) -> (f64, Vec<(usize, Vector3<f64>)>) {
    if nb.k == 0 || nb.ids.len() < nb.k + 1 || nb.neighbors.len() != nb.ids.len() {
        if !nb.ids.is_empty() {
            warn!(
                "ground consistency disabled: {} ground gaussians, need at least {}",
                nb.ids.len(),
                nb.k + 1
            );
        }
        return (0.0, Vec::new());
    }
    let scale = |local: usize| scene.gaussians[nb.ids[local]].scale;
    let mut grad = vec![Vector3::zeros(); nb.ids.len()];
    let mut terms = Vec::with_capacity(nb.ids.len());
    for (c, neighbors) in nb.neighbors.iter().enumerate() {
        let n = neighbors.len() as f64;
        let mean = neighbors.iter().map(|&j| scale(j)).sum::<Vector3<f64>>() / n;
        let r = scale(c) - mean;
        terms.push(r.norm_squared());
        grad[c] += 2.0 * r;
        for &j in neighbors {
            grad[j] -= 2.0 * r / n;
        }
    }
    let out = nb.ids.iter().copied().zip(grad).collect();
    (pairwise_sum(&terms), out)
}

/// Per-term values, the weights used and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l1: f64,
    pub ssim: f64,
    pub sem: f64,
    pub ground: f64,
    pub depth: f64,
    pub sky: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(terms: [f64; 6], weights: LossWeights) -> Self {
        let w = weights.as_array();
        let total = terms.iter().zip(&w).map(|(a, b)| a * b).sum();
        Self {
            l1: terms[0],
            ssim: terms[1],
            sem: terms[2],
            ground: terms[3],
            depth: terms[4],
            sky: terms[5],
            total,
            weights,
        }
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.l1, self.ssim, self.sem, self.ground, self.depth, self.sky]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Everything the six terms read.
pub struct LossInputs<'a> {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub color: &'a [f64],
    pub depth: &'a [f64],
    pub semantic: &'a [f64],
    pub alpha: &'a [f64],
    pub gt_color: &'a [f64],
    pub gt_semantic: &'a [u8],
    pub gt_depth: &'a [DepthSample],
    pub sky_class: Option<usize>,
    pub scene: &'a Scene,
    pub ground: Option<&'a GroundNeighbors>,
}

/// Weighted gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub semantic: Vec<f64>,
    pub alpha: Vec<f64>,
    pub opacity: Vec<(usize, f64)>,
    pub scale: Vec<(usize, Vector3<f64>)>,
}

pub fn total_loss(inp: &LossInputs<'_>, w: &LossWeights) -> Result<(LossReport, LossGrads)> {
    let (l1, g_l1) = l1_loss(inp.color, inp.gt_color)?;
    let (ls, g_ss) = ssim_loss(inp.width, inp.height, inp.color, inp.gt_color)?;
    let bg = inp.sky_class.map(|c| (inp.alpha, c));
    let (lsem, g_sem, g_sem_alpha) = semantic_ce_loss(inp.semantic, inp.num_classes, inp.gt_semantic, bg)?;
    let (lground, g_ground) = match inp.ground {
        Some(nb) => ground_consistency_loss(inp.scene, nb),
        None => (0.0, Vec::new()),
    };
    let (ldepth, g_depth, _) = inv_depth_loss(inp.depth, inp.alpha, inp.width, inp.gt_depth)?;
    let (lsky, g_sky) = sky_opacity_loss(inp.scene);

    let report = LossReport::new([l1, ls, lsem, lground, ldepth, lsky], *w);
    let grads = LossGrads {
        color: g_l1.iter().zip(&g_ss).map(|(a, b)| w.l1 * a + w.ssim * b).collect(),
        depth: g_depth.iter().map(|g| w.depth * g).collect(),
        semantic: g_sem.iter().map(|g| w.sem * g).collect(),
        alpha: g_sem_alpha.iter().map(|g| w.sem * g).collect(),
        opacity: g_sky.into_iter().map(|(i, g)| (i, w.sky * g)).collect(),
        scale: g_ground.into_iter().map(|(i, g)| (i, w.ground * g)).collect(),
    };
    Ok((report, grads))
}
