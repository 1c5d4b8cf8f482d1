//! Time-indexed Gaussian parameters: MLP residuals applied to dynamic
//! Gaussians, static Gaussians passed through, and the 3D covariance.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward, Quat};
use crate::mlp::{mlp_backward_batch, mlp_forward, DeformationNet, MlpCache, NetGrads, Residuals};
use crate::types::{Scene, SCALE_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGaussian {
    pub mu_t: Vector3<f64>,
    pub alpha_t: f64,
    pub rot_t: Quat,
    pub scale_t: Vector3<f64>,
    pub cov_t: Matrix3<f64>,
    pub source_idx: usize,
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn covariance(rot: &Quat, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = quat_to_matrix(rot) * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Gradient of `covariance` with respect to the quaternion components and
/// the scales, given dL/dΣ (any matrix; it is symmetrized).
pub fn covariance_backward(
    rot: &Quat,
    scale: &Vector3<f64>,
    grad_cov: &Matrix3<f64>,
) -> (Quat, Vector3<f64>) {
    let r = quat_to_matrix(rot);
    let m = r * Matrix3::from_diagonal(scale);
    let gs = (grad_cov + grad_cov.transpose()) * 0.5;
    let gm = 2.0 * gs * m;
    let mut g_scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_scale[k] += gm[(i, k)] * r[(i, k)];
            g_r[(i, k)] = gm[(i, k)] * scale[k];
        }
    }
    (quat_to_matrix_backward(rot, &g_r), g_scale)
}

#[derive(Debug, Clone)]
struct DynamicEntry {
    idx: usize,
    mlp: MlpCache,
    raw_rot: Quat,
    alpha_clamped: bool,
    scale_floored: [bool; 3],
}

/// Forward state needed by `deform_backward`.
#[derive(Debug, Clone)]
pub struct DeformCache {
    entries: Vec<DynamicEntry>,
    len: usize,
    net_version: Option<u64>,
}

impl DeformCache {
    pub fn dynamic_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.idx)
    }

    pub fn dynamic_count(&self) -> usize {
        self.entries.len()
    }

    /// Every branch taken in the forward pass (clamps, floors, ReLU units).
    /// Two passes with equal patterns are on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.push(e.alpha_clamped);
            out.extend(e.scale_floored);
            out.extend(e.mlp.active_units());
        }
        out
    }
}

/// Deforms every Gaussian to time `t`. With `net = None` the deformation is
/// disabled and every Gaussian is passed through unchanged.
pub fn deform(
    scene: &Scene,
    net: Option<&DeformationNet>,
    t: f64,
) -> Result<(Vec<DeformedGaussian>, DeformCache)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("t out of [0,1]: got {t}")));
    }
    let mut out: Vec<DeformedGaussian> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| DeformedGaussian {
            mu_t: g.mu,
            alpha_t: g.opacity,
            rot_t: g.rot,
            scale_t: g.scale,
            cov_t: covariance(&g.rot, &g.scale),
            source_idx: i,
        })
        .collect();

    let Some(net) = net else {
        return Ok((
            out,
            DeformCache {
                entries: Vec::new(),
                len: scene.len(),
                net_version: None,
            },
        ));
    };

    let layout = net.layout;
    let forwards: Vec<Result<(usize, Residuals, MlpCache)>> = scene
        .dyn_idx
        .par_iter()
        .map(|&i| {
            let g = &scene.gaussians[i];
            let h = layout.build(&g.mu, t, g.time_embed.as_deref());
            let (r, c) = mlp_forward(net, &h)?;
            Ok((i, r, c))
        })
        .collect();

    let mut entries = Vec::with_capacity(forwards.len());
    for f in forwards {
        let (i, r, mlp) = f?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "deformation residual of gaussian {i} at t = {t}: {:?}",
                r.to_vec()
            )));
        }
        let g = &scene.gaussians[i];
        let raw_alpha = g.opacity + r.dalpha;
        let raw_rot = [
            g.rot[0] + r.drot[0],
            g.rot[1] + r.drot[1],
            g.rot[2] + r.drot[2],
            g.rot[3] + r.drot[3],
        ];
        let raw_scale = g.scale + Vector3::from(r.dscale);
        // A zero rotation residual leaves the (already unit) quaternion
        // untouched so an idle network reproduces the static render exactly.
        let rot_t = if r.drot == [0.0; 4] { g.rot } else { quat_normalize(&raw_rot) };
        let scale_t = raw_scale.map(|s| s.max(SCALE_EPS));
        let d = &mut out[i];
        d.mu_t = g.mu + Vector3::from(r.dmu);
        d.alpha_t = raw_alpha.clamp(0.0, 1.0);
        d.rot_t = rot_t;
        d.scale_t = scale_t;
        d.cov_t = covariance(&rot_t, &scale_t);
        entries.push(DynamicEntry {
            idx: i,
            mlp,
            raw_rot,
            alpha_clamped: !(0.0..=1.0).contains(&raw_alpha),
            scale_floored: [0, 1, 2].map(|k| raw_scale[k] < SCALE_EPS),
        });
    }
    Ok((
        out,
        DeformCache {
            entries,
            len: scene.len(),
            net_version: Some(net.version),
        },
    ))
}

/// Upstream gradient on one deformed Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGrad {
    pub mu_t: Vector3<f64>,
    pub alpha_t: f64,
    pub rot_t: Quat,
    pub scale_t: Vector3<f64>,
    pub cov_t: Matrix3<f64>,
}

impl Default for DeformedGrad {
    fn default() -> Self {
        Self {
            mu_t: Vector3::zeros(),
            alpha_t: 0.0,
            rot_t: [0.0; 4],
            scale_t: Vector3::zeros(),
            cov_t: Matrix3::zeros(),
        }
    }
}

/// Gradient on one canonical Gaussian's learnable fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    pub rot: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vec<f64>,
    pub sem_logits: Vec<f64>,
    pub time_embed: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(color_len: usize, num_classes: usize, embed_dim: usize) -> Self {
        Self {
            mu: Vector3::zeros(),
            rot: [0.0; 4],
            scale: Vector3::zeros(),
            opacity: 0.0,
            color: vec![0.0; color_len],
            sem_logits: vec![0.0; num_classes],
            time_embed: vec![0.0; embed_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|x| x.is_finite())
            && self.rot.iter().all(|x| x.is_finite())
            && self.scale.iter().all(|x| x.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|x| x.is_finite())
            && self.sem_logits.iter().all(|x| x.is_finite())
            && self.time_embed.iter().all(|x| x.is_finite())
    }
}

/// Chains gradients on deformed parameters back to the canonical parameters
/// (`mu`, `rot`, `scale`, `opacity` of `source`) and to the residuals of each
/// dynamic Gaussian (in `DeformCache` order).
pub fn deform_backward(
    scene: &Scene,
    deformed: &[DeformedGaussian],
    cache: &DeformCache,
    grads: &[DeformedGrad],
    source: &mut [GaussianGrad],
) -> Result<Vec<Residuals>> {
    if cache.len != scene.len() || grads.len() != scene.len() || deformed.len() != scene.len() {
        return Err(Error::StaleCache("deform_backward"));
    }
    let mut dynamic = vec![false; scene.len()];
    for e in &cache.entries {
        dynamic[e.idx] = true;
    }

    // Covariance contribution, then the direct rot/scale gradients.
    let local: Vec<(Quat, Vector3<f64>)> = deformed
        .par_iter()
        .zip(grads.par_iter())
        .map(|(d, g)| {
            let (gq, gs) = covariance_backward(&d.rot_t, &d.scale_t, &g.cov_t);
            (
                [gq[0] + g.rot_t[0], gq[1] + g.rot_t[1], gq[2] + g.rot_t[2], gq[3] + g.rot_t[3]],
                gs + g.scale_t,
            )
        })
        .collect();

    for (i, (g, (grot, gscale))) in grads.iter().zip(&local).enumerate() {
        if dynamic[i] {
            continue;
        }
        let s = &mut source[i];
        s.mu += g.mu_t;
        s.opacity += g.alpha_t;
        for k in 0..4 {
            s.rot[k] += grot[k];
        }
        s.scale += gscale;
    }

    let mut residual_grads = Vec::with_capacity(cache.entries.len());
    for e in &cache.entries {
        let i = e.idx;
        let g = &grads[i];
        let (grot, gscale) = &local[i];
        let g_alpha = if e.alpha_clamped { 0.0 } else { g.alpha_t };
        let g_q = quat_normalize_backward(&e.raw_rot, grot);
        let g_s = Vector3::from([0, 1, 2].map(|k| if e.scale_floored[k] { 0.0 } else { gscale[k] }));
        let s = &mut source[i];
        s.mu += g.mu_t;
        s.opacity += g_alpha;
        for k in 0..4 {
            s.rot[k] += g_q[k];
        }
        s.scale += g_s;
        residual_grads.push(Residuals {
            dmu: [g.mu_t.x, g.mu_t.y, g.mu_t.z],
            dalpha: g_alpha,
            drot: g_q,
            dscale: [g_s.x, g_s.y, g_s.z],
        });
    }
    Ok(residual_grads)
}

/// Pushes residual gradients through the MLP: returns parameter gradients
/// and adds input gradients onto each dynamic Gaussian's `mu` and
/// `time_embed`.
pub fn network_backward(
    scene: &Scene,
    net: &DeformationNet,
    cache: &DeformCache,
    residual_grads: &[Residuals],
    source: &mut [GaussianGrad],
) -> Result<NetGrads> {
    if cache.net_version != Some(net.version) {
        return Err(Error::StaleCache("network_backward"));
    }
    let caches: Vec<MlpCache> = cache.entries.iter().map(|e| e.mlp.clone()).collect();
    let (net_grads, grad_h) = mlp_backward_batch(net, &caches, residual_grads)?;
    for (e, gh) in cache.entries.iter().zip(grad_h) {
        let g = &scene.gaussians[e.idx];
        let (g_mu, g_embed) = net.layout.backward(&g.mu, &gh);
        let s = &mut source[e.idx];
        s.mu += g_mu;
        if g.time_embed.is_some() {
            for (a, b) in s.time_embed.iter_mut().zip(g_embed) {
                *a += b;
            }
        }
    }
    Ok(net_grads)
}
