//! Adam over the parameter groups of a scene, its sky and the deformation
//! network.

use serde::{Deserialize, Serialize};

use crate::container::{find_array, NamedArray};
use crate::error::{Error, Result};
use crate::math::quat_normalize;
use crate::mlp::DeformationNet;
use crate::render::SceneGrads;
use crate::types::{Scene, SCALE_EPS};

pub const GROUPS: [&str; 9] = [
    "position",
    "rotation",
    "scale",
    "opacity",
    "color",
    "sem_logits",
    "time_embed",
    "sky",
    "mlp",
];

/// Base learning rates per group. `position` is multiplied by the scene
/// extent; the network rate decays from `mlp_start` to `mlp_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub sem_logits: f64,
    pub time_embed: f64,
    pub sky: f64,
    pub mlp_start: f64,
    pub mlp_end: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-3,
            color: 2.5e-3,
            sem_logits: 1e-2,
            time_embed: 1e-3,
            sky: 1e-2,
            mlp_start: 1.6e-4,
            mlp_end: 1.6e-6,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let named = [
            ("position", self.position),
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("opacity", self.opacity),
            ("color", self.color),
            ("sem_logits", self.sem_logits),
            ("time_embed", self.time_embed),
            ("sky", self.sky),
        ];
        for (name, lr) in named {
            if !(lr >= 0.0 && lr.is_finite()) {
                v.push(format!("learning rate {name} = {lr} must be >= 0"));
            }
        }
        if !(self.mlp_start >= self.mlp_end && self.mlp_end > 0.0) {
            v.push(format!(
                "network learning rate requires start >= end > 0 (got {} -> {})",
                self.mlp_start, self.mlp_end
            ));
        }
        v
    }

    /// Network rate at `iter` of `total`: geometric interpolation.
    pub fn mlp_at(&self, iter: usize, total: usize) -> f64 {
        if total == 0 {
            return self.mlp_start;
        }
        let f = iter.min(total) as f64 / total as f64;
        self.mlp_start * (self.mlp_end / self.mlp_start).powf(f)
    }

    /// Per-group rates in `GROUPS` order.
    pub fn resolve(&self, extent: f64, iter: usize, total: usize) -> [f64; 9] {
        [
            self.position * extent,
            self.rotation,
            self.scale,
            self.opacity,
            self.color,
            self.sem_logits,
            self.time_embed,
            self.sky,
            self.mlp_at(iter, total),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Moments>,
}

fn gather(scene: &Scene, net: Option<&DeformationNet>) -> [Vec<f64>; 9] {
    let de = scene.time_embed_dim;
    let mut p: [Vec<f64>; 9] = Default::default();
    for g in &scene.gaussians {
        p[0].extend(g.mu.iter());
        p[1].extend(g.rot.iter());
        p[2].extend(g.scale.iter());
        p[3].push(g.opacity);
        p[4].extend(g.color.iter());
        p[5].extend(g.sem_logits.iter());
        match &g.time_embed {
            Some(e) => p[6].extend(e.iter()),
            None => p[6].extend(std::iter::repeat(0.0).take(de)),
        }
    }
    p[7] = scene.sky.texels.clone();
    if let Some(net) = net {
        p[8] = net.flat_params();
    }
    p
}

fn gather_grads(scene: &Scene, grads: &SceneGrads) -> [Vec<f64>; 9] {
    let de = scene.time_embed_dim;
    let mut p: [Vec<f64>; 9] = Default::default();
    for g in &grads.gaussians {
        p[0].extend(g.mu.iter());
        p[1].extend(g.rot.iter());
        p[2].extend(g.scale.iter());
        p[3].push(g.opacity);
        p[4].extend(g.color.iter());
        p[5].extend(g.sem_logits.iter());
        p[6].extend(g.time_embed.iter().copied().chain(std::iter::repeat(0.0)).take(de));
    }
    p[7] = grads.sky.clone();
    if let Some(n) = &grads.net {
        p[8] = n.flat();
    }
    p
}

fn scatter(scene: &mut Scene, net: Option<&mut DeformationNet>, p: &[Vec<f64>; 9]) {
    let de = scene.time_embed_dim;
    let mut color_at = 0;
    let mut sem_at = 0;
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        g.mu.copy_from_slice(&p[0][3 * i..3 * i + 3]);
        g.rot.copy_from_slice(&p[1][4 * i..4 * i + 4]);
        g.scale.copy_from_slice(&p[2][3 * i..3 * i + 3]);
        g.opacity = p[3][i];
        let nc = g.color.len();
        g.color.copy_from_slice(&p[4][color_at..color_at + nc]);
        color_at += nc;
        let nk = g.sem_logits.len();
        g.sem_logits.copy_from_slice(&p[5][sem_at..sem_at + nk]);
        sem_at += nk;
        if let Some(e) = g.time_embed.as_mut() {
            e.copy_from_slice(&p[6][de * i..de * i + de]);
        }
    }
    scene.sky.texels.copy_from_slice(&p[7]);
    if let Some(net) = net {
        net.set_flat_params(&p[8]);
    }
}

impl Adam {
    pub fn new(scene: &Scene, net: Option<&DeformationNet>) -> Self {
        let moments = gather(scene, net)
            .iter()
            .map(|g| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    /// One update of every group, followed by projection back onto the
    /// valid parameter set (unit quaternions, floored scales, opacity in
    /// `[0, 1]`).
    pub fn apply(
        &mut self,
        scene: &mut Scene,
        mut net: Option<&mut DeformationNet>,
        grads: &SceneGrads,
        lrs: &[f64; 9],
    ) -> Result<()> {
        let mut params = gather(scene, net.as_deref());
        let g = gather_grads(scene, grads);
        for (k, (p, gk)) in params.iter().zip(&g).enumerate() {
            if p.len() != gk.len() || p.len() != self.moments[k].m.len() {
                return Err(Error::Dimension {
                    context: "optimizer group",
                    expected: self.moments[k].m.len(),
                    got: gk.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, gk)) in params.iter_mut().zip(&g).enumerate() {
            let lr = lrs[k];
            let mo = &mut self.moments[k];
            for i in 0..p.len() {
                let gi = gk[i];
                mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * gi;
                mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * gi * gi;
                if lr == 0.0 {
                    continue;
                }
                let mhat = mo.m[i] / c1;
                let vhat = mo.v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        scatter(scene, net.as_deref_mut(), &params);
        for (k, g) in scene.gaussians.iter_mut().enumerate() {
            if lrs[1] != 0.0 {
                g.rot = quat_normalize(&g.rot);
            }
            g.scale = g.scale.map(|s| s.max(SCALE_EPS));
            g.opacity = g.opacity.clamp(0.0, 1.0);
            if !(g.mu.iter().all(|v| v.is_finite()) && g.color.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite(format!("gaussian {k} after optimizer step {}", self.step)));
            }
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = vec![NamedArray::scalar("optim.step", self.step as f64)];
        for (name, mo) in GROUPS.iter().zip(&self.moments) {
            out.push(NamedArray::new(format!("optim.{name}.m"), vec![mo.m.len()], mo.m.clone()));
            out.push(NamedArray::new(format!("optim.{name}.v"), vec![mo.v.len()], mo.v.clone()));
        }
        out
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let missing = |n: &str| Error::config(format!("checkpoint lacks array {n}"));
        let step = find_array(arrays, "optim.step").ok_or_else(|| missing("optim.step"))?.data[0] as u64;
        let mut moments = Vec::new();
        for name in GROUPS {
            let m = format!("optim.{name}.m");
            let v = format!("optim.{name}.v");
            moments.push(Moments {
                m: find_array(arrays, &m).ok_or_else(|| missing(&m))?.data.clone(),
                v: find_array(arrays, &v).ok_or_else(|| missing(&v))?.data.clone(),
            });
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            moments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_rate_endpoints() {
        let lr = LearningRates::default();
        assert_eq!(lr.mlp_at(0, 2000), 1.6e-4);
        assert!((lr.mlp_at(2000, 2000) - 1.6e-6).abs() < 1e-20);
        assert!((lr.mlp_at(1000, 2000) - 1.6e-5).abs() < 1e-18);
        assert!(lr.validate().is_empty());
    }

    #[test]
    fn rejects_inverted_schedule() {
        let lr = LearningRates {
            mlp_start: 1e-6,
            mlp_end: 1e-4,
            ..Default::default()
        };
        assert_eq!(lr.validate().len(), 1);
    }
}
