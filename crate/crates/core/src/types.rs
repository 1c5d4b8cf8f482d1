//! Shared domain types and their invariants.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{quat_norm, sh_coeff_count, Quat};
use crate::semantics::ClassTable;

/// Lower bound applied to every scale component.
pub const SCALE_EPS: f64 = 1e-6;

const QUAT_TOL: f64 = 1e-6;

/// One splat: canonical geometry, appearance, semantic logits and an
/// optional per-Gaussian time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: Vector3<f64>,
    pub rot: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    /// Spherical-harmonic coefficients, basis-major: `[c0.r, c0.g, c0.b, c1.r, ...]`.
    pub color: Vec<f64>,
    pub sem_logits: Vec<f64>,
    /// Present for Gaussians that are (or once were) dynamic.
    pub time_embed: Option<Vec<f64>>,
}

impl Gaussian {
    pub fn sh_degree(&self) -> usize {
        match self.color.len() / 3 {
            1 => 0,
            4 => 1,
            n => panic!("unsupported SH coefficient count {n}"),
        }
    }
}

/// A Gaussian set with its semantic partition and the sky texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub dyn_idx: Vec<usize>,
    pub static_idx: Vec<usize>,
    pub ground_idx: Vec<usize>,
    pub sky_idx: Vec<usize>,
    pub sky: SkyTexture,
    pub class_table: ClassTable,
    pub sh_degree: usize,
    pub time_embed_dim: usize,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Boolean mask of dynamic membership, indexed by Gaussian.
    pub fn dynamic_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.gaussians.len()];
        for &i in &self.dyn_idx {
            mask[i] = true;
        }
        mask
    }

    /// Checks every type invariant and reports each violation.
    pub fn validate(&self) -> Vec<String> {
        validate_scene(self)
    }

    /// Human-readable digest for debugging.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let n = self.gaussians.len();
        out.push_str(&format!("gaussians: {n}\n"));
        out.push_str(&format!(
            "partition: dynamic {} static {} ground {} sky {}\n",
            self.dyn_idx.len(),
            self.static_idx.len(),
            self.ground_idx.len(),
            self.sky_idx.len()
        ));
        out.push_str(&format!(
            "sh_degree: {}  time_embed_dim: {}  sky: {}x{}\n",
            self.sh_degree, self.time_embed_dim, self.sky.width, self.sky.height
        ));
        if n > 0 {
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            let (mut smin, mut smax, mut ssum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            let mut osum = 0.0;
            for g in &self.gaussians {
                lo = lo.inf(&g.mu);
                hi = hi.sup(&g.mu);
                smin = smin.min(g.scale.min());
                smax = smax.max(g.scale.max());
                ssum += g.scale.sum() / 3.0;
                osum += g.opacity;
            }
            out.push_str(&format!(
                "bounds: [{:.3}, {:.3}, {:.3}] .. [{:.3}, {:.3}, {:.3}]\n",
                lo.x, lo.y, lo.z, hi.x, hi.y, hi.z
            ));
            out.push_str(&format!(
                "scale: min {:.4e} mean {:.4e} max {:.4e}\n",
                smin,
                ssum / n as f64,
                smax
            ));
            out.push_str(&format!("opacity: mean {:.4}\n", osum / n as f64));
        }
        out.push_str("classes:\n");
        for c in &self.class_table.classes {
            out.push_str(&format!(
                "  {} {}{}{}{}\n",
                c.id,
                c.name,
                if c.is_dynamic { " dynamic" } else { "" },
                if c.is_ground { " ground" } else { "" },
                if c.is_sky { " sky" } else { "" }
            ));
        }
        let violations = self.validate();
        out.push_str(&format!("violations: {}\n", violations.len()));
        for v in violations.iter().take(20) {
            out.push_str(&format!("  {v}\n"));
        }
        out
    }
}

/// Equirectangular RGB grid, row-major, `height` rows of `width` texels.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyTexture {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<f64>,
}

impl SkyTexture {
    pub const DEFAULT_WIDTH: usize = 32;
    pub const DEFAULT_HEIGHT: usize = 16;

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut texels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            texels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            texels,
        }
    }
}

/// Pinhole camera. `rotation`/`translation` map world points into the
/// camera frame (x right, y down, z forward). Pixel `(u, v)` has its center
/// at image coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.fx > 0.0 && self.fy > 0.0) {
            v.push(format!("camera focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            v.push(format!("camera requires 0 < near < far ({}, {})", self.near, self.far));
        }
        let e = self.rotation * self.rotation.transpose() - Matrix3::identity();
        if e.abs().max() > 1e-6 {
            v.push("camera rotation is not orthonormal".to_string());
        }
        if self.width == 0 || self.height == 0 {
            v.push("camera resolution must be non-zero".to_string());
        }
        v
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unnormalized camera-frame ray through pixel `(u, v)`, with z = 1.
    pub fn pixel_ray_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Unit world-frame ray direction through pixel `(u, v)`.
    pub fn pixel_ray_world(&self, u: f64, v: f64) -> Vector3<f64> {
        (self.rotation.transpose() * self.pixel_ray_camera(u, v)).normalize()
    }
}

/// One sparse depth measurement at pixel `(u, v)`; `depth` is camera-space z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

/// RGB image in `[0, 1]`, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// One training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub index: usize,
    pub image: Image,
    /// Class id per pixel, row-major.
    pub semantic: Vec<u8>,
    /// Sparse lidar-like depth.
    pub depth: Vec<DepthSample>,
    /// Dense ground-truth depth (0 where the ray escapes to the sky).
    pub dense_depth: Vec<f32>,
    pub camera: Camera,
    pub t: f64,
}

impl FrameSample {
    pub fn validate(&self, num_classes: usize) -> Vec<String> {
        let mut v: Vec<String> = self
            .camera
            .validate()
            .into_iter()
            .map(|m| format!("frame {}: {m}", self.index))
            .collect();
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h {
            v.push(format!("frame {}: image size does not match camera", self.index));
        }
        if self.semantic.len() != w * h {
            v.push(format!("frame {}: semantic map size mismatch", self.index));
        }
        if let Some(p) = self.semantic.iter().position(|&c| c as usize >= num_classes) {
            v.push(format!(
                "frame {}: semantic id {} at pixel {} exceeds class count {num_classes}",
                self.index, self.semantic[p], p
            ));
        }
        for d in &self.depth {
            if !(d.depth > self.camera.near && d.depth < self.camera.far) || d.u >= w || d.v >= h {
                v.push(format!(
                    "frame {}: depth sample ({}, {}) = {} outside camera range",
                    self.index, d.u, d.v, d.depth
                ));
                break;
            }
        }
        if !(0.0..=1.0).contains(&self.t) {
            v.push(format!("frame {}: t = {} outside [0, 1]", self.index, self.t));
        }
        v
    }
}

/// Weights of the six loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub sem: f64,
    pub ground: f64,
    pub depth: f64,
    pub sky: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            sem: 0.01,
            ground: 0.0001,
            depth: 0.1,
            sky: 0.01,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.l1, self.ssim, self.sem, self.ground, self.depth, self.sky]
    }

    pub fn validate(&self) -> Vec<String> {
        self.as_array()
            .iter()
            .enumerate()
            .filter(|(_, w)| !(**w >= 0.0 && w.is_finite()))
            .map(|(i, w)| format!("loss weight {} is {w}, must be >= 0", i + 1))
            .collect()
    }
}

/// Returns one description per broken invariant; empty when the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<String> {
    let mut out = Vec::new();
    let n = scene.gaussians.len();
    let k = scene.class_table.len();
    let color_len = 3 * sh_coeff_count(scene.sh_degree);

    for (i, g) in scene.gaussians.iter().enumerate() {
        let qn = quat_norm(&g.rot);
        if !((qn - 1.0).abs() <= QUAT_TOL) {
            out.push(format!("gaussian {i}: rotation norm {qn} is not 1"));
        }
        if !g.scale.iter().all(|s| *s >= SCALE_EPS && s.is_finite()) {
            out.push(format!("gaussian {i}: scale {:?} below {SCALE_EPS}", g.scale.as_slice()));
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            out.push(format!("gaussian {i}: opacity {} outside [0, 1]", g.opacity));
        }
        if !g.mu.iter().all(|x| x.is_finite()) {
            out.push(format!("gaussian {i}: non-finite position"));
        }
        if g.color.len() != color_len {
            out.push(format!(
                "gaussian {i}: {} color coefficients, expected {color_len}",
                g.color.len()
            ));
        }
        if g.sem_logits.len() != k {
            out.push(format!(
                "gaussian {i}: {} semantic logits, expected {k}",
                g.sem_logits.len()
            ));
        }
        if let Some(e) = &g.time_embed {
            if e.len() != scene.time_embed_dim {
                out.push(format!(
                    "gaussian {i}: time embedding length {}, expected {}",
                    e.len(),
                    scene.time_embed_dim
                ));
            }
        }
    }

    let mut membership = vec![0u8; n];
    for (name, set, bit) in [
        ("dyn_idx", &scene.dyn_idx, 1u8),
        ("static_idx", &scene.static_idx, 2),
        ("ground_idx", &scene.ground_idx, 4),
        ("sky_idx", &scene.sky_idx, 8),
    ] {
        for &i in set.iter() {
            if i >= n {
                out.push(format!("{name}: index {i} out of range"));
                continue;
            }
            if membership[i] & bit != 0 {
                out.push(format!("{name}: gaussian {i} listed twice"));
            }
            membership[i] |= bit;
        }
    }
    for (i, m) in membership.iter().enumerate() {
        let dynamic = m & 1 != 0;
        let stat = m & 2 != 0;
        if dynamic && stat {
            out.push(format!("gaussian {i}: in both dyn_idx and static_idx"));
        } else if !dynamic && !stat {
            out.push(format!("gaussian {i}: in neither dyn_idx nor static_idx"));
        }
        if m & 4 != 0 && !stat {
            out.push(format!("gaussian {i}: ground but not static"));
        }
        if m & 8 != 0 && (dynamic || m & 4 != 0) {
            out.push(format!("gaussian {i}: sky overlaps dynamic or ground"));
        }
        if dynamic && scene.time_embed_dim > 0 && scene.gaussians[i].time_embed.is_none() {
            out.push(format!("gaussian {i}: dynamic without time embedding"));
        }
    }

    if scene.sky.texels.len() != scene.sky.width * scene.sky.height * 3 {
        out.push("sky texture size mismatch".to_string());
    }
    out.extend(scene.class_table.validate());
    out
}
