//! Finite-difference checks of every analytic backward pass.
//!
//! Each suite draws random cases, picks coordinates, and compares the
//! analytic derivative against a five-point central difference. A probe whose
//! evaluations take different discrete branches (ReLU units, clamps, splat
//! cutoffs) is discarded and counted as rejected.

use nalgebra::{Matrix3, Vector3};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{deform, deform_backward, network_backward, DeformedGaussian, DeformedGrad, GaussianGrad};
use crate::encoding::InputLayout;
use crate::error::{Error, Result};
use crate::losses::{
    ground_consistency_loss, inv_depth_loss, l1_loss, semantic_ce_loss, sky_opacity_loss, ssim_loss, GroundNeighbors,
};
use crate::math::{quat_normalize, sh_coeff_count};
use crate::mlp::{init_net, mlp_backward, mlp_forward, DeformationNet, InitScheme, NetGrads, Residuals};
use crate::raster::{BufferGrads, RenderBuffers};
use crate::render::{render, render_backward};
use crate::semantics::{refresh_partitions, seed_logits, ClassTable};
use crate::types::{Camera, DepthSample, Gaussian, Scene, SkyTexture};

pub const MODULES: [&str; 4] = ["mlp", "deform", "raster", "losses"];
pub const MIN_CASES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so near-zero derivatives are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub module: String,
    pub cases: usize,
    pub checks: usize,
    pub rejected: usize,
    pub max_rel_err: f64,
    /// Where the worst mismatch was found.
    pub worst: String,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases >= MIN_CASES && self.checks > 0 && self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<7} cases={:<3} checks={:<5} rejected={:<3} max_rel_err={:.3e} (tol {:.0e}) {}",
            self.module,
            self.cases,
            self.checks,
            self.rejected,
            self.max_rel_err,
            self.tolerance,
            if self.passed() {
                "ok".to_string()
            } else if self.cases < MIN_CASES {
                format!("FAILED (fewer than {MIN_CASES} cases)")
            } else {
                "FAILED".to_string()
            }
        )
    }
}

struct Tally {
    report: CheckReport,
}

impl Tally {
    fn new(module: &str, cases: usize) -> Self {
        Self {
            report: CheckReport {
                module: module.to_string(),
                cases,
                checks: 0,
                rejected: 0,
                max_rel_err: 0.0,
                worst: String::new(),
                tolerance: TOLERANCE,
            },
        }
    }

    fn record(&mut self, analytic: f64, numeric: Option<f64>, what: impl FnOnce() -> String) {
        let Some(numeric) = numeric else {
            self.report.rejected += 1;
            return;
        };
        self.report.checks += 1;
        let e = rel_err(analytic, numeric);
        if e > self.report.max_rel_err || e.is_nan() {
            self.report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            self.report.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }
}

/// Five-point central difference along the coordinate selected by `coord`;
/// `None` if any probe disagrees with the base point's branch signature.
fn central<P: Clone, C: Copy, S: PartialEq>(
    p: &P,
    base_sig: &S,
    c: C,
    coord: fn(&mut P, C) -> &mut f64,
    eval: &impl Fn(&P) -> Result<(f64, S)>,
) -> Result<Option<f64>> {
    let mut q = p.clone();
    let x = *coord(&mut q, c);
    let h = STEP * x.abs().max(1.0);
    let mut f = [0.0; 4];
    for (slot, k) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
        *coord(&mut q, c) = x + k * h;
        let (v, sig) = eval(&q)?;
        if sig != *base_sig {
            return Ok(None);
        }
        *slot = v;
    }
    Ok(Some((f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)))
}

pub fn run_suite(module: &str, cases: usize, seed: u64) -> Result<CheckReport> {
    match module {
        "mlp" => mlp_suite(cases, seed),
        "deform" => deform_suite(cases, seed),
        "raster" => raster_suite(cases, seed),
        "losses" => losses_suite(cases, seed),
        other => Err(Error::config(format!(
            "unknown gradcheck module {other:?} (expected one of {})",
            MODULES.join(", ")
        ))),
    }
}

pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    MODULES.iter().map(|m| run_suite(m, cases, seed)).collect()
}

fn random_layout(rng: &mut ChaCha8Rng) -> InputLayout {
    InputLayout {
        bands: rng.gen_range(1..=4),
        embed_dim: rng.gen_range(0..=4),
        encode_mu: rng.gen(),
        raw_t: rng.gen(),
    }
}

/// A network with every parameter random; heads are shrunk by `head_scale`.
fn random_net(rng: &mut ChaCha8Rng, layout: InputLayout, head_scale: f64) -> DeformationNet {
    let mut net = init_net(rng.gen(), layout, InitScheme::default());
    for d in net.backbone.iter_mut() {
        for p in d.weight.iter_mut().chain(d.bias.iter_mut()) {
            *p = rng.gen_range(-0.4..0.4);
        }
    }
    for d in net.heads.iter_mut() {
        for p in d.weight.iter_mut().chain(d.bias.iter_mut()) {
            *p = head_scale * rng.gen_range(-1.0..1.0);
        }
    }
    net
}

fn vec3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    quat_normalize(&[
        rng.gen_range(0.3..1.0),
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-0.6..0.6),
    ])
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, all: &[T], n: usize) -> Vec<T> {
    all.choose_multiple(rng, n.min(all.len())).copied().collect()
}

// ---------------------------------------------------------------- mlp

#[derive(Clone)]
struct MlpCase {
    net: DeformationNet,
    h: Vec<f64>,
    w: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
enum MlpCoord {
    Input(usize),
    Param(usize),
}

fn mlp_coord(p: &mut MlpCase, c: MlpCoord) -> &mut f64 {
    match c {
        MlpCoord::Input(i) => &mut p.h[i],
        MlpCoord::Param(j) => p.net.params_mut().nth(j).expect("parameter index"),
    }
}

fn mlp_eval(p: &MlpCase) -> Result<(f64, Vec<bool>)> {
    let (r, cache) = mlp_forward(&p.net, &p.h)?;
    let v: f64 = r.to_vec().iter().zip(&p.w).map(|(a, b)| a * b).sum();
    Ok((v, cache.active_units()))
}

fn mlp_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c70);
    let mut tally = Tally::new("mlp", cases);
    for case in 0..cases {
        let layout = random_layout(&mut rng);
        let net = random_net(&mut rng, layout, 0.3);
        let embed: Vec<f64> = (0..layout.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = layout.build(&vec3(&mut rng, -3.0, 3.0), rng.gen(), Some(&embed));
        let w: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = MlpCase { net, h, w };

        let (_, cache) = mlp_forward(&p.net, &p.h)?;
        let mut grads = NetGrads::zeros_like(&p.net);
        let gh = mlp_backward(&p.net, &cache, &Residuals::from_slice(&p.w), &mut grads)?;
        let flat = grads.flat();
        let (_, sig) = mlp_eval(&p)?;

        let mut coords: Vec<MlpCoord> = (0..p.h.len()).map(MlpCoord::Input).collect();
        let params: Vec<usize> = (0..flat.len()).collect();
        coords.extend(pick(&mut rng, &params, 40).into_iter().map(MlpCoord::Param));
        for c in coords {
            let a = match c {
                MlpCoord::Input(i) => gh[i],
                MlpCoord::Param(j) => flat[j],
            };
            let n = central(&p, &sig, c, mlp_coord, &mlp_eval)?;
            tally.record(a, n, || format!("case {case} {c:?}"));
        }
    }
    Ok(tally.report)
}

// ------------------------------------------------------------- deform

fn gaussian(rng: &mut ChaCha8Rng, mu: Vector3<f64>, sh_degree: usize, k: usize, embed: Option<usize>) -> Gaussian {
    Gaussian {
        mu,
        rot: random_quat(rng),
        scale: vec3(rng, 0.1, 0.6),
        opacity: rng.gen_range(0.2..0.9),
        color: (0..3 * sh_coeff_count(sh_degree)).map(|_| rng.gen_range(0.0..1.0)).collect(),
        sem_logits: (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        time_embed: embed.map(|d| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    }
}

fn bare_scene(gaussians: Vec<Gaussian>, sky: SkyTexture, sh_degree: usize, time_embed_dim: usize) -> Scene {
    let n = gaussians.len();
    Scene {
        gaussians,
        dyn_idx: vec![],
        static_idx: (0..n).collect(),
        ground_idx: vec![],
        sky_idx: vec![],
        sky,
        class_table: ClassTable::default_urban(),
        sh_degree,
        time_embed_dim,
    }
}

#[derive(Clone)]
struct DeformCase {
    scene: Scene,
    net: DeformationNet,
    t: f64,
    w: Vec<DeformedGrad>,
}

#[derive(Clone, Copy, Debug)]
enum DeformCoord {
    Mu(usize, usize),
    Rot(usize, usize),
    Scale(usize, usize),
    Opacity(usize),
    Embed(usize, usize),
    Param(usize),
}

fn deform_coord(p: &mut DeformCase, c: DeformCoord) -> &mut f64 {
    let g = &mut p.scene.gaussians;
    match c {
        DeformCoord::Mu(i, k) => &mut g[i].mu[k],
        DeformCoord::Rot(i, k) => &mut g[i].rot[k],
        DeformCoord::Scale(i, k) => &mut g[i].scale[k],
        DeformCoord::Opacity(i) => &mut g[i].opacity,
        DeformCoord::Embed(i, k) => &mut g[i].time_embed.as_mut().expect("embedding")[k],
        DeformCoord::Param(j) => p.net.params_mut().nth(j).expect("parameter index"),
    }
}

fn dot_deformed(w: &DeformedGrad, d: &DeformedGaussian) -> f64 {
    w.mu_t.dot(&d.mu_t)
        + w.alpha_t * d.alpha_t
        + w.rot_t.iter().zip(&d.rot_t).map(|(a, b)| a * b).sum::<f64>()
        + w.scale_t.dot(&d.scale_t)
        + w.cov_t.component_mul(&d.cov_t).sum()
}

fn deform_eval(p: &DeformCase) -> Result<(f64, Vec<bool>)> {
    let (d, cache) = deform(&p.scene, Some(&p.net), p.t)?;
    let v = p.w.iter().zip(&d).map(|(w, d)| dot_deformed(w, d)).sum();
    Ok((v, cache.branch_pattern()))
}

fn deform_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x646566);
    let mut tally = Tally::new("deform", cases);
    for case in 0..cases {
        let layout = random_layout(&mut rng);
        let de = layout.embed_dim;
        let n = 6;
        let n_dyn = 4;
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|i| {
                let mu = vec3(&mut rng, -2.0, 2.0);
                gaussian(&mut rng, mu, 0, 6, (i < n_dyn).then_some(de))
            })
            .collect();
        let mut scene = bare_scene(gaussians, SkyTexture::constant(4, 2, [0.5; 3]), 0, de);
        scene.dyn_idx = (0..n_dyn).collect();
        scene.static_idx = (n_dyn..n).collect();
        let net = random_net(&mut rng, layout, 0.01);
        let w = (0..n)
            .map(|_| {
                let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                DeformedGrad {
                    mu_t: vec3(&mut rng, -1.0, 1.0),
                    alpha_t: rng.gen_range(-1.0..1.0),
                    rot_t: [0; 4].map(|_| rng.gen_range(-1.0..1.0)),
                    scale_t: vec3(&mut rng, -1.0, 1.0),
                    cov_t: m + m.transpose(),
                }
            })
            .collect();
        let p = DeformCase {
            scene,
            net,
            t: rng.gen_range(0.05..0.95),
            w,
        };

        let (deformed, cache) = deform(&p.scene, Some(&p.net), p.t)?;
        let mut src: Vec<GaussianGrad> = (0..n).map(|_| GaussianGrad::zeros(3, 6, de)).collect();
        let res = deform_backward(&p.scene, &deformed, &cache, &p.w, &mut src)?;
        let net_grads = network_backward(&p.scene, &p.net, &cache, &res, &mut src)?.flat();
        let (_, sig) = deform_eval(&p)?;

        let mut coords = Vec::new();
        for i in 0..n {
            for k in 0..3 {
                coords.push(DeformCoord::Mu(i, k));
                coords.push(DeformCoord::Scale(i, k));
            }
            for k in 0..4 {
                coords.push(DeformCoord::Rot(i, k));
            }
            coords.push(DeformCoord::Opacity(i));
            if i < n_dyn {
                coords.extend((0..de).map(|k| DeformCoord::Embed(i, k)));
            }
        }
        let params: Vec<usize> = (0..net_grads.len()).collect();
        coords.extend(pick(&mut rng, &params, 30).into_iter().map(DeformCoord::Param));
        for c in coords {
            let a = match c {
                DeformCoord::Mu(i, k) => src[i].mu[k],
                DeformCoord::Rot(i, k) => src[i].rot[k],
                DeformCoord::Scale(i, k) => src[i].scale[k],
                DeformCoord::Opacity(i) => src[i].opacity,
                DeformCoord::Embed(i, k) => src[i].time_embed[k],
                DeformCoord::Param(j) => net_grads[j],
            };
            let num = central(&p, &sig, c, deform_coord, &deform_eval)?;
            tally.record(a, num, || format!("case {case} {c:?}"));
        }
    }
    Ok(tally.report)
}

// ------------------------------------------------------------- raster

/// Camera at the origin looking down +z with the camera frame as world frame.
fn test_camera(width: usize, height: usize, f: f64) -> Camera {
    Camera {
        fx: f,
        fy: f,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        width,
        height,
        near: 0.1,
        far: 100.0,
    }
}

#[derive(Clone)]
struct RasterCase {
    scene: Scene,
    cam: Camera,
    w: BufferGrads,
}

#[derive(Clone, Copy, Debug)]
enum RasterCoord {
    Mu(usize, usize),
    Rot(usize, usize),
    Scale(usize, usize),
    Opacity(usize),
    Color(usize, usize),
    Logit(usize, usize),
    Sky(usize),
}

fn raster_coord(p: &mut RasterCase, c: RasterCoord) -> &mut f64 {
    let g = &mut p.scene.gaussians;
    match c {
        RasterCoord::Mu(i, k) => &mut g[i].mu[k],
        RasterCoord::Rot(i, k) => &mut g[i].rot[k],
        RasterCoord::Scale(i, k) => &mut g[i].scale[k],
        RasterCoord::Opacity(i) => &mut g[i].opacity,
        RasterCoord::Color(i, k) => &mut g[i].color[k],
        RasterCoord::Logit(i, k) => &mut g[i].sem_logits[k],
        RasterCoord::Sky(j) => &mut p.scene.sky.texels[j],
    }
}

fn dot_buffers(w: &BufferGrads, b: &RenderBuffers) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    d(&w.color, &b.color) + d(&w.depth, &b.depth) + d(&w.semantic, &b.semantic) + d(&w.alpha, &b.alpha)
}

fn raster_eval(p: &RasterCase) -> Result<(f64, (usize, u64))> {
    let (buf, state) = render(&p.scene, None, &p.cam, 0.5)?;
    Ok((dot_buffers(&p.w, &buf), (state.splats.len(), state.raster_cache.branch_digest())))
}

fn raster_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x726173);
    let mut tally = Tally::new("raster", cases);
    let (width, height) = (20, 18);
    for case in 0..cases {
        let cam = test_camera(width, height, 16.0);
        let sh_degree = rng.gen_range(0..=1);
        let n = rng.gen_range(4..=9);
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|_| {
                let z = rng.gen_range(3.0..8.0);
                let mu = Vector3::new(rng.gen_range(-0.5..0.5) * z, rng.gen_range(-0.5..0.5) * z, z);
                let mut g = gaussian(&mut rng, mu, sh_degree, 6, None);
                g.scale = vec3(&mut rng, 0.15, 0.8);
                g.opacity = rng.gen_range(0.3..0.99);
                g
            })
            .collect();
        let mut sky = SkyTexture::constant(8, 4, [0.0; 3]);
        for v in sky.texels.iter_mut() {
            *v = rng.gen();
        }
        let scene = bare_scene(gaussians, sky, sh_degree, 0);
        let np = width * height;
        let mut r = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w = BufferGrads {
            color: r(3 * np),
            depth: r(np).iter().map(|v| 0.1 * v).collect(),
            semantic: r(6 * np),
            alpha: r(np),
        };
        let p = RasterCase { scene, cam, w };

        let (_, state) = render(&p.scene, None, &p.cam, 0.5)?;
        let grads = render_backward(&p.scene, None, &p.cam, &state, &p.w)?;
        let (_, sig) = raster_eval(&p)?;

        let mut coords = Vec::new();
        for i in 0..n {
            for k in 0..3 {
                coords.push(RasterCoord::Mu(i, k));
                coords.push(RasterCoord::Scale(i, k));
            }
            for k in 0..4 {
                coords.push(RasterCoord::Rot(i, k));
            }
            coords.push(RasterCoord::Opacity(i));
            coords.extend((0..p.scene.gaussians[i].color.len()).map(|k| RasterCoord::Color(i, k)));
            coords.extend((0..6).map(|k| RasterCoord::Logit(i, k)));
        }
        let texels: Vec<usize> = (0..p.scene.sky.texels.len()).collect();
        coords.extend(pick(&mut rng, &texels, 8).into_iter().map(RasterCoord::Sky));
        for c in coords {
            let gg = &grads.gaussians;
            let a = match c {
                RasterCoord::Mu(i, k) => gg[i].mu[k],
                RasterCoord::Rot(i, k) => gg[i].rot[k],
                RasterCoord::Scale(i, k) => gg[i].scale[k],
                RasterCoord::Opacity(i) => gg[i].opacity,
                RasterCoord::Color(i, k) => gg[i].color[k],
                RasterCoord::Logit(i, k) => gg[i].sem_logits[k],
                RasterCoord::Sky(j) => grads.sky[j],
            };
            let num = central(&p, &sig, c, raster_coord, &raster_eval)?;
            tally.record(a, num, || format!("case {case} {c:?}"));
        }
    }
    Ok(tally.report)
}

// ------------------------------------------------------------- losses

#[derive(Clone)]
struct LossCase {
    width: usize,
    height: usize,
    color: Vec<f64>,
    gt_color: Vec<f64>,
    semantic: Vec<f64>,
    alpha: Vec<f64>,
    gt_semantic: Vec<u8>,
    depth: Vec<f64>,
    samples: Vec<DepthSample>,
    scene: Scene,
}

#[derive(Clone, Copy, Debug)]
enum LossCoord {
    Color(usize),
    Semantic(usize),
    Alpha(usize),
    Depth(usize),
    Opacity(usize),
    Scale(usize, usize),
}

fn loss_coord(p: &mut LossCase, c: LossCoord) -> &mut f64 {
    match c {
        LossCoord::Color(i) => &mut p.color[i],
        LossCoord::Semantic(i) => &mut p.semantic[i],
        LossCoord::Alpha(i) => &mut p.alpha[i],
        LossCoord::Depth(i) => &mut p.depth[i],
        LossCoord::Opacity(i) => &mut p.scene.gaussians[i].opacity,
        LossCoord::Scale(i, k) => &mut p.scene.gaussians[i].scale[k],
    }
}

/// Sign pattern of the residuals behind the two absolute-value losses.
fn abs_signs(p: &LossCase) -> Vec<bool> {
    let mut s: Vec<bool> = p.color.iter().zip(&p.gt_color).map(|(a, b)| a > b).collect();
    let w = p.width;
    s.extend(p.samples.iter().map(|d| 1.0 / p.depth[d.v * w + d.u] > 1.0 / d.depth));
    s
}

fn loss_suite_case(rng: &mut ChaCha8Rng) -> Result<(LossCase, GroundNeighbors)> {
    let (width, height) = (12, 12);
    let np = width * height;
    let k = 6;
    let color: Vec<f64> = (0..3 * np).map(|_| rng.gen()).collect();
    let gt_color: Vec<f64> = (0..3 * np).map(|_| rng.gen()).collect();
    let alpha: Vec<f64> = (0..np).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut semantic = Vec::with_capacity(k * np);
    for a in &alpha {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        semantic.extend(raw.iter().map(|r| r / s * a));
    }
    let gt_semantic: Vec<u8> = (0..np).map(|_| rng.gen_range(0..k as u8)).collect();
    let depth: Vec<f64> = (0..np).map(|_| rng.gen_range(1.0..20.0)).collect();
    let mut samples = Vec::new();
    for p in 0..np {
        if rng.gen_bool(0.2) {
            samples.push(DepthSample {
                u: p % width,
                v: p / width,
                depth: rng.gen_range(1.0..20.0),
            });
        }
    }

    let table = ClassTable::default_urban();
    let n_ground = rng.gen_range(20..40);
    let n_sky = rng.gen_range(3..8);
    let mut gaussians = Vec::new();
    for i in 0..n_ground + n_sky {
        let class = if i < n_ground { ClassTable::ROAD } else { ClassTable::SKY };
        let mu = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(0.0..10.0), rng.gen_range(-0.1..0.1));
        let mut g = gaussian(rng, mu, 0, k, None);
        g.sem_logits = seed_logits(Some(class), table.len())?;
        g.scale = Vector3::new(rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(0.01..0.1));
        gaussians.push(g);
    }
    let mut scene = bare_scene(gaussians, SkyTexture::constant(4, 2, [0.5; 3]), 0, 8);
    refresh_partitions(&mut scene);
    let nb = GroundNeighbors::build(&scene, *[8, 16].choose(rng).expect("nonempty"), 0);
    Ok((
        LossCase {
            width,
            height,
            color,
            gt_color,
            semantic,
            alpha,
            gt_semantic,
            depth,
            samples,
            scene,
        },
        nb,
    ))
}

fn losses_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f73);
    let mut tally = Tally::new("losses", cases);
    let sky = ClassTable::SKY;
    for case in 0..cases {
        let (p, nb) = loss_suite_case(&mut rng)?;
        let sig = abs_signs(&p);
        let np = p.width * p.height;
        let ids3: Vec<usize> = (0..3 * np).collect();
        let ids1: Vec<usize> = (0..np).collect();
        let ids_sem: Vec<usize> = (0..6 * np).collect();

        // One objective per term so each gradient is checked on its own.
        let l1 = |q: &LossCase| Ok((l1_loss(&q.color, &q.gt_color)?.0, abs_signs(q)));
        let (_, g) = l1_loss(&p.color, &p.gt_color)?;
        for i in pick(&mut rng, &ids3, 12) {
            let n = central(&p, &sig, LossCoord::Color(i), loss_coord, &l1)?;
            tally.record(g[i], n, || format!("case {case} l1 color[{i}]"));
        }

        let ss = |q: &LossCase| Ok((ssim_loss(q.width, q.height, &q.color, &q.gt_color)?.0, abs_signs(q)));
        let (_, g) = ssim_loss(p.width, p.height, &p.color, &p.gt_color)?;
        for i in pick(&mut rng, &ids3, 12) {
            let n = central(&p, &sig, LossCoord::Color(i), loss_coord, &ss)?;
            tally.record(g[i], n, || format!("case {case} ssim color[{i}]"));
        }

        let ce = |q: &LossCase| {
            let v = semantic_ce_loss(&q.semantic, 6, &q.gt_semantic, Some((&q.alpha, sky)))?.0;
            Ok((v, abs_signs(q)))
        };
        let (_, g_sem, g_alpha) = semantic_ce_loss(&p.semantic, 6, &p.gt_semantic, Some((&p.alpha, sky)))?;
        for i in pick(&mut rng, &ids_sem, 12) {
            let n = central(&p, &sig, LossCoord::Semantic(i), loss_coord, &ce)?;
            tally.record(g_sem[i], n, || format!("case {case} ce semantic[{i}]"));
        }
        for i in pick(&mut rng, &ids1, 8) {
            let n = central(&p, &sig, LossCoord::Alpha(i), loss_coord, &ce)?;
            tally.record(g_alpha[i], n, || format!("case {case} ce alpha[{i}]"));
        }

        let dl = |q: &LossCase| Ok((inv_depth_loss(&q.depth, &q.alpha, q.width, &q.samples)?.0, abs_signs(q)));
        let (_, g, _) = inv_depth_loss(&p.depth, &p.alpha, p.width, &p.samples)?;
        let supervised: Vec<usize> = p.samples.iter().map(|d| d.v * p.width + d.u).collect();
        for i in pick(&mut rng, &supervised, 8).into_iter().chain(pick(&mut rng, &ids1, 4)) {
            let n = central(&p, &sig, LossCoord::Depth(i), loss_coord, &dl)?;
            tally.record(g[i], n, || format!("case {case} depth[{i}]"));
        }

        let so = |q: &LossCase| Ok((sky_opacity_loss(&q.scene).0, abs_signs(q)));
        let (_, g) = sky_opacity_loss(&p.scene);
        let mut dense = vec![0.0; p.scene.len()];
        for (i, v) in g {
            dense[i] += v;
        }
        for i in 0..p.scene.len() {
            let n = central(&p, &sig, LossCoord::Opacity(i), loss_coord, &so)?;
            tally.record(dense[i], n, || format!("case {case} sky opacity[{i}]"));
        }

        let gr = |q: &LossCase| Ok((ground_consistency_loss(&q.scene, &nb).0, abs_signs(q)));
        let (_, g) = ground_consistency_loss(&p.scene, &nb);
        let mut dense = vec![Vector3::zeros(); p.scene.len()];
        for (i, v) in g {
            dense[i] += v;
        }
        let ground: Vec<usize> = p.scene.ground_idx.clone();
        for i in pick(&mut rng, &ground, 10) {
            for k in 0..3 {
                let n = central(&p, &sig, LossCoord::Scale(i, k), loss_coord, &gr)?;
                tally.record(dense[i][k], n, || format!("case {case} ground scale[{i}][{k}]"));
            }
        }
    }
    Ok(tally.report)
}
