//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line. The training experiments share runs and are serialized so their
//! wall-clock timings are not inflated by each other.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splat4d_core::container;
use splat4d_core::gradcheck;
use splat4d_core::knn::KnnIndex;
use splat4d_core::losses::{ground_consistency_loss, GroundNeighbors};
use splat4d_core::math::quat_norm;
use splat4d_core::project::Splat2D;
use splat4d_core::raster::rasterize;
use splat4d_core::render::render;
use splat4d_core::scenegen::{generate, init_scene_from_points, Dataset, InitOptions, LidarPoint, SceneSpec};
use splat4d_core::semantics::ClassTable;
use splat4d_core::sky::SkyTaps;
use splat4d_core::train::{Evaluation, TrainConfig, Trainer};
use splat4d_core::types::{validate_scene, Camera, LossWeights, SkyTexture};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:2}: {} {name} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn reference_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate(&SceneSpec::default()).expect("reference dataset"))
}

// ---------------------------------------------------------------------------
// 1. gradient suites

#[test]
fn criterion_01_gradient_suites() {
    let start = Instant::now();
    let reports = gradcheck::run_all(gradcheck::MIN_CASES, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    for r in &reports {
        println!("{}", r.line());
    }
    let pass = secs < 60.0 && reports.len() == 4 && reports.iter().all(|r| r.passed() && r.cases >= 20);
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    verdict(1, "analytic gradients match finite differences", pass, &format!("max rel err {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. tiled renderer against an all-splats renderer

fn test_camera(size: usize) -> Camera {
    Camera {
        fx: size as f64,
        fy: size as f64,
        cx: (size as f64 - 1.0) / 2.0,
        cy: (size as f64 - 1.0) / 2.0,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        width: size,
        height: size,
        near: 0.1,
        far: 100.0,
    }
}

fn random_splats(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> Vec<Splat2D> {
    (0..count)
        .map(|i| {
            let a = rng.gen_range(0.3..8.0);
            let c = rng.gen_range(0.3..8.0);
            let b = rng.gen_range(-0.9..0.9) * f64::sqrt(a * c);
            let mut sem: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = sem.iter().sum();
            sem.iter_mut().for_each(|p| *p /= total);
            Splat2D {
                mean2d: Vector2::new(rng.gen_range(-3.0..11.0), rng.gen_range(-3.0..11.0)),
                cov2d: [a, b, c],
                // A coarse depth grid makes exact ties common.
                depth: 1.0 + rng.gen_range(0..6) as f64 * 0.5,
                color: [rng.gen(), rng.gen(), rng.gen()],
                sem_prob: sem,
                opacity: if rng.gen_bool(0.25) { rng.gen_range(0.9995..1.0) } else { rng.gen() },
                source_idx: i,
            }
        })
        .collect()
}

struct NaiveFrame {
    color: Vec<f64>,
    depth: Vec<f64>,
    semantic: Vec<f64>,
    alpha: Vec<f64>,
}

/// Every splat at every pixel, front to back.
fn naive_render(splats: &[Splat2D], cam: &Camera, sky: &SkyTexture) -> NaiveFrame {
    let k = splats.first().map_or(0, |s| s.sem_prob.len());
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap()
            .then(splats[a].source_idx.cmp(&splats[b].source_idx))
    });
    let n = cam.width * cam.height;
    let mut out = NaiveFrame {
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        semantic: vec![0.0; k * n],
        alpha: vec![0.0; n],
    };
    for v in 0..cam.height {
        for u in 0..cam.width {
            let p = v * cam.width + u;
            let (px, py) = (u as f64, v as f64);
            let mut trans = 1.0;
            let mut acc = 0.0;
            for &i in &order {
                let s = &splats[i];
                let [a, b, c] = s.cov2d;
                let det = a * c - b * b;
                let (ia, ib, ic) = (c / det, -b / det, a / det);
                let dx = px - s.mean2d.x;
                let dy = py - s.mean2d.y;
                let q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
                if !(q <= 9.0) {
                    continue;
                }
                let alpha = (s.opacity * (-0.5 * q).exp()).min(0.999);
                let w = alpha * trans;
                for ch in 0..3 {
                    out.color[3 * p + ch] += w * s.color[ch];
                }
                out.depth[p] += w * s.depth;
                for (j, prob) in s.sem_prob.iter().enumerate() {
                    out.semantic[k * p + j] += w * prob;
                }
                acc += w;
                trans *= 1.0 - alpha;
                if trans < 1e-4 {
                    break;
                }
            }
            let dir = cam.pixel_ray_world(px, py);
            let sky_rgb = SkyTaps::new(sky.width, sky.height, &dir).sample(sky);
            for ch in 0..3 {
                out.color[3 * p + ch] += (1.0 - acc) * sky_rgb[ch];
            }
            out.alpha[p] = acc;
        }
    }
    out
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn criterion_02_tiled_equals_naive() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = test_camera(8);
    let mut mismatches = 0;
    for _ in 0..100 {
        let count = rng.gen_range(1..=16);
        let splats = random_splats(&mut rng, count, 6);
        let mut sky = SkyTexture::constant(8, 4, [0.0; 3]);
        sky.texels.iter_mut().for_each(|t| *t = rng.gen());
        let (buf, _) = rasterize(&splats, &cam, &sky).unwrap();
        let naive = naive_render(&splats, &cam, &sky);
        let equal = same_bits(&buf.color, &naive.color)
            && same_bits(&buf.depth, &naive.depth)
            && same_bits(&buf.semantic, &naive.semantic)
            && same_bits(&buf.alpha, &naive.alpha);
        mismatches += usize::from(!equal);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 30.0;
    verdict(2, "tiled renderer is bitwise equal to the naive renderer", pass, &format!("{mismatches}/100 mismatches, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. ground regularizer and KNN against exhaustive search

fn exhaustive_knn(points: &[Vector3<f64>], query: &Vector3<f64>, n: usize, skip: Option<usize>) -> Vec<usize> {
    let mut c: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, p)| ((p - query).norm_squared(), j))
        .collect();
    c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    c.into_iter().take(n).map(|(_, j)| j).collect()
}

#[test]
fn criterion_03_ground_loss_and_knn_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = ClassTable::default_urban();
    let mut worst: f64 = 0.0;
    let mut knn_ok = true;
    let mut configs = 0;
    for &k in &[8usize, 16, 32] {
        for _ in 0..50 {
            let count = rng.gen_range(k + 1..k + 120);
            let points: Vec<LidarPoint> = (0..count)
                .map(|_| LidarPoint {
                    position: Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-0.2..0.2)),
                    color: [0.3; 3],
                    class: ClassTable::ROAD,
                })
                .collect();
            let opts = InitOptions {
                random_points: 0,
                ..Default::default()
            };
            let mut scene = init_scene_from_points(&points, &table, &opts, 0, 8).unwrap();
            for g in &mut scene.gaussians {
                g.scale = Vector3::new(rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0), rng.gen_range(0.001..0.5));
            }
            let nb = GroundNeighbors::build(&scene, k, 0);
            let (loss, _) = ground_consistency_loss(&scene, &nb);

            let mu: Vec<Vector3<f64>> = scene.ground_idx.iter().map(|&i| scene.gaussians[i].mu).collect();
            let mut brute = 0.0;
            for (c, &gi) in scene.ground_idx.iter().enumerate() {
                let nbrs = exhaustive_knn(&mu, &mu[c], k, Some(c));
                knn_ok &= nbrs == nb.neighbors[c];
                let mut mean = Vector3::zeros();
                for &j in &nbrs {
                    mean += scene.gaussians[scene.ground_idx[j]].scale;
                }
                mean /= k as f64;
                let d = scene.gaussians[gi].scale - mean;
                brute += d.x * d.x + d.y * d.y + d.z * d.z;
            }
            worst = worst.max((loss - brute).abs());
            configs += 1;
        }
    }

    for &k in &[8usize, 16, 32] {
        let points: Vec<Vector3<f64>> = (0..1000)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let index = KnnIndex::build(points.clone(), 0);
        for _ in 0..100 {
            let q = Vector3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
            knn_ok &= index.nearest(&q, k, None) == exhaustive_knn(&points, &q, k, None);
            let i = rng.gen_range(0..points.len());
            knn_ok &= index.query(i, k) == exhaustive_knn(&points, &points[i], k, Some(i));
        }
    }
    let pass = worst <= 1e-10 && knn_ok;
    verdict(
        3,
        "ground loss and KNN match brute force",
        pass,
        &format!("{configs} configurations, max |diff| {worst:.1e}, knn exact {knn_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. zero-initialized heads leave renders untouched

#[test]
fn criterion_04_zero_deformation_identity() {
    let data = reference_data();
    let trainer = Trainer::new(TrainConfig::default(), data).unwrap();
    let net = trainer.net.as_ref().unwrap();
    let mut identical = true;
    let mut renders = 0;
    for (f, t) in [(0, 0.0), (5, 0.37), (12, 0.5), (20, 0.91), (23, 1.0)] {
        let cam = &data.frames[f].camera;
        let (a, _) = render(&trainer.scene, Some(net), cam, t).unwrap();
        let (b, _) = render(&trainer.scene, None, cam, t).unwrap();
        identical &= same_bits(&a.color, &b.color)
            && same_bits(&a.depth, &b.depth)
            && same_bits(&a.semantic, &b.semantic)
            && same_bits(&a.alpha, &b.alpha);
        renders += 1;
    }
    verdict(
        4,
        "zero-head deformation renders bitwise like the static scene",
        identical,
        &format!("{renders} renders, {} dynamic gaussians", trainer.scene.dyn_idx.len()),
    );
    assert!(identical);
}

// ---------------------------------------------------------------------------
// Shared training runs

struct RunOutcome {
    eval: Evaluation,
    log_csv: String,
    checkpoint: Vec<u8>,
    secs: f64,
    final_loss: f64,
    losses_finite: bool,
    ground_scale_variance: f64,
    steps_checked: usize,
    violations: Vec<String>,
}

static TRAINING: Mutex<()> = Mutex::new(());

/// Checks every post-step invariant, returning descriptions of failures.
fn step_invariants(trainer: &Trainer, view: &splat4d_core::train::StepView<'_>) -> Vec<String> {
    let mut bad = validate_scene(&trainer.scene);
    let scene = &trainer.scene;
    let mut seen = vec![0u8; scene.len()];
    for &i in scene.dyn_idx.iter().chain(&scene.static_idx) {
        seen[i] += 1;
    }
    if seen.iter().any(|&c| c != 1) {
        bad.push("dynamic/static partition is not total and disjoint".into());
    }
    for g in &scene.gaussians {
        if (quat_norm(&g.rot) - 1.0).abs() > 1e-9 {
            bad.push(format!("quaternion norm {}", quat_norm(&g.rot)));
            break;
        }
    }
    let buf = view.buffers;
    if let Some(a) = buf.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        bad.push(format!("accumulated opacity {a} outside [0, 1]"));
    }
    let cache = &view.state.raster_cache;
    'pixels: for v in 0..cache.height() {
        for u in 0..cache.width() {
            let ts = cache.pixel_transmittances(u, v);
            if ts.first().is_some_and(|&t| t != 1.0) || ts.windows(2).any(|w| !(w[1] <= w[0] && w[1] > 0.0)) {
                bad.push(format!("transmittance not monotone at ({u}, {v})"));
                break 'pixels;
            }
        }
    }
    for d in &view.state.deformed {
        let c: Matrix3<f64> = d.cov_t;
        let sym = (c - c.transpose()).abs().max() <= 1e-12 * c.abs().max().max(1e-300);
        let eig = SymmetricEigen::new(c).eigenvalues;
        if !sym || eig.min() < -1e-12 * eig.max().abs() {
            bad.push(format!("covariance of gaussian {} is not PSD: {:?}", d.source_idx, eig.as_slice()));
            break;
        }
    }
    bad
}

fn ground_scale_variance(trainer: &Trainer) -> f64 {
    let s = &trainer.scene;
    let n = s.ground_idx.len() as f64;
    let mean = s.ground_idx.iter().map(|&i| s.gaussians[i].scale).sum::<Vector3<f64>>() / n;
    s.ground_idx
        .iter()
        .map(|&i| (s.gaussians[i].scale - mean).norm_squared())
        .sum::<f64>()
        / n
}

fn train(config: TrainConfig) -> RunOutcome {
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let data = reference_data();
    let start = Instant::now();
    let mut trainer = Trainer::new(config, data).unwrap();
    let mut violations = Vec::new();
    let mut steps_checked = 0;
    let mut losses_finite = true;
    trainer
        .run(data, |t, view| {
            losses_finite &= view.row.report.is_finite();
            steps_checked += 1;
            if violations.len() < 10 {
                violations.extend(step_invariants(t, view).into_iter().map(|v| format!("iter {}: {v}", view.row.iter)));
            }
        })
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    RunOutcome {
        eval: trainer.evals.last().cloned().expect("final evaluation"),
        log_csv: trainer.log_csv(),
        checkpoint: container::encode(&trainer.scene, &trainer.checkpoint_arrays()),
        secs,
        final_loss: trainer.log.last().map_or(f64::NAN, |r| r.report.total),
        losses_finite,
        ground_scale_variance: ground_scale_variance(&trainer),
        steps_checked,
        violations,
    }
}

fn full_run() -> &'static RunOutcome {
    static RUN: OnceLock<RunOutcome> = OnceLock::new();
    RUN.get_or_init(|| train(TrainConfig::default()))
}

fn summary(name: &str, r: &RunOutcome) -> String {
    format!(
        "{name}: holdout psnr {:.3}, dynamic psnr {:.3}, {:.0}s",
        r.eval.mean_psnr(),
        r.eval.dynamic_psnr().unwrap_or(f64::NAN),
        r.secs
    )
}

// ---------------------------------------------------------------------------
// 5. deformation helps dynamic pixels

#[test]
fn criterion_05_dynamic_benefit() {
    let full = full_run();
    let ablation = train(TrainConfig {
        deformation: false,
        ..Default::default()
    });
    let gain = full.eval.dynamic_psnr().unwrap() - ablation.eval.dynamic_psnr().unwrap();
    let secs = full.secs + ablation.secs;
    println!("{}", summary("full", full));
    println!("{}", summary("no deformation", &ablation));
    let pass = gain >= 2.0 && secs < 15.0 * 60.0;
    verdict(5, "deformation gains >= 2 dB on dynamic pixels", pass, &format!("gain {gain:.3} dB, {secs:.0}s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. time embeddings are non-inferior

#[test]
fn criterion_06_time_embedding_non_inferior() {
    let full = full_run();
    let without = train(TrainConfig {
        time_embed_dim: 0,
        ..Default::default()
    });
    let margin = full.eval.mean_psnr() - without.eval.mean_psnr();
    let secs = full.secs + without.secs;
    println!("{}", summary("embedding 8", full));
    println!("{}", summary("embedding 0", &without));
    let pass = margin >= 0.0 && secs < 30.0 * 60.0;
    verdict(6, "time embeddings do not hurt holdout PSNR", pass, &format!("margin {margin:.3} dB, {secs:.0}s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. KNN sweep

#[test]
fn criterion_07_knn_sweep() {
    let base = TrainConfig::default();
    let k8 = train(TrainConfig { knn_k: 8, ..base.clone() });
    let k16 = full_run();
    let k32 = train(TrainConfig { knn_k: 32, ..base.clone() });
    let off = train(TrainConfig {
        weights: LossWeights {
            ground: 0.0,
            ..base.weights
        },
        ..base.clone()
    });
    println!("{:<14} {:>12} {:>12} {:>14}", "setting", "final loss", "holdout psnr", "ground var");
    for (name, r) in [("k=8", &k8), ("k=16", k16), ("k=32", &k32), ("no ground reg", &off)] {
        println!(
            "{name:<14} {:>12.5} {:>12.3} {:>14.6}",
            r.final_loss,
            r.eval.mean_psnr(),
            r.ground_scale_variance
        );
    }
    let finite = [&k8, k16, &k32, &off].iter().all(|r| r.losses_finite);
    let pass = finite && k16.ground_scale_variance < off.ground_scale_variance;
    verdict(
        7,
        "KNN sweep completes and k=16 lowers ground-scale variance",
        pass,
        &format!(
            "variance {:.6} vs {:.6} without the regularizer",
            k16.ground_scale_variance, off.ground_scale_variance
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. default weights and schedule endpoints

#[test]
fn criterion_08_loss_weight_fidelity() {
    let w = LossWeights::default();
    let lr = TrainConfig::default().lr;
    let total = TrainConfig::default().iterations;
    let weights_ok = w.as_array() == [0.8, 0.2, 0.01, 0.0001, 0.1, 0.01];
    let start = lr.mlp_at(0, total);
    let end = lr.mlp_at(total, total);
    let lr_ok = start == 1.6e-4 && (end - 1.6e-6).abs() <= 1e-18;
    let pass = weights_ok && lr_ok;
    verdict(8, "default loss weights and network rate endpoints", pass, &format!("{:?}, lr {start:e} -> {end:e}", w.as_array()));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. invariants after every step of a full run

#[test]
fn criterion_09_invariants_every_step() {
    let full = full_run();
    for v in &full.violations {
        println!("{v}");
    }
    let pass = full.violations.is_empty() && full.steps_checked == TrainConfig::default().iterations;
    verdict(
        9,
        "invariants hold after every optimizer step",
        pass,
        &format!("{} steps checked, {} violations", full.steps_checked, full.violations.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. determinism

#[test]
fn criterion_10_determinism() {
    let first = full_run();
    let second = train(TrainConfig::default());
    let same_ckpt = first.checkpoint == second.checkpoint;
    let same_log = first.log_csv == second.log_csv;
    let pass = same_ckpt && same_log;
    verdict(
        10,
        "identical seeds give identical checkpoints and logs",
        pass,
        &format!("checkpoint {} bytes equal {same_ckpt}, log equal {same_log}", first.checkpoint.len()),
    );
    assert!(pass);
}
