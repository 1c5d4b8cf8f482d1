//! Property tests for the structural invariants of each stage.

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splat4d_core::deform::{covariance, deform};
use splat4d_core::encoding::{positional_encode, InputLayout};
use splat4d_core::knn::KnnIndex;
use splat4d_core::losses::{ground_consistency_loss, inv_depth_loss, l1_loss, semantic_ce_loss, ssim_loss, GroundNeighbors};
use splat4d_core::math::{quat_norm, quat_normalize};
use splat4d_core::mlp::{init_net, DeformationNet, InitScheme};
use splat4d_core::project::Splat2D;
use splat4d_core::raster::rasterize;
use splat4d_core::scenegen::{init_scene_from_points, InitOptions, LidarPoint};
use splat4d_core::semantics::{partition, ClassTable};
use splat4d_core::sky::SkyTaps;
use splat4d_core::types::{validate_scene, Camera, DepthSample, Scene, SkyTexture};

fn mixed_scene(seed: u64, count: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<LidarPoint> = (0..count)
        .map(|_| LidarPoint {
            position: Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(2.0..12.0), rng.gen_range(-1.0..3.0)),
            color: [rng.gen(), rng.gen(), rng.gen()],
            class: rng.gen_range(0..6),
        })
        .collect();
    let opts = InitOptions {
        random_points: 0,
        ..Default::default()
    };
    let mut scene = init_scene_from_points(&points, &ClassTable::default_urban(), &opts, 0, 8).unwrap();
    for g in &mut scene.gaussians {
        g.rot = quat_normalize(&[rng.gen_range(-1.0..1.0), rng.gen(), rng.gen(), rng.gen()]);
        g.scale = Vector3::new(rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0));
        g.opacity = rng.gen_range(0.05..0.95);
        if let Some(e) = &mut g.time_embed {
            e.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    scene
}

fn busy_net(seed: u64) -> DeformationNet {
    let mut net = init_net(seed, InputLayout::default(), InitScheme::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for h in net.heads.iter_mut() {
        for p in h.weight.iter_mut().chain(h.bias.iter_mut()) {
            *p = rng.gen_range(-0.02..0.02);
        }
    }
    net
}

fn camera(w: usize, h: usize) -> Camera {
    Camera {
        fx: w as f64,
        fy: w as f64,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        width: w,
        height: h,
        near: 0.1,
        far: 100.0,
    }
}

fn splats(seed: u64, count: usize, size: f64) -> Vec<Splat2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let a = rng.gen_range(0.3..20.0);
            let c = rng.gen_range(0.3..20.0);
            let b = rng.gen_range(-0.95..0.95) * f64::sqrt(a * c);
            let mut sem: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = sem.iter().sum::<f64>() + 1e-9;
            sem.iter_mut().for_each(|p| *p /= total);
            Splat2D {
                mean2d: Vector2::new(rng.gen_range(-2.0..size + 2.0), rng.gen_range(-2.0..size + 2.0)),
                cov2d: [a, b, c],
                depth: 1.0 + rng.gen_range(0..4) as f64,
                color: [rng.gen(), rng.gen(), rng.gen()],
                sem_prob: sem,
                opacity: rng.gen_range(0.0..1.0),
                source_idx: i,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quaternion_normalization_is_idempotent(w in -3.0f64..3.0, x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let once = quat_normalize(&[w, x, y, z]);
        let twice = quat_normalize(&once);
        prop_assert!((quat_norm(&once) - 1.0).abs() < 1e-12);
        for k in 0..4 {
            prop_assert!((once[k] - twice[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoding_has_period_two(t in -4.0f64..4.0, bands in 1usize..10) {
        let a = positional_encode(t, bands);
        let b = positional_encode(t + 2.0, bands);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1u64 << bands) as f64);
            prop_assert!(x.abs() <= 1.0);
        }
    }

    #[test]
    fn covariance_is_symmetric_psd(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
                                   sx in 1e-6f64..5.0, sy in 1e-6f64..5.0, sz in 1e-6f64..5.0) {
        let c = covariance(&quat_normalize(&[w, x, y, z]), &Vector3::new(sx, sy, sz));
        prop_assert!((c - c.transpose()).abs().max() <= 1e-12 * c.abs().max());
        let e = SymmetricEigen::new(c).eigenvalues;
        prop_assert!(e.min() >= -1e-12 * e.max());
    }

    #[test]
    fn partition_is_total_and_pure(seed in 0u64..1000) {
        let mut scene = mixed_scene(seed, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut scene.gaussians {
            g.sem_logits.iter_mut().for_each(|l| *l = rng.gen_range(-3.0..3.0));
        }
        let table = scene.class_table.clone();
        let p = partition(&scene, &table);
        prop_assert_eq!(p.dyn_idx.len() + p.static_idx.len(), scene.len());
        prop_assert!(p.sky_idx.iter().all(|i| !p.dyn_idx.contains(i)));
        prop_assert_eq!(&p, &partition(&scene, &table));
        let k: f64 = rng.gen_range(0.01..50.0);
        for g in &mut scene.gaussians {
            g.sem_logits.iter_mut().for_each(|l| *l *= k);
        }
        prop_assert_eq!(p, partition(&scene, &table));
    }

    #[test]
    fn deformation_respects_partition(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let scene = mixed_scene(seed, 40);
        prop_assert!(validate_scene(&scene).is_empty());
        let net = busy_net(seed);
        let (a, _) = deform(&scene, Some(&net), t).unwrap();
        let (b, _) = deform(&scene, Some(&net), t).unwrap();
        prop_assert_eq!(&a, &b);
        for &i in &scene.static_idx {
            let g = &scene.gaussians[i];
            prop_assert_eq!(a[i].mu_t, g.mu);
            prop_assert_eq!(a[i].alpha_t, g.opacity);
            prop_assert_eq!(a[i].rot_t, g.rot);
            prop_assert_eq!(a[i].scale_t, g.scale);
        }
        for d in &a {
            let c = covariance(&d.rot_t, &d.scale_t);
            prop_assert!((c - d.cov_t).abs().max() <= 1e-10);
            prop_assert!((quat_norm(&d.rot_t) - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d.alpha_t));
        }
    }

    #[test]
    fn compositing_invariants(seed in 0u64..1000, count in 1usize..40) {
        let cam = camera(20, 18);
        let list = splats(seed, count, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sky = SkyTexture::constant(16, 8, [0.0; 3]);
        sky.texels.iter_mut().for_each(|t| *t = rng.gen());
        let (buf, cache) = rasterize(&list, &cam, &sky).unwrap();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let p = v * cam.width + u;
                let ts = cache.pixel_transmittances(u, v);
                prop_assert!(ts.windows(2).all(|w| w[1] <= w[0]));
                let a = buf.alpha[p];
                prop_assert!((0.0..=1.0).contains(&a));
                if a == 0.0 {
                    let s = SkyTaps::new(sky.width, sky.height, &cam.pixel_ray_world(u as f64, v as f64)).sample(&sky);
                    prop_assert_eq!(&buf.color[3 * p..3 * p + 3], &s[..]);
                }
            }
        }
        // Input order must not matter: ties are broken by source index.
        let mut shuffled = list.clone();
        shuffled.shuffle(&mut rng);
        let (again, _) = rasterize(&shuffled, &cam, &sky).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_matches(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, k) = (12, 11, 6);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        prop_assert!(l1_loss(&a, &b).unwrap().0 >= 0.0);
        prop_assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        prop_assert!(ssim_loss(w, h, &a, &b).unwrap().0 >= 0.0);
        prop_assert!(ssim_loss(w, h, &a, &a).unwrap().0.abs() <= 1e-12);

        let gt: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..k as u8)).collect();
        let soft: Vec<f64> = (0..w * h * k).map(|_| rng.gen_range(0.0..0.3)).collect();
        let mut exact = vec![0.0; w * h * k];
        for (p, &c) in gt.iter().enumerate() {
            exact[p * k + c as usize] = 1.0;
        }
        prop_assert!(semantic_ce_loss(&soft, k, &gt, None).unwrap().0 >= 0.0);
        // Only the smoothing epsilon separates an exact match from zero.
        prop_assert!(semantic_ce_loss(&exact, k, &gt, None).unwrap().0 <= 1e-5);

        let depth: Vec<f64> = (0..w * h).map(|_| rng.gen_range(1.0..30.0)).collect();
        let alpha = vec![1.0; w * h];
        let samples: Vec<DepthSample> = (0..20)
            .map(|_| {
                let (u, v) = (rng.gen_range(0..w), rng.gen_range(0..h));
                DepthSample { u, v, depth: depth[v * w + u] }
            })
            .collect();
        // The stabilizing epsilon in the inverse keeps this slightly above zero.
        prop_assert!(inv_depth_loss(&depth, &alpha, w, &samples).unwrap().0 <= 1e-6);
        let far: Vec<DepthSample> = samples.iter().map(|s| DepthSample { depth: s.depth * 2.0, ..*s }).collect();
        prop_assert!(inv_depth_loss(&depth, &alpha, w, &far).unwrap().0 > 0.0);
    }

    #[test]
    fn ground_loss_ignores_rigid_translation(seed in 0u64..1000, k in prop::sample::select(vec![4usize, 8, 16])) {
        let mut scene = mixed_scene(seed, 80);
        for g in &mut scene.gaussians {
            g.sem_logits = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        }
        scene.ground_idx = (0..scene.len()).collect();
        scene.static_idx = (0..scene.len()).collect();
        scene.dyn_idx.clear();
        scene.sky_idx.clear();
        let (before, _) = ground_consistency_loss(&scene, &GroundNeighbors::build(&scene, k, 0));
        prop_assert!(before >= 0.0);
        // A power-of-two offset keeps every coordinate difference exact.
        for g in &mut scene.gaussians {
            g.mu += Vector3::new(64.0, -128.0, 32.0);
        }
        let (after, _) = ground_consistency_loss(&scene, &GroundNeighbors::build(&scene, k, 0));
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
        for g in &mut scene.gaussians {
            g.scale = Vector3::new(0.3, 0.2, 0.1);
        }
        prop_assert!(ground_consistency_loss(&scene, &GroundNeighbors::build(&scene, k, 0)).0 <= 1e-28);
    }

    #[test]
    fn knn_neighbors_are_closest(seed in 0u64..1000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = (0..60)
            .map(|_| Vector3::new(rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64, rng.gen_range(0..3) as f64))
            .collect();
        let index = KnnIndex::build(pts.clone(), 0);
        for i in 0..pts.len() {
            let got = index.query(i, n);
            prop_assert_eq!(got.len(), n);
            prop_assert!(!got.contains(&i));
            let worst = got.iter().map(|&j| (pts[j] - pts[i]).norm_squared()).fold(0.0, f64::max);
            for j in (0..pts.len()).filter(|j| *j != i && !got.contains(j)) {
                prop_assert!((pts[j] - pts[i]).norm_squared() >= worst);
            }
        }
    }
}
