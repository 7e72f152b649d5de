use dc2_core::dfnet::{random_input, Dfnet, ModelConfig};
use dc2_core::metrics::{fov_align, psnr, ssim, AlignSearch};
use dc2_core::optics::{coc_radius_mm, defocus_map, CameraIntrinsics, DepthMap, LensState};
use dc2_core::synth::{disc_kernel, focus_stack_merge, render_rgbd, MergeConfig, RenderConfig};
use dc2_core::train::sample_pair;
use dc2_core::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cam(f: f64, a: f64) -> CameraIntrinsics {
    CameraIntrinsics::centered(f, a, 0.0014, 8, 8)
}

fn noise(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Image::from_fn(w, h, c, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

/// Band-limited pattern with enough frequencies that scale and shift are
/// not interchangeable; evaluated analytically at any position.
fn wave(seed: u64, c: usize, x: f64, y: f64) -> f32 {
    let p = seed as f64 * 0.37;
    let c = c as f64;
    (0.5 + 0.12 * (0.31 * x + 0.17 * y + p + c).sin()
        + 0.12 * (0.23 * y - 0.11 * x + 2.0 * p).cos()
        + 0.1 * (0.07 * x * (1.0 + 0.01 * y) + 0.5 * c).sin()
        + 0.1 * (0.5 * x - 0.4 * y + 3.0 * p).sin()) as f32
}

proptest! {
    #[test]
    fn coc_is_zero_in_focus_and_linear_in_aperture(
        f in 1.0f64..30.0, a in 0.0f64..8.0, focus_k in 1.5f64..200.0, depth in 10.0f64..1e5,
    ) {
        let focus = f * focus_k;
        let c = cam(f, a);
        prop_assert_eq!(coc_radius_mm(&c, &LensState::new(focus), focus).unwrap(), 0.0);
        let r = coc_radius_mm(&c, &LensState::new(focus), depth).unwrap();
        let r2 = coc_radius_mm(&cam(f, 2.0 * a), &LensState::new(focus), depth).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r2 - 2.0 * r).abs() <= 1e-12 * r2.abs().max(1e-300));
    }

    #[test]
    fn coc_grows_away_from_the_focus_plane(
        f in 1.0f64..30.0, a in 0.1f64..8.0, focus_k in 1.5f64..200.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
    ) {
        // Farther from focus (in diopters) on the same side means a larger circle.
        let focus = f * focus_k;
        let c = cam(f, a);
        let lens = LensState::new(focus);
        let (near, far) = (t1.min(t2), t1.max(t2));
        let behind = |t: f64| 1.0 / (1.0 / focus * (1.0 - t) + 1e-9 * t);
        let r_near = coc_radius_mm(&c, &lens, behind(near)).unwrap();
        let r_far = coc_radius_mm(&c, &lens, behind(far)).unwrap();
        prop_assert!(r_far + 1e-12 >= r_near);
    }

    #[test]
    fn disc_kernels_are_normalized_and_symmetric(r in 0.0f64..12.0) {
        let taps = disc_kernel(r);
        let sum: f64 = taps.iter().map(|t| t.2).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for &(dx, dy, w) in &taps {
            let mirror = taps.iter().find(|t| t.0 == -dy && t.1 == dx).map(|t| t.2);
            prop_assert_eq!(mirror, Some(w));
        }
    }

    #[test]
    fn rendering_preserves_mean_of_constant_images(v in 0.0f32..1.0, focus in 300.0f64..3000.0, seed in 0u64..100) {
        let depth = noise(12, 10, 1, seed).map(|d| 400.0 + 3000.0 * d);
        let depth = DepthMap::new(12, 10, depth.into_vec()).unwrap();
        let c = CameraIntrinsics::centered(4.0, 2.0, 0.0014, 12, 10);
        let aif = Image::filled(12, 10, 3, v);
        let (out, _) = render_rgbd(&aif, &depth, &c, &LensState::new(focus), &RenderConfig::default()).unwrap();
        for &p in out.data() {
            prop_assert!((p - v).abs() < 1e-5);
        }
    }

    #[test]
    fn metric_identities(seed in 0u64..1000) {
        let a = noise(16, 12, 3, seed);
        let b = noise(16, 12, 3, seed + 1);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn merging_identical_slices_is_identity(seed in 0u64..1000, n in 1usize..5) {
        let a = noise(10, 9, 3, seed);
        let slices: Vec<&Image> = (0..n).map(|_| &a).collect();
        let m = focus_stack_merge(&slices, &MergeConfig::default()).unwrap();
        prop_assert!(m.max_abs_diff(&a) < 1e-6);
    }

    #[test]
    fn pairs_are_distinct_and_in_range(n in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let (r, t) = sample_pair(n, &mut rng).unwrap();
            prop_assert!(r != t && r < n && t < n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn blending_masks_are_convex(seed in any::<u64>(), wd in 1usize..4, hd in 1usize..4) {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = seed;
        let model: Dfnet<f32> = Dfnet::build(&cfg).unwrap();
        let out = model.forward(&random_input(8 * wd, 8 * hd, seed ^ 1).unwrap()).unwrap();
        for (s, m) in out.masks.iter().enumerate() {
            let div = 8 >> s;
            prop_assert_eq!(m.dims(), (wd * 8 / div, hd * 8 / div));
            for (a, b) in m.plane(0).iter().zip(m.plane(1)) {
                prop_assert!(*a >= 0.0 && *b >= 0.0 && (a + b - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn alignment_undoes_grid_transforms(seed in 0u64..1000, si in 0usize..21, tx in -8i32..=8, ty in -8i32..=8) {
        let search = AlignSearch::default();
        let (w, h) = (96, 80);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let scale = search.scales()[si];
        let (tx, ty) = (tx as f64, ty as f64);
        let truth = Image::from_fn(w, h, 3, |c, x, y| wave(seed, c, x as f64, y as f64));
        // Aligning `pred` with (scale, tx, ty) gives back `truth`.
        let pred = Image::from_fn(w, h, 3, |c, x, y| {
            wave(seed, c, cx + scale * (x as f64 - cx) + tx, cy + scale * (y as f64 - cy) + ty)
        });
        let (p, _) = fov_align(&pred, &truth, &search).unwrap();
        prop_assert!((p.scale - scale).abs() <= search.scale_step() + 1e-9, "{p:?} vs {scale}");
        prop_assert!((p.tx - tx).abs() <= 1.0 && (p.ty - ty).abs() <= 1.0, "{p:?} vs {tx},{ty}");
    }
}

#[test]
fn zero_aperture_maps_are_zero() {
    let depth = DepthMap::new(8, 8, noise(8, 8, 1, 3).map(|d| 300.0 + 1e4 * d).into_vec()).unwrap();
    let m = defocus_map(&cam(4.0, 0.0), &LensState::new(900.0), &depth).unwrap();
    assert_eq!(m.max_radius(), 0.0);
}

fn two_layer_stack(seed: u64) -> dc2_core::synth::FocusStack {
    use dc2_core::synth::{generate_scene, generate_stack_at, CameraRig, SceneConfig, TextureKind};
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        n_layers: 2,
        texture: TextureKind::Noise,
        depth_range_mm: (400.0, 3000.0),
    };
    let rig = CameraRig::default_for(64, 64);
    let scene = generate_scene(seed, &cfg, &rig.w_cam).unwrap();
    let lenses: Vec<LensState> = scene.descriptor.layers.iter().map(|l| LensState::new(l.depth_mm)).collect();
    generate_stack_at(&scene, &rig, &lenses).unwrap()
}

#[test]
fn merging_two_focused_layers_beats_either_slice() {
    for seed in 0..4 {
        let stack = two_layer_stack(seed);
        let slices: Vec<&Image> = stack.slices.iter().map(|s| &s.w_slice).collect();
        let merged = focus_stack_merge(&slices, &MergeConfig::default()).unwrap();
        let best = slices.iter().map(|s| psnr(s, stack.aif_image()).unwrap()).fold(f64::MIN, f64::max);
        let m = psnr(&merged, stack.aif_image()).unwrap();
        assert!(m >= best, "seed {seed}: merged {m:.2} dB, best slice {best:.2} dB");
    }
}

#[test]
fn merging_generated_stacks_is_no_worse_than_the_best_slice() {
    use dc2_core::synth::{generate_scene, generate_stack, CameraRig, SceneConfig};
    for seed in 0..3 {
        let cfg = SceneConfig { width: 64, height: 64, ..SceneConfig::default() };
        let rig = CameraRig::default_for(64, 64);
        let stack = generate_stack(&generate_scene(seed, &cfg, &rig.w_cam).unwrap(), &rig, 6).unwrap();
        let slices: Vec<&Image> = stack.slices.iter().map(|s| &s.w_slice).collect();
        let merged = focus_stack_merge(&slices, &MergeConfig::default()).unwrap();
        let best = slices.iter().map(|s| psnr(s, stack.aif_image()).unwrap()).fold(f64::MIN, f64::max);
        let m = psnr(&merged, stack.aif_image()).unwrap();
        assert!(m >= best, "seed {seed}: merged {m:.2} dB, best slice {best:.2} dB");
    }
}
