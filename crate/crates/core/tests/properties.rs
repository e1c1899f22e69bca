mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smoke_gs::camera::Camera;
use smoke_gs::data::{quantize, read_image, write_image};
use smoke_gs::image::ImageBuffer;
use smoke_gs::loss::{combined_loss, psnr_from_mse, ssim_value, LossConfig, DEFAULT_PSNR_CAP};
use smoke_gs::medium::{encode_directions, fuse, medium_forward, MediumWeights};
use smoke_gs::optim::{adam_step, sh_warmup, AdamConfig, OptimState};
use smoke_gs::raster::{rasterize, RenderConfig};
use smoke_gs::scene::{init_scene, Aabb, GradientSet};

fn image(w: usize, h: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0..1.0f64, w * h * 3).prop_map(move |d| ImageBuffer::from_data(w, h, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_vanishes_on_identical_images(x in image(12, 12)) {
        let l = combined_loss(&x, &x, &LossConfig::default()).unwrap();
        prop_assert!(l.total.abs() < 1e-12);
        prop_assert!(l.grad.data.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn ssim_is_symmetric(a in image(13, 11), b in image(13, 11)) {
        let cfg = LossConfig::default();
        let ab = ssim_value(&a, &b, &cfg).unwrap();
        let ba = ssim_value(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows(mse in 1e-8..1.0f64, k in 1.01..10.0f64) {
        prop_assert!(psnr_from_mse(mse * k, DEFAULT_PSNR_CAP) < psnr_from_mse(mse, DEFAULT_PSNR_CAP));
    }

    #[test]
    fn warmup_degree_formula(step in 0u64..1_000_000, interval in 1u64..50_000) {
        prop_assert_eq!(sh_warmup(step, interval) as u64, (step / interval).min(3));
    }

    #[test]
    fn fusion_adds_weighted_medium(seed in 0u64..1000, weight in 0.0..1.0f64) {
        let scene = common::random_scene(6, seed);
        let cam = common::look_camera(10, [0.2, -0.3, 3.0]);
        let base = rasterize(&scene, &cam, &RenderConfig::default()).unwrap().image;
        let w = MediumWeights::init(&mut ChaCha8Rng::seed_from_u64(seed));
        let feats = encode_directions(&cam.ray_direction_field()).unwrap();
        let med = medium_forward(&w, &feats, 10, 10).unwrap().outputs;
        let fused = fuse(&base, &med, weight).unwrap();
        for i in 0..fused.data.len() {
            prop_assert_eq!(fused.data[i], base.data[i] + weight * med.rgb.data[i]);
        }
    }

    #[test]
    fn render_is_bounded_and_transmittance_valid(seed in 0u64..1000) {
        let scene = common::random_scene(12, seed);
        let cam = common::look_camera(16, [0.5, 0.1, 3.0]);
        let out = rasterize(&scene, &cam, &RenderConfig::default()).unwrap();
        prop_assert!(out.transmittance.iter().all(|t| (0.0..=1.0).contains(t)));
        // Colors are clamped at zero from below; contributions sum to at most 1 - T.
        prop_assert!(out.image.data.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn first_adam_step_is_bounded_by_the_rate(seed in 0u64..1000, scale in 1e-3..1e3f64) {
        let mut scene = init_scene(3, &Aabb::unit_cube(), seed).unwrap();
        let before = scene.clone();
        let cfg = AdamConfig::default();
        let mut st = OptimState::new(&scene, cfg.clone()).unwrap();
        let mut g = GradientSet::zeroed_like(&scene);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in g.tensors_mut() {
            for v in t.iter_mut() {
                *v = scale * rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
        }
        adam_step(&mut st, &mut scene, &g).unwrap();
        let lrs = [cfg.lr.positions, cfg.lr.rotations, cfg.lr.scales, cfg.lr.opacities, cfg.lr.sh_dc];
        for (t, ((_, a), (_, b))) in scene.tensors().iter().zip(before.tensors().iter()).enumerate().take(4) {
            for i in 0..a.len() {
                let step = (a[i] - b[i]).abs();
                // First step: lr * g / (|g| + eps), just under lr.
                let gi = g.tensors()[t][i].abs();
                let expect = lrs[t] * gi / (gi + cfg.eps);
                prop_assert!((step - expect).abs() <= 1e-12 * lrs[t].max(1.0));
            }
        }
    }

    #[test]
    fn quantized_round_trip(x in image(5, 4)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        write_image(&x, &p).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in x.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
            prop_assert_eq!(quantize(*a), (b * 255.0).round() as u8);
        }
    }

    #[test]
    fn downscaled_rays_agree(factor in 1usize..4, px in 0usize..8, py in 0usize..8) {
        let full = Camera::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 48.0, 48, 48).unwrap();
        let small = full.downscaled(factor).unwrap();
        prop_assume!(px < small.width && py < small.height);
        // Pixel centre of the coarse pixel is the centre of its block in the fine image.
        let fine_u = (px as f64 + 0.5) * factor as f64;
        let fine_v = (py as f64 + 0.5) * factor as f64;
        let a = small.pixel_ray_world(px as f64 + 0.5, py as f64 + 0.5);
        let b = full.pixel_ray_world(fine_u, fine_v);
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-6);
        }
    }
}
