use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use styleinv_core::checkpoint::{
    encoder_checkpoint, encoder_from_checkpoint, generator_checkpoint, generator_from_checkpoint, Checkpoint,
};
use styleinv_core::config::RunConfig;
use styleinv_core::encoders::{broadcast_to_extended, EncoderConfig, EncoderParams};
use styleinv_core::evaluation::{invariance_ratio, nn_retrieval_accuracy};
use styleinv_core::field_core::{composite_ray, generate_camera_rays, sample_along_ray, CameraPose, RenderConfig};
use styleinv_core::generator::{synthesize_image, GeneratorConfig, GeneratorParams};
use styleinv_core::losses::{triplet_from_distances, triplet_rows_with_grad};

fn small() -> (GeneratorParams<f64>, RenderConfig) {
    let render = RenderConfig { image_height: 8, image_width: 8, samples_per_ray: 12, ..Default::default() };
    let g = GeneratorParams::new(
        GeneratorConfig { latent_dim: 8, num_layers: 3, width: 16, mapping_depth: 2, ..Default::default() },
        &render,
        3,
    )
    .unwrap();
    (g, render)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_vanishes_outside_the_bound(yaw in -60.0f64..60.0, roll in -20.0f64..20.0, seed in 0u64..1000) {
        let (g, render) = small();
        let pose = CameraPose::new(yaw, roll, 4.0).unwrap();
        let samples = sample_along_ray(&generate_camera_rays::<f64>(&pose, &render).unwrap(), &render, false, 0).unwrap();
        let w = g.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed));
        let (sigma, _) = g.query_field(&samples, &w).unwrap();
        let bound = g.config().bound_radius;
        for (row, s) in samples.positions.rows().into_iter().zip(&sigma) {
            prop_assert!(*s >= 0.0);
            if row.dot(&row).sqrt() > bound {
                prop_assert_eq!(*s, 0.0);
            }
        }
    }

    #[test]
    fn render_equals_compositing_every_sample(yaw in -45.0f64..45.0, seed in 0u64..1000) {
        // The renderer skips samples outside the bound; compositing the full
        // field query must give the same image.
        let (g, render) = small();
        let pose = CameraPose::from_yaw(yaw);
        let w = g.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed));
        let image = synthesize_image(&w, &pose, &g, &render).unwrap();
        let samples = sample_along_ray(&generate_camera_rays::<f64>(&pose, &render).unwrap(), &render, false, 0).unwrap();
        let (sigma, rgb) = g.query_field(&samples, &w).unwrap();
        let s = render.samples_per_ray;
        for r in 0..samples.num_rays() {
            let t: Vec<f64> = samples.t_values.row(r).to_vec();
            let out = composite_ray(&sigma[r * s..(r + 1) * s], &rgb[r * s..(r + 1) * s], &t, samples.far, [1.0; 3]).unwrap();
            let (y, x) = (r / render.image_width, r % render.image_width);
            for c in 0..3 {
                prop_assert!((out.color[c] - image[[y, x, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triplet_loss_is_a_hinge(m in 0.01f64..2.0, d_pos in 0.0f64..3.0, d_neg in 0.0f64..3.0) {
        let l = triplet_from_distances(m, d_pos, d_neg);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, d_neg >= m + d_pos);
    }

    #[test]
    fn satisfied_triplets_have_no_gradient(seed in 0u64..1000, gap in 0.5f64..2.0) {
        // Negative farther than margin + positive distance: zero loss and gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rows = Array2::zeros((3, 6));
        for k in 0..6 {
            rows[[0, k]] = a[k];
            rows[[1, k]] = a[k] + 0.01;
            rows[[2, k]] = a[k];
        }
        rows[[2, 0]] += 0.2 + 0.01 * 6f64.sqrt() + gap;
        let (loss, grad) = triplet_rows_with_grad(&rows, &[(0, 1, 2)], 0.2);
        prop_assert_eq!(loss[0], 0.0);
        prop_assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invariance_metrics_ignore_latent_scale(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let scaled = &latents * scale;
        let (r0, r1) = (invariance_ratio(&latents, &labels).unwrap(), invariance_ratio(&scaled, &labels).unwrap());
        prop_assert!((r0 - r1).abs() < 1e-12 * r0.max(1.0));
        prop_assert_eq!(nn_retrieval_accuracy(&latents, &labels).unwrap(), nn_retrieval_accuracy(&scaled, &labels).unwrap());
    }

    #[test]
    fn checkpoints_reject_any_flipped_byte(position in 0usize..10_000, bit in 0u8..8) {
        let (g, _) = small();
        let bytes = generator_checkpoint(&g).unwrap().to_bytes();
        let mut bad = bytes.clone();
        let i = position % bad.len();
        bad[i] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}

#[test]
fn identical_latents_give_identical_views_from_w_and_w_plus() {
    let (g, render) = small();
    let w = g.sample_latent(&mut ChaCha8Rng::seed_from_u64(4));
    let wp = broadcast_to_extended(&w, g.num_layers());
    for yaw in [-35.0, 0.0, 35.0] {
        let pose = CameraPose::from_yaw(yaw);
        assert_eq!(synthesize_image(&w, &pose, &g, &render).unwrap(), synthesize_image(&wp, &pose, &g, &render).unwrap());
    }
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let (g, render) = small();
    let ck = generator_checkpoint(&g).unwrap();
    let g2: GeneratorParams<f64> = generator_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(g2.digest(), g.digest());
    assert_eq!(generator_checkpoint(&g2).unwrap().to_bytes(), ck.to_bytes());

    let ecfg = EncoderConfig { base_widths: vec![8, 16], refine_widths: vec![8, 16], pyramid_width: 8, pose_head: true };
    let e = EncoderParams::new(ecfg, &g, &render, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.ckpt");
    encoder_checkpoint(&e, &render, "hash".into()).unwrap().save(&path).unwrap();
    let (e2, render2) = encoder_from_checkpoint::<f64>(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(e2.digest(), e.digest());
    assert_eq!(render2, render);
}

#[test]
fn encoder_checkpoint_is_not_a_generator() {
    let (g, render) = small();
    let ecfg = EncoderConfig { base_widths: vec![8], refine_widths: vec![8], pyramid_width: 8, pose_head: false };
    let e = EncoderParams::new(ecfg, &g, &render, 5).unwrap();
    let ck = encoder_checkpoint(&e, &render, "hash".into()).unwrap();
    assert!(generator_from_checkpoint::<f64>(&ck).is_err());
}

#[test]
fn written_config_snapshot_resolves_to_the_same_run() {
    let overrides = ["train.total_steps=77".to_string(), "seeds.generator=9".to_string(), "render.samples_per_ray=8".to_string()];
    let cfg = RunConfig::resolve(None, &overrides).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.toml");
    cfg.write_snapshot(&path).unwrap();
    let again = RunConfig::resolve(Some(&path), &[]).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
    assert_eq!(cfg.train.total_steps, 77);
}
