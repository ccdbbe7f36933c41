//! End-to-end acceptance run at desk scale (32x32 images, 2000 training
//! steps). Prints one PASS/FAIL line per criterion and exits nonzero if any
//! criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run to a subset of criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use styleinv_core::config::RunConfig;
use styleinv_core::encoders::{broadcast_to_extended, encode_base, refine_iterative, EncoderConfig, EncoderParams};
use styleinv_core::evaluation::{
    eval_reconstruction, evaluate_variant, run_ablation, view_invariance, AblationMetrics,
    AblationSetup, InvarianceMetrics, MetricModules, TestSet,
};
use styleinv_core::field_core::{
    composite_ray, composite_ray_backward, generate_camera_rays, sample_along_ray, CameraPose, RenderConfig,
};
use styleinv_core::generator::{synthesize_image, GeneratorConfig, GeneratorParams, Image, StyleLatent};
use styleinv_core::inversion::{invert_image, optimize_latent, pivotal_tune, InvertConfig};
use styleinv_core::losses::{
    identity_similarity, triplet_from_distances, triplet_loss, triplet_rows_with_grad, EmbedderConfig,
    EmbedderReport, IdentityEmbedder, LossWeights, PerceptualProxy, TripletConfig,
};
use styleinv_core::rng::{derive_seed, stream, tag};
use styleinv_core::training::{
    checkpoint_path, fit, loss_and_grads, FitOptions, LossModules, SampleKind, StepRecord, TrainConfig,
    TrainingBatch, TrainingSample, Variant,
};

type F = f32;

/// Settings shared by both starts. Latent optimisation uses the `optimize`
/// command defaults; pivotal tuning uses a small learning rate.
const OPT_STEPS: usize = 100;
const OPT_LR: f64 = 0.01;
const TUNE_STEPS: usize = 200;
const TUNE_LR: f64 = 1e-4;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

// ---------------------------------------------------------------------------
// Shared desk-scale fixtures

struct Desk {
    cfg: RunConfig,
    generator: GeneratorParams<F>,
    train_embedder: (IdentityEmbedder<F>, EmbedderReport, f64),
    eval_embedder: (IdentityEmbedder<F>, EmbedderReport, f64),
    real_pool: Vec<Image<F>>,
    test_set: TestSet<F>,
}

impl Desk {
    fn losses(&self) -> LossModules<F> {
        self.cfg.loss_modules(self.train_embedder.0.clone())
    }

    fn metrics(&self) -> MetricModules<F> {
        self.cfg.metric_modules(self.eval_embedder.0.clone())
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = RunConfig::default();
        let generator = cfg.build_generator().expect("generator");
        let timed = |eval: bool| {
            let t = Instant::now();
            let (e, r) = cfg.train_embedder(&generator, eval).expect("embedder training");
            (e, r, t.elapsed().as_secs_f64())
        };
        let train_embedder = timed(false);
        let eval_embedder = timed(true);
        let real_pool = cfg.build_real_pool().expect("real pool");
        let test_set = cfg.build_test_set(&generator).expect("test set");
        Desk { cfg, generator, train_embedder, eval_embedder, real_pool, test_set }
    })
}

struct Trained {
    encoder: EncoderParams<F>,
    log: Vec<StepRecord>,
    untrained: InvarianceMetrics,
    seconds: f64,
    /// Log and checkpoints of this run.
    dir: tempfile::TempDir,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let d = desk();
        let cfg = &d.cfg;
        let initial = EncoderParams::new(cfg.encoder.clone(), &d.generator, &cfg.render, cfg.train.seed).unwrap();
        let untrained = invariance(&initial, d);
        let dir = tempfile::tempdir().expect("temp dir");
        let t = Instant::now();
        let out = fit(&cfg.train, &cfg.encoder, &d.generator, &d.real_pool, &d.losses(), &cfg.render, &run_options(dir.path()))
            .expect("training");
        Trained { encoder: out.encoder, log: out.log, untrained, seconds: t.elapsed().as_secs_f64(), dir }
    })
}

fn run_options(dir: &Path) -> FitOptions {
    FitOptions { log_path: Some(dir.join("train.jsonl")), checkpoint_dir: Some(dir.to_path_buf()), ..Default::default() }
}

/// Invariance over 32 held-out identities x 4 views, disjoint from training
/// streams.
fn invariance(encoder: &EncoderParams<F>, d: &Desk) -> InvarianceMetrics {
    view_invariance(
        encoder,
        &d.generator,
        &d.cfg.render,
        d.cfg.data.invariance_identities,
        d.cfg.data.invariance_views,
        d.cfg.train.yaw_range,
        derive_seed(d.cfg.seeds.test, tag::TEST_SYNTH, 1 << 32),
    )
    .expect("invariance")
}

fn setup<'a>(d: &'a Desk, losses: &'a LossModules<F>, metrics: &'a MetricModules<F>) -> AblationSetup<'a, F> {
    setup_with(&d.cfg, &d.generator, &d.real_pool, losses, metrics, &d.test_set)
}

fn setup_with<'a>(
    cfg: &'a RunConfig,
    generator: &'a GeneratorParams<F>,
    real_pool: &'a [Image<F>],
    losses: &'a LossModules<F>,
    metrics: &'a MetricModules<F>,
    test_set: &'a TestSet<F>,
) -> AblationSetup<'a, F> {
    AblationSetup {
        train: &cfg.train,
        encoder: &cfg.encoder,
        generator,
        real_pool,
        losses,
        metrics,
        render: &cfg.render,
        test_set,
        invariance_identities: cfg.data.invariance_identities,
        invariance_views: cfg.data.invariance_views,
        eval_seed: cfg.seeds.test,
    }
}

// ---------------------------------------------------------------------------
// 1. Renderer oracle

fn criterion_1() -> Vec<Outcome> {
    let t = Instant::now();
    let mut worst = [0.0f64; 2];
    for (k, samples) in [128usize, 1024].into_iter().enumerate() {
        let cfg = RenderConfig { image_height: 4, image_width: 4, samples_per_ray: samples, ..Default::default() };
        let rays = generate_camera_rays::<f64>(&CameraPose::from_yaw(12.0), &cfg).unwrap();
        let s = sample_along_ray(&rays, &cfg, false, 0).unwrap();
        let t_values = s.t_values.row(0).to_vec();
        for sigma in [0.01, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 20.0] {
            for c in [[1.0, 0.5, 0.25], [0.2, 0.9, 0.0]] {
                let out = composite_ray(&vec![sigma; samples], &vec![c; samples], &t_values, s.far, [0.0; 3]).unwrap();
                for ch in 0..3 {
                    let expect = c[ch] * (1.0 - (-sigma * (cfg.far - cfg.near)).exp());
                    worst[k] = worst[k].max((out.color[ch] - expect).abs());
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_norm = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let dens: Vec<f64> = ts.iter().map(|_| (rng.random_range(-6.0..3.0f64)).exp()).collect();
        let cols: Vec<[f64; 3]> = ts.iter().map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let out = composite_ray(&dens, &cols, &ts, 10.0 + rng.random_range(0.0..1.0), [1.0; 3]).unwrap();
        let total: f64 = out.weights.iter().sum::<f64>() + out.transmittance_final;
        worst_norm = worst_norm.max((total - 1.0).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    vec![
        outcome("1a", worst[0] < 1e-3, format!("constant density, 128 samples: max error {:.2e} (< 1e-3)", worst[0])),
        outcome("1b", worst[1] < 1e-4, format!("constant density, 1024 samples: max error {:.2e} (< 1e-4)", worst[1])),
        outcome("1c", worst_norm < 1e-6, format!("sum of weights + final transmittance on 1000 rays: max |1 - s| {worst_norm:.2e} (< 1e-6)")),
        outcome("1t", secs < 10.0, format!("renderer oracle runtime {secs:.2} s (< 10 s)")),
    ]
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

fn criterion_2a() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let ts: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1 + rng.random_range(0.0..0.05)).collect();
        let far = ts[n - 1] + 0.1;
        let dens: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..3.0)).collect();
        let cols: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let bg = [rng.random(), rng.random(), rng.random()];
        let dc = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let objective = |d: &[f64]| {
            let c = composite_ray(d, &cols, &ts, far, bg).unwrap().color;
            c[0] * dc[0] + c[1] * dc[1] + c[2] * dc[2]
        };
        let (analytic, _) = composite_ray_backward(&dens, &cols, &ts, far, bg, dc).unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let mut p = dens.clone();
                let mut m = dens.clone();
                p[i] += h;
                m[i] -= h;
                (objective(&p) - objective(&m)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    outcome("2a", worst < 1e-5, format!("compositing gradient w.r.t. densities, f64, 50 rays: max relative error {worst:.2e} (< 1e-5)"))
}

/// Small models for the total-loss gradient check, built in f32 and cast
/// exactly to f64 for the finite differences.
fn criterion_2b() -> Outcome {
    let render = RenderConfig { image_height: 8, image_width: 8, samples_per_ray: 8, ..Default::default() };
    let gcfg = GeneratorConfig { latent_dim: 8, num_layers: 3, width: 16, mapping_depth: 2, ..Default::default() };
    let g32 = GeneratorParams::<F>::new(gcfg, &render, 21).unwrap();
    let ecfg = EncoderConfig { base_widths: vec![8, 16], refine_widths: vec![8, 16], pyramid_width: 8, pose_head: true };
    let mut e32 = EncoderParams::<F>::new(ecfg, &g32, &render, 22).unwrap();
    // Move away from the zero-initialised refiner heads so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for id in e32.store().ids().collect::<Vec<_>>() {
        e32.store_mut().get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.02..0.02));
    }
    let emb = IdentityEmbedder::<F>::new(EmbedderConfig { widths: vec![8, 16], embedding_dim: 8 }, 24).unwrap();
    let emb32 = IdentityEmbedder::from_store(emb.config().clone(), emb.store().clone()).unwrap();
    let losses32 = LossModules { perceptual: PerceptualProxy::<F>::new(25), embedder: emb32 };
    let cfg = TrainConfig {
        weights: LossWeights { lambda_feat_base: 1.0, lambda_img_base: 1.0, lambda_feat_ref: 1.0, lambda_img_ref: 1.0 },
        refine_iterations: 2,
        pose_loss_weight: 1e-3,
        ..Default::default()
    };
    let latent = g32.sample_latent(&mut stream(26, 0, 0));
    let pose = CameraPose::from_yaw(14.0);
    let image = synthesize_image(&latent, &pose, &g32, &render).unwrap();
    let batch32 = TrainingBatch {
        samples: vec![TrainingSample { image, kind: SampleKind::Synthetic { latent, pose, identity: 0 } }],
        triplets: vec![],
    };
    let (_, grads) = loss_and_grads(&e32, &batch32, &g32, &losses32, &cfg, &render, 0).unwrap();

    let g64 = g32.cast::<f64>();
    let losses64 = LossModules { perceptual: losses32.perceptual.cast::<f64>(), embedder: losses32.embedder.cast::<f64>() };
    let batch64 = TrainingBatch {
        samples: batch32
            .samples
            .iter()
            .map(|s| TrainingSample {
                image: s.image.mapv(f64::from),
                kind: match &s.kind {
                    SampleKind::Synthetic { latent, pose, identity } => SampleKind::Synthetic {
                        latent: StyleLatent::from_values(latent.values().mapv(f64::from)).unwrap(),
                        pose: *pose,
                        identity: *identity,
                    },
                    SampleKind::Real => SampleKind::Real,
                },
            })
            .collect(),
        triplets: vec![],
    };
    let mut e64 = e32.cast::<f64>();
    let objective = |e: &EncoderParams<f64>| {
        let (r, _) = loss_and_grads(e, &batch64, &g64, &losses64, &cfg, &render, 0).unwrap();
        r.loss + r.pose_loss
    };
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    // Trainable tensors only; the running mean latent is a frozen buffer.
    let ids: Vec<_> = e64.base_param_ids().into_iter().chain(e64.refine_param_ids()).collect();
    for id in ids {
        let len = e64.store().get(id).len();
        for _ in 0..3 {
            let k = rng.random_range(0..len);
            let orig = e64.store().get(id).as_slice().unwrap()[k];
            e64.store_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = objective(&e64);
            e64.store_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let down = objective(&e64);
            e64.store_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(f64::from(grads.get(id).as_slice().unwrap()[k]));
        }
    }
    let err = rel_err(&analytic, &numeric);
    outcome(
        "2b",
        err < 1e-3,
        format!("total loss gradient w.r.t. encoder parameters, 1 image 8x8, f32 analytic vs f64 differences over {} coordinates: relative error {err:.2e} (< 1e-3)", analytic.len()),
    )
}

fn criterion_2() -> Vec<Outcome> {
    let t = Instant::now();
    let mut out = vec![criterion_2a(), criterion_2b()];
    let secs = t.elapsed().as_secs_f64();
    out.push(outcome("2t", secs < 120.0, format!("gradient suite runtime {secs:.1} s (< 120 s)")));
    out
}

// ---------------------------------------------------------------------------
// 3. Exact identities

fn criterion_3() -> Vec<Outcome> {
    let render = RenderConfig { samples_per_ray: 12, ..Default::default() };
    let g = GeneratorParams::<F>::new(GeneratorConfig { width: 32, ..Default::default() }, &render, 31).unwrap();
    let mut enc = EncoderParams::<F>::new(EncoderConfig::default(), &g, &render, 32).unwrap();
    enc.zero_refine_heads();
    let mut same_image = true;
    let mut same_broadcast = true;
    for i in 0..4 {
        let w = g.sample_latent(&mut stream(33, 0, i));
        let pose = CameraPose::from_yaw(-30.0 + 20.0 * i as f64);
        let x = synthesize_image(&w, &pose, &g, &render).unwrap();
        let (w_base, _) = encode_base(&x, &enc).unwrap();
        let r = refine_iterative(&x, &w_base, &pose, 3, &enc, &g, &render).unwrap();
        same_image &= r.image_refined == r.image_base && r.w_plus_refined == broadcast_to_extended(&w_base, g.num_layers());
        let wp = broadcast_to_extended(&w, g.num_layers());
        same_broadcast &= synthesize_image(&wp, &pose, &g, &render).unwrap() == x;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..1000 {
        let m: f64 = rng.random_range(0.01..1.0);
        let d_pos: f64 = rng.random_range(0.0..2.0);
        let d_neg: f64 = rng.random_range(0.0..2.0);
        let expect = if m + d_pos - d_neg > 0.0 { m + d_pos - d_neg } else { 0.0 };
        exact &= triplet_from_distances(m, d_pos, d_neg) == expect;
        // Latents placed at the requested distances along random unit directions.
        let dim = 16;
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Array1<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.dot(&v).sqrt();
            v / n
        };
        let a: Array1<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = &a + &(unit(&mut rng) * d_pos);
        let n = &a + &(unit(&mut rng) * d_neg);
        let l = triplet_loss(
            &StyleLatent::from_values(a.clone()).unwrap(),
            &StyleLatent::from_values(p.clone()).unwrap(),
            &StyleLatent::from_values(n.clone()).unwrap(),
            &TripletConfig { margin: m, ..Default::default() },
        )
        .unwrap();
        let rows = ndarray::stack(ndarray::Axis(0), &[a.view(), p.view(), n.view()]).unwrap();
        let (batched, _) = triplet_rows_with_grad(&rows, &[(0, 1, 2)], m);
        worst = worst.max((l - expect).abs()).max((batched[0] - expect).abs());
    }
    vec![
        outcome("3a", same_image, "zero-residual refinement reproduces the base render bit-exactly".into()),
        outcome("3b", same_broadcast, "W and broadcast W+ synthesis are bit-identical".into()),
        outcome(
            "3c",
            exact && worst < 1e-12,
            format!("triplet arithmetic on 1000 random (m, d_pos, d_neg): distances form exact, latents form max deviation {worst:.1e}"),
        ),
    ]
}

// ---------------------------------------------------------------------------
// 4. Identity embedders

fn criterion_4() -> Vec<Outcome> {
    let d = desk();
    let line = |id, name: &str, e: &(IdentityEmbedder<F>, EmbedderReport, f64)| {
        outcome(
            id,
            e.1.heldout_accuracy >= 0.9 && e.2 < 600.0,
            format!(
                "{name} embedder: held-out view accuracy {:.3} over {} identities (>= 0.90), {:.0} s (< 600 s)",
                e.1.heldout_accuracy, d.cfg.embedder.num_identities, e.2
            ),
        )
    };
    let distinct = d.train_embedder.0.digest() != d.eval_embedder.0.digest();
    vec![
        line("4a", "training-loss", &d.train_embedder),
        line("4b", "evaluation", &d.eval_embedder),
        outcome("4c", distinct, "training and evaluation embedders have different weights".into()),
    ]
}

// ---------------------------------------------------------------------------
// 5. Training effect

fn criterion_5() -> Vec<Outcome> {
    let d = desk();
    let t = trained();
    let n = t.log.len();
    let window = 100.min(n);
    let mean = |r: &[StepRecord]| r.iter().map(StepRecord::image_loss).sum::<f64>() / r.len() as f64;
    let first = mean(&t.log[..window]);
    let last = mean(&t.log[n - window..]);
    let inv = invariance(&t.encoder, d);
    vec![
        outcome(
            "5a",
            last < 0.5 * first,
            format!("image loss over {n} steps: first-100 mean {first:.4}, last-100 mean {last:.4} (ratio {:.3} < 0.5)", last / first),
        ),
        outcome(
            "5b",
            inv.ratio < 0.5,
            format!("latent invariance ratio {:.3} (< 0.5); untrained baseline {:.3}", inv.ratio, t.untrained.ratio),
        ),
        outcome(
            "5c",
            inv.retrieval_accuracy >= 0.9,
            format!(
                "nearest-neighbour identity retrieval {:.3} on {} held-out identities x {} views (>= 0.90); untrained {:.3}",
                inv.retrieval_accuracy, d.cfg.data.invariance_identities, d.cfg.data.invariance_views, t.untrained.retrieval_accuracy
            ),
        ),
        outcome("5t", t.seconds < 3600.0, format!("training runtime {:.0} s (target < 3600 s)", t.seconds)),
    ]
}

// ---------------------------------------------------------------------------
// 6. Refinement benefit

fn criterion_6() -> Vec<Outcome> {
    let d = desk();
    let t = trained();
    let m = eval_reconstruction(&d.test_set, &t.encoder, &d.generator, &d.cfg.render, &d.metrics(), &InvertConfig::default())
        .expect("reconstruction");
    vec![outcome(
        "6",
        m.count == 64 && m.refined_not_worse >= 0.8,
        format!(
            "refined L2 <= base L2 on {:.1}% of {} held-out images (>= 80%); mean L2 base {:.5}, refined {:.5}",
            100.0 * m.refined_not_worse, m.count, m.l2_base, m.l2
        ),
    )]
}

// ---------------------------------------------------------------------------
// 7. Ablation orderings

fn criterion_7() -> Vec<Outcome> {
    let d = desk();
    let t = trained();
    let (losses, metrics) = (d.losses(), d.metrics());
    let s = setup(d, &losses, &metrics);
    let full = evaluate_variant(Variant::Full, &t.encoder, &s).expect("full metrics");
    let run = |v: Variant| -> AblationMetrics { run_ablation(v, &s, &FitOptions::default()).expect("ablation").1 };
    let no_triplet = run(Variant::NoTriplet);
    let wplus_only = run(Variant::WplusOnly);
    let w_only = run(Variant::WOnly);
    for m in [&full, &no_triplet, &wplus_only, &w_only] {
        println!(
            "    {:<11} ratio {:.3} retrieval {:.3} L2 {:.5} id {:.3} novel-view id {:?}",
            m.variant.name(),
            m.invariance.ratio,
            m.invariance.retrieval_accuracy,
            m.reconstruction.l2,
            m.reconstruction.id,
            m.novel_view.per_yaw.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    vec![
        outcome(
            "7a",
            full.invariance.ratio < no_triplet.invariance.ratio,
            format!("invariance ratio: full {:.3} < no_triplet {:.3}", full.invariance.ratio, no_triplet.invariance.ratio),
        ),
        outcome(
            "7b",
            full.novel_view_35() > wplus_only.novel_view_35(),
            format!("+-35 deg novel-view identity: full {:.4} > wplus_only {:.4}", full.novel_view_35(), wplus_only.novel_view_35()),
        ),
        outcome(
            "7c",
            full.reconstruction.l2 < w_only.reconstruction.l2,
            format!("same-view L2: full {:.5} < w_only {:.5}", full.reconstruction.l2, w_only.reconstruction.l2),
        ),
    ]
}

// ---------------------------------------------------------------------------
// 8. Online optimisation seeded by the encoder

fn random_start(g: &GeneratorParams<F>, i: usize) -> styleinv_core::generator::ExtendedLatent<F> {
    broadcast_to_extended(&g.sample_latent(&mut stream(desk().cfg.seeds.test, tag::RANDOM_INIT, i as u64)), g.num_layers())
}

fn criterion_8() -> Vec<Outcome> {
    let d = desk();
    let t = trained();
    let render = &d.cfg.render;
    let proxy = PerceptualProxy::<F>::new(d.cfg.seeds.perceptual_eval);
    let invert = InvertConfig::default();
    let mut fast = 0;
    for i in 0..32 {
        let x = &d.test_set.images[i].image;
        let r = invert_image(x, &t.encoder, &d.generator, render, &invert, None).unwrap();
        let (_, from_random) =
            optimize_latent(x, &random_start(&d.generator, i), &r.pose, &d.generator, render, &proxy, OPT_STEPS, OPT_LR).unwrap();
        let (_, from_encoder) =
            optimize_latent(x, &r.w_plus_refined, &r.pose, &d.generator, render, &proxy, OPT_STEPS, OPT_LR).unwrap();
        if from_encoder.first_reaching(*from_random.losses.last().unwrap()).is_some_and(|s| 2 * s <= OPT_STEPS) {
            fast += 1;
        }
    }
    let embedder = &d.eval_embedder.0;
    let (mut id_encoder, mut id_random) = (0.0, 0.0);
    for i in 0..16 {
        let x = &d.test_set.images[i].image;
        let r = invert_image(x, &t.encoder, &d.generator, render, &invert, None).unwrap();
        let random = random_start(&d.generator, i);
        for (pivot, acc) in [(&r.w_plus_refined, &mut id_encoder), (&random, &mut id_random)] {
            let (tuned, _) =
                pivotal_tune(x, pivot, &r.pose, d.generator.thawed_copy(), render, &proxy, TUNE_STEPS, TUNE_LR).unwrap();
            for yaw in [-35.0, 35.0] {
                let pose = CameraPose::new(yaw, r.pose.roll, r.pose.radius).unwrap();
                let img = synthesize_image(pivot, &pose, &tuned, render).unwrap();
                *acc += f64::from(identity_similarity(x, &img, embedder).unwrap()) / 32.0;
            }
        }
    }
    vec![
        outcome(
            "8a",
            fast as f64 >= 0.8 * 32.0,
            format!("encoder start reaches the random start's final loss within {} of {OPT_STEPS} steps on {fast}/32 images (>= 26)", OPT_STEPS / 2),
        ),
        outcome(
            "8b",
            id_encoder >= id_random,
            format!("+-35 deg identity after {TUNE_STEPS} tuning steps, 16 images: encoder pivot {id_encoder:.4} >= random pivot {id_random:.4}"),
        ),
    ]
}

// ---------------------------------------------------------------------------
// 9. Determinism

/// Every file of a run directory, by name.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Evaluation metrics as JSON with the wall-clock field zeroed.
fn metrics_bytes(encoder: &EncoderParams<F>, s: &AblationSetup<'_, F>) -> Vec<u8> {
    let mut m = evaluate_variant(Variant::Full, encoder, s).expect("metrics");
    m.reconstruction.wall_time_per_image = 0.0;
    serde_json::to_vec(&m).unwrap()
}

/// A second complete run from the same configuration, rebuilding every
/// module, plus a resume of the first run from a mid-run checkpoint.
fn criterion_9() -> Vec<Outcome> {
    let d = desk();
    let t = trained();
    let first = artifacts(t.dir.path());

    let cfg = RunConfig::default();
    let generator = cfg.build_generator::<F>().unwrap();
    let (e_train, _) = cfg.train_embedder(&generator, false).unwrap();
    let (e_eval, _) = cfg.train_embedder(&generator, true).unwrap();
    let modules_equal = generator.digest() == d.generator.digest()
        && e_train.digest() == d.train_embedder.0.digest()
        && e_eval.digest() == d.eval_embedder.0.digest();
    let losses = cfg.loss_modules(e_train);
    let metrics = cfg.metric_modules(e_eval);
    let pool = cfg.build_real_pool::<F>().unwrap();
    let test_set = cfg.build_test_set(&generator).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&cfg.train, &cfg.encoder, &generator, &pool, &losses, &cfg.render, &run_options(dir.path())).unwrap();
    let second = artifacts(dir.path());
    let s2 = setup_with(&cfg, &generator, &pool, &losses, &metrics, &test_set);
    let (dl, dm) = (d.losses(), d.metrics());
    let same_metrics = metrics_bytes(&t.encoder, &setup(d, &dl, &dm)) == metrics_bytes(&out.encoder, &s2);

    // Resume: the first run's log and mid-run checkpoint in a fresh directory.
    let resumed = tempfile::tempdir().unwrap();
    let at = cfg.train.total_steps - cfg.train.checkpoint_every;
    let ck = checkpoint_path(resumed.path(), at);
    std::fs::copy(checkpoint_path(t.dir.path(), at), &ck).unwrap();
    std::fs::copy(t.dir.path().join("train.jsonl"), resumed.path().join("train.jsonl")).unwrap();
    let opts = FitOptions { resume_from: Some(ck), ..run_options(resumed.path()) };
    fit(&cfg.train, &cfg.encoder, &d.generator, &d.real_pool, &dl, &cfg.render, &opts).unwrap();
    let third = artifacts(resumed.path());
    let tail: Vec<_> = first.iter().filter(|f| third.iter().any(|g| g.0 == f.0)).cloned().collect();

    let names = first.iter().map(|f| f.0.as_str()).collect::<Vec<_>>().join(", ");
    vec![
        outcome("9a", modules_equal, "generator and both embedders rebuild bit-identically".into()),
        outcome("9b", first == second, format!("two full runs write bit-identical files ({names})")),
        outcome("9c", same_metrics, "evaluation metrics of both runs are bit-identical (wall time excluded)".into()),
        outcome(
            "9d",
            tail == third && third.len() == 3,
            format!("resuming at step {at} reproduces the final checkpoint and the full log bit-exactly"),
        ),
    ]
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(u32, fn() -> Vec<Outcome>); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let start = Instant::now();
    let mut failed = Vec::new();
    for (n, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let results = run();
        let pass = results.iter().all(|o| o.pass);
        println!("criterion {n}: {} ({:.0} s)", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        for o in &results {
            println!("  {:<3} {} {}", o.id, if o.pass { "pass" } else { "FAIL" }, o.detail);
            if !o.pass {
                failed.push(o.id);
            }
        }
    }
    println!("acceptance finished in {:.0} s", start.elapsed().as_secs_f64());
    // Statics are never dropped, so the training run's directory is removed here.
    if let Some(t) = TRAINED.get() {
        let _ = std::fs::remove_dir_all(t.dir.path());
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
