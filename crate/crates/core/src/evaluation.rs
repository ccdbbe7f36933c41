//! Reconstruction and novel-view metrics, the latent view-invariance probe,
//! and ablation runs.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{bytes_hash, config_hash, encoder_checkpoint};
use crate::encoders::{stack_images, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::field_core::{CameraPose, RenderConfig};
use crate::generator::{sample_multiview_batch, synthesize_image, ExtendedLatent, GeneratorParams, Image, StyleLatent};
use crate::inversion::{invert_image, InversionMode, InvertConfig};
use crate::losses::{IdentityEmbedder, PerceptualProxy};
use crate::real::Real;
use crate::rng::{derive_seed, stream, tag};
use crate::training::{fit, FitOptions, LossModules, TrainConfig, Variant};

/// Mean intra-identity pairwise distance divided by the mean inter-identity
/// distance over the rows of `latents`.
pub fn invariance_ratio<F: Real>(latents: &Array2<F>, labels: &[usize]) -> Result<f64> {
    if latents.nrows() != labels.len() {
        return Err(Error::InvalidInput("one label per latent row required".into()));
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d = &latents.row(i) - &latents.row(j);
            let dist = d.dot(&d).to_f64_lossless().sqrt();
            if labels[i] == labels[j] {
                intra += dist;
                ni += 1;
            } else {
                inter += dist;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::InvalidInput("need at least two identities with two views each".into()));
    }
    Ok((intra / ni as f64) / (inter / nx as f64))
}

/// Fraction of rows whose nearest other row carries the same label.
pub fn nn_retrieval_accuracy<F: Real>(latents: &Array2<F>, labels: &[usize]) -> Result<f64> {
    if latents.nrows() != labels.len() || labels.len() < 2 {
        return Err(Error::InvalidInput("need at least two labelled latents".into()));
    }
    let mut hits = 0;
    for i in 0..labels.len() {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in (0..labels.len()).filter(|&j| j != i) {
            let d = &latents.row(i) - &latents.row(j);
            let dist = d.dot(&d).to_f64_lossless();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        hits += usize::from(labels[best.0] == labels[i]);
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceMetrics {
    pub ratio: f64,
    pub retrieval_accuracy: f64,
}

/// Base-latent invariance on fresh synthetic identities rendered at
/// `views` random yaws each.
pub fn view_invariance<F: Real>(
    encoder: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    num_identities: usize,
    views: usize,
    yaw_range: f64,
    seed: u64,
) -> Result<InvarianceMetrics> {
    let ids = sample_multiview_batch(num_identities, views, yaw_range, seed, generator, render)?;
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for (k, b) in ids.iter().enumerate() {
        for img in &b.images {
            imgs.push(img);
            labels.push(k);
        }
    }
    let latents = encoder.base_forward(&stack_images(&imgs)?)?.latents;
    Ok(InvarianceMetrics {
        ratio: invariance_ratio(&latents, &labels)?,
        retrieval_accuracy: nn_retrieval_accuracy(&latents, &labels)?,
    })
}

pub fn latent_invariance_ratio<F: Real>(
    encoder: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    num_identities: usize,
    views: usize,
    seed: u64,
) -> Result<f64> {
    Ok(view_invariance(encoder, generator, render, num_identities, views, 35.0, seed)?.ratio)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Real,
}

#[derive(Clone, Debug)]
pub struct TestImage<F> {
    pub image: Image<F>,
    /// Pose the image was rendered at.
    pub pose: CameraPose,
    /// Ground-truth latent, for synthetic images.
    pub latent: Option<StyleLatent<F>>,
    pub source: Source,
}

#[derive(Clone, Debug)]
pub struct TestSet<F> {
    pub images: Vec<TestImage<F>>,
}

impl<F: Real> TestSet<F> {
    /// `num_synthetic` single views of fresh identities from `generator`
    /// followed by `num_real` renders from `real_generator`.
    pub fn build(
        generator: &GeneratorParams<F>,
        real_generator: &GeneratorParams<F>,
        render: &RenderConfig,
        num_synthetic: usize,
        num_real: usize,
        yaw_range: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(num_synthetic + num_real);
        for (source, g, count, t) in [
            (Source::Synthetic, generator, num_synthetic, tag::TEST_SYNTH),
            (Source::Real, real_generator, num_real, tag::TEST_REAL),
        ] {
            for i in 0..count {
                let mut rng = stream(seed, t, i as u64);
                let w = g.sample_latent(&mut rng);
                let pose = CameraPose::from_yaw(rng.random_range(-yaw_range..=yaw_range));
                let image = synthesize_image(&w, &pose, g, render)?;
                let latent = (source == Source::Synthetic).then_some(w);
                images.push(TestImage { image, pose, latent, source });
            }
        }
        Ok(TestSet { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        TestSet { images: indices.into_iter().map(|i| self.images[i].clone()).collect() }
    }
}

/// Frozen networks used for metrics. The embedder must differ from the one
/// used as a training loss.
#[derive(Clone, Debug)]
pub struct MetricModules<F> {
    pub perceptual: PerceptualProxy<F>,
    pub embedder: IdentityEmbedder<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub l2: f64,
    pub perceptual: f64,
    pub id: f64,
    /// Pixel error of the base-stage render at the same pose.
    pub l2_base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub count: usize,
    pub l2: f64,
    pub perceptual: f64,
    pub id: f64,
    pub l2_base: f64,
    /// Fraction of images whose refined error does not exceed the base error.
    pub refined_not_worse: f64,
    /// Not reproducible; excluded from determinism comparisons.
    pub wall_time_per_image: f64,
    pub per_image: Vec<ImageMetrics>,
}

fn cosine_pair<F: Real>(embedder: &IdentityEmbedder<F>, a: &Image<F>, b: &Image<F>) -> Result<f64> {
    crate::losses::identity_similarity(a, b, embedder).map(|v| v.to_f64_lossless())
}

/// Metrics of arbitrary reconstructions: `invert` returns the base-stage
/// image, the final latent and the pose to render at.
pub fn reconstruction_with<F: Real>(
    test_set: &TestSet<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    metrics: &MetricModules<F>,
    mut invert: impl FnMut(&TestImage<F>) -> Result<(Image<F>, ExtendedLatent<F>, CameraPose)>,
) -> Result<ReconstructionMetrics> {
    if test_set.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let start = Instant::now();
    let mut per_image = Vec::with_capacity(test_set.len());
    for t in &test_set.images {
        let (base, w_plus, pose) = invert(t)?;
        let img = synthesize_image(&w_plus, &pose, generator, render)?;
        per_image.push(ImageMetrics {
            l2: crate::encoders::mse(&img, &t.image),
            perceptual: metrics.perceptual.distance(&img, &t.image)?.to_f64_lossless(),
            id: cosine_pair(&metrics.embedder, &t.image, &img)?,
            l2_base: crate::encoders::mse(&base, &t.image),
        });
    }
    let n = per_image.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(ReconstructionMetrics {
        count: per_image.len(),
        l2: avg(|m| m.l2),
        perceptual: avg(|m| m.perceptual),
        id: avg(|m| m.id),
        l2_base: avg(|m| m.l2_base),
        refined_not_worse: per_image.iter().filter(|m| m.l2 <= m.l2_base).count() as f64 / n,
        wall_time_per_image: start.elapsed().as_secs_f64() / n,
        per_image,
    })
}

/// Same-view reconstruction metrics at the predicted pose.
pub fn eval_reconstruction<F: Real>(
    test_set: &TestSet<F>,
    encoder: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    metrics: &MetricModules<F>,
    cfg: &InvertConfig,
) -> Result<ReconstructionMetrics> {
    reconstruction_with(test_set, generator, render, metrics, |t| {
        let r = invert_image(&t.image, encoder, generator, render, cfg, None)?;
        Ok((r.image_base, r.w_plus_refined, r.pose))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NovelViewTable {
    pub yaws: Vec<f64>,
    pub per_yaw: Vec<f64>,
    pub average: f64,
    /// Identity similarity of the render at the predicted (input) pose.
    pub same_view: f64,
}

impl NovelViewTable {
    /// Mean over the entries whose yaw has magnitude `abs_yaw`.
    pub fn at_abs_yaw(&self, abs_yaw: f64) -> Option<f64> {
        let v: Vec<f64> =
            self.yaws.iter().zip(&self.per_yaw).filter(|(y, _)| (y.abs() - abs_yaw).abs() < 1e-9).map(|(_, v)| *v).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Inverts each image, re-renders at each yaw, and compares identity
/// embeddings with the input.
pub fn eval_novel_view_id<F: Real>(
    test_set: &TestSet<F>,
    encoder: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    eval_embedder: &IdentityEmbedder<F>,
    yaws: &[f64],
    cfg: &InvertConfig,
) -> Result<NovelViewTable> {
    if test_set.is_empty() || yaws.is_empty() {
        return Err(Error::InvalidInput("need test images and yaws".into()));
    }
    let mut sums = vec![0.0; yaws.len()];
    let mut same = 0.0;
    for t in &test_set.images {
        let r = invert_image(&t.image, encoder, generator, render, cfg, None)?;
        same += cosine_pair(eval_embedder, &t.image, &r.image_refined)?;
        for (k, yaw) in yaws.iter().enumerate() {
            let pose = CameraPose::new(*yaw, r.pose.roll, r.pose.radius)?;
            let img = synthesize_image(&r.w_plus_refined, &pose, generator, render)?;
            sums[k] += cosine_pair(eval_embedder, &t.image, &img)?;
        }
    }
    let n = test_set.len() as f64;
    let per_yaw: Vec<f64> = sums.iter().map(|s| s / n).collect();
    Ok(NovelViewTable {
        yaws: yaws.to_vec(),
        average: per_yaw.iter().sum::<f64>() / per_yaw.len() as f64,
        per_yaw,
        same_view: same / n,
    })
}

pub const NOVEL_VIEW_YAWS: [f64; 4] = [-35.0, -17.0, 17.0, 35.0];

/// Everything an ablation run shares across variants.
pub struct AblationSetup<'a, F> {
    pub train: &'a TrainConfig,
    pub encoder: &'a EncoderConfig,
    pub generator: &'a GeneratorParams<F>,
    pub real_pool: &'a [Image<F>],
    pub losses: &'a LossModules<F>,
    pub metrics: &'a MetricModules<F>,
    pub render: &'a RenderConfig,
    pub test_set: &'a TestSet<F>,
    pub invariance_identities: usize,
    pub invariance_views: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub variant: Variant,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub generator_hash: String,
    pub train_embedder_hash: String,
    pub eval_embedder_hash: String,
    pub invariance: InvarianceMetrics,
    pub reconstruction: ReconstructionMetrics,
    pub novel_view: NovelViewTable,
}

impl AblationMetrics {
    /// Mean identity similarity at yaw +/-35.
    pub fn novel_view_35(&self) -> f64 {
        self.novel_view.at_abs_yaw(35.0).unwrap_or(f64::NAN)
    }
}

/// Metrics of an already trained encoder under a variant's inversion mode.
pub fn evaluate_variant<F: Real>(
    variant: Variant,
    encoder: &EncoderParams<F>,
    setup: &AblationSetup<'_, F>,
) -> Result<AblationMetrics> {
    if setup.metrics.embedder.digest() == setup.losses.embedder.digest() {
        return Err(Error::Config("evaluation and training identity embedders must differ".into()));
    }
    let cfg = variant.apply(setup.train);
    let hash = config_hash(&(&cfg, setup.encoder, setup.render));
    let checkpoint_hash = bytes_hash(&encoder_checkpoint(encoder, setup.render, hash.clone())?.to_bytes());
    let invert = InvertConfig { refine_iterations: cfg.refine_iterations, mode: InversionMode::for_variant(variant) };
    let invariance = view_invariance(
        encoder,
        setup.generator,
        setup.render,
        setup.invariance_identities,
        setup.invariance_views,
        cfg.yaw_range,
        derive_seed(setup.eval_seed, tag::TEST_SYNTH, 1 << 32),
    )?;
    let reconstruction = eval_reconstruction(setup.test_set, encoder, setup.generator, setup.render, setup.metrics, &invert)?;
    let novel_view = eval_novel_view_id(
        setup.test_set,
        encoder,
        setup.generator,
        setup.render,
        &setup.metrics.embedder,
        &NOVEL_VIEW_YAWS,
        &invert,
    )?;
    Ok(AblationMetrics {
        variant,
        config_hash: hash,
        checkpoint_hash,
        generator_hash: setup.generator.digest(),
        train_embedder_hash: setup.losses.embedder.digest(),
        eval_embedder_hash: setup.metrics.embedder.digest(),
        invariance,
        reconstruction,
        novel_view,
    })
}

/// Trains `variant` with the shared seeds and steps, then evaluates it.
pub fn run_ablation<F: Real>(
    variant: Variant,
    setup: &AblationSetup<'_, F>,
    opts: &FitOptions,
) -> Result<(EncoderParams<F>, AblationMetrics)> {
    let cfg = variant.apply(setup.train);
    let out = fit(&cfg, setup.encoder, setup.generator, setup.real_pool, setup.losses, setup.render, opts)?;
    let metrics = evaluate_variant(variant, &out.encoder, setup)?;
    Ok((out.encoder, metrics))
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    invariance_ratio: f64,
    retrieval_accuracy: f64,
    l2: f64,
    l2_base: f64,
    perceptual: f64,
    id: f64,
    novel_id_minus35: f64,
    novel_id_minus17: f64,
    novel_id_plus17: f64,
    novel_id_plus35: f64,
    novel_id_average: f64,
    config_hash: &'a str,
    checkpoint_hash: &'a str,
}

/// One CSV row per variant.
pub fn ablation_csv(rows: &[AblationMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in rows {
        let at = |y: f64| {
            m.novel_view.yaws.iter().position(|v| *v == y).map_or(f64::NAN, |i| m.novel_view.per_yaw[i])
        };
        w.serialize(AblationRow {
            variant: m.variant.name(),
            invariance_ratio: m.invariance.ratio,
            retrieval_accuracy: m.invariance.retrieval_accuracy,
            l2: m.reconstruction.l2,
            l2_base: m.reconstruction.l2_base,
            perceptual: m.reconstruction.perceptual,
            id: m.reconstruction.id,
            novel_id_minus35: at(-35.0),
            novel_id_minus17: at(-17.0),
            novel_id_plus17: at(17.0),
            novel_id_plus35: at(35.0),
            novel_id_average: m.novel_view.average,
            config_hash: &m.config_hash,
            checkpoint_hash: &m.checkpoint_hash,
        })
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Fixed-width text table of the headline numbers.
pub fn ablation_text_table(rows: &[AblationMetrics]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "variant", "inv_ratio", "retrieval", "l2", "id", "id_35", "id_avg"
    );
    for m in rows {
        s.push_str(&format!(
            "{:<12} {:>9.4} {:>9.3} {:>9.5} {:>9.4} {:>9.4} {:>9.4}\n",
            m.variant.name(),
            m.invariance.ratio,
            m.invariance.retrieval_accuracy,
            m.reconstruction.l2,
            m.reconstruction.id,
            m.novel_view_35(),
            m.novel_view.average
        ));
    }
    s
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
