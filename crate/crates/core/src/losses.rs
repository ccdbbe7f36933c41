//! Training objectives and the frozen proxy networks behind them.
//!
//! The perceptual distance compares features of a fixed, seeded random
//! convolutional network. Identity similarity uses a small embedder trained
//! to classify generator identities from their renders.

use ndarray::{Array, Array1, Array2, Array4, Axis, Dimension};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::stack_images;
use crate::error::{Error, Result};
use crate::field_core::RenderConfig;
use crate::generator::{sample_multiview_batch, GeneratorParams, Image, StyleLatent};
use crate::nn::{gap, gap_backward, lrelu_backward_inplace, lrelu_inplace, Adam, Conv2d, ConvCache, Grads, Linear, ParamStore};
use crate::real::Real;
use crate::rng::{derive_seed, stream, tag};

/// Weights of the four loss groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_feat_base: f64,
    pub lambda_img_base: f64,
    pub lambda_feat_ref: f64,
    pub lambda_img_ref: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_feat_base: 1.0, lambda_img_base: 1.0, lambda_feat_ref: 1.0, lambda_img_ref: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_feat_base, self.lambda_img_base, self.lambda_feat_ref, self.lambda_img_ref];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSelection {
    /// A uniformly drawn in-batch sample of another identity.
    RandomInBatch,
    /// The closest in-batch sample of another identity.
    HardestInBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub negative_selection: NegativeSelection,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.2, negative_selection: NegativeSelection::RandomInBatch }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("triplet margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `max(0, m + d_pos - d_neg)` from the two distances.
pub fn triplet_from_distances(margin: f64, d_pos: f64, d_neg: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

fn l2_distance<F: Real>(a: &Array1<F>, b: &Array1<F>) -> F {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<F>().sqrt()
}

/// Triplet loss over base latents. Only [`StyleLatent`] is accepted: the
/// extended space never receives a contrastive term.
pub fn triplet_loss<F: Real>(
    w: &StyleLatent<F>,
    w_pos: &StyleLatent<F>,
    w_neg: &StyleLatent<F>,
    cfg: &TripletConfig,
) -> Result<F> {
    if w.dim() != w_pos.dim() || w.dim() != w_neg.dim() {
        return Err(Error::InvalidInput("triplet latents differ in dimension".into()));
    }
    let d_pos = l2_distance(w.values(), w_pos.values());
    let d_neg = l2_distance(w.values(), w_neg.values());
    Ok((F::lit(cfg.margin) + d_pos - d_neg).max(F::zero()))
}

/// Triplet loss over rows of a latent matrix with gradients with respect to
/// every row. Each entry of `triplets` is `(anchor, positive, negative)`.
pub fn triplet_rows_with_grad<F: Real>(
    latents: &Array2<F>,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> (Vec<F>, Array2<F>) {
    let mut grad = Array2::zeros(latents.dim());
    let eps = F::lit(1e-12);
    let losses = triplets
        .iter()
        .map(|&(a, p, n)| {
            let da = &latents.row(a) - &latents.row(p);
            let dn = &latents.row(a) - &latents.row(n);
            let d_pos = da.dot(&da).sqrt();
            let d_neg = dn.dot(&dn).sqrt();
            let loss = F::lit(margin) + d_pos - d_neg;
            if loss <= F::zero() {
                return F::zero();
            }
            let gp = da.mapv(|v| v / (d_pos + eps));
            let gn = dn.mapv(|v| v / (d_neg + eps));
            let mut ga = grad.row_mut(a);
            ga += &gp;
            ga -= &gn;
            let mut gpr = grad.row_mut(p);
            gpr -= &gp;
            let mut gnr = grad.row_mut(n);
            gnr += &gn;
            loss
        })
        .collect();
    (losses, grad)
}

/// Mean absolute difference over all entries.
pub fn latent_l1<F: Real, D: Dimension>(a: &Array<F, D>, b: &Array<F, D>) -> Result<F> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!("latent shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty latent".into()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs()).sum::<F>() / F::lit(a.len() as f64))
}

/// Gradient of [`latent_l1`] with respect to `a` (zero where `a == b`).
pub fn latent_l1_grad<F: Real, D: Dimension>(a: &Array<F, D>, b: &Array<F, D>) -> Array<F, D> {
    let inv = F::lit(1.0 / a.len() as f64);
    let mut g = a - b;
    g.mapv_inplace(|v| {
        if v > F::zero() {
            inv
        } else if v < F::zero() {
            -inv
        } else {
            F::zero()
        }
    });
    g
}

/// Fixed random convolutional feature extractor standing in for a learned
/// perceptual metric.
#[derive(Clone, Debug)]
pub struct PerceptualProxy<F> {
    store: ParamStore<F>,
    convs: Vec<Conv2d>,
}

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 64];

impl<F: Real> PerceptualProxy<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, tag::PERCEPTUAL_INIT, 0);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = PERCEPTUAL_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut store, &format!("perceptual.conv{i}"), cin, w, 3, 2, 2f64.sqrt(), &mut rng);
                cin = w;
                c
            })
            .collect();
        PerceptualProxy { store, convs }
    }

    /// The same network in another precision.
    pub fn cast<G: Real>(&self) -> PerceptualProxy<G> {
        PerceptualProxy { store: self.store.cast(), convs: self.convs.clone() }
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    fn features(&self, x: &Array4<F>) -> (Vec<Array4<F>>, Vec<ConvCache<F>>) {
        let mut h = x.mapv(|v| v + v - F::one());
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut caches = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let (mut y, cache) = c.forward(&self.store, &h);
            lrelu_inplace(&mut y);
            feats.push(y.clone());
            caches.push(cache);
            h = y;
        }
        (feats, caches)
    }

    /// Per-image distances (layer-averaged mean squared feature difference)
    /// and the gradient of their sum with respect to `x_hat`.
    pub fn distance_with_grad(&self, x_hat: &Array4<F>, x: &Array4<F>) -> (Vec<F>, Array4<F>) {
        let b = x_hat.dim().0;
        let (fa, caches) = self.features(x_hat);
        let (fb, _) = self.features(x);
        let layers = F::lit(fa.len() as f64);
        let mut dist = vec![F::zero(); b];
        let mut carry: Option<Array4<F>> = None;
        for l in (0..fa.len()).rev() {
            let per_image = fa[l].len() / b;
            let scale = F::lit(2.0 / per_image as f64) / layers;
            let diff = &fa[l] - &fb[l];
            for (bi, d) in diff.outer_iter().enumerate() {
                dist[bi] += d.iter().map(|v| *v * *v).sum::<F>() / F::lit(per_image as f64) / layers;
            }
            let mut g = diff.mapv(|v| v * scale);
            if let Some(c) = carry.take() {
                g += &c;
            }
            lrelu_backward_inplace(&mut g, &fa[l]);
            carry = self.convs[l].backward(&self.store, &caches[l], &g, None, true);
        }
        // Input normalisation x -> 2x - 1.
        let grad = carry.expect("at least one layer").mapv(|v| v + v);
        (dist, grad)
    }

    pub fn distance(&self, x: &Image<F>, y: &Image<F>) -> Result<F> {
        if x.dim() != y.dim() {
            return Err(Error::InvalidInput("perceptual distance needs equal shapes".into()));
        }
        let (fa, _) = self.features(&stack_images(&[x])?);
        let (fb, _) = self.features(&stack_images(&[y])?);
        let layers = F::lit(fa.len() as f64);
        Ok(fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| (*p - *q) * (*p - *q)).sum::<F>() / F::lit(a.len() as f64))
            .sum::<F>()
            / layers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { widths: vec![32, 64, 128], embedding_dim: 32 }
    }
}

/// Small convolutional network mapping an image to a unit embedding.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder<F> {
    config: EmbedderConfig,
    store: ParamStore<F>,
    convs: Vec<Conv2d>,
    proj: Linear,
    trained: bool,
}

/// Saved state of a batched embedder forward.
pub struct EmbedCache<F> {
    convs: Vec<ConvCache<F>>,
    acts: Vec<Array4<F>>,
    pooled: Array2<F>,
    raw: Array2<F>,
    norms: Array1<F>,
}

impl<F: Real> IdentityEmbedder<F> {
    /// Untrained embedder with seeded weights.
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.embedding_dim == 0 {
            return Err(Error::Config("embedder widths and dimension must be positive".into()));
        }
        let mut rng = stream(seed, tag::EMBEDDER_INIT, 0);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("embedder.conv{i}"), cin, w, 3, 2, 2f64.sqrt(), &mut rng));
            cin = w;
        }
        let proj = Linear::new(&mut store, "embedder.proj", cin, config.embedding_dim, 1.0, &mut rng);
        Ok(IdentityEmbedder { config, store, convs, proj, trained: false })
    }

    pub fn from_store(config: EmbedderConfig, store: ParamStore<F>) -> Result<Self> {
        let mut emb = Self::new(config, 0)?;
        if emb.store.len() != store.len() {
            return Err(Error::Checkpoint(format!("embedder expects {} tensors, got {}", emb.store.len(), store.len())));
        }
        for id in emb.store.ids().collect::<Vec<_>>() {
            let name = emb.store.name(id).to_string();
            let src = store.find(&name).ok_or_else(|| Error::Checkpoint(format!("missing embedder tensor {name}")))?;
            emb.store.set(id, store.get(src).clone()).map_err(Error::Checkpoint)?;
        }
        emb.trained = true;
        Ok(emb)
    }

    /// The same network in another precision.
    pub fn cast<G: Real>(&self) -> IdentityEmbedder<G> {
        IdentityEmbedder {
            config: self.config.clone(),
            store: self.store.cast(),
            convs: self.convs.clone(),
            proj: self.proj.clone(),
            trained: self.trained,
        }
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    #[cfg(test)]
    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Unit embeddings `[B, D]` with the state needed for a backward pass.
    pub fn embed_with_cache(&self, x: &Array4<F>) -> (Array2<F>, EmbedCache<F>) {
        let mut h = x.mapv(|v| v + v - F::one());
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for c in &self.convs {
            let (mut y, cache) = c.forward(&self.store, &h);
            lrelu_inplace(&mut y);
            convs.push(cache);
            acts.push(y.clone());
            h = y;
        }
        let pooled = gap(&h);
        let raw = self.proj.forward(&self.store, pooled.view());
        let norms = raw.map_axis(Axis(1), |r| (r.dot(&r) + F::lit(1e-20)).sqrt());
        let mut unit = raw.clone();
        for (mut row, n) in unit.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / *n);
        }
        (unit, EmbedCache { convs, acts, pooled, raw, norms })
    }

    pub fn embed(&self, x: &Array4<F>) -> Array2<F> {
        self.embed_with_cache(x).0
    }

    /// Pulls gradients of the unit embeddings back to the input and, when
    /// `grads` is given, to the parameters.
    pub fn backward(&self, cache: &EmbedCache<F>, d_unit: &Array2<F>, mut grads: Option<&mut Grads<F>>) -> Array4<F> {
        let mut d_raw = Array2::zeros(d_unit.dim());
        for (i, mut row) in d_raw.rows_mut().into_iter().enumerate() {
            let n = cache.norms[i];
            let r = cache.raw.row(i);
            let proj = r.dot(&d_unit.row(i)) / (n * n);
            row.assign(&((&d_unit.row(i) - &r.mapv(|v| v * proj)) / n));
        }
        let d_pooled =
            self.proj.backward(&self.store, cache.pooled.view(), d_raw.view(), grads.as_deref_mut(), true).expect("dx");
        let mut d = gap_backward(&d_pooled, cache.acts.last().expect("layers").dim());
        for l in (0..self.convs.len()).rev() {
            lrelu_backward_inplace(&mut d, &cache.acts[l]);
            d = self.convs[l].backward(&self.store, &cache.convs[l], &d, grads.as_deref_mut(), true).expect("dx");
        }
        d.mapv(|v| v + v)
    }
}

/// Cosine similarity of the two images' identity embeddings.
pub fn identity_similarity<F: Real>(x: &Image<F>, y: &Image<F>, embedder: &IdentityEmbedder<F>) -> Result<F> {
    if !embedder.is_trained() {
        return Err(Error::Config("identity embedder has not been trained".into()));
    }
    let e = embedder.embed(&stack_images(&[x, y])?);
    Ok(e.row(0).dot(&e.row(1)).max(-F::one()).min(F::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub heldout_views: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub yaw_range: f64,
    pub seed: u64,
    pub embedder: EmbedderConfig,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            num_identities: 64,
            views_per_identity: 8,
            heldout_views: 4,
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            yaw_range: 35.0,
            seed: 0,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

const CLASSIFIER_SCALE: f64 = 16.0;

/// Trains an embedder as a classifier over rendered identities, then drops
/// the classifier and freezes it. Held-out views of the same identities
/// measure accuracy.
pub fn train_identity_embedder<F: Real>(
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    cfg: &EmbedderTrainConfig,
) -> Result<(IdentityEmbedder<F>, EmbedderReport)> {
    if cfg.num_identities < 2 || cfg.views_per_identity < 1 || cfg.epochs < 1 || cfg.batch_size < 1 {
        return Err(Error::Config("embedder training needs >= 2 identities and positive counts".into()));
    }
    let views = cfg.views_per_identity + cfg.heldout_views;
    let data_seed = derive_seed(cfg.seed, tag::EMBEDDER_DATA, 0);
    let batches = sample_multiview_batch(cfg.num_identities, views, cfg.yaw_range, data_seed, generator, render)?;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (label, b) in batches.iter().enumerate() {
        for (v, img) in b.images.iter().enumerate() {
            if v < cfg.views_per_identity {
                train.push((img, label));
            } else {
                heldout.push((img, label));
            }
        }
    }

    let mut embedder = IdentityEmbedder::new(cfg.embedder.clone(), cfg.seed)?;
    // Classifier head lives in its own store and is discarded afterwards.
    let mut head_store = ParamStore::new();
    let mut head_rng = stream(cfg.seed, tag::EMBEDDER_INIT, 1);
    let head = Linear::new(&mut head_store, "classifier", cfg.embedder.embedding_dim, cfg.num_identities, 1.0, &mut head_rng);
    let mut adam = Adam::new(&embedder.store, cfg.learning_rate);
    let mut head_adam = Adam::new(&head_store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = stream(cfg.seed, tag::EMBEDDER_SHUFFLE, 0);
    let scale = F::lit(CLASSIFIER_SCALE);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Image<F>> = chunk.iter().map(|&i| train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let x = stack_images(&imgs)?;
            let (unit, cache) = embedder.embed_with_cache(&x);
            let logits = head.forward(&head_store, unit.view()).mapv(|v| v * scale);
            let (loss, d_logits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch as u64, detail: "embedder classification loss".into() });
            }
            total += loss * chunk.len() as f64;
            let d_logits = d_logits.mapv(|v| v * scale);
            let mut hg = head_store.zero_grads();
            let d_unit = head.backward(&head_store, unit.view(), d_logits.view(), Some(&mut hg), true).expect("dx");
            let mut g = embedder.store.zero_grads();
            embedder.backward(&cache, &d_unit, Some(&mut g));
            adam.update(&mut embedder.store, &g);
            head_adam.update(&mut head_store, &hg);
        }
        let mean = total / train.len() as f64;
        log::debug!("embedder epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let accuracy = |set: &[(&Image<F>, usize)]| -> Result<f64> {
        if set.is_empty() {
            return Ok(f64::NAN);
        }
        let mut correct = 0;
        for chunk in set.chunks(cfg.batch_size) {
            let imgs: Vec<&Image<F>> = chunk.iter().map(|(i, _)| *i).collect();
            let unit = embedder.embed(&stack_images(&imgs)?);
            let logits = head.forward(&head_store, unit.view());
            for (row, (_, label)) in logits.rows().into_iter().zip(chunk) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, F::neg_infinity()), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc })
                    .0;
                correct += usize::from(best == *label);
            }
        }
        Ok(correct as f64 / set.len() as f64)
    };
    let report = EmbedderReport {
        epoch_losses,
        train_accuracy: accuracy(&train)?,
        heldout_accuracy: accuracy(&heldout)?,
    };
    log::info!(
        "identity embedder: train accuracy {:.3}, held-out accuracy {:.3}",
        report.train_accuracy,
        report.heldout_accuracy
    );
    embedder.trained = true;
    Ok((embedder, report))
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
    let b = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
        let exps: Vec<F> = row.iter().map(|v| (*v - max).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        loss -= ((exps[labels[i]] / sum).ln()).to_f64_lossless();
        for (j, e) in exps.iter().enumerate() {
            let p = *e / sum;
            let target = if j == labels[i] { F::one() } else { F::zero() };
            grad[[i, j]] = (p - target) / F::lit(b as f64);
        }
    }
    (loss / b as f64, grad)
}

/// The three image-level terms for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageLossTerms {
    pub l2: f64,
    pub perceptual: f64,
    pub id: f64,
}

impl ImageLossTerms {
    pub fn total(&self) -> f64 {
        self.l2 + self.perceptual + self.id
    }
}

/// `L2 + perceptual + (1 - identity similarity)` for one pair.
pub fn image_loss<F: Real>(
    x_hat: &Image<F>,
    x: &Image<F>,
    proxy: &PerceptualProxy<F>,
    embedder: &IdentityEmbedder<F>,
) -> Result<ImageLossTerms> {
    if x_hat.dim() != x.dim() {
        return Err(Error::InvalidInput("image loss needs equal shapes".into()));
    }
    let l2 = x_hat.iter().zip(x.iter()).map(|(a, b)| (*a - *b).to_f64_lossless().powi(2)).sum::<f64>() / x.len() as f64;
    Ok(ImageLossTerms {
        l2,
        perceptual: proxy.distance(x_hat, x)?.to_f64_lossless(),
        id: 1.0 - identity_similarity(x_hat, x, embedder)?.to_f64_lossless(),
    })
}

/// Batched image loss. Returns per-image terms and the gradient of
/// `sum_b scale_b * total_b` with respect to `x_hat`. `target_embeddings`
/// are the unit embeddings of `x`.
pub fn image_loss_with_grad<F: Real>(
    x_hat: &Array4<F>,
    x: &Array4<F>,
    target_embeddings: &Array2<F>,
    scales: &[F],
    proxy: &PerceptualProxy<F>,
    embedder: &IdentityEmbedder<F>,
) -> Result<(Vec<ImageLossTerms>, Array4<F>)> {
    if !embedder.is_trained() {
        return Err(Error::Config("identity embedder has not been trained".into()));
    }
    let b = x_hat.dim().0;
    let per_image = x_hat.len() / b;
    let (perc, mut grad) = proxy.distance_with_grad(x_hat, x);
    let (unit, cache) = embedder.embed_with_cache(x_hat);
    let mut d_unit = target_embeddings.mapv(|v| -v);
    for (mut row, s) in d_unit.rows_mut().into_iter().zip(scales) {
        row.mapv_inplace(|v| v * *s);
    }
    grad += &embedder.backward(&cache, &d_unit, None);
    let mut terms = Vec::with_capacity(b);
    for bi in 0..b {
        let s = scales[bi];
        let xh = x_hat.index_axis(Axis(0), bi);
        let xt = x.index_axis(Axis(0), bi);
        let mut l2 = F::zero();
        let mut g = grad.index_axis_mut(Axis(0), bi);
        let two_over_n = F::lit(2.0 / per_image as f64);
        ndarray::Zip::from(&mut g).and(&xh).and(&xt).for_each(|g, &a, &t| {
            let d = a - t;
            l2 += d * d;
            *g = *g * s + two_over_n * d * s;
        });
        terms.push(ImageLossTerms {
            l2: (l2 / F::lit(per_image as f64)).to_f64_lossless(),
            perceptual: perc[bi].to_f64_lossless(),
            id: 1.0 - unit.row(bi).dot(&target_embeddings.row(bi)).to_f64_lossless(),
        });
    }
    Ok((terms, grad))
}

/// The four loss groups of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub feat_base: f64,
    pub img_base: f64,
    pub feat_ref: f64,
    pub img_ref: f64,
}

/// Weighted sum of the four groups.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.lambda_feat_base * terms.feat_base
        + weights.lambda_img_base * terms.img_base
        + weights.lambda_feat_ref * terms.feat_ref
        + weights.lambda_img_ref * terms.img_ref)
}
