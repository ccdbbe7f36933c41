//! Image encoders: a base encoder into `W` (with an optional yaw/roll head)
//! and a refining encoder that predicts `W+` residuals from an input image and
//! its current reconstruction.

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_core::{CameraPose, RenderConfig, DEFAULT_CAMERA_RADIUS};
use crate::generator::{ExtendedLatent, GeneratorParams, Image, StyleInput, StyleLatent};
use crate::nn::{
    gap, gap_backward, lrelu_backward_inplace, lrelu_inplace, upsample2x, upsample2x_backward, Conv2d, ConvCache,
    Grads, Linear, ParamId, ParamStore,
};
use crate::real::Real;
use crate::rng::{stream, tag};

/// Largest magnitude, in degrees, the pose head can output.
pub const POSE_RANGE_DEGREES: f64 = 90.0;
const PROJECTION_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of the stride-2 residual blocks of the base encoder;
    /// the stem uses the first width.
    pub base_widths: Vec<usize>,
    pub refine_widths: Vec<usize>,
    pub pyramid_width: usize,
    pub pose_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { base_widths: vec![32, 64, 128, 128], refine_widths: vec![32, 64, 128], pyramid_width: 64, pose_head: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self, render: &RenderConfig) -> Result<()> {
        if self.base_widths.is_empty() || self.refine_widths.is_empty() {
            return Err(Error::Config("encoder: width lists must be nonempty".into()));
        }
        if self.base_widths.iter().chain(&self.refine_widths).any(|w| *w == 0) || self.pyramid_width == 0 {
            return Err(Error::Config("encoder: widths must be positive".into()));
        }
        let factor = 1usize << self.refine_widths.len();
        if render.image_height % factor != 0 || render.image_width % factor != 0 {
            return Err(Error::Config(format!(
                "encoder: image size {}x{} must be divisible by {factor} for the refining pyramid",
                render.image_height, render.image_width
            )));
        }
        Ok(())
    }
}

/// Stride-2 residual block: `lrelu((conv2(lrelu(conv1 x)) + skip x) / sqrt 2)`.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

struct ResCache<F> {
    c1: ConvCache<F>,
    a1: Array4<F>,
    c2: ConvCache<F>,
    cs: ConvCache<F>,
    out: Array4<F>,
}

impl ResBlock {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut impl rand::Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 2, 2f64.sqrt(), rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1.0, rng),
            skip: Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 2, 1.0, rng),
        }
    }

    fn forward<F: Real>(&self, p: &ParamStore<F>, x: &Array4<F>) -> (Array4<F>, ResCache<F>) {
        let (mut a1, c1) = self.conv1.forward(p, x);
        lrelu_inplace(&mut a1);
        let (m, c2) = self.conv2.forward(p, &a1);
        let (sk, cs) = self.skip.forward(p, x);
        let scale = F::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut out = (m + sk).mapv(|v| v * scale);
        lrelu_inplace(&mut out);
        (out.clone(), ResCache { c1, a1, c2, cs, out })
    }

    fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        cache: &ResCache<F>,
        dy: &Array4<F>,
        mut g: Option<&mut Grads<F>>,
        need_dx: bool,
    ) -> Option<Array4<F>> {
        let mut d = dy.clone();
        lrelu_backward_inplace(&mut d, &cache.out);
        d.mapv_inplace(|v| v * F::lit(std::f64::consts::FRAC_1_SQRT_2));
        let mut da1 = self.conv2.backward(p, &cache.c2, &d, g.as_deref_mut(), true).expect("dx requested");
        lrelu_backward_inplace(&mut da1, &cache.a1);
        let dx1 = self.conv1.backward(p, &cache.c1, &da1, g.as_deref_mut(), need_dx);
        let dxs = self.skip.backward(p, &cache.cs, &d, g, need_dx);
        dx1.zip(dxs).map(|(a, b)| a + b)
    }
}

#[derive(Clone, Debug)]
struct BaseNet {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    proj: Linear,
}

struct BaseCache<F> {
    stem: ConvCache<F>,
    stem_out: Array4<F>,
    blocks: Vec<ResCache<F>>,
    last_dims: (usize, usize, usize, usize),
    pooled: Array2<F>,
    pose_tanh: Option<Array2<F>>,
}

#[derive(Clone, Debug)]
struct StyleHead {
    conv: Conv2d,
    proj: Linear,
    level: usize,
}

#[derive(Clone, Debug)]
struct RefineNet {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    laterals: Vec<Conv2d>,
    heads: Vec<StyleHead>,
}

struct HeadCache<F> {
    conv: ConvCache<F>,
    act: Array4<F>,
    pooled: Array2<F>,
}

/// Saved state of a batched refiner forward.
pub struct RefineCache<F> {
    stem: ConvCache<F>,
    stem_out: Array4<F>,
    blocks: Vec<ResCache<F>>,
    laterals: Vec<ConvCache<F>>,
    level_dims: Vec<(usize, usize, usize, usize)>,
    heads: Vec<HeadCache<F>>,
}

/// Batched base-encoder output.
pub struct BaseOutput<F> {
    /// `[B, d]`
    pub latents: Array2<F>,
    /// `[B, 2]` yaw and roll in degrees, when the pose head is enabled.
    pub poses: Option<Array2<F>>,
    cache: BaseCache<F>,
}

/// Trainable parameters of both encoders.
#[derive(Clone, Debug)]
pub struct EncoderParams<F> {
    config: EncoderConfig,
    latent_dim: usize,
    num_layers: usize,
    image_hw: (usize, usize),
    store: ParamStore<F>,
    base: BaseNet,
    refine: RefineNet,
    mean_latent: ParamId,
    trained_steps: u64,
}

impl<F: Real> EncoderParams<F> {
    /// Seeded initialisation for a generator's latent shape. The generator's
    /// mean latent is stored as the base encoder's output offset.
    pub fn new(config: EncoderConfig, generator: &GeneratorParams<F>, render: &RenderConfig, seed: u64) -> Result<Self> {
        config.validate(render)?;
        let mut enc = Self::skeleton(
            config,
            generator.latent_dim(),
            generator.num_layers(),
            (render.image_height, render.image_width),
            seed,
        );
        let mean = generator.mean_latent().values().clone().into_dyn();
        enc.store.set(enc.mean_latent, mean).map_err(Error::Config)?;
        Ok(enc)
    }

    fn skeleton(config: EncoderConfig, latent_dim: usize, num_layers: usize, image_hw: (usize, usize), seed: u64) -> Self {
        let mut rng = stream(seed, tag::ENCODER_INIT, 0);
        let mut store = ParamStore::new();
        let gain = 2f64.sqrt();

        let bw = &config.base_widths;
        let stem = Conv2d::new(&mut store, "base.stem", 3, bw[0], 3, 1, gain, &mut rng);
        let mut blocks = Vec::new();
        let mut cin = bw[0];
        for (i, &w) in bw.iter().enumerate() {
            blocks.push(ResBlock::new(&mut store, &format!("base.block{i}"), cin, w, &mut rng));
            cin = w;
        }
        let out_dim = latent_dim + if config.pose_head { 2 } else { 0 };
        let proj = Linear::new(&mut store, "base.proj", cin, out_dim, PROJECTION_GAIN, &mut rng);
        let base = BaseNet { stem, blocks, proj };

        let rw = &config.refine_widths;
        let pw = config.pyramid_width;
        let stem = Conv2d::new(&mut store, "refine.stem", 6, rw[0], 3, 1, gain, &mut rng);
        let mut blocks = Vec::new();
        let mut laterals = Vec::new();
        let mut cin = rw[0];
        for (i, &w) in rw.iter().enumerate() {
            blocks.push(ResBlock::new(&mut store, &format!("refine.block{i}"), cin, w, &mut rng));
            laterals.push(Conv2d::new(&mut store, &format!("refine.lateral{i}"), w, pw, 1, 1, 1.0, &mut rng));
            cin = w;
        }
        let levels = rw.len();
        let heads = (0..num_layers)
            .map(|j| StyleHead {
                conv: Conv2d::new(&mut store, &format!("refine.head{j}.conv"), pw, pw, 3, 2, gain, &mut rng),
                proj: Linear::new(&mut store, &format!("refine.head{j}.proj"), pw, latent_dim, PROJECTION_GAIN, &mut rng),
                // Early (coarse) layers read the coarsest level.
                level: levels - 1 - (j * levels) / num_layers,
            })
            .collect();
        let refine = RefineNet { stem, blocks, laterals, heads };
        let mean_latent = store.add("mean_latent", ndarray::ArrayD::zeros(ndarray::IxDyn(&[latent_dim])));
        EncoderParams { config, latent_dim, num_layers, image_hw, store, base, refine, mean_latent, trained_steps: 0 }
    }

    /// Rebuilds encoders from stored tensors, validating names and shapes.
    pub fn from_store(
        config: EncoderConfig,
        latent_dim: usize,
        num_layers: usize,
        render: &RenderConfig,
        store: ParamStore<F>,
        trained_steps: u64,
    ) -> Result<Self> {
        config.validate(render)?;
        let mut enc = Self::skeleton(config, latent_dim, num_layers, (render.image_height, render.image_width), 0);
        if enc.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "encoder expects {} tensors, checkpoint has {}",
                enc.store.len(),
                store.len()
            )));
        }
        for id in enc.store.ids().collect::<Vec<_>>() {
            let name = enc.store.name(id).to_string();
            let src = store.find(&name).ok_or_else(|| Error::Checkpoint(format!("missing encoder tensor {name}")))?;
            enc.store.set(id, store.get(src).clone()).map_err(Error::Checkpoint)?;
        }
        enc.trained_steps = trained_steps;
        Ok(enc)
    }

    /// The same encoders in another precision.
    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        EncoderParams {
            config: self.config.clone(),
            latent_dim: self.latent_dim,
            num_layers: self.num_layers,
            image_hw: self.image_hw,
            store: self.store.cast(),
            base: self.base.clone(),
            refine: self.refine.clone(),
            mean_latent: self.mean_latent,
            trained_steps: self.trained_steps,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn image_hw(&self) -> (usize, usize) {
        self.image_hw
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn set_trained_steps(&mut self, steps: u64) {
        self.trained_steps = steps;
    }

    pub fn mean_latent(&self) -> StyleLatent<F> {
        StyleLatent::from_values(self.store.view1(self.mean_latent).to_owned()).expect("finite mean latent")
    }

    pub fn has_pose_head(&self) -> bool {
        self.config.pose_head
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Ids of the base-encoder parameters (stem, blocks, projection).
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefix("base.")
    }

    pub fn refine_param_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefix("refine.")
    }

    fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store.ids().filter(|id| self.store.name(*id).starts_with(prefix)).collect()
    }

    /// Sets the refiner's output projections to zero so every residual is
    /// exactly zero.
    pub fn zero_refine_heads(&mut self) {
        for h in &self.refine.heads {
            self.store.get_mut(h.proj.w).fill(F::zero());
            self.store.get_mut(h.proj.b).fill(F::zero());
        }
    }

    fn check_batch(&self, x: &Array4<F>, channels: usize) -> Result<()> {
        let (_, h, w, c) = x.dim();
        if (h, w) != self.image_hw || c != channels {
            return Err(Error::Config(format!(
                "encoder expects {}x{}x{channels} input, got {h}x{w}x{c}",
                self.image_hw.0, self.image_hw.1
            )));
        }
        Ok(())
    }

    /// Batched base encoder over `[B, H, W, 3]` images in `[0, 1]`.
    pub fn base_forward(&self, images: &Array4<F>) -> Result<BaseOutput<F>> {
        self.check_batch(images, 3)?;
        let p = &self.store;
        let net = &self.base;
        let x = images.mapv(|v| v + v - F::one());
        let (mut h, stem) = net.stem.forward(p, &x);
        lrelu_inplace(&mut h);
        let stem_out = h.clone();
        let mut blocks = Vec::with_capacity(net.blocks.len());
        for b in &net.blocks {
            let (y, c) = b.forward(p, &h);
            blocks.push(c);
            h = y;
        }
        let last_dims = h.dim();
        let pooled = gap(&h);
        let raw = net.proj.forward(p, pooled.view());
        let d = self.latent_dim;
        let mut latents = raw.slice(s![.., 0..d]).to_owned();
        latents += &self.store.view1(self.mean_latent);
        let (poses, pose_tanh) = if self.config.pose_head {
            let t = raw.slice(s![.., d..d + 2]).mapv(|v| v.tanh());
            (Some(t.mapv(|v| v * F::lit(POSE_RANGE_DEGREES))), Some(t))
        } else {
            (None, None)
        };
        Ok(BaseOutput { latents, poses, cache: BaseCache { stem, stem_out, blocks, last_dims, pooled, pose_tanh } })
    }

    /// Accumulates base-encoder gradients given gradients of the latents and,
    /// optionally, of the predicted poses in degrees.
    pub fn base_backward(
        &self,
        out: &BaseOutput<F>,
        d_latents: &Array2<F>,
        d_poses: Option<&Array2<F>>,
        grads: &mut Grads<F>,
    ) {
        let p = &self.store;
        let net = &self.base;
        let cache = &out.cache;
        let b = d_latents.nrows();
        let d = self.latent_dim;
        let mut d_raw = Array2::zeros((b, net.proj.fan_out));
        d_raw.slice_mut(s![.., 0..d]).assign(d_latents);
        if let (Some(dp), Some(t)) = (d_poses, cache.pose_tanh.as_ref()) {
            let range = F::lit(POSE_RANGE_DEGREES);
            let local = ndarray::Zip::from(dp).and(t).map_collect(|&g, &t| g * range * (F::one() - t * t));
            d_raw.slice_mut(s![.., d..d + 2]).assign(&local);
        }
        let d_pooled = net.proj.backward(p, cache.pooled.view(), d_raw.view(), Some(grads), true).expect("dx");
        let mut dh = gap_backward(&d_pooled, cache.last_dims);
        for (blk, c) in net.blocks.iter().zip(&cache.blocks).rev() {
            dh = blk.backward(p, c, &dh, Some(grads), true).expect("dx");
        }
        lrelu_backward_inplace(&mut dh, &cache.stem_out);
        net.stem.backward(p, &cache.stem, &dh, Some(grads), false);
    }

    /// Batched refiner over channel-concatenated `(x, x_hat)`; returns the
    /// residuals `[B, n, d]`.
    pub fn refine_forward(&self, x: &Array4<F>, x_hat: &Array4<F>) -> Result<(Array3<F>, RefineCache<F>)> {
        self.check_batch(x, 3)?;
        self.check_batch(x_hat, 3)?;
        if x.dim() != x_hat.dim() {
            return Err(Error::InvalidInput("refiner inputs differ in shape".into()));
        }
        let p = &self.store;
        let net = &self.refine;
        let (b, hh, ww, _) = x.dim();
        let mut input = Array4::zeros((b, hh, ww, 6));
        input.slice_mut(s![.., .., .., 0..3]).assign(x);
        input.slice_mut(s![.., .., .., 3..6]).assign(x_hat);
        input.mapv_inplace(|v| v + v - F::one());
        let (mut h, stem) = net.stem.forward(p, &input);
        lrelu_inplace(&mut h);
        let stem_out = h.clone();
        let mut blocks = Vec::with_capacity(net.blocks.len());
        let mut lateral_caches = Vec::with_capacity(net.blocks.len());
        let mut lateral_outs = Vec::with_capacity(net.blocks.len());
        for (blk, lat) in net.blocks.iter().zip(&net.laterals) {
            let (y, c) = blk.forward(p, &h);
            let (l, lc) = lat.forward(p, &y);
            blocks.push(c);
            lateral_caches.push(lc);
            lateral_outs.push(l);
            h = y;
        }
        // Top-down pathway: each level adds the upsampled coarser level.
        let levels = lateral_outs.len();
        let mut pyramid: Vec<Array4<F>> = vec![Array4::zeros((0, 0, 0, 0)); levels];
        for i in (0..levels).rev() {
            let mut level = lateral_outs[i].clone();
            if i + 1 < levels {
                level += &upsample2x(&pyramid[i + 1]);
            }
            pyramid[i] = level;
        }
        let level_dims = pyramid.iter().map(|a| a.dim()).collect();
        let mut delta = Array3::zeros((b, self.num_layers, self.latent_dim));
        let mut heads = Vec::with_capacity(net.heads.len());
        for (j, head) in net.heads.iter().enumerate() {
            let (mut act, conv) = head.conv.forward(p, &pyramid[head.level]);
            lrelu_inplace(&mut act);
            let pooled = gap(&act);
            delta.slice_mut(s![.., j, ..]).assign(&head.proj.forward(p, pooled.view()));
            heads.push(HeadCache { conv, act, pooled });
        }
        Ok((
            delta,
            RefineCache { stem, stem_out, blocks, laterals: lateral_caches, level_dims, heads },
        ))
    }

    /// Accumulates refiner gradients given gradients of the residuals and
    /// returns the gradient with respect to the `x_hat` input.
    pub fn refine_backward(&self, cache: &RefineCache<F>, d_delta: &Array3<F>, grads: &mut Grads<F>) -> Array4<F> {
        let p = &self.store;
        let net = &self.refine;
        let levels = cache.level_dims.len();
        let mut d_pyr: Vec<Array4<F>> = cache.level_dims.iter().map(|d| Array4::zeros(*d)).collect();
        for (j, (head, hc)) in net.heads.iter().zip(&cache.heads).enumerate() {
            let dj = d_delta.slice(s![.., j, ..]);
            let d_pooled = head.proj.backward(p, hc.pooled.view(), dj, Some(grads), true).expect("dx");
            let mut d_act = gap_backward(&d_pooled, hc.act.dim());
            lrelu_backward_inplace(&mut d_act, &hc.act);
            d_pyr[head.level] += &head.conv.backward(p, &hc.conv, &d_act, Some(grads), true).expect("dx");
        }
        let mut d_blocks: Vec<Option<Array4<F>>> = vec![None; levels];
        for i in 0..levels {
            if i + 1 < levels {
                let up = upsample2x_backward(&d_pyr[i]);
                d_pyr[i + 1] += &up;
            }
            let d_c = net.laterals[i].backward(p, &cache.laterals[i], &d_pyr[i], Some(grads), true).expect("dx");
            d_blocks[i] = Some(d_c);
        }
        let mut carry: Option<Array4<F>> = None;
        for i in (0..levels).rev() {
            let mut d = d_blocks[i].take().expect("set above");
            if let Some(c) = carry.take() {
                d += &c;
            }
            carry = net.blocks[i].backward(p, &cache.blocks[i], &d, Some(grads), true);
        }
        let mut dh = carry.expect("at least one block");
        lrelu_backward_inplace(&mut dh, &cache.stem_out);
        let d_input = net.stem.backward(p, &cache.stem, &dh, Some(grads), true).expect("dx");
        d_input.slice(s![.., .., .., 3..6]).mapv(|v| v + v)
    }
}

/// Stacks same-shaped images into `[B, H, W, 3]`.
pub fn stack_images<F: Real>(images: &[&Image<F>]) -> Result<Array4<F>> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    if images.iter().any(|i| i.dim() != first.dim()) {
        return Err(Error::InvalidInput("images in a batch must share a shape".into()));
    }
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal shapes"))
}

fn check_image<F: Real>(x: &Image<F>) -> Result<()> {
    if x.dim().2 != 3 {
        return Err(Error::Config(format!("expected an RGB image, got {} channels", x.dim().2)));
    }
    if x.iter().any(|v| !(*v >= F::zero() && *v <= F::one())) {
        return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Camera pose at the default radius from yaw and roll in degrees.
pub fn pose_from_degrees<F: Real>(yaw: F, roll: F) -> CameraPose {
    CameraPose { yaw: yaw.to_f64_lossless(), roll: roll.to_f64_lossless(), radius: DEFAULT_CAMERA_RADIUS }
}

/// Base latent and, when the pose head is enabled, the predicted pose.
pub fn encode_base<F: Real>(x: &Image<F>, params: &EncoderParams<F>) -> Result<(StyleLatent<F>, Option<CameraPose>)> {
    check_image(x)?;
    let out = params.base_forward(&stack_images(&[x])?)?;
    let w = StyleLatent::from_values(out.latents.row(0).to_owned())?;
    let pose = out.poses.map(|p| pose_from_degrees(p[[0, 0]], p[[0, 1]]));
    Ok((w, pose))
}

/// Batched [`encode_base`] without the pose conversion.
pub fn encode_base_batch<F: Real>(images: &[&Image<F>], params: &EncoderParams<F>) -> Result<Vec<StyleLatent<F>>> {
    let out = params.base_forward(&stack_images(images)?)?;
    out.latents.rows().into_iter().map(|r| StyleLatent::from_values(r.to_owned())).collect()
}

/// `n` identical rows, each equal to `w`.
pub fn broadcast_to_extended<F: Real>(w: &StyleLatent<F>, num_layers: usize) -> ExtendedLatent<F> {
    ExtendedLatent::from_values(w.style_rows(num_layers, w.dim()).expect("dimension matches itself"))
        .expect("finite rows")
}

/// One refinement: `w+_out = w+_in + E_ref(x, x_hat)`.
pub fn refine_once<F: Real>(
    x: &Image<F>,
    x_hat: &Image<F>,
    w_plus_in: &ExtendedLatent<F>,
    params: &EncoderParams<F>,
) -> Result<(ExtendedLatent<F>, Array2<F>)> {
    if x.dim() != x_hat.dim() {
        return Err(Error::InvalidInput("input and reconstruction differ in shape".into()));
    }
    let rows = w_plus_in.style_rows(params.num_layers(), params.latent_dim())?;
    let (delta, _) = params.refine_forward(&stack_images(&[x])?, &stack_images(&[x_hat])?)?;
    let delta = delta.index_axis(Axis(0), 0).to_owned();
    Ok((ExtendedLatent::from_values(&rows + &delta)?, delta))
}

/// Both inversion stages for one image.
#[derive(Clone, Debug)]
pub struct InversionResult<F> {
    pub w_base: StyleLatent<F>,
    pub w_plus_refined: ExtendedLatent<F>,
    pub predicted_pose: Option<CameraPose>,
    /// Pose every image in this result was rendered at.
    pub pose: CameraPose,
    pub image_base: Image<F>,
    pub image_refined: Image<F>,
    pub refine_iterations_used: usize,
    /// Mean squared error to the input after the base stage and after each
    /// refinement, in order. Not necessarily decreasing.
    pub iteration_losses: Vec<f64>,
}

pub(crate) fn mse<F: Real>(a: &Image<F>, b: &Image<F>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).to_f64_lossless().powi(2)).sum::<f64>() / a.len() as f64
}

/// Starts from `broadcast(w_base)` and its render, then alternates
/// [`refine_once`] and re-rendering `iterations` times with shared weights.
pub fn refine_iterative<F: Real>(
    x: &Image<F>,
    w_base: &StyleLatent<F>,
    pose: &CameraPose,
    iterations: usize,
    params: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    cfg: &RenderConfig,
) -> Result<InversionResult<F>> {
    if iterations < 1 {
        return Err(Error::InvalidInput("refinement needs at least one iteration".into()));
    }
    check_image(x)?;
    let geo = generator.geometry(pose, cfg)?;
    let mut w_plus = broadcast_to_extended(w_base, generator.num_layers());
    let image_base = generator.render_rows(w_plus.values(), &geo)?;
    let mut losses = vec![mse(&image_base, x)];
    let mut current = image_base.clone();
    for _ in 0..iterations {
        let (next, _) = refine_once(x, &current, &w_plus, params)?;
        w_plus = next;
        current = generator.render_rows(w_plus.values(), &geo)?;
        losses.push(mse(&current, x));
    }
    Ok(InversionResult {
        w_base: w_base.clone(),
        w_plus_refined: w_plus,
        predicted_pose: None,
        pose: *pose,
        image_base,
        image_refined: current,
        refine_iterations_used: iterations,
        iteration_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{synthesize_image, GeneratorConfig};
    use ndarray::Array1;

    fn setup() -> (GeneratorParams<f64>, EncoderParams<f64>, RenderConfig) {
        let render = RenderConfig { image_height: 8, image_width: 8, samples_per_ray: 6, ..Default::default() };
        let g = GeneratorParams::new(
            GeneratorConfig { latent_dim: 6, num_layers: 3, width: 8, ..Default::default() },
            &render,
            2,
        )
        .unwrap();
        let cfg = EncoderConfig { base_widths: vec![4, 6], refine_widths: vec![4, 6], pyramid_width: 5, pose_head: true };
        let e = EncoderParams::new(cfg, &g, &render, 3).unwrap();
        (g, e, render)
    }

    fn image(seed: u64) -> Image<f64> {
        let mut rng = stream(seed, 0, 0);
        Array3::from_shape_fn((8, 8, 3), |_| rand::Rng::random::<f64>(&mut rng))
    }

    #[test]
    fn base_encoding_is_deterministic_and_pose_is_bounded() {
        let (_, e, _) = setup();
        let x = image(1);
        let (w1, p1) = encode_base(&x, &e).unwrap();
        let (w2, p2) = encode_base(&x, &e).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(p1, p2);
        let p = p1.unwrap();
        assert!(p.yaw.abs() < 90.0 && p.roll.abs() < 90.0);
        assert_eq!(w1.dim(), 6);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let (_, e, _) = setup();
        let x = Array3::<f64>::zeros((16, 8, 3));
        assert!(matches!(encode_base(&x, &e), Err(Error::Config(_))));
        let mut bad = image(2);
        bad[[0, 0, 0]] = 1.5;
        assert!(matches!(encode_base(&bad, &e), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn broadcast_rows_equal_input() {
        let w = StyleLatent::from_values(Array1::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
        let wp = broadcast_to_extended(&w, 4);
        for row in wp.values().rows() {
            assert_eq!(row, w.values().view());
        }
        let zero = broadcast_to_extended(&StyleLatent::from_values(Array1::<f64>::zeros(3)).unwrap(), 2);
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zeroed_heads_leave_latent_and_render_unchanged() {
        let (g, mut e, render) = setup();
        e.zero_refine_heads();
        let x = image(3);
        let (w, _) = encode_base(&x, &e).unwrap();
        let pose = CameraPose::from_yaw(11.0);
        let wp = broadcast_to_extended(&w, 3);
        let x_hat = synthesize_image(&wp, &pose, &g, &render).unwrap();
        let (out, delta) = refine_once(&x, &x_hat, &wp, &e).unwrap();
        assert!(delta.iter().all(|v| *v == 0.0));
        assert_eq!(out.values(), wp.values());
        assert_eq!(synthesize_image(&out, &pose, &g, &render).unwrap(), x_hat);
    }

    #[test]
    fn single_iteration_equals_refine_once_then_render() {
        let (g, e, render) = setup();
        let x = image(4);
        let (w, _) = encode_base(&x, &e).unwrap();
        let pose = CameraPose::from_yaw(-8.0);
        let r = refine_iterative(&x, &w, &pose, 1, &e, &g, &render).unwrap();
        let wp = broadcast_to_extended(&w, 3);
        let base = synthesize_image(&wp, &pose, &g, &render).unwrap();
        let (once, delta) = refine_once(&x, &base, &wp, &e).unwrap();
        assert_eq!(r.w_plus_refined, once);
        assert_eq!(r.image_refined, synthesize_image(&once, &pose, &g, &render).unwrap());
        assert_eq!(r.image_base, base);
        assert_eq!(r.iteration_losses.len(), 2);
        let accumulated = r.w_plus_refined.values() - wp.values();
        assert!(accumulated.iter().zip(delta.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        let r3 = refine_iterative(&x, &w, &pose, 3, &e, &g, &render).unwrap();
        assert_eq!(r3.refine_iterations_used, 3);
        assert_eq!(r3.iteration_losses.len(), 4);
        assert_eq!(r3.w_plus_refined.num_layers(), 3);
    }

    fn loss_and_grads(e: &EncoderParams<f64>, x: &Array4<f64>, xh: &Array4<f64>) -> (f64, Grads<f64>) {
        // Quadratic probe of every output so every parameter path is exercised.
        let base = e.base_forward(x).unwrap();
        let (delta, cache) = e.refine_forward(x, xh).unwrap();
        let lat = base.latents.mapv(|v| (v - 0.1).sin());
        let pose = base.poses.as_ref().unwrap();
        let loss = lat.sum() + pose.mapv(|v| v * v * 1e-3).sum() + delta.mapv(|v| v * v + v).sum();
        let mut g = e.store().zero_grads();
        let d_lat = base.latents.mapv(|v| (v - 0.1).cos());
        let d_pose = pose.mapv(|v| 2e-3 * v);
        e.base_backward(&base, &d_lat, Some(&d_pose), &mut g);
        e.refine_backward(&cache, &delta.mapv(|v| 2.0 * v + 1.0), &mut g);
        (loss, g)
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (_, e, _) = setup();
        let x = stack_images(&[&image(5), &image(6)]).unwrap();
        let xh = stack_images(&[&image(7), &image(8)]).unwrap();
        let (_, g) = loss_and_grads(&e, &x, &xh);
        let h = 1e-6;
        for id in e.store().ids() {
            let name = e.store().name(id).to_string();
            if name == "mean_latent" {
                continue;
            }
            let len = e.store().get(id).len();
            for i in (0..len).step_by(len.div_ceil(3)) {
                let mut ep = e.clone();
                ep.store_mut().get_mut(id).as_slice_mut().unwrap()[i] += h;
                let mut em = e.clone();
                em.store_mut().get_mut(id).as_slice_mut().unwrap()[i] -= h;
                let fd = (loss_and_grads(&ep, &x, &xh).0 - loss_and_grads(&em, &x, &xh).0) / (2.0 * h);
                let an = g.get(id).as_slice().unwrap()[i];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn refiner_input_gradient_matches_finite_differences() {
        let (_, e, _) = setup();
        let x = stack_images(&[&image(5)]).unwrap();
        let xh = stack_images(&[&image(7)]).unwrap();
        let probe = |xh: &Array4<f64>| e.refine_forward(&x, xh).unwrap().0.mapv(|v| v * v + v).sum();
        let (delta, cache) = e.refine_forward(&x, &xh).unwrap();
        let mut g = e.store().zero_grads();
        let d_xh = e.refine_backward(&cache, &delta.mapv(|v| 2.0 * v + 1.0), &mut g);
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 3, 5, 1), (0, 7, 2, 2)] {
            let (mut p, mut m) = (xh.clone(), xh.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (probe(&p) - probe(&m)) / (2.0 * h);
            assert!((fd - d_xh[idx]).abs() <= 1e-5 * (1.0 + fd.abs()), "{idx:?}: fd {fd} vs {}", d_xh[idx]);
        }
    }
}
