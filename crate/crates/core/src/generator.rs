//! The frozen style-modulated radiance-field generator.
//!
//! A mapping network turns Gaussian noise into a style latent `w`. Each of the
//! `n` field layers scales its weight per input channel by an affine
//! projection of one style row, demodulates every output row to unit norm and
//! applies a leaky rectifier. Density and color heads read the last hidden
//! layer; color also sees the encoded view direction. Images come from
//! compositing the field along camera rays.
//!
//! Rendering keeps an optional tape so that image gradients can be pulled
//! back to the style rows (encoder training, latent optimisation) or to the
//! field weights (pivotal tuning).

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_core::{
    composite_backward_kernel, composite_kernel, generate_camera_rays, positional_encode_rows,
    ray_deltas, sample_along_ray, CameraPose, RaySamples, RenderConfig,
};
use crate::nn::{normal_array, Grads, Linear, ParamId, ParamStore, LRELU_SLOPE};
use crate::real::{sigmoid, softplus, Real};
use crate::rng::{stream, tag};

/// RGB image stored as `[H, W, 3]` with values in `[0, 1]`.
pub type Image<F> = Array3<F>;

const DEMOD_EPS: f64 = 1e-8;
const MEAN_LATENT_SAMPLES: usize = 4096;

/// Architecture of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Dimension `d` of `z` and `w`.
    pub latent_dim: usize,
    /// Number `n` of modulated field layers (rows of a `W+` latent).
    pub num_layers: usize,
    pub width: usize,
    pub mapping_depth: usize,
    /// Root-mean-square of mapped latent coordinates.
    pub latent_scale: f64,
    /// Standard deviation of the style modulation around 1.
    pub style_gain: f64,
    pub density_bias: f64,
    pub density_gain: f64,
    pub color_gain: f64,
    /// Positions are divided by this before encoding.
    pub position_scale: f64,
    /// Radius of the fixed density envelope; density pre-activations get
    /// `sharpness * (1 - |u|^2 / radius^2)` added, which bounds the object.
    pub envelope_radius: f64,
    pub envelope_sharpness: f64,
    /// Density is exactly zero outside this radius; such samples are skipped.
    pub bound_radius: f64,
    /// Gain of a fixed colour gradient shared by every identity; colour
    /// logits get `template_gain * (u_x, u_z, -u_x) / position_scale` added.
    pub template_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 64,
            num_layers: 4,
            width: 64,
            mapping_depth: 3,
            latent_scale: 0.125,
            style_gain: 2.0,
            density_bias: 0.0,
            density_gain: 3.0,
            color_gain: 3.0,
            position_scale: 2.0,
            envelope_radius: 0.8,
            envelope_sharpness: 4.0,
            bound_radius: 1.6,
            template_gain: 1.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.latent_dim < 1 || self.num_layers < 1 || self.width < 1 || self.mapping_depth < 1 {
            return bad("dimensions and depths must be at least 1");
        }
        if !(self.latent_scale > 0.0 && self.style_gain >= 0.0) {
            return bad("latent_scale must be positive and style_gain nonnegative");
        }
        if ![self.density_bias, self.density_gain, self.color_gain, self.envelope_sharpness, self.template_gain]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("head and envelope constants must be finite");
        }
        if !(self.position_scale > 0.0 && self.envelope_radius > 0.0 && self.bound_radius > 0.0) {
            return bad("position_scale, envelope_radius and bound_radius must be positive");
        }
        Ok(())
    }
}

/// A point of the style space `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLatent<F> {
    values: Array1<F>,
}

impl<F: Real> StyleLatent<F> {
    pub fn from_values(values: Array1<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("style latent is not finite".into()));
        }
        Ok(StyleLatent { values })
    }

    pub fn values(&self) -> &Array1<F> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A point of the extended space `W+`: one style row per modulated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLatent<F> {
    values: Array2<F>,
}

impl<F: Real> ExtendedLatent<F> {
    pub fn from_values(values: Array2<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("extended latent is not finite".into()));
        }
        Ok(ExtendedLatent { values: values.as_standard_layout().into_owned() })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn num_layers(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Anything that can drive the field: a single `w` (shared by every layer) or
/// a `W+` stack.
pub trait StyleInput<F: Real> {
    fn style_rows(&self, num_layers: usize, dim: usize) -> Result<Array2<F>>;
}

impl<F: Real> StyleInput<F> for StyleLatent<F> {
    fn style_rows(&self, num_layers: usize, dim: usize) -> Result<Array2<F>> {
        if self.dim() != dim {
            return Err(Error::Config(format!("latent has dimension {}, generator expects {dim}", self.dim())));
        }
        Ok(self.values.broadcast((num_layers, dim)).expect("broadcast rows").to_owned())
    }
}

impl<F: Real> StyleInput<F> for ExtendedLatent<F> {
    fn style_rows(&self, num_layers: usize, dim: usize) -> Result<Array2<F>> {
        if self.values.dim() != (num_layers, dim) {
            return Err(Error::Config(format!(
                "extended latent has shape {:?}, generator expects ({num_layers}, {dim})",
                self.values.dim()
            )));
        }
        Ok(self.values.clone())
    }
}

/// Parameters of one modulated layer inside the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModulatedLayer {
    /// `[out, in]`
    pub weight: ParamId,
    pub bias: ParamId,
    /// `[d, in]`
    pub affine_weight: ParamId,
    pub affine_bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Per-render, per-layer modulation products.
#[derive(Clone, Debug)]
struct Modulation<F> {
    style: Array1<F>,
    /// Demodulated weight `[out, in]`.
    weight: Array2<F>,
    norm: Array1<F>,
}

/// Frozen generator parameters.
#[derive(Clone, Debug)]
pub struct GeneratorParams<F> {
    config: GeneratorConfig,
    pos_freqs: usize,
    dir_freqs: usize,
    seed: u64,
    store: ParamStore<F>,
    mapping: Vec<Linear>,
    layers: Vec<ModulatedLayer>,
    density_head: Linear,
    color_head: Linear,
    mean_latent: ParamId,
    frozen: bool,
}

/// Rays, depth intervals and encodings for one pose; independent of the latent.
#[derive(Clone, Debug)]
pub struct RenderGeometry<F> {
    pub pose: CameraPose,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    inputs: FieldInputs<F>,
    delta: Vec<F>,
    background: [F; 3],
}

/// Latent-independent inputs of the field at a set of samples.
#[derive(Clone, Debug)]
struct FieldInputs<F> {
    /// Encoded positions of the evaluated samples only.
    pos_enc: Array2<F>,
    /// One row per ray.
    dir_enc: Array2<F>,
    envelope: Vec<F>,
    template: Vec<[F; 3]>,
    /// Flat sample index of each evaluated row.
    sample_index: Vec<usize>,
    inside: Vec<bool>,
    samples: usize,
    total: usize,
}

struct FieldOutput<F> {
    sigma: Vec<F>,
    rgb: Vec<F>,
    hidden: Vec<Array2<F>>,
    mods: Vec<Modulation<F>>,
}

/// Saved forward state for [`GeneratorParams::render_backward`].
pub struct RenderTape<F> {
    sigma: Vec<F>,
    rgb: Vec<F>,
    hidden: Vec<Array2<F>>,
    mods: Vec<Modulation<F>>,
    weights: Vec<F>,
    t_final: Vec<F>,
}

/// One synthetic identity rendered from several poses.
#[derive(Clone, Debug)]
pub struct IdentityBatch<F> {
    pub latent: StyleLatent<F>,
    pub poses: Vec<CameraPose>,
    pub images: Vec<Image<F>>,
    pub identity_id: u64,
}

impl<F: Real> GeneratorParams<F> {
    /// Seeded random initialisation; the result is frozen.
    pub fn new(config: GeneratorConfig, render: &RenderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        render.validate()?;
        let mut gen = Self::skeleton(config, render.freq_count_position, render.freq_count_direction, seed, true);
        gen.calibrate_mapping();
        Ok(gen)
    }

    /// Builds the layer layout; with `randomize` unset the values are
    /// placeholders to be overwritten from a checkpoint.
    fn skeleton(config: GeneratorConfig, pos_freqs: usize, dir_freqs: usize, seed: u64, randomize: bool) -> Self {
        let mut rng = stream(seed, tag::GEN_INIT, 0);
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let mut mapping = Vec::with_capacity(config.mapping_depth);
        for i in 0..config.mapping_depth {
            let gain = if i + 1 == config.mapping_depth { 1.0 } else { 2f64.sqrt() };
            mapping.push(Linear::new(&mut store, &format!("mapping.{i}"), d, d, gain, &mut rng));
        }
        let pos_dim = 6 * pos_freqs;
        let dir_dim = 6 * dir_freqs;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let fan_in = if i == 0 { pos_dim } else { config.width };
            let fan_out = config.width;
            let name = format!("field.{i}");
            let weight = store.add(format!("{name}.weight"), normal_array(&mut rng, &[fan_out, fan_in], 1.0));
            let bias = store.add(format!("{name}.bias"), normal_array(&mut rng, &[fan_out], 0.1));
            let affine_std = config.style_gain / ((d as f64).sqrt() * config.latent_scale);
            let affine_weight =
                store.add(format!("{name}.affine.weight"), normal_array(&mut rng, &[d, fan_in], affine_std));
            let affine_bias =
                store.add(format!("{name}.affine.bias"), ArrayD::from_elem(IxDyn(&[fan_in]), F::one()));
            layers.push(ModulatedLayer { weight, bias, affine_weight, affine_bias, fan_in, fan_out });
        }
        let density_head =
            Linear::new(&mut store, "density_head", config.width, 1, config.density_gain, &mut rng);
        store.get_mut(density_head.b).fill(F::lit(config.density_bias));
        let color_head = Linear::new(&mut store, "color_head", config.width + dir_dim, 3, config.color_gain, &mut rng);
        let mean_latent = store.add("mean_latent", ArrayD::zeros(IxDyn(&[d])));
        if !randomize {
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).fill(F::zero());
            }
        }
        GeneratorParams {
            config,
            pos_freqs,
            dir_freqs,
            seed,
            store,
            mapping,
            layers,
            density_head,
            color_head,
            mean_latent,
            frozen: true,
        }
    }

    /// Rescales the last mapping layer so mapped latents have the configured
    /// RMS, then records the mean latent.
    fn calibrate_mapping(&mut self) {
        let zs = self.noise_batch(MEAN_LATENT_SAMPLES, tag::GEN_MEAN);
        let ws = self.map_rows(&zs);
        let rms = (ws.iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>() / ws.len() as f64).sqrt();
        let factor = F::lit(self.config.latent_scale / rms.max(1e-12));
        let last = self.mapping.last().expect("mapping has layers").clone();
        self.store.get_mut(last.w).mapv_inplace(|v| v * factor);
        self.store.get_mut(last.b).mapv_inplace(|v| v * factor);
        let ws = self.map_rows(&zs);
        let mean = ws.mean_axis(Axis(0)).expect("nonempty");
        *self.store.get_mut(self.mean_latent) = mean.into_dyn();
    }

    fn noise_batch(&self, count: usize, stream_tag: u64) -> Array2<F> {
        let mut rng = stream(self.seed, stream_tag, 0);
        normal_array::<F, _>(&mut rng, &[count, self.config.latent_dim], 1.0)
            .into_dimensionality()
            .expect("rank 2")
    }

    /// Rebuilds a generator from stored tensors, validating names and shapes.
    pub fn from_store(
        config: GeneratorConfig,
        pos_freqs: usize,
        dir_freqs: usize,
        seed: u64,
        store: ParamStore<F>,
    ) -> Result<Self> {
        config.validate()?;
        let mut gen = Self::skeleton(config, pos_freqs, dir_freqs, seed, false);
        if gen.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "generator expects {} tensors, checkpoint has {}",
                gen.store.len(),
                store.len()
            )));
        }
        for id in gen.store.ids().collect::<Vec<_>>() {
            let name = gen.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing generator tensor {name}")))?;
            gen.store.set(id, store.get(src).clone()).map_err(Error::Checkpoint)?;
        }
        Ok(gen)
    }

    /// The same generator in another precision.
    pub fn cast<G: Real>(&self) -> GeneratorParams<G> {
        GeneratorParams {
            config: self.config.clone(),
            pos_freqs: self.pos_freqs,
            dir_freqs: self.dir_freqs,
            seed: self.seed,
            store: self.store.cast(),
            mapping: self.mapping.clone(),
            layers: self.layers.clone(),
            density_head: self.density_head.clone(),
            color_head: self.color_head.clone(),
            mean_latent: self.mean_latent,
            frozen: self.frozen,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequency_counts(&self) -> (usize, usize) {
        (self.pos_freqs, self.dir_freqs)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Hash of every parameter, used to prove frozen-ness.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Explicit mutable copy for fine-tuning; the original stays frozen.
    pub fn thawed_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    pub fn store_mut(&mut self) -> Result<&mut ParamStore<F>> {
        if self.frozen {
            return Err(Error::Config("generator parameters are frozen".into()));
        }
        Ok(&mut self.store)
    }

    /// Parameter tensors that pivotal tuning may change: the field layers and
    /// both heads.
    pub fn field_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.weight, l.bias, l.affine_weight, l.affine_bias]);
        }
        ids.extend([self.density_head.w, self.density_head.b, self.color_head.w, self.color_head.b]);
        ids
    }

    pub fn mean_latent(&self) -> StyleLatent<F> {
        StyleLatent { values: self.store.view1(self.mean_latent).to_owned() }
    }

    /// Mapping network `z -> w`.
    pub fn map_latent(&self, z: &[F]) -> Result<StyleLatent<F>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Config(format!(
                "noise has dimension {}, mapping expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("noise vector is not finite".into()));
        }
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let w = self.map_rows(&z);
        StyleLatent::from_values(w.row(0).to_owned())
    }

    /// Batched mapping over rows of `z`.
    pub fn map_rows(&self, z: &Array2<F>) -> Array2<F> {
        // Normalise each noise vector to unit second moment.
        let mut x = z.clone();
        for mut row in x.rows_mut() {
            let ms = row.iter().map(|v| *v * *v).sum::<F>() / F::lit(row.len() as f64);
            let inv = F::one() / (ms + F::lit(1e-8)).sqrt();
            row.mapv_inplace(|v| v * inv);
        }
        let gain = F::lit(2f64.sqrt());
        let slope = F::lit(LRELU_SLOPE);
        for (i, layer) in self.mapping.iter().enumerate() {
            x = layer.forward(&self.store, x.view());
            if i + 1 < self.mapping.len() {
                x.mapv_inplace(|v| if v > F::zero() { v * gain } else { v * slope * gain });
            }
        }
        x
    }

    /// Draws a latent from the mapped Gaussian.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> StyleLatent<F> {
        let z: Vec<F> = (0..self.config.latent_dim)
            .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.map_latent(&z).expect("dimension matches")
    }

    fn modulation(&self, layer: &ModulatedLayer, style_row: ArrayView1<F>) -> Modulation<F> {
        let mut style = style_row.dot(&self.store.view2(layer.affine_weight));
        style += &self.store.view1(layer.affine_bias);
        let mut weight = self.store.view2(layer.weight).to_owned();
        let mut norm = Array1::zeros(layer.fan_out);
        let eps = F::lit(DEMOD_EPS);
        for (o, mut row) in weight.rows_mut().into_iter().enumerate() {
            row *= &style;
            let n = (row.iter().map(|v| *v * *v).sum::<F>() + eps).sqrt();
            row.mapv_inplace(|v| v / n);
            norm[o] = n;
        }
        Modulation { style, weight, norm }
    }

    /// One modulated layer applied to rows of `features`:
    /// `lrelu(features . demod(W * s)^T + b) * sqrt(2)`.
    pub fn modulated_layer_forward(
        &self,
        layer_index: usize,
        features: ArrayView2<F>,
        style_row: ArrayView1<F>,
    ) -> Result<Array2<F>> {
        let layer = self
            .layers
            .get(layer_index)
            .ok_or_else(|| Error::InvalidInput(format!("no modulated layer {layer_index}")))?;
        if features.ncols() != layer.fan_in || style_row.len() != self.config.latent_dim {
            return Err(Error::InvalidInput("modulated layer input shape mismatch".into()));
        }
        let m = self.modulation(layer, style_row);
        Ok(self.apply_layer(layer, &m, features))
    }

    fn apply_layer(&self, layer: &ModulatedLayer, m: &Modulation<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&m.weight.t());
        let bias = self.store.view1(layer.bias);
        let bias = bias.as_slice().expect("contiguous");
        let gain = F::lit(2f64.sqrt());
        let slope = F::lit(LRELU_SLOPE) * gain;
        for row in y.as_slice_mut().expect("standard layout").chunks_exact_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                let t = *v + *b;
                *v = if t > F::zero() { t * gain } else { t * slope };
            }
        }
        y
    }

    /// Combined `[width, 4]` head matrix: column 0 density, columns 1..4 color.
    fn head_matrix(&self) -> Array2<F> {
        let w = self.config.width;
        let mut h = Array2::zeros((w, 4));
        h.slice_mut(s![.., 0..1]).assign(&self.store.view2(self.density_head.w));
        h.slice_mut(s![.., 1..4]).assign(&self.store.view2(self.color_head.w).slice(s![0..w, ..]));
        h
    }

    /// With `skip_outside` set, samples beyond the bound are not evaluated at
    /// all; otherwise they are evaluated but given zero density.
    fn field_inputs(&self, samples: &RaySamples<F>, skip_outside: bool) -> FieldInputs<F> {
        let inv_scale = F::lit(1.0 / self.config.position_scale);
        let inv_r2 = F::lit(1.0 / self.config.envelope_radius.powi(2));
        let sharp = F::lit(self.config.envelope_sharpness);
        let bound2 = F::lit(self.config.bound_radius.powi(2));
        let tg = F::lit(self.config.template_gain) * inv_scale;
        let mut envelope = Vec::new();
        let mut template = Vec::new();
        let mut sample_index = Vec::new();
        let mut inside = Vec::new();
        let mut kept = Vec::new();
        for (p, u) in samples.positions.rows().into_iter().enumerate() {
            let r2 = u.dot(&u);
            let is_inside = r2 <= bound2;
            if skip_outside && !is_inside {
                continue;
            }
            envelope.push(sharp * (F::one() - r2 * inv_r2));
            template.push([tg * u[0], tg * u[2], -(tg * u[0])]);
            sample_index.push(p);
            inside.push(is_inside);
            kept.extend(u.iter().map(|v| *v * inv_scale));
        }
        let kept = Array2::from_shape_vec((sample_index.len(), 3), kept).expect("three coordinates");
        FieldInputs {
            pos_enc: positional_encode_rows(&kept, self.pos_freqs),
            dir_enc: positional_encode_rows(&samples.view_directions, self.dir_freqs),
            envelope,
            template,
            sample_index,
            inside,
            samples: samples.samples_per_ray(),
            total: samples.positions.nrows(),
        }
    }

    fn field_forward(&self, rows: &Array2<F>, inputs: &FieldInputs<F>, keep: bool) -> FieldOutput<F> {
        let (pos_enc, dir_enc, samples) = (&inputs.pos_enc, &inputs.dir_enc, inputs.samples);
        let mut mods = Vec::with_capacity(self.layers.len());
        let mut hidden: Vec<Array2<F>> = Vec::new();
        let mut x: Option<Array2<F>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let m = self.modulation(layer, rows.row(i));
            let input = x.as_ref().map(|a| a.view()).unwrap_or_else(|| pos_enc.view());
            let y = self.apply_layer(layer, &m, input);
            if keep {
                if let Some(prev) = x.take() {
                    hidden.push(prev);
                }
            }
            x = Some(y);
            mods.push(m);
        }
        let last = x.expect("at least one layer");
        let heads = last.dot(&self.head_matrix());
        let w = self.config.width;
        let dir_rows = self.store.view2(self.color_head.w).slice(s![w.., ..]).to_owned();
        let dir_term = dir_enc.dot(&dir_rows);
        let db = self.store.view1(self.density_head.b)[0];
        let cb = self.store.view1(self.color_head.b);
        let mut sigma = vec![F::zero(); inputs.total];
        let mut rgb = vec![F::zero(); 3 * inputs.total];
        for (a, &p) in inputs.sample_index.iter().enumerate() {
            let r = p / samples;
            if inputs.inside[a] {
                sigma[p] = softplus(heads[[a, 0]] + db + inputs.envelope[a]);
            }
            for c in 0..3 {
                rgb[3 * p + c] = sigmoid(heads[[a, 1 + c]] + dir_term[[r, c]] + cb[c] + inputs.template[a][c]);
            }
        }
        if keep {
            hidden.push(last);
        }
        FieldOutput { sigma, rgb, hidden, mods }
    }

    /// Densities and colors of the field at arbitrary ray samples.
    pub fn query_field<L: StyleInput<F>>(&self, samples: &RaySamples<F>, latent: &L) -> Result<(Vec<F>, Vec<[F; 3]>)> {
        let rows = latent.style_rows(self.config.num_layers, self.config.latent_dim)?;
        let out = self.field_forward(&rows, &self.field_inputs(samples, false), false);
        let colors = out.rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok((out.sigma, colors))
    }

    /// Rays and encodings for a pose, with deterministic left-edge depths.
    pub fn geometry(&self, pose: &CameraPose, cfg: &RenderConfig) -> Result<RenderGeometry<F>> {
        if cfg.freq_count_position != self.pos_freqs || cfg.freq_count_direction != self.dir_freqs {
            return Err(Error::Config(format!(
                "render config uses {}/{} frequencies, generator was built for {}/{}",
                cfg.freq_count_position, cfg.freq_count_direction, self.pos_freqs, self.dir_freqs
            )));
        }
        let bundle = generate_camera_rays::<F>(pose, cfg)?;
        let samples = sample_along_ray(&bundle, cfg, false, 0)?;
        let s = cfg.samples_per_ray;
        let mut delta = vec![F::zero(); samples.t_values.len()];
        for (r, row) in samples.t_values.rows().into_iter().enumerate() {
            ray_deltas(row.as_slice().expect("contiguous"), samples.far, &mut delta[r * s..(r + 1) * s]);
        }
        let bg = cfg.background_color;
        Ok(RenderGeometry {
            pose: *pose,
            height: cfg.image_height,
            width: cfg.image_width,
            samples: s,
            inputs: self.field_inputs(&samples, true),
            delta,
            background: [F::lit(bg[0]), F::lit(bg[1]), F::lit(bg[2])],
        })
    }

    fn check_rows(&self, rows: &Array2<F>) -> Result<()> {
        if rows.dim() != (self.config.num_layers, self.config.latent_dim) {
            return Err(Error::Config(format!(
                "style rows have shape {:?}, expected ({}, {})",
                rows.dim(),
                self.config.num_layers,
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Forward render from explicit style rows `[n, d]`.
    pub fn render_rows(&self, rows: &Array2<F>, geo: &RenderGeometry<F>) -> Result<Image<F>> {
        Ok(self.render_rows_taped(rows, geo)?.0)
    }

    /// Forward render that also returns the tape for [`Self::render_backward`].
    pub fn render_rows_taped(&self, rows: &Array2<F>, geo: &RenderGeometry<F>) -> Result<(Image<F>, RenderTape<F>)> {
        self.check_rows(rows)?;
        let out = self.field_forward(rows, &geo.inputs, true);
        let (h, w, s) = (geo.height, geo.width, geo.samples);
        let mut image = Array3::zeros((h, w, 3));
        let mut weights = vec![F::zero(); h * w * s];
        let mut t_final = vec![F::zero(); h * w];
        {
            let img = image.as_slice_mut().expect("standard layout");
            for r in 0..h * w {
                let span = r * s..(r + 1) * s;
                let (c, t) = composite_kernel(
                    &out.sigma[span.clone()],
                    &out.rgb[3 * r * s..3 * (r + 1) * s],
                    &geo.delta[span.clone()],
                    geo.background,
                    &mut weights[span],
                );
                img[3 * r..3 * r + 3].copy_from_slice(&c);
                t_final[r] = t;
            }
        }
        let tape = RenderTape {
            sigma: out.sigma,
            rgb: out.rgb,
            hidden: out.hidden,
            mods: out.mods,
            weights,
            t_final,
        };
        Ok((image, tape))
    }

    /// Pulls `d_image` back through the render. Returns the gradient with
    /// respect to the style rows and, when `param_grads` is given, accumulates
    /// field and head weight gradients into it.
    pub fn render_backward(
        &self,
        rows: &Array2<F>,
        geo: &RenderGeometry<F>,
        tape: &RenderTape<F>,
        d_image: &Image<F>,
        mut param_grads: Option<&mut Grads<F>>,
    ) -> Array2<F> {
        let (h, w, s) = (geo.height, geo.width, geo.samples);
        let inputs = &geo.inputs;
        let d_img = d_image.as_standard_layout();
        let d_img = d_img.as_slice().expect("standard layout");

        // Compositing backward over full rays, then gathered to evaluated rows
        // as pre-activation gradients of the heads.
        let mut d_sigma = vec![F::zero(); inputs.total];
        let mut d_rgb = vec![F::zero(); 3 * inputs.total];
        for r in 0..h * w {
            let span = r * s..(r + 1) * s;
            let dc = [d_img[3 * r], d_img[3 * r + 1], d_img[3 * r + 2]];
            composite_backward_kernel(
                &tape.sigma[span.clone()],
                &tape.rgb[3 * r * s..3 * (r + 1) * s],
                &geo.delta[span.clone()],
                &tape.weights[span.clone()],
                tape.t_final[r],
                geo.background,
                dc,
                &mut d_sigma[span],
                &mut d_rgb[3 * r * s..3 * (r + 1) * s],
            );
        }
        let rows_eval = inputs.sample_index.len();
        let mut g = Array2::<F>::zeros((rows_eval, 4));
        let mut g_ray = Array2::<F>::zeros((h * w, 3));
        {
            let gs = g.as_slice_mut().expect("standard layout");
            for (a, &p) in inputs.sample_index.iter().enumerate() {
                if inputs.inside[a] {
                    // softplus'(x) = sigmoid(x) = 1 - exp(-softplus(x))
                    let dsp = -(-tape.sigma[p]).exp_m1();
                    gs[4 * a] = d_sigma[p] * dsp;
                }
                for c in 0..3 {
                    let col = tape.rgb[3 * p + c];
                    let v = d_rgb[3 * p + c] * col * (F::one() - col);
                    gs[4 * a + 1 + c] = v;
                    g_ray[[p / s, c]] += v;
                }
            }
        }

        let width = self.config.width;
        let last = tape.hidden.last().expect("hidden layers");
        if let Some(pg) = param_grads.as_deref_mut() {
            let dh = last.t().dot(&g);
            let mut dw_d = pg.get_mut(self.density_head.w).view_mut().into_dimensionality::<ndarray::Ix2>().expect("2d");
            dw_d += &dh.slice(s![.., 0..1]);
            pg.get_mut(self.density_head.b)[[0]] += g.column(0).sum();
            // Per-ray sums feed the direction rows of the color head.
            let d_dir = geo.inputs.dir_enc.t().dot(&g_ray);
            let mut dw_c: ndarray::ArrayViewMut2<F> =
                pg.get_mut(self.color_head.w).view_mut().into_dimensionality().expect("2d");
            let mut top = dw_c.slice_mut(s![0..width, ..]);
            top += &dh.slice(s![.., 1..4]);
            let mut bottom = dw_c.slice_mut(s![width.., ..]);
            bottom += &d_dir;
            let mut db_c = pg.get_mut(self.color_head.b).view_mut();
            for c in 0..3 {
                db_c[[c]] += g.column(1 + c).sum();
            }
        }
        let mut dx = g.dot(&self.head_matrix().t());

        let mut d_rows = Array2::zeros(rows.dim());
        let gain = F::lit(2f64.sqrt());
        let slope_gain = F::lit(LRELU_SLOPE) * gain;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.hidden[i];
            ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
                *d *= if o > F::zero() { gain } else { slope_gain };
            });
            let input = if i == 0 { geo.inputs.pos_enc.view() } else { tape.hidden[i - 1].view() };
            let d_wd = dx.t().dot(&input);
            let m = &tape.mods[i];
            let next_dx = (i > 0).then(|| dx.dot(&m.weight));

            // Demodulation and modulation backward.
            let w_raw = self.store.view2(layer.weight);
            let mut d_style = Array1::<F>::zeros(layer.fan_in);
            let mut d_w_raw = param_grads.is_some().then(|| Array2::<F>::zeros((layer.fan_out, layer.fan_in)));
            for o in 0..layer.fan_out {
                let wd = m.weight.row(o);
                let gd = d_wd.row(o);
                let proj = wd.dot(&gd);
                let inv = F::one() / m.norm[o];
                for j in 0..layer.fan_in {
                    let d_wm = (gd[j] - wd[j] * proj) * inv;
                    d_style[j] += d_wm * w_raw[[o, j]];
                    if let Some(dw) = d_w_raw.as_mut() {
                        dw[[o, j]] = d_wm * m.style[j];
                    }
                }
            }
            let aff = self.store.view2(layer.affine_weight);
            d_rows.row_mut(i).assign(&aff.dot(&d_style));

            if let Some(pg) = param_grads.as_deref_mut() {
                *pg.get_mut(layer.weight) += &d_w_raw.expect("allocated").into_dyn();
                *pg.get_mut(layer.bias) += &dx.sum_axis(Axis(0)).into_dyn();
                let outer = rows
                    .row(i)
                    .to_owned()
                    .insert_axis(Axis(1))
                    .dot(&d_style.view().insert_axis(Axis(0)));
                *pg.get_mut(layer.affine_weight) += &outer.into_dyn();
                *pg.get_mut(layer.affine_bias) += &d_style.into_dyn();
            }
            if let Some(nd) = next_dx {
                dx = nd;
            }
        }
        d_rows
    }

    pub fn synthesize_rows(&self, rows: &Array2<F>, pose: &CameraPose, cfg: &RenderConfig) -> Result<Image<F>> {
        let geo = self.geometry(pose, cfg)?;
        self.render_rows(rows, &geo)
    }
}

/// Renders `G(latent, pose)`; deterministic given its inputs.
pub fn synthesize_image<F: Real, L: StyleInput<F>>(
    latent: &L,
    pose: &CameraPose,
    params: &GeneratorParams<F>,
    cfg: &RenderConfig,
) -> Result<Image<F>> {
    let rows = latent.style_rows(params.num_layers(), params.latent_dim())?;
    params.synthesize_rows(&rows, pose, cfg)
}

/// `k` identities, each rendered at `m` yaws drawn uniformly from
/// `[-yaw_range, yaw_range]` with zero roll.
pub fn sample_multiview_batch<F: Real>(
    num_identities: usize,
    poses_per_identity: usize,
    yaw_range: f64,
    seed: u64,
    params: &GeneratorParams<F>,
    cfg: &RenderConfig,
) -> Result<Vec<IdentityBatch<F>>> {
    if num_identities < 1 || poses_per_identity < 1 {
        return Err(Error::InvalidInput("need at least one identity and one pose".into()));
    }
    if !(0.0..=90.0).contains(&yaw_range) {
        return Err(Error::InvalidInput(format!("yaw range {yaw_range} outside [0, 90]")));
    }
    (0..num_identities)
        .map(|i| {
            let mut rng = stream(seed, tag::MULTIVIEW, i as u64);
            let latent = params.sample_latent(&mut rng);
            let poses: Vec<CameraPose> = (0..poses_per_identity)
                .map(|_| CameraPose::from_yaw(rng.random_range(-yaw_range..=yaw_range)))
                .collect();
            let images = poses
                .iter()
                .map(|p| synthesize_image(&latent, p, params, cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(IdentityBatch { latent, poses, images, identity_id: i as u64 })
        })
        .collect()
}
