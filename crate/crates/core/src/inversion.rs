//! Single-image inversion with trained encoders, and the two optimisation
//! routines that can start from it: latent optimisation in `W+` and pivotal
//! tuning of a generator copy.

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_base, refine_iterative, stack_images, EncoderParams, InversionResult};
use crate::error::{Error, Result};
use crate::field_core::{CameraPose, RenderConfig};
use crate::generator::{ExtendedLatent, GeneratorParams, Image};
use crate::losses::PerceptualProxy;
use crate::nn::{Adam, ParamStore};
use crate::real::Real;
use crate::training::Variant;

/// Which encoder stages produce the latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    /// Base latent followed by iterative refinement.
    Full,
    /// Base latent only; the refined result equals the base result.
    BaseOnly,
    /// Refinement starting from the mean latent, ignoring the base latent.
    FromMean,
}

impl InversionMode {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::WOnly => InversionMode::BaseOnly,
            Variant::WplusOnly => InversionMode::FromMean,
            _ => InversionMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertConfig {
    pub refine_iterations: usize,
    pub mode: InversionMode,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig { refine_iterations: 3, mode: InversionMode::Full }
    }
}

/// Encodes `x`, picks the rendering pose (override, else pose head, else
/// frontal) and refines. Never mutates parameters.
pub fn invert_image<F: Real>(
    x: &Image<F>,
    encoder: &EncoderParams<F>,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    cfg: &InvertConfig,
    pose_override: Option<CameraPose>,
) -> Result<InversionResult<F>> {
    if encoder.trained_steps() == 0 {
        return Err(Error::Config("encoder has not been trained".into()));
    }
    if let Some(p) = &pose_override {
        p.validate()?;
    }
    let (w_base, predicted) = encode_base(x, encoder)?;
    let pose = pose_override.or(predicted).unwrap_or_else(|| CameraPose::from_yaw(0.0));
    let start = match cfg.mode {
        InversionMode::FromMean => encoder.mean_latent(),
        _ => w_base,
    };
    let mut result = match cfg.mode {
        InversionMode::BaseOnly => {
            let geo = generator.geometry(&pose, render)?;
            let rows = crate::encoders::broadcast_to_extended(&start, generator.num_layers());
            let image = generator.render_rows(rows.values(), &geo)?;
            let loss = crate::encoders::mse(&image, x);
            InversionResult {
                w_base: start,
                w_plus_refined: rows,
                predicted_pose: None,
                pose,
                image_base: image.clone(),
                image_refined: image,
                refine_iterations_used: 0,
                iteration_losses: vec![loss],
            }
        }
        _ => refine_iterative(x, &start, &pose, cfg.refine_iterations, encoder, generator, render)?,
    };
    result.predicted_pose = predicted;
    Ok(result)
}

/// Mean squared pixel error plus perceptual distance, with the gradient of
/// their sum with respect to the image.
fn reconstruction_loss<F: Real>(img: &Image<F>, x: &Image<F>, proxy: &PerceptualProxy<F>) -> Result<(f64, Image<F>)> {
    let a = stack_images(&[img])?;
    let b = stack_images(&[x])?;
    let (perc, g) = proxy.distance_with_grad(&a, &b);
    let n = F::lit(img.len() as f64);
    let mut grad = g.index_axis(ndarray::Axis(0), 0).to_owned();
    let mut l2 = F::zero();
    ndarray::Zip::from(&mut grad).and(img).and(x).for_each(|g, &p, &q| {
        let d = p - q;
        l2 += d * d;
        *g += (d + d) / n;
    });
    Ok(((l2 / n + perc[0]).to_f64_lossless(), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Loss of every iterate, starting with the initial one.
    pub losses: Vec<f64>,
    pub best_step: usize,
}

impl OptimizationTrace {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_step]
    }

    /// First iterate whose loss is at most `threshold`.
    pub fn first_reaching(&self, threshold: f64) -> Option<usize> {
        self.losses.iter().position(|l| *l <= threshold)
    }
}

/// Adam on the `W+` rows against pixel L2 plus perceptual distance. Returns
/// the best iterate seen, so the result is never worse than the start.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent<F: Real>(
    x: &Image<F>,
    w_plus_init: &ExtendedLatent<F>,
    pose: &CameraPose,
    generator: &GeneratorParams<F>,
    render: &RenderConfig,
    proxy: &PerceptualProxy<F>,
    steps: usize,
    lr: f64,
) -> Result<(ExtendedLatent<F>, OptimizationTrace)> {
    let geo = generator.geometry(pose, render)?;
    let mut store = ParamStore::new();
    let id = store.add("w_plus", w_plus_init.values().clone().into_dyn());
    let mut adam = Adam::new(&store, lr);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut best = (f64::INFINITY, 0, w_plus_init.values().clone());
    for step in 0..=steps {
        let rows: Array2<F> = store.view2(id).to_owned();
        let (img, tape) = generator.render_rows_taped(&rows, &geo)?;
        let (loss, d_img) = reconstruction_loss(&img, x, proxy)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64, detail: "latent optimisation".into() });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, step, rows.clone());
        }
        if step == steps {
            break;
        }
        let d_rows = generator.render_backward(&rows, &geo, &tape, &d_img, None);
        let mut g = store.zero_grads();
        *g.get_mut(id) = d_rows.into_dyn();
        adam.update(&mut store, &g);
    }
    log::debug!("latent optimisation: {:.5} -> {:.5}", losses[0], best.0);
    Ok((ExtendedLatent::from_values(best.2)?, OptimizationTrace { losses, best_step: best.1 }))
}

/// Fine-tunes the field weights of an explicit generator copy so that the
/// fixed pivot reconstructs `x`. The copy must be thawed; the frozen original
/// is never touched. Returns the copy after the last update.
#[allow(clippy::too_many_arguments)]
pub fn pivotal_tune<F: Real>(
    x: &Image<F>,
    w_pivot: &ExtendedLatent<F>,
    pose: &CameraPose,
    mut generator_copy: GeneratorParams<F>,
    render: &RenderConfig,
    proxy: &PerceptualProxy<F>,
    steps: usize,
    lr: f64,
) -> Result<(GeneratorParams<F>, Vec<f64>)> {
    if generator_copy.is_frozen() {
        return Err(Error::Config("pivotal tuning needs a thawed generator copy".into()));
    }
    let geo = generator_copy.geometry(pose, render)?;
    let rows = w_pivot.values().clone();
    let mut adam = Adam::new(generator_copy.store(), lr);
    let trainable = generator_copy.field_param_ids();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (img, tape) = generator_copy.render_rows_taped(&rows, &geo)?;
        let (loss, d_img) = reconstruction_loss(&img, x, proxy)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64, detail: "pivotal tuning".into() });
        }
        trace.push(loss);
        let mut g = generator_copy.store().zero_grads();
        generator_copy.render_backward(&rows, &geo, &tape, &d_img, Some(&mut g));
        for id in generator_copy.store().ids().filter(|id| !trainable.contains(id)).collect::<Vec<_>>() {
            let t: &mut ArrayD<F> = g.get_mut(id);
            t.fill(F::zero());
        }
        adam.update(generator_copy.store_mut()?, &g);
    }
    Ok((generator_copy, trace))
}
