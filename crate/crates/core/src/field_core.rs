//! Pure numeric kernels: Fourier positional encoding, pinhole camera rays,
//! sampling along rays and transmittance-weighted compositing.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Image geometry, depth range and encoding frequencies for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub samples_per_ray: usize,
    /// Near bound `t_n` of the depth range.
    pub near: f64,
    /// Far bound `t_f` of the depth range.
    pub far: f64,
    pub background_color: [f64; 3],
    pub freq_count_position: usize,
    pub freq_count_direction: usize,
    /// Vertical field of view of the pinhole camera.
    pub fov_degrees: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_height: 32,
            image_width: 32,
            samples_per_ray: 32,
            near: 0.5 * DEFAULT_CAMERA_RADIUS,
            far: 1.5 * DEFAULT_CAMERA_RADIUS,
            background_color: [1.0, 1.0, 1.0],
            freq_count_position: 4,
            freq_count_direction: 2,
            fov_degrees: 30.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("render: {m}")));
        if self.image_height < 1 || self.image_width < 1 {
            return bad("image dimensions must be at least 1");
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be at least 2");
        }
        if !(self.near.is_finite() && self.far.is_finite()) || self.near >= self.far {
            return bad("near must be finite and strictly less than far");
        }
        if self.freq_count_position < 1 || self.freq_count_direction < 1 {
            return bad("frequency counts must be at least 1");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad("fov_degrees must lie in (0, 180)");
        }
        if self.background_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background_color components must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn num_rays(&self) -> usize {
        self.image_height * self.image_width
    }

    /// Width of the encoded position vector.
    pub fn position_encoding_dim(&self) -> usize {
        3 * 2 * self.freq_count_position
    }

    pub fn direction_encoding_dim(&self) -> usize {
        3 * 2 * self.freq_count_direction
    }
}

pub const DEFAULT_CAMERA_RADIUS: f64 = 4.0;

/// Camera on a sphere around the origin. Pitch is fixed at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees; positive yaw moves the camera towards +x.
    pub yaw: f64,
    /// Degrees of rotation about the viewing axis.
    pub roll: f64,
    pub radius: f64,
}

impl CameraPose {
    pub fn new(yaw: f64, roll: f64, radius: f64) -> Result<Self> {
        let pose = CameraPose { yaw, roll, radius };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_yaw(yaw: f64) -> Self {
        CameraPose { yaw, roll: 0.0, radius: DEFAULT_CAMERA_RADIUS }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.yaw.is_finite() && (-90.0..=90.0).contains(&self.yaw)) {
            return Err(Error::InvalidInput(format!("yaw {} outside [-90, 90]", self.yaw)));
        }
        if !(self.roll.is_finite() && (-90.0..=90.0).contains(&self.roll)) {
            return Err(Error::InvalidInput(format!("roll {} outside [-90, 90]", self.roll)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::InvalidInput(format!("radius {} must be positive", self.radius)));
        }
        Ok(())
    }

    pub fn camera_center(&self) -> [f64; 3] {
        let y = self.yaw.to_radians();
        [self.radius * y.sin(), 0.0, self.radius * y.cos()]
    }
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose::from_yaw(0.0)
    }
}

/// One ray per pixel, row-major over the image.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle<F> {
    /// `[H*W, 3]`
    pub origins: Array2<F>,
    /// `[H*W, 3]`, unit norm.
    pub directions: Array2<F>,
    pub height: usize,
    pub width: usize,
}

impl<F: Real> RayBundle<F> {
    pub fn num_rays(&self) -> usize {
        self.height * self.width
    }
}

/// Depth samples along each ray of a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<F> {
    /// `[R, S]`, strictly increasing along each row.
    pub t_values: Array2<F>,
    /// `[R*S, 3]`, ray-major: sample `s` of ray `r` is row `r*S + s`.
    pub positions: Array2<F>,
    /// `[R, 3]`
    pub view_directions: Array2<F>,
    pub far: F,
}

impl<F: Real> RaySamples<F> {
    pub fn num_rays(&self) -> usize {
        self.t_values.nrows()
    }

    pub fn samples_per_ray(&self) -> usize {
        self.t_values.ncols()
    }
}

/// Fourier features `(sin(2^k pi p), cos(2^k pi p))` for `k = 0..L`, laid out
/// coordinate by coordinate.
pub fn positional_encode<F: Real>(p: &[F], freq_count: usize) -> Result<Vec<F>> {
    if freq_count < 1 {
        return Err(Error::InvalidInput("frequency count must be at least 1".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("positional_encode input is not finite".into()));
    }
    let mut out = Vec::with_capacity(p.len() * 2 * freq_count);
    for &x in p {
        encode_coordinate(x, freq_count, &mut out);
    }
    Ok(out)
}

#[inline]
fn encode_coordinate<F: Real>(x: F, freq_count: usize, out: &mut Vec<F>) {
    let pi = F::lit(std::f64::consts::PI);
    let mut scale = F::one();
    for _ in 0..freq_count {
        let (s, c) = (scale * pi * x).sin_cos();
        out.push(s);
        out.push(c);
        scale = scale + scale;
    }
}

/// Row-wise encoding of an `[N, D]` array into `[N, D*2*L]`.
pub fn positional_encode_rows<F: Real>(points: &Array2<F>, freq_count: usize) -> Array2<F> {
    let (n, d) = points.dim();
    let width = d * 2 * freq_count;
    let mut out = Vec::with_capacity(n * width);
    for row in points.rows() {
        for &x in row.iter() {
            encode_coordinate(x, freq_count, &mut out);
        }
    }
    Array2::from_shape_vec((n, width), out).expect("encoding shape")
}

/// Look-at pinhole rays through pixel centres for a camera on the view sphere.
pub fn generate_camera_rays<F: Real>(pose: &CameraPose, cfg: &RenderConfig) -> Result<RayBundle<F>> {
    pose.validate()?;
    cfg.validate()?;
    let (h, w) = (cfg.image_height, cfg.image_width);
    let center = pose.camera_center();
    let forward = normalize([-center[0], -center[1], -center[2]]);
    let world_up = [0.0, 1.0, 0.0];
    let right0 = normalize(cross(forward, world_up));
    let up0 = cross(right0, forward);
    let (sr, cr) = pose.roll.to_radians().sin_cos();
    let right = [
        cr * right0[0] + sr * up0[0],
        cr * right0[1] + sr * up0[1],
        cr * right0[2] + sr * up0[2],
    ];
    let up = [
        -sr * right0[0] + cr * up0[0],
        -sr * right0[1] + cr * up0[1],
        -sr * right0[2] + cr * up0[2],
    ];
    let tan_half = (cfg.fov_degrees.to_radians() * 0.5).tan();
    let aspect = w as f64 / h as f64;

    let mut origins = Array2::zeros((h * w, 3));
    let mut directions = Array2::zeros((h * w, 3));
    for i in 0..h {
        let y = (1.0 - 2.0 * (i as f64 + 0.5) / h as f64) * tan_half;
        for j in 0..w {
            let x = (2.0 * (j as f64 + 0.5) / w as f64 - 1.0) * tan_half * aspect;
            let d = normalize([
                forward[0] + x * right[0] + y * up[0],
                forward[1] + x * right[1] + y * up[1],
                forward[2] + x * right[2] + y * up[2],
            ]);
            let r = i * w + j;
            for a in 0..3 {
                origins[[r, a]] = F::lit(center[a]);
                directions[[r, a]] = F::lit(d[a]);
            }
        }
    }
    Ok(RayBundle { origins, directions, height: h, width: w })
}

/// Depths along every ray: the left edge of each of `S` equal bins, or one
/// seeded uniform draw per bin when `stratified` is set. With left edges every
/// interval equals the bin width, so a constant density is integrated exactly.
pub fn sample_along_ray<F: Real>(
    bundle: &RayBundle<F>,
    cfg: &RenderConfig,
    stratified: bool,
    seed: u64,
) -> Result<RaySamples<F>> {
    cfg.validate()?;
    let r = bundle.num_rays();
    let s = cfg.samples_per_ray;
    let bin = (cfg.far - cfg.near) / s as f64;
    let mut t_values = Array2::zeros((r, s));
    if stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ri in 0..r {
            for si in 0..s {
                let u: f64 = rng.random();
                t_values[[ri, si]] = F::lit(cfg.near + (si as f64 + u) * bin);
            }
        }
    } else {
        for si in 0..s {
            let t = F::lit(cfg.near + si as f64 * bin);
            t_values.column_mut(si).fill(t);
        }
    }
    let mut positions = Array2::zeros((r * s, 3));
    for ri in 0..r {
        for si in 0..s {
            let t = t_values[[ri, si]];
            for a in 0..3 {
                positions[[ri * s + si, a]] = bundle.origins[[ri, a]] + t * bundle.directions[[ri, a]];
            }
        }
    }
    Ok(RaySamples {
        t_values,
        positions,
        view_directions: bundle.directions.clone(),
        far: F::lit(cfg.far),
    })
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<F> {
    pub color: [F; 3],
    /// `T_i * alpha_i` per sample.
    pub weights: Vec<F>,
    /// Transmittance remaining after the last sample.
    pub transmittance_final: F,
}

/// Discrete volume rendering of one ray. `delta_i = t_{i+1} - t_i` with the
/// last interval running to `far`.
pub fn composite_ray<F: Real>(
    densities: &[F],
    colors: &[[F; 3]],
    t_values: &[F],
    far: F,
    background: [F; 3],
) -> Result<Composite<F>> {
    check_ray(densities, colors, t_values, far)?;
    let s = densities.len();
    let mut delta = vec![F::zero(); s];
    ray_deltas(t_values, far, &mut delta);
    let flat: Vec<F> = colors.iter().flatten().copied().collect();
    let mut weights = vec![F::zero(); s];
    let (color, t_final) = composite_kernel(densities, &flat, &delta, background, &mut weights);
    Ok(Composite { color, weights, transmittance_final: t_final })
}

/// Gradients of `<d_color, composite_ray(..).color>` with respect to the
/// densities and the per-sample colors.
pub fn composite_ray_backward<F: Real>(
    densities: &[F],
    colors: &[[F; 3]],
    t_values: &[F],
    far: F,
    background: [F; 3],
    d_color: [F; 3],
) -> Result<(Vec<F>, Vec<[F; 3]>)> {
    check_ray(densities, colors, t_values, far)?;
    let s = densities.len();
    let mut delta = vec![F::zero(); s];
    ray_deltas(t_values, far, &mut delta);
    let flat: Vec<F> = colors.iter().flatten().copied().collect();
    let mut weights = vec![F::zero(); s];
    let (_, t_final) = composite_kernel(densities, &flat, &delta, background, &mut weights);
    let mut d_sigma = vec![F::zero(); s];
    let mut d_rgb = vec![F::zero(); 3 * s];
    composite_backward_kernel(
        densities, &flat, &delta, &weights, t_final, background, d_color, &mut d_sigma, &mut d_rgb,
    );
    let d_colors = d_rgb.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok((d_sigma, d_colors))
}

fn check_ray<F: Real>(densities: &[F], colors: &[[F; 3]], t_values: &[F], far: F) -> Result<()> {
    let s = densities.len();
    if s == 0 || colors.len() != s || t_values.len() != s {
        return Err(Error::InvalidInput(format!(
            "ray arrays disagree: {} densities, {} colors, {} depths",
            s,
            colors.len(),
            t_values.len()
        )));
    }
    if let Some(bad) = densities.iter().find(|d| !(**d >= F::zero()) || !d.is_finite()) {
        return Err(Error::InvalidInput(format!("density {bad} is negative or not finite")));
    }
    if t_values.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("t_values must be strictly increasing".into()));
    }
    if !(far >= t_values[s - 1]) {
        return Err(Error::InvalidInput("far bound precedes the last sample".into()));
    }
    Ok(())
}

#[inline]
pub(crate) fn ray_deltas<F: Real>(t: &[F], far: F, out: &mut [F]) {
    let s = t.len();
    for i in 0..s - 1 {
        out[i] = t[i + 1] - t[i];
    }
    out[s - 1] = far - t[s - 1];
}

/// Front-to-back compositing of one ray; `rgb` holds `3*S` values.
#[inline]
pub(crate) fn composite_kernel<F: Real>(
    sigma: &[F],
    rgb: &[F],
    delta: &[F],
    background: [F; 3],
    weights: &mut [F],
) -> ([F; 3], F) {
    let mut trans = F::one();
    let mut out = [F::zero(); 3];
    for i in 0..sigma.len() {
        let keep = (-sigma[i] * delta[i]).exp();
        let w = trans * (F::one() - keep);
        weights[i] = w;
        out[0] += w * rgb[3 * i];
        out[1] += w * rgb[3 * i + 1];
        out[2] += w * rgb[3 * i + 2];
        trans *= keep;
    }
    for c in 0..3 {
        out[c] += trans * background[c];
    }
    (out, trans)
}

/// Reverse pass of [`composite_kernel`]. Writes (not accumulates) into the
/// output slices.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn composite_backward_kernel<F: Real>(
    sigma: &[F],
    rgb: &[F],
    delta: &[F],
    weights: &[F],
    t_final: F,
    background: [F; 3],
    d_color: [F; 3],
    d_sigma: &mut [F],
    d_rgb: &mut [F],
) {
    let s = sigma.len();
    // suffix = sum_{i>k} w_i <c_i, dC> + T_final <bg, dC>
    let mut suffix =
        t_final * (background[0] * d_color[0] + background[1] * d_color[1] + background[2] * d_color[2]);
    // Transmittance after sample k, walked backwards from T_final.
    let mut trans_after = t_final;
    for k in (0..s).rev() {
        let e = rgb[3 * k] * d_color[0] + rgb[3 * k + 1] * d_color[1] + rgb[3 * k + 2] * d_color[2];
        let w = weights[k];
        d_sigma[k] = delta[k] * (trans_after * e - suffix);
        d_rgb[3 * k] = w * d_color[0];
        d_rgb[3 * k + 1] = w * d_color[1];
        d_rgb[3 * k + 2] = w * d_color[2];
        suffix += w * e;
        trans_after += w;
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
