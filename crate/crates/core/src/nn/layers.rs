use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, IxDyn};
use rand::Rng;

use super::params::{normal_array, Grads, ParamId, ParamStore};
use crate::real::Real;

pub const LRELU_SLOPE: f64 = 0.2;

/// Fully connected layer, `y = x W + b` with `W` stored as `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-style initialisation scaled by `gain`; biases start at zero.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), normal_array(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(IxDyn(&[fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&p.view2(self.w));
        add_bias_rows(&mut y, p.view1(self.b).as_slice().expect("contiguous bias"));
        y
    }

    /// Accumulates parameter gradients into `g` (when given) and returns the
    /// input gradient when `need_dx` is set.
    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        g: Option<&mut Grads<F>>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        if let Some(g) = g {
            let dw = x.t().dot(&dy);
            *g.get_mut(self.w) += &dw.into_dyn();
            let db = dy.sum_axis(Axis(0));
            *g.get_mut(self.b) += &db.into_dyn();
        }
        need_dx.then(|| dy.dot(&p.view2(self.w).t()))
    }
}

pub fn add_bias_rows<F: Real>(y: &mut Array2<F>, bias: &[F]) {
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Saved input patches for the backward pass of [`Conv2d`].
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dims: (usize, usize, usize, usize),
}

/// 2-D convolution over NHWC tensors. The weight is stored as
/// `[k*k*cin, cout]` with row index `(ky*k + kx)*cin + c`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = k * k * cin;
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), normal_array(rng, &[fan_in, cout], std));
        let b = store.add(format!("{name}.bias"), ndarray::ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, cin, cout, k, stride, pad: k / 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y = cols.dot(&p.view2(self.w));
        add_bias_rows(&mut y, p.view1(self.b).as_slice().expect("contiguous bias"));
        let y = y.into_shape_with_order((b, ho, wo, self.cout)).expect("conv output shape");
        (y, ConvCache { cols, in_dims: (b, h, w, c) })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        g: Option<&mut Grads<F>>,
        need_dx: bool,
    ) -> Option<Array4<F>> {
        let (b, ho, wo, co) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * ho * wo, co))
            .expect("conv grad shape");
        if let Some(g) = g {
            let dw = cache.cols.t().dot(&dy2);
            *g.get_mut(self.w) += &dw.into_dyn();
            *g.get_mut(self.b) += &dy2.sum_axis(Axis(0)).into_dyn();
        }
        if !need_dx {
            return None;
        }
        let dcols = dy2.dot(&p.view2(self.w).t());
        Some(self.col2im(&dcols, cache.in_dims, (ho, wo)))
    }

    fn im2col<F: Real>(&self, x: &Array4<F>) -> Array2<F> {
        let (b, h, w, c) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.k;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let row_len = k * k * c;
        let mut cols = vec![F::zero(); b * ho * wo * row_len];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((b * ho * wo, row_len), cols).expect("im2col shape")
    }

    fn col2im<F: Real>(
        &self,
        dcols: &Array2<F>,
        (b, h, w, c): (usize, usize, usize, usize),
        (ho, wo): (usize, usize),
    ) -> Array4<F> {
        let k = self.k;
        let row_len = k * k * c;
        let dc = dcols.as_slice().expect("standard layout");
        let mut dx = vec![F::zero(); b * h * w * c];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for (d, s) in dx[dst..dst + c].iter_mut().zip(&dc[src..src + c]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((b, h, w, c), dx).expect("col2im shape")
    }
}

pub fn lrelu_inplace<F: Real, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) {
    let slope = F::lit(LRELU_SLOPE);
    a.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
}

/// Multiplies `dy` by the leaky-ReLU derivative, recovered from the sign of
/// the activation output.
pub fn lrelu_backward_inplace<F: Real, D: ndarray::Dimension>(
    dy: &mut ndarray::Array<F, D>,
    out: &ndarray::Array<F, D>,
) {
    let slope = F::lit(LRELU_SLOPE);
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d *= slope;
        }
    });
}

/// Global average pool `[B,H,W,C] -> [B,C]`.
pub fn gap<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (_, h, w, _) = x.dim();
    let inv = F::lit(1.0 / (h * w) as f64);
    x.sum_axis(Axis(1)).sum_axis(Axis(1)).mapv(|v| v * inv)
}

pub fn gap_backward<F: Real>(dy: &Array2<F>, (b, h, w, c): (usize, usize, usize, usize)) -> Array4<F> {
    let inv = F::lit(1.0 / (h * w) as f64);
    let mut dx = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        let row: Array1<F> = dy.row(bi).mapv(|v| v * inv);
        for mut px in dx.index_axis_mut(Axis(0), bi).lanes_mut(Axis(2)) {
            px.assign(&row);
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, h, w, c) = x.dim();
    Array4::from_shape_fn((b, 2 * h, 2 * w, c), |(bi, y, xx, ci)| x[[bi, y / 2, xx / 2, ci]])
}

pub fn upsample2x_backward<F: Real>(dy: &Array4<F>) -> Array4<F> {
    let (b, h2, w2, c) = dy.dim();
    let mut dx = Array4::zeros((b, h2 / 2, w2 / 2, c));
    for ((bi, y, x, ci), v) in dy.indexed_iter() {
        dx[[bi, y / 2, x / 2, ci]] += *v;
    }
    dx
}
