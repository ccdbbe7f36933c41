//! Minimal neural-network building blocks with explicit backward passes.
//!
//! Activations use NHWC layout (`[batch, height, width, channels]`) so that a
//! convolution is a single im2col matrix product.

mod adam;
mod layers;
mod params;

pub use adam::Adam;
pub use layers::{
    add_bias_rows, gap, gap_backward, lrelu_backward_inplace, lrelu_inplace, upsample2x,
    upsample2x_backward, Conv2d, ConvCache, Linear, LRELU_SLOPE,
};
pub use params::{normal_array, Grads, ParamId, ParamStore};
