//! 8-bit PNG input and output. Values map linearly between `[0, 1]` and
//! `0..=255`; quantization happens only here.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::generator::Image;
use crate::real::Real;

fn quantize<F: Real>(v: F) -> u8 {
    (v.to_f64_lossless().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8<F: Real>(img: &Image<F>) -> RgbImage {
    let (h, w, _) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(img[[y, x, 0]]), quantize(img[[y, x, 1]]), quantize(img[[y, x, 2]])])
    })
}

pub fn from_rgb8<F: Real>(buf: &RgbImage) -> Image<F> {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        F::lit(buf.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

pub fn save_png<F: Real>(path: impl AsRef<Path>, img: &Image<F>) -> Result<()> {
    let path = path.as_ref();
    if img.dim().2 != 3 {
        return Err(Error::InvalidInput(format!("image must have 3 channels, has {}", img.dim().2)));
    }
    to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_png<F: Real>(path: impl AsRef<Path>) -> Result<Image<F>> {
    let path = path.as_ref();
    let dynamic = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(from_rgb8(&dynamic.to_rgb8()))
}

/// Tiles equally sized images into a grid, row-major, with a 1-pixel gap.
pub fn tile<F: Real>(images: &[Image<F>], columns: usize) -> Result<Image<F>> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("no images to tile".into()))?;
    let (h, w, _) = first.dim();
    if images.iter().any(|i| i.dim() != first.dim()) || columns == 0 {
        return Err(Error::InvalidInput("tiled images must share a shape".into()));
    }
    let rows = images.len().div_ceil(columns);
    let mut out = Array3::from_elem((rows * (h + 1) - 1, columns * (w + 1) - 1, 3), F::one());
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        out.slice_mut(s![r * (h + 1)..r * (h + 1) + h, c * (w + 1)..c * (w + 1) + w, ..]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let img = Array3::from_shape_fn((3, 4, 3), |(y, x, c)| ((y * 12 + x * 3 + c) * 7 % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_png(&path, &img).unwrap();
        let back: Image<f64> = load_png(&path).unwrap();
        assert_eq!(back.dim(), img.dim());
        assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        assert_eq!(quantize(-0.3f32), 0);
        assert_eq!(quantize(1.7f32), 255);
        assert_eq!(quantize(0.5f64), 128);
    }

    #[test]
    fn missing_file_is_an_image_error() {
        assert!(matches!(load_png::<f32>("/nonexistent/x.png"), Err(Error::Image { .. })));
    }
}
