//! Separable resampling operators shared by the data pipeline, the
//! generator's skip path and the bilinear baseline.

use std::sync::Arc;

use halluface_autograd::{resample, Var};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::image::Image;

/// Bilinear interpolation weights, `[out_len, in_len]`, with half-pixel
/// centers and edge clamping.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Area-weighted reduction by an integer factor: each output sample is the
/// mean of `in_len / out_len` consecutive inputs.
pub fn area_matrix(in_len: usize, out_len: usize) -> Result<Array2<f64>> {
    if out_len == 0 || in_len % out_len != 0 {
        return Err(Error::Shape(format!("{out_len} does not divide {in_len}")));
    }
    let f = in_len / out_len;
    let mut m = Array2::zeros((out_len, in_len));
    for i in 0..out_len {
        for j in 0..f {
            m[[i, i * f + j]] = 1.0 / f as f64;
        }
    }
    Ok(m)
}

fn apply(img: &Image, rows: &Array2<f64>, cols: &Array2<f64>) -> Array3<f64> {
    let px = img.pixels();
    let mut out = Array3::zeros((rows.nrows(), cols.nrows(), 3));
    for c in 0..3 {
        let plane = px.index_axis(Axis(2), c);
        let r = rows.dot(&plane).dot(&cols.t());
        out.index_axis_mut(Axis(2), c).assign(&r);
    }
    out
}

/// Bilinear resize to `height x width`.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let rows = bilinear_matrix(img.height(), height);
    let cols = bilinear_matrix(img.width(), width);
    Image::from_clamped(apply(img, &rows, &cols))
}

/// Square bilinear upsampling to `size x size`.
pub fn upsample(img: &Image, size: usize) -> Image {
    resize_bilinear(img, size, size)
}

/// Area-weighted (box) bilinear downsampling of a square image to
/// `size x size`; `size` must divide the input size.
pub fn downsample(img: &Image, size: usize) -> Result<Image> {
    if img.height() != img.width() {
        return Err(Error::Shape(format!("expected a square image, got {}x{}", img.width(), img.height())));
    }
    if size == 0 || size > img.height() || img.height() % size != 0 {
        return Err(Error::Shape(format!("{size} does not divide image size {}", img.height())));
    }
    let m = area_matrix(img.height(), size)?;
    Ok(Image::from_clamped(apply(img, &m, &m)))
}

/// Differentiable bilinear 2x upsampling of an NCHW batch.
pub fn upsample2x(x: &Var) -> Var {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let rows = Arc::new(bilinear_matrix(h, 2 * h));
    let cols = Arc::new(bilinear_matrix(w, 2 * w));
    resample(x, &rows, &cols)
}

/// Differentiable bilinear resize of an NCHW batch.
pub fn resize_var(x: &Var, height: usize, width: usize) -> Var {
    let rows = Arc::new(bilinear_matrix(x.shape()[2], height));
    let cols = Arc::new(bilinear_matrix(x.shape()[3], width));
    resample(x, &rows, &cols)
}
