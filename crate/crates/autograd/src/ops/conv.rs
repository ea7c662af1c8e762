//! 2-D convolution and its two adjoints.
//!
//! `conv2d`, `conv_transpose2d` and `conv2d_weight_grad` are the three
//! partial derivatives of the trilinear form `<conv2d(x, w), g>`, so the
//! backward rule of each is written with the other two and the set is closed
//! under differentiation.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Ix4};

use crate::var::Backward;
use crate::{Tensor, Var};

/// Spatial output size of a convolution.
pub fn output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: ArrayView3<f64>, geo: &Geometry) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let (h, w, k) = (geo.height, geo.width, geo.kernel);
    let mut cols = Array2::<f64>::zeros((geo.rows(), geo.cols()));
    let out = cols.as_slice_mut().unwrap();
    let l = geo.cols();
    for c in 0..geo.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * l..(row + 1) * l];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: ArrayView2<f64>, geo: &Geometry, mut x: ArrayViewMut3<f64>) {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let xs = x.as_slice_mut().expect("col2im target must be contiguous");
    let (h, w, k) = (geo.height, geo.width, geo.kernel);
    let l = geo.cols();
    for c in 0..geo.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cs[row * l..(row + 1) * l];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[base + ix as usize] += src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn as4<'a>(t: &'a Tensor, what: &str) -> ndarray::ArrayView4<'a, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .unwrap_or_else(|_| panic!("{what} must be rank 4, got {:?}", t.shape()))
}

fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let x = as4(x, "conv2d input");
    let w = as4(w, "conv2d weight");
    let (n, c, h, wd) = x.dim();
    let (co, ci, k, k2) = w.dim();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    let geo = Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
        out_h: output_size(h, k, stride, pad),
        out_w: output_size(wd, k, stride, pad),
    };
    let wm = w.as_standard_layout();
    let wm = wm.to_shape((co, geo.rows())).unwrap();
    let mut out = Array4::<f64>::zeros((n, co, geo.out_h, geo.out_w));
    for i in 0..n {
        let cols = im2col(x.slice(s![i, .., .., ..]), &geo);
        let mut o = out
            .slice_mut(s![i, .., .., ..])
            .into_shape_with_order((co, geo.cols()))
            .unwrap();
        general_mat_mul(1.0, &wm, &cols, 0.0, &mut o);
    }
    out.into_dyn()
}

fn conv_transpose2d_raw(g: &Tensor, w: &Tensor, stride: usize, pad: usize, hw: (usize, usize)) -> Tensor {
    let g = as4(g, "conv_transpose2d input");
    let w = as4(w, "conv_transpose2d weight");
    let (n, co, oh, ow) = g.dim();
    let (wco, ci, k, _) = w.dim();
    assert_eq!(co, wco, "conv_transpose2d: input has {co} channels, weight expects {wco}");
    let geo = Geometry {
        channels: ci,
        height: hw.0,
        width: hw.1,
        kernel: k,
        stride,
        pad,
        out_h: oh,
        out_w: ow,
    };
    assert_eq!(output_size(hw.0, k, stride, pad), oh, "conv_transpose2d: inconsistent output height");
    assert_eq!(output_size(hw.1, k, stride, pad), ow, "conv_transpose2d: inconsistent output width");
    let wm = w.as_standard_layout();
    let wm = wm.to_shape((co, geo.rows())).unwrap();
    let mut out = Array4::<f64>::zeros((n, ci, hw.0, hw.1));
    let mut cols = Array2::<f64>::zeros((geo.rows(), geo.cols()));
    for i in 0..n {
        let gi = g.slice(s![i, .., .., ..]);
        let gi = gi.as_standard_layout();
        let gm = gi.to_shape((co, geo.cols())).unwrap();
        general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut cols);
        col2im_add(cols.view(), &geo, out.slice_mut(s![i, .., .., ..]));
    }
    out.into_dyn()
}

fn conv2d_weight_grad_raw(x: &Tensor, g: &Tensor, stride: usize, pad: usize, kernel: usize) -> Tensor {
    let x = as4(x, "conv2d_weight_grad input");
    let g = as4(g, "conv2d_weight_grad output grad");
    let (n, c, h, wd) = x.dim();
    let (gn, co, oh, ow) = g.dim();
    assert_eq!(n, gn, "conv2d_weight_grad: batch mismatch");
    let geo = Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel,
        stride,
        pad,
        out_h: oh,
        out_w: ow,
    };
    assert_eq!(output_size(h, kernel, stride, pad), oh, "conv2d_weight_grad: inconsistent height");
    assert_eq!(output_size(wd, kernel, stride, pad), ow, "conv2d_weight_grad: inconsistent width");
    let mut gw = Array2::<f64>::zeros((co, geo.rows()));
    for i in 0..n {
        let cols = im2col(x.slice(s![i, .., .., ..]), &geo);
        let gi = g.slice(s![i, .., .., ..]);
        let gi = gi.as_standard_layout();
        let gm = gi.to_shape((co, geo.cols())).unwrap();
        general_mat_mul(1.0, &gm, &cols.t(), 1.0, &mut gw);
    }
    gw.into_shape_with_order((co, c, kernel, kernel)).unwrap().into_dyn()
}

struct ConvRule {
    stride: usize,
    pad: usize,
}
impl Backward for ConvRule {
    fn backward(&self, p: &[Var], _: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, w) = (&p[0], &p[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        let k = w.shape()[2];
        vec![
            needs[0].then(|| conv_transpose2d(g, w, self.stride, self.pad, hw)),
            needs[1].then(|| conv2d_weight_grad(x, g, self.stride, self.pad, k)),
        ]
    }
}

struct ConvTransposeRule {
    stride: usize,
    pad: usize,
}
impl Backward for ConvTransposeRule {
    fn backward(&self, p: &[Var], _: &Var, gz: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (g, w) = (&p[0], &p[1]);
        let k = w.shape()[2];
        vec![
            needs[0].then(|| conv2d(gz, w, self.stride, self.pad)),
            needs[1].then(|| conv2d_weight_grad(gz, g, self.stride, self.pad, k)),
        ]
    }
}

struct WeightGradRule {
    stride: usize,
    pad: usize,
}
impl Backward for WeightGradRule {
    fn backward(&self, p: &[Var], _: &Var, gu: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, g) = (&p[0], &p[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        vec![
            needs[0].then(|| conv_transpose2d(g, gu, self.stride, self.pad, hw)),
            needs[1].then(|| conv2d(x, gu, self.stride, self.pad)),
        ]
    }
}

/// Cross-correlation of `x` `[N, Cin, H, W]` with `w` `[Cout, Cin, k, k]`.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let v = conv2d_raw(x.value(), w.value(), stride, pad);
    Var::from_op(v, vec![x.clone(), w.clone()], ConvRule { stride, pad })
}

/// Adjoint of [`conv2d`] with respect to its input: maps `[N, Cout, h, w]`
/// back to `[N, Cin, H, W]` where `hw = (H, W)`. With `w` read as
/// `[Cin_layer, Cout_layer, k, k]` this is the usual transposed convolution.
pub fn conv_transpose2d(x: &Var, w: &Var, stride: usize, pad: usize, hw: (usize, usize)) -> Var {
    let v = conv_transpose2d_raw(x.value(), w.value(), stride, pad, hw);
    Var::from_op(v, vec![x.clone(), w.clone()], ConvTransposeRule { stride, pad })
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Var, g: &Var, stride: usize, pad: usize, kernel: usize) -> Var {
    let v = conv2d_weight_grad_raw(x.value(), g.value(), stride, pad, kernel);
    Var::from_op(v, vec![x.clone(), g.clone()], WeightGradRule { stride, pad })
}
