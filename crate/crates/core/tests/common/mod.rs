//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's resampling or metric code.
#![allow(dead_code)]

use halluface_core::Image;
use ndarray::Array3;

/// Bilinear resize with half-pixel centers and edge clamping, evaluated
/// pixel by pixel.
pub fn ref_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, _) = src.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    Array3::from_shape_fn((out_h, out_w, 3), |(y, x, c)| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
        let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Mean over non-overlapping `f`x`f` blocks.
pub fn ref_box(src: &Array3<f64>, f: usize) -> Array3<f64> {
    let (h, w, _) = src.dim();
    Array3::from_shape_fn((h / f, w / f, 3), |(y, x, c)| {
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += src[[y * f + dy, x * f + dx, c]];
            }
        }
        s / (f * f) as f64
    })
}

/// Crop to the central 120x120 window, then resize to 128x128.
pub fn ref_prepare(raw: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = raw.dim();
    let (top, left) = ((h - 120) / 2, (w - 120) / 2);
    let crop = Array3::from_shape_fn((120, 120, 3), |(y, x, c)| raw[[top + y, left + x, c]]);
    ref_resize(&crop, 128, 128).mapv(|v| v.clamp(0.0, 1.0))
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Peak signal-to-noise ratio by direct formula over all channels, capped
/// at 100 dB.
pub fn ref_psnr(a: &Image, b: &Image) -> f64 {
    let (pa, pb) = (a.pixels(), b.pixels());
    let mut se = 0.0;
    let mut n = 0.0;
    for (x, y) in pa.iter().zip(pb.iter()) {
        se += (x - y) * (x - y);
        n += 1.0;
    }
    let mse = se / n;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// SSIM on BT.601 luma by direct evaluation of every 11x11 window that fits
/// entirely inside the image.
pub fn ref_ssim(a: &Image, b: &Image) -> f64 {
    let gray = |img: &Image| {
        let p = img.pixels();
        let (h, w) = (img.height(), img.width());
        let mut g = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                g[y][x] = 0.299 * p[[y, x, 0]] + 0.587 * p[[y, x, 1]] + 0.114 * p[[y, x, 2]];
            }
        }
        g
    };
    let (ga, gb) = (gray(a), gray(b));
    let mut kernel = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let (va, vb) = (ga[y + i][x + j], gb[y + i][x + j]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

pub fn random_pixels(h: usize, w: usize, seed: u64) -> Array3<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
}

/// A copy of `m` whose tensors named in `names` are replaced by `vars`.
pub fn substitute<M: halluface_core::nn::Module + Clone>(
    m: &M,
    names: &[&str],
    vars: &[halluface_autograd::Var],
) -> M {
    let mut out = m.clone();
    let mut hits = 0;
    out.visit_mut(&mut |name, _, v| {
        if let Some(i) = names.iter().position(|n| *n == name) {
            *v = vars[i].clone();
            hits += 1;
        }
    });
    assert_eq!(hits, names.len(), "unknown tensor name in {names:?}");
    out
}

/// Current values of the named tensors of `m`.
pub fn tensors_of(m: &dyn halluface_core::nn::Module, names: &[&str]) -> Vec<halluface_autograd::Tensor> {
    let dict = halluface_core::nn::state_dict(m);
    names.iter().map(|n| dict[*n].clone()).collect()
}

/// Fixed pseudo-random probe weights for turning a tensor into a scalar.
pub fn probe(shape: &[usize], seed: u64) -> halluface_autograd::Var {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random_range(-1.0..1.0));
    halluface_autograd::Var::constant(t)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> halluface_autograd::Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random::<f64>())
}

/// Draws batch-norm scales from U(0.5, 1.5) and shifts from U(-0.5, 0.5).
/// At their initial values (1, 0) a channel fed only by dead rectifiers sits
/// exactly on the next rectifier's kink, where finite differences are
/// one-sided.
pub fn randomize_batch_norm(m: &mut dyn halluface_core::nn::Module, seed: u64) {
    use halluface_core::nn::Kind;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    m.visit_mut(&mut |name, kind, v| {
        let range = if name.ends_with("bn.weight") {
            0.5..1.5
        } else if name.ends_with("bn.bias") {
            -0.5..0.5
        } else {
            return;
        };
        if kind == Kind::Param {
            *v = halluface_autograd::Var::param(v.value().mapv(|_| rng.random_range(range.clone())));
        }
    });
}

/// Names of the trainable tensors of `m`.
pub fn param_names(m: &dyn halluface_core::nn::Module) -> Vec<String> {
    let mut out = Vec::new();
    m.visit(&mut |name, kind, _| {
        if kind == halluface_core::nn::Kind::Param {
            out.push(name.to_string());
        }
    });
    out
}

/// Selects one element of a tensor as a scalar.
pub fn pick(shape: &[usize], index: &[usize]) -> halluface_autograd::Var {
    let mut t = ndarray::ArrayD::zeros(ndarray::IxDyn(shape));
    t[index] = 1.0;
    halluface_autograd::Var::constant(t)
}

/// Prepared training samples rendered in memory by the synthetic face
/// generator.
pub fn synthetic_samples(count: usize, seed: u64) -> Vec<halluface_core::data::TrainingSample> {
    use halluface_core::data::{prepare_hr, sample_from_hr};
    use halluface_core::synthetic::{random_face_attributes, render_face};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let attrs = random_face_attributes(&mut rng);
            let raw = render_face(&attrs, &mut rng);
            sample_from_hr(format!("{i:06}"), prepare_hr(&raw).unwrap(), attrs).unwrap()
        })
        .collect()
}
