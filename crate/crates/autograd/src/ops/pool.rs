use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::var::Backward;
use crate::Var;

/// Non-overlapping max pooling with window and stride `k` on NCHW input.
pub fn max_pool2d(x: &Var, k: usize) -> Var {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "max_pool2d expects NCHW");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h % k == 0 && w % k == 0, "max_pool2d: {h}x{w} not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let xv = x.value().as_standard_layout();
    let xs = xv.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let j = base + (oy * k + dy) * w + ox * k + dx;
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    let v = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
    Var::from_op(v, vec![x.clone()], GatherRule { idx: Arc::new(idx), src_shape: shape.to_vec() })
}

fn gather(x: &Var, idx: &Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
    let xv = x.value().as_standard_layout();
    let xs = xv.as_slice().unwrap();
    let v: Vec<f64> = idx.iter().map(|&j| xs[j]).collect();
    Var::from_op(
        ArrayD::from_shape_vec(IxDyn(out_shape), v).unwrap(),
        vec![x.clone()],
        GatherRule { idx: idx.clone(), src_shape: x.shape().to_vec() },
    )
}

fn scatter(g: &Var, idx: &Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
    let gv = g.value().as_standard_layout();
    let mut out = ArrayD::<f64>::zeros(IxDyn(out_shape));
    let os = out.as_slice_mut().unwrap();
    for (&j, &v) in idx.iter().zip(gv.as_slice().unwrap()) {
        os[j] += v;
    }
    Var::from_op(out, vec![g.clone()], ScatterRule { idx: idx.clone(), src_shape: g.shape().to_vec() })
}

struct GatherRule {
    idx: Arc<Vec<usize>>,
    src_shape: Vec<usize>,
}
impl Backward for GatherRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scatter(g, &self.idx, &self.src_shape))]
    }
}

struct ScatterRule {
    idx: Arc<Vec<usize>>,
    src_shape: Vec<usize>,
}
impl Backward for ScatterRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(gather(g, &self.idx, &self.src_shape))]
    }
}
