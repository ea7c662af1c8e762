use ndarray::{ArrayD, Axis, IxDyn};

use crate::var::Backward;
use crate::Var;

struct SumAllRule(Vec<usize>);
impl Backward for SumAllRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.broadcast_scalar(&self.0))]
    }
}

struct BroadcastScalarRule;
impl Backward for BroadcastScalarRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.sum_all())]
    }
}

struct SumAxisRule {
    axis: usize,
    len: usize,
}
impl Backward for SumAxisRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.expand_axis(self.axis, self.len))]
    }
}

struct ExpandAxisRule(usize);
impl Backward for ExpandAxisRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.sum_axis(self.0))]
    }
}

struct NormRowsRule;
impl Backward for NormRowsRule {
    // d||x|| / dx = x / ||x||, taken as zero for a zero row.
    fn backward(&self, p: &[Var], out: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let cols = p[0].shape()[1];
        let coef = (g * &out.safe_recip()).expand_axis(1, cols);
        vec![Some(&p[0] * &coef)]
    }
}

impl Var {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Var {
        let s = self.value().sum();
        Var::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            SumAllRule(self.shape().to_vec()),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Fills `shape` with the value of a single-element tensor.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        let v = self.item();
        Var::from_op(ArrayD::from_elem(IxDyn(shape), v), vec![self.clone()], BroadcastScalarRule)
    }

    /// Sums out `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let len = self.shape()[axis];
        Var::from_op(self.value().sum_axis(Axis(axis)), vec![self.clone()], SumAxisRule { axis, len })
    }

    /// Inserts a new axis at `axis` and repeats the tensor `len` times along it.
    pub fn expand_axis(&self, axis: usize, len: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, len);
        let v = self
            .value()
            .view()
            .insert_axis(Axis(axis))
            .broadcast(IxDyn(&shape))
            .expect("expand_axis broadcast")
            .to_owned();
        Var::from_op(v, vec![self.clone()], ExpandAxisRule(axis))
    }

    /// Per-channel sum of an NCHW tensor, giving shape `[C]`.
    pub fn sum_channels(&self) -> Var {
        assert_eq!(self.ndim(), 4, "sum_channels expects NCHW");
        self.sum_axis(3).sum_axis(2).sum_axis(0)
    }

    /// Broadcasts a `[C]` vector to NCHW with the given batch and spatial size.
    pub fn expand_channels(&self, n: usize, h: usize, w: usize) -> Var {
        assert_eq!(self.ndim(), 1, "expand_channels expects a [C] vector");
        self.expand_axis(0, n).expand_axis(2, h).expand_axis(3, w)
    }

    /// Euclidean norm of each row of a `[N, M]` matrix, giving `[N]`.
    pub fn norm_rows(&self) -> Var {
        assert_eq!(self.ndim(), 2, "norm_rows expects a matrix");
        let v = self.value().map_axis(Axis(1), |row| row.iter().map(|x| x * x).sum::<f64>().sqrt());
        Var::from_op(v, vec![self.clone()], NormRowsRule)
    }
}
