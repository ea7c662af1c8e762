use ndarray::{Axis, IxDyn, Slice};

use crate::var::Backward;
use crate::Var;

struct ReshapeRule(Vec<usize>);
impl Backward for ReshapeRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.reshape(&self.0))]
    }
}

struct ConcatRule {
    axis: usize,
    split: usize,
}
impl Backward for ConcatRule {
    fn backward(&self, p: &[Var], _: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let rest = p[1].shape()[self.axis];
        vec![
            needs[0].then(|| g.narrow(self.axis, 0, self.split)),
            needs[1].then(|| g.narrow(self.axis, self.split, rest)),
        ]
    }
}

struct NarrowRule {
    axis: usize,
    start: usize,
    full: usize,
}
impl Backward for NarrowRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.pad_axis(self.axis, self.start, self.full))]
    }
}

struct PadRule {
    axis: usize,
    start: usize,
    len: usize,
}
impl Backward for PadRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.narrow(self.axis, self.start, self.len))]
    }
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self
            .value()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape))
            .into_owned();
        Var::from_op(v, vec![self.clone()], ReshapeRule(self.shape().to_vec()))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten_batch(&self) -> Var {
        let n = self.shape()[0];
        let rest = self.len() / n.max(1);
        self.reshape(&[n, rest])
    }

    pub fn concat(&self, other: &Var, axis: usize) -> Var {
        let v = ndarray::concatenate(Axis(axis), &[self.value().view(), other.value().view()])
            .unwrap_or_else(|e| panic!("concat {:?} + {:?}: {e}", self.shape(), other.shape()));
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            ConcatRule { axis, split: self.shape()[axis] },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::from_op(v, vec![self.clone()], NarrowRule { axis, start, full: self.shape()[axis] })
    }

    /// Zero-pads along `axis` to length `full`, placing this tensor at `start`.
    fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        shape[axis] = full;
        let mut v = ndarray::ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(v, vec![self.clone()], PadRule { axis, start, len })
    }
}
