use ndarray::{Ix2, IxDyn};

use crate::var::Backward;
use crate::Var;

struct MatMulRule;
impl Backward for MatMulRule {
    fn backward(&self, p: &[Var], _: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| g.matmul(&p[1].t())),
            needs[1].then(|| p[0].t().matmul(g)),
        ]
    }
}

struct TransposeRule;
impl Backward for TransposeRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.t())]
    }
}

impl Var {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = rhs.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul: {:?} x {:?}", a.shape(), b.shape());
        let v = a.dot(&b).into_dyn();
        Var::from_op(v, vec![self.clone(), rhs.clone()], MatMulRule)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("t() expects 2-D");
        let v = a.t().as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[a.ncols(), a.nrows()])).unwrap();
        Var::from_op(v, vec![self.clone()], TransposeRule)
    }
}
