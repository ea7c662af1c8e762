use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, Ix4};

use crate::var::Backward;
use crate::Var;

/// Separable linear resampling: every `[H, W]` plane `P` of an NCHW tensor is
/// mapped to `rows · P · colsᵀ`, with `rows` of shape `[H', H]` and `cols` of
/// shape `[W', W]`.
pub fn resample(x: &Var, rows: &Arc<Array2<f64>>, cols: &Arc<Array2<f64>>) -> Var {
    let xv = x
        .value()
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap_or_else(|_| panic!("resample expects NCHW, got {:?}", x.shape()));
    let (n, c, h, w) = xv.dim();
    assert_eq!(rows.ncols(), h, "resample: row operator expects height {}", rows.ncols());
    assert_eq!(cols.ncols(), w, "resample: column operator expects width {}", cols.ncols());
    let (oh, ow) = (rows.nrows(), cols.nrows());
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let mut tmp = Array2::<f64>::zeros((oh, w));
    for i in 0..n {
        for ch in 0..c {
            let plane = xv.slice(s![i, ch, .., ..]);
            general_mat_mul(1.0, &**rows, &plane, 0.0, &mut tmp);
            let mut o = out.slice_mut(s![i, ch, .., ..]);
            general_mat_mul(1.0, &tmp, &cols.t(), 0.0, &mut o);
        }
    }
    Var::from_op(
        out.into_dyn(),
        vec![x.clone()],
        ResampleRule { rows: rows.clone(), cols: cols.clone() },
    )
}

struct ResampleRule {
    rows: Arc<Array2<f64>>,
    cols: Arc<Array2<f64>>,
}
impl Backward for ResampleRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let rt = Arc::new(self.rows.t().to_owned());
        let ct = Arc::new(self.cols.t().to_owned());
        vec![Some(resample(g, &rt, &ct))]
    }
}
