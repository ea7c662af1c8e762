use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::var::Backward;
use crate::{Tensor, Var};

fn same_shape(a: &Var, b: &Var, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

struct AddRule;
impl Backward for AddRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubRule;
impl Backward for SubRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone()), needs[1].then(|| -g)]
    }
}

struct MulRule;
impl Backward for MulRule {
    fn backward(&self, p: &[Var], _: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![needs[0].then(|| g * &p[1]), needs[1].then(|| g * &p[0])]
    }
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.0))]
    }
}

struct PassRule;
impl Backward for PassRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

struct MulConstRule(Arc<Tensor>);
impl Backward for MulConstRule {
    fn backward(&self, _: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g.mul_const(self.0.clone()))]
    }
}

struct RecipRule;
impl Backward for RecipRule {
    // d(1/x) = -1/x^2, written with the output so it also covers the
    // zero-guarded variant.
    fn backward(&self, _: &[Var], out: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(-&(g * &(out * out)))]
    }
}

struct LogRule;
impl Backward for LogRule {
    fn backward(&self, p: &[Var], _: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some(g * &p[0].recip())]
    }
}

struct SigmoidRule;
impl Backward for SigmoidRule {
    fn backward(&self, _: &[Var], out: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        let one_minus = out.scale(-1.0).add_scalar(1.0);
        vec![Some(&(g * out) * &one_minus)]
    }
}

struct SqrtRule;
impl Backward for SqrtRule {
    fn backward(&self, _: &[Var], out: &Var, g: &Var, _: &[bool]) -> Vec<Option<Var>> {
        vec![Some((g * &out.safe_recip()).scale(0.5))]
    }
}

impl Var {
    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value() * c, vec![self.clone()], ScaleRule(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value() + c, vec![self.clone()], PassRule)
    }

    /// Elementwise product with a tensor that is not part of the graph.
    pub fn mul_const(&self, c: Arc<Tensor>) -> Var {
        assert_eq!(self.shape(), c.shape(), "mul_const: shape mismatch");
        Var::from_op(self.value() * &*c, vec![self.clone()], MulConstRule(c))
    }

    pub fn square(&self) -> Var {
        self * self
    }

    pub fn recip(&self) -> Var {
        Var::from_op(self.value().mapv(|x| 1.0 / x), vec![self.clone()], RecipRule)
    }

    /// `1/x`, with `0` where `x == 0`.
    pub fn safe_recip(&self) -> Var {
        let v = self.value().mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        Var::from_op(v, vec![self.clone()], RecipRule)
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().mapv(f64::ln), vec![self.clone()], LogRule)
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().mapv(f64::sqrt), vec![self.clone()], SqrtRule)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Var::from_op(v, vec![self.clone()], SigmoidRule)
    }

    fn masked(&self, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let mut out = self.value().clone();
        let mut mask = self.value().clone();
        ndarray::Zip::from(&mut out).and(&mut mask).for_each(|o, m| {
            let (y, d) = f(*o);
            *o = y;
            *m = d;
        });
        if self.requires_grad() {
            Var::from_op(out, vec![self.clone()], MulConstRule(Arc::new(mask)))
        } else {
            Var::constant(out)
        }
    }

    pub fn relu(&self) -> Var {
        self.masked(|x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.masked(|x| if x > 0.0 { (x, 1.0) } else { (slope * x, slope) })
    }

    pub fn abs(&self) -> Var {
        self.masked(|x| if x > 0.0 { (x, 1.0) } else if x < 0.0 { (-x, -1.0) } else { (0.0, 0.0) })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.masked(|x| {
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        })
    }
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        same_shape(self, rhs, "add");
        Var::from_op(self.value() + rhs.value(), vec![self.clone(), rhs.clone()], AddRule)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        same_shape(self, rhs, "sub");
        Var::from_op(self.value() - rhs.value(), vec![self.clone(), rhs.clone()], SubRule)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        same_shape(self, rhs, "mul");
        Var::from_op(self.value() * rhs.value(), vec![self.clone(), rhs.clone()], MulRule)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.scale(-1.0)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<Var> for Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&Var> for Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                (&self).$m(rhs)
            }
        }
        impl $tr<Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                self.$m(&rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.scale(-1.0)
    }
}
