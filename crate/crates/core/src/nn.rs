//! Layers built on the autodiff engine, with named tensors for
//! checkpointing and PyTorch-default uniform initialization.

use std::collections::BTreeMap;

use halluface_autograd::{conv2d, conv_transpose2d, output_size, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trained by the optimizer.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

/// A network whose tensors can be enumerated by fully qualified name.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var));
}

pub fn parameters(m: &dyn Module) -> Vec<Var> {
    let mut out = Vec::new();
    m.visit(&mut |_, kind, v| {
        if kind == Kind::Param {
            out.push(v.clone());
        }
    });
    out
}

pub fn param_count(m: &dyn Module) -> usize {
    parameters(m).iter().map(Var::len).sum()
}

pub fn state_dict(m: &dyn Module) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    m.visit(&mut |name, _, v| {
        out.insert(name.to_string(), v.value().clone());
    });
    out
}

/// Replaces every tensor of `m` with the entry of the same name. Names and
/// shapes must match exactly; nothing is modified on error.
pub fn load_state_dict(m: &mut dyn Module, state: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut problems = Vec::new();
    let mut expected = 0;
    m.visit(&mut |name, _, v| {
        expected += 1;
        match state.get(name) {
            None => problems.push(format!("missing tensor `{name}`")),
            Some(t) if t.shape() != v.shape() => {
                problems.push(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), v.shape()))
            }
            Some(_) => {}
        }
    });
    if problems.is_empty() && expected != state.len() {
        problems.push(format!("{} tensors supplied, {expected} expected", state.len()));
    }
    if !problems.is_empty() {
        return Err(Error::Shape(problems.join("; ")));
    }
    m.visit_mut(&mut |name, kind, v| {
        let t = state[name].clone();
        *v = match kind {
            Kind::Param => Var::param(t),
            Kind::Buffer => Var::constant(t),
        };
    });
    Ok(())
}

/// Fills a tensor with draws from `U(-bound, bound)`.
fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Var {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data: Vec<f64> = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
    Var::param(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
}

/// Per-forward settings plus the batch statistics collected for running
/// averages.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    /// Collect batch statistics from batch-norm layers in training mode.
    pub record_stats: bool,
    pub stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Tensor,
    pub var_unbiased: Tensor,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self { train: true, record_stats: false, stats: Vec::new() }
    }

    pub fn train_recording() -> Self {
        Self { train: true, record_stats: true, stats: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = uniform(rng, &[cout, cin, kernel, kernel], bound);
        let bias = bias.then(|| uniform(rng, &[cout], bound));
        Self { name: name.into(), weight, bias, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = conv2d(x, &self.weight, self.stride, self.pad);
        match &self.bias {
            Some(b) => {
                let s = y.shape().to_vec();
                &y + &b.expand_channels(s[0], s[2], s[3])
            }
            None => y,
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), Kind::Param, b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), Kind::Param, b);
        }
    }
}

/// Transposed convolution; the weight is `[Cin, Cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Fan-in follows the weight's second axis, as in the reference framework.
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        let weight = uniform(rng, &[cin, cout, kernel, kernel], bound);
        let bias = bias.then(|| uniform(rng, &[cout], bound));
        Self { name: name.into(), weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let k = self.weight.shape()[2];
        let s = x.shape();
        let size = |n: usize| (n - 1) * self.stride + k - 2 * self.pad;
        let (h, w) = (size(s[2]), size(s[3]));
        debug_assert_eq!(output_size(h, k, self.stride, self.pad), s[2]);
        let y = conv_transpose2d(x, &self.weight, self.stride, self.pad, (h, w));
        match &self.bias {
            Some(b) => &y + &b.expand_channels(s[0], h, w),
            None => y,
        }
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), Kind::Param, b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), Kind::Param, b);
        }
    }
}

/// Weight of the newest batch in batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Var::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Var::param(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Var::constant(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Var::constant(ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var, ctx: &mut ForwardCtx) -> Var {
        let s = x.shape().to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        let count = (n * h * w) as f64;
        let (centered, inv_std) = if ctx.train {
            let mean = x.sum_channels().scale(1.0 / count);
            let centered = x - &mean.expand_channels(n, h, w);
            let var = centered.square().sum_channels().scale(1.0 / count);
            if ctx.record_stats {
                let unbiased = count / (count - 1.0).max(1.0);
                ctx.stats.push(BatchStats {
                    layer: self.name.clone(),
                    mean: mean.value().clone(),
                    var_unbiased: var.value() * unbiased,
                });
            }
            (centered, var.add_scalar(self.eps).sqrt().recip())
        } else {
            let centered = x - &self.running_mean.expand_channels(n, h, w);
            let inv = self.running_var.value().mapv(|v| 1.0 / (v + self.eps).sqrt());
            (centered, Var::constant(inv))
        };
        let scale = &inv_std * &self.gamma;
        &(&centered * &scale.expand_channels(n, h, w)) + &self.beta.expand_channels(n, h, w)
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &self.gamma);
        f(&format!("{}.bias", self.name), Kind::Param, &self.beta);
        f(&format!("{}.running_mean", self.name), Kind::Buffer, &self.running_mean);
        f(&format!("{}.running_var", self.name), Kind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &mut self.gamma);
        f(&format!("{}.bias", self.name), Kind::Param, &mut self.beta);
        f(&format!("{}.running_mean", self.name), Kind::Buffer, &mut self.running_mean);
        f(&format!("{}.running_var", self.name), Kind::Buffer, &mut self.running_var);
    }
}

/// Applies recorded batch statistics to the matching layers of `m`.
pub fn apply_batch_stats(m: &mut dyn Module, stats: &[BatchStats]) {
    let momentum = BN_MOMENTUM;
    let by_layer: BTreeMap<&str, &BatchStats> = stats.iter().map(|s| (s.layer.as_str(), s)).collect();
    m.visit_mut(&mut |name, kind, v| {
        if kind != Kind::Buffer {
            return;
        }
        let (layer, which) = name.rsplit_once('.').expect("qualified buffer name");
        let Some(s) = by_layer.get(layer) else { return };
        let batch = if which == "running_mean" { &s.mean } else { &s.var_unbiased };
        *v = Var::constant(v.value() * (1.0 - momentum) + batch * momentum);
    });
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = uniform(rng, &[outputs, inputs], bound);
        let bias = uniform(rng, &[outputs], bound);
        Self { name: name.into(), weight, bias }
    }

    /// `[N, in]` to `[N, out]`.
    pub fn forward(&self, x: &Var) -> Var {
        let n = x.shape()[0];
        &x.matmul(&self.weight.t()) + &self.bias.expand_axis(0, n)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &self.weight);
        f(&format!("{}.bias", self.name), Kind::Param, &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        f(&format!("{}.weight", self.name), Kind::Param, &mut self.weight);
        f(&format!("{}.bias", self.name), Kind::Param, &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = ConvTranspose2d::new("up", 4, 2, 4, 2, 1, true, &mut rng);
        let x = Var::constant(ArrayD::ones(IxDyn(&[1, 4, 5, 5])));
        assert_eq!(up.forward(&x).shape(), &[1, 2, 10, 10]);
    }

    #[test]
    fn batch_norm_normalizes_in_training_mode() {
        let bn = BatchNorm2d::new("bn", 2);
        let x = Var::constant(ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |i| (i[0] * 7 + i[1] * 3 + i[2] + i[3]) as f64));
        let mut ctx = ForwardCtx::train_recording();
        let y = bn.forward(&x, &mut ctx).into_value();
        for c in 0..2 {
            let ch = y.index_axis(ndarray::Axis(1), c);
            assert!(ch.mean().unwrap().abs() < 1e-12);
            let var = ch.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(ctx.stats.len(), 1);
    }

    #[test]
    fn state_dict_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::new("fc", 3, 2, &mut rng);
        let mut b = Linear::new("fc", 3, 2, &mut rng);
        load_state_dict(&mut b, &state_dict(&a)).unwrap();
        assert_eq!(state_dict(&a), state_dict(&b));
        let mut c = Linear::new("fc", 4, 2, &mut rng);
        assert!(load_state_dict(&mut c, &state_dict(&a)).is_err());
        assert_eq!(param_count(&a), 8);
    }
}
