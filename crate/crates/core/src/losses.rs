//! Training objectives. Every term is reduced by a mean over the batch.

use std::collections::BTreeMap;

use halluface_autograd::{grad, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::attributes::N_ATTRIBUTES;
use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;

/// Probability clamp used inside every logarithm.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Pixel l1.
    pub alpha: f64,
    /// Attribute cross entropy in the generator objective.
    pub beta: f64,
    /// Perceptual distance at the final stage.
    pub gamma: f64,
    /// Gradient penalty.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 100.0, beta: 10.0, gamma: 0.1, lambda: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A scalar objective with its unweighted components and their weights.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    /// Mean input-gradient norm at the penalty interpolates, when computed.
    pub grad_norm: Option<f64>,
}

impl LossBreakdown {
    fn new() -> Self {
        Self { total: Var::scalar(0.0), components: BTreeMap::new(), weights: BTreeMap::new(), grad_norm: None }
    }

    /// Adds `weight * term` unless the weight is zero, in which case the term
    /// is left out entirely.
    fn add(&mut self, name: &str, weight: f64, term: Var) {
        if weight == 0.0 {
            return;
        }
        self.components.insert(name.to_string(), term.item());
        self.weights.insert(name.to_string(), weight);
        let weighted = if weight == 1.0 { term } else { term.scale(weight) };
        self.total = if self.weights.len() == 1 { weighted } else { &self.total + &weighted };
    }

    /// `sum(weight * component)`, which equals `total` up to rounding.
    pub fn recombine(&self) -> f64 {
        self.components.iter().map(|(k, v)| self.weights[k] * v).sum()
    }

    /// The first component that is not finite, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.components.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.as_str())
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Var, target: &Var) -> Result<Var> {
    same_shape(pred, target, "l1 loss")?;
    Ok((pred - target).abs().mean_all())
}

fn bce_terms(pred: &Var, target: &Var) -> Result<Var> {
    same_shape(pred, target, "attribute cross entropy")?;
    if pred.ndim() != 2 || pred.shape()[1] != N_ATTRIBUTES {
        return Err(Error::Shape(format!("attribute predictions must be [N, {N_ATTRIBUTES}], got {:?}", pred.shape())));
    }
    // NaN passes through so a diverged network surfaces as a non-finite loss
    if pred.value().iter().any(|p| !p.is_nan() && !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidAttributes("predicted probabilities must lie in [0, 1]".into()));
    }
    if target.value().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidAttributes("attribute targets must lie in [0, 1]".into()));
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let q = p.scale(-1.0).add_scalar(1.0);
    let t = target.detach();
    let u = t.scale(-1.0).add_scalar(1.0);
    Ok((&(&t * &p.ln()) + &(&u * &q.ln())).scale(-1.0))
}

/// Cross entropy averaged over attributes and batch.
pub fn attribute_bce(pred: &Var, target: &Var) -> Result<Var> {
    Ok(bce_terms(pred, target)?.mean_all())
}

/// Cross entropy summed over attributes and averaged over the batch.
pub fn classifier_loss(pred: &Var, truth: &Var) -> Result<Var> {
    let n = pred.shape().first().copied().unwrap_or(1).max(1);
    Ok(bce_terms(pred, truth)?.sum_all().scale(1.0 / n as f64))
}

/// Mean squared difference between feature vectors.
pub fn perceptual_loss(pred: &Var, target: &Var, extractor: &dyn FeatureExtractor) -> Result<Var> {
    same_shape(pred, target, "perceptual loss")?;
    let fp = extractor.extract(pred)?;
    let ft = extractor.extract(&target.detach())?;
    Ok((&fp - &ft).square().mean_all())
}

/// Per-sample interpolation `t * real + (1 - t) * fake`.
pub fn interpolate(real: &ArrayD<f64>, fake: &ArrayD<f64>, t: &[f64]) -> Result<ArrayD<f64>> {
    if real.shape() != fake.shape() || real.shape().first() != Some(&t.len()) {
        return Err(Error::Shape("interpolation needs equal batches and one t per sample".into()));
    }
    let mut out = real.clone();
    for ((mut o, f), &ti) in out.axis_iter_mut(Axis(0)).zip(fake.axis_iter(Axis(0))).zip(t) {
        o.zip_mut_with(&f, |r, &f| *r = ti * *r + (1.0 - ti) * f);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Penalty {
    /// `lambda * mean((|grad| - 1)^2)`, differentiable in the critic.
    pub value: Var,
    /// Mean input-gradient norm over the batch.
    pub mean_grad_norm: f64,
}

/// Gradient penalty of an adversarial head `adv: [N, ...] -> [N]` on the
/// interpolates of `real` and `fake`.
pub fn gradient_penalty<F>(adv: F, real: &Var, fake: &Var, t: &[f64], lambda: f64) -> Result<Penalty>
where
    F: Fn(&Var) -> Result<Var>,
{
    let x = Var::param(interpolate(real.value(), fake.value(), t)?);
    let scores = adv(&x)?;
    let g = grad(&scores.sum_all(), &[&x], true).remove(0);
    let norms = g.flatten_batch().norm_rows();
    let mean_grad_norm = norms.value().mean().unwrap_or(0.0);
    let value = norms.add_scalar(-1.0).square().mean_all().scale(lambda);
    Ok(Penalty { value, mean_grad_norm })
}

fn check_critic(stage: usize, critic: &Critic, x: &Var) -> Result<()> {
    if critic.stage() != stage {
        return Err(Error::Config(format!("stage-{} critic used for stage {stage}", critic.stage())));
    }
    critic.check_input(x)
}

/// Generator objective at `stage`.
///
/// `out_gt` is the stage output conditioned on the ground-truth attributes
/// and drives the l1 and perceptual terms; `out_rand` is conditioned on
/// `a_star` and drives the adversarial and attribute terms.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    stage: usize,
    out_gt: &Var,
    out_rand: &Var,
    target: &Var,
    a_star: &Var,
    critic: &Critic,
    extractor: Option<&dyn FeatureExtractor>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_critic(stage, critic, out_rand)?;
    let mut out = LossBreakdown::new();
    let d = critic.forward(out_rand)?;
    out.add("adversarial", 1.0, d.adv.mean_all().scale(-1.0));
    out.add("l1", w.alpha, l1_loss(out_gt, target)?);
    if w.beta != 0.0 {
        out.add("attribute", w.beta, attribute_bce(&d.attr, a_star)?);
    }
    if stage == 3 && w.gamma != 0.0 {
        let extractor = extractor.ok_or_else(|| {
            Error::ExtractorUnavailable("the final stage needs a feature extractor; configure `extractor`".into())
        })?;
        out.add("perceptual", w.gamma, perceptual_loss(out_gt, target, extractor)?);
    }
    Ok(out)
}

/// Critic objective at `stage`; `fake` is treated as a constant.
pub fn critic_loss(
    stage: usize,
    real: &Var,
    fake: &Var,
    a: &Var,
    critic: &Critic,
    t: &[f64],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_critic(stage, critic, real)?;
    same_shape(real, fake, "critic batches")?;
    let n = real.shape()[0];
    let both = real.detach().concat(&fake.detach(), 0);
    let d = critic.forward(&both)?;
    let adv_real = d.adv.narrow(0, 0, n).mean_all();
    let adv_fake = d.adv.narrow(0, n, n).mean_all();
    let mut out = LossBreakdown::new();
    out.add("wasserstein", 1.0, (&adv_real - &adv_fake).scale(-1.0));
    out.add("attr_real", 1.0, attribute_bce(&d.attr.narrow(0, 0, n), a)?);
    out.add("attr_fake", 1.0, attribute_bce(&d.attr.narrow(0, n, n), a)?);
    if w.lambda != 0.0 {
        let p = gradient_penalty(|x| critic.adv(x), real, fake, t, 1.0)?;
        out.grad_norm = Some(p.mean_grad_norm);
        out.add("gradient_penalty", w.lambda, p.value);
    }
    Ok(out)
}

/// `[N, 12]` tensor of identical rows, for tests and rigs.
pub fn repeat_rows(row: &[f64], n: usize) -> Var {
    let data: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
    Var::constant(ArrayD::from_shape_vec(IxDyn(&[n, row.len()]), data).expect("row batch"))
}
