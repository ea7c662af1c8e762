//! Stage-specific Wasserstein critics with a branched attribute head.
//!
//! The trunk is `log2(res / 4)` convolutions 4x4/s2/p1 with bias and leaky
//! ReLU, widths `min(base << j, max)`, ending at 4x4 spatial. No batch
//! normalization anywhere: the gradient penalty is taken per sample.

use halluface_autograd::Var;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::N_ATTRIBUTES;
use crate::data::STAGE_SIZES;
use crate::error::{Error, Result};
use crate::generator::{check_stage, LEAKY_SLOPE};
use crate::nn::{Conv2d, Kind, Linear, Module};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub base_width: usize,
    pub max_width: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { base_width: 64, max_width: 512 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::Config("critic widths must satisfy 0 < base_width <= max_width".into()));
        }
        Ok(())
    }
}

/// Critic outputs for a batch.
#[derive(Clone, Debug)]
pub struct CriticOutput {
    /// Unbounded adversarial scores, `[N]`.
    pub adv: Var,
    /// Attribute probabilities in `(0, 1)`, `[N, 12]`.
    pub attr: Var,
}

#[derive(Clone, Debug)]
pub struct Critic {
    stage: usize,
    trunk: Vec<Conv2d>,
    adv: Linear,
    attr: Linear,
}

impl Critic {
    pub fn new(stage: usize, config: &CriticConfig, seed: u64) -> Result<Self> {
        check_stage(stage)?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = STAGE_SIZES[stage - 1];
        let depth = (res / 4).trailing_zeros() as usize;
        let mut cin = 3;
        let mut trunk = Vec::with_capacity(depth);
        for j in 0..depth {
            let cout = (config.base_width << j).min(config.max_width);
            trunk.push(Conv2d::new(format!("critic{stage}.trunk.{j}"), cin, cout, 4, 2, 1, true, &mut rng));
            cin = cout;
        }
        let flat = cin * 16;
        let adv = Linear::new(format!("critic{stage}.adv"), flat, 1, &mut rng);
        let attr = Linear::new(format!("critic{stage}.attr"), flat, N_ATTRIBUTES, &mut rng);
        Ok(Self { stage, trunk, adv, attr })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn resolution(&self) -> usize {
        STAGE_SIZES[self.stage - 1]
    }

    pub fn check_input(&self, x: &Var) -> Result<()> {
        let r = self.resolution();
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("stage-{} critic expects [N, 3, {r}, {r}], got {s:?}", self.stage)));
        }
        Ok(())
    }

    fn features(&self, x: &Var) -> Var {
        let mut h = x.clone();
        for conv in &self.trunk {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        h.flatten_batch()
    }

    pub fn forward(&self, x: &Var) -> Result<CriticOutput> {
        self.check_input(x)?;
        let f = self.features(x);
        let n = f.shape()[0];
        Ok(CriticOutput {
            adv: self.adv.forward(&f).reshape(&[n]),
            attr: self.attr.forward(&f).sigmoid(),
        })
    }

    /// Adversarial head only, `[N]`.
    pub fn adv(&self, x: &Var) -> Result<Var> {
        self.check_input(x)?;
        let f = self.features(x);
        let n = f.shape()[0];
        Ok(self.adv.forward(&f).reshape(&[n]))
    }
}

impl Module for Critic {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        for c in &self.trunk {
            c.visit(f);
        }
        self.adv.visit(f);
        self.attr.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        for c in &mut self.trunk {
            c.visit_mut(f);
        }
        self.adv.visit_mut(f);
        self.attr.visit_mut(f);
    }
}
