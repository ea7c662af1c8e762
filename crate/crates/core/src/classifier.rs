//! Attribute classifier on 16x16 inputs: two 4x4/s2/p1 convolutions with
//! leaky ReLU (16 -> 8 -> 4), then a fully connected layer to 12 logistic
//! outputs.

use halluface_autograd::{no_grad, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeVector, N_ATTRIBUTES};
use crate::data::LR_SIZE;
use crate::error::{Error, Result};
use crate::generator::LEAKY_SLOPE;
use crate::image::{images_to_tensor, Image};
use crate::nn::{Conv2d, Kind, Linear, Module};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Width of the first convolution; the second doubles it.
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl Classifier {
    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("classifier width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        Ok(Self {
            conv1: Conv2d::new("classifier.conv1", 3, w, 4, 2, 1, true, &mut rng),
            conv2: Conv2d::new("classifier.conv2", w, 2 * w, 4, 2, 1, true, &mut rng),
            fc: Linear::new("classifier.fc", 2 * w * 16, N_ATTRIBUTES, &mut rng),
        })
    }

    /// Probabilities `[N, 12]` for `lr` `[N, 3, 16, 16]`.
    pub fn forward(&self, lr: &Var) -> Result<Var> {
        let s = lr.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != LR_SIZE || s[3] != LR_SIZE {
            return Err(Error::Shape(format!("classifier input must be [N, 3, 16, 16], got {s:?}")));
        }
        let h = self.conv1.forward(lr).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(&h).leaky_relu(LEAKY_SLOPE);
        Ok(self.fc.forward(&h.flatten_batch()).sigmoid())
    }

    pub fn classify(&self, lr: &Image) -> Result<AttributeVector> {
        Ok(self.classify_batch(std::slice::from_ref(lr))?.remove(0))
    }

    pub fn classify_batch(&self, lr: &[Image]) -> Result<Vec<AttributeVector>> {
        if lr.is_empty() {
            return Ok(Vec::new());
        }
        if lr.iter().any(|i| i.height() != LR_SIZE || i.width() != LR_SIZE) {
            return Err(Error::Shape("classifier inputs must be 16x16".into()));
        }
        let p = no_grad(|| self.forward(&Var::constant(images_to_tensor(lr))))?;
        p.value()
            .outer_iter()
            .map(|row| AttributeVector::from_slice(row.as_slice().expect("contiguous row")))
            .collect()
    }
}

impl Module for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.fc.visit_mut(f);
    }
}
