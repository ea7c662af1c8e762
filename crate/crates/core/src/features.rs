//! Identity-feature extractors for the perceptual loss and the feature
//! cosine metric.
//!
//! [`VggFeatures`] follows the VGG-16 layout up to `relu4_1`
//! (conv1_1..conv4_1 with 3x3 kernels and three 2x2 max pools). Weights are
//! either loaded from a tensor file or drawn once from a seeded He-normal
//! initialization. Random weights give a fixed, deterministic metric that
//! is NOT identity-faithful; only metric properties should be relied on.

use std::collections::BTreeMap;
use std::path::PathBuf;

use halluface_autograd::{conv2d, max_pool2d, no_grad, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_tensor_file;
use crate::data::HR_SIZE;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};

/// A frozen network mapping `[N, 3, 128, 128]` images to `[N, F]` features.
pub trait FeatureExtractor: Send + Sync {
    /// Name of the layer the features are read from.
    fn layer(&self) -> &str;

    /// Differentiable with respect to the input only.
    fn extract(&self, x: &Var) -> Result<Var>;
}

/// `(name, in, out)` for each convolution, `None` marks a 2x2 max pool.
const VGG_LAYOUT: [Option<(&str, usize, usize)>; 11] = [
    Some(("conv1_1", 3, 64)),
    Some(("conv1_2", 64, 64)),
    None,
    Some(("conv2_1", 64, 128)),
    Some(("conv2_2", 128, 128)),
    None,
    Some(("conv3_1", 128, 256)),
    Some(("conv3_2", 256, 256)),
    Some(("conv3_3", 256, 256)),
    None,
    Some(("conv4_1", 256, 512)),
];

/// Per-channel means of the pretrained network's `[0, 255]` input.
pub const VGG_FACE_MEAN: [f64; 3] = [129.186279296875, 104.76238250732422, 93.59396362304688];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Channel widths are the VGG-16 widths divided by this.
    pub width_divisor: usize,
    pub seed: u64,
    /// Tensor file with pretrained weights; random weights when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { width_divisor: 16, seed: 0, weights: None }
    }
}

pub struct VggFeatures {
    convs: Vec<Option<(String, Var, Var)>>,
    /// Pixels are multiplied by this before mean subtraction: 255 for
    /// pretrained weights, 1 for the random fallback so its feature
    /// magnitudes stay comparable to the pixel losses.
    pixel_scale: f64,
}

impl VggFeatures {
    pub fn from_config(config: &ExtractorConfig) -> Result<Self> {
        if config.width_divisor == 0 || 64 % config.width_divisor != 0 {
            return Err(Error::Config("extractor width_divisor must divide 64".into()));
        }
        match &config.weights {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::ExtractorUnavailable(format!(
                        "weights file {} not found; fix `extractor.weights` in the config or remove it to use random weights",
                        path.display()
                    )));
                }
                let (_, tensors) = read_tensor_file(path)?;
                Self::from_weights(&tensors, config.width_divisor)
            }
            None => Ok(Self::random(config.width_divisor, config.seed)),
        }
    }

    /// Frozen He-normal weights and zero biases.
    pub fn random(width_divisor: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = VGG_LAYOUT
            .iter()
            .map(|layer| {
                layer.map(|(name, cin, cout)| {
                    let cin = if cin == 3 { 3 } else { cin / width_divisor };
                    let cout = cout / width_divisor;
                    let normal = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).expect("positive std");
                    let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
                    let w = ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3]), w).expect("weight shape");
                    (name.to_string(), Var::constant(w), Var::constant(ArrayD::zeros(IxDyn(&[cout]))))
                })
            })
            .collect();
        Self { convs, pixel_scale: 1.0 }
    }

    /// Weights named `<conv>.weight` / `<conv>.bias`, e.g. `conv1_1.weight`.
    pub fn from_weights(tensors: &BTreeMap<String, Tensor>, width_divisor: usize) -> Result<Self> {
        let convs = VGG_LAYOUT
            .iter()
            .map(|layer| {
                layer
                    .map(|(name, cin, cout)| {
                        let cin = if cin == 3 { 3 } else { cin / width_divisor };
                        let cout = cout / width_divisor;
                        let get = |suffix: &str, shape: &[usize]| -> Result<Var> {
                            let key = format!("{name}.{suffix}");
                            let t = tensors
                                .get(&key)
                                .ok_or_else(|| Error::ExtractorUnavailable(format!("weights file lacks `{key}`")))?;
                            if t.shape() != shape {
                                return Err(Error::Shape(format!("`{key}` has shape {:?}, expected {shape:?}", t.shape())));
                            }
                            Ok(Var::constant(t.clone()))
                        };
                        Ok((name.to_string(), get("weight", &[cout, cin, 3, 3])?, get("bias", &[cout])?))
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs, pixel_scale: 255.0 })
    }

    pub fn weights(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, w, b) in self.convs.iter().flatten() {
            out.insert(format!("{name}.weight"), w.value().clone());
            out.insert(format!("{name}.bias"), b.value().clone());
        }
        out
    }
}

impl FeatureExtractor for VggFeatures {
    fn layer(&self) -> &str {
        "relu4_1"
    }

    fn extract(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != HR_SIZE || s[3] != HR_SIZE {
            return Err(Error::Shape(format!("feature extractor expects [N, 3, 128, 128], got {s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let mean = ndarray::arr1(&VGG_FACE_MEAN).mapv(|m| m * self.pixel_scale / 255.0);
        let mut f = &x.scale(self.pixel_scale) - &Var::constant(mean.into_dyn()).expand_channels(n, h, w);
        for layer in &self.convs {
            f = match layer {
                Some((_, weight, bias)) => {
                    let y = conv2d(&f, weight, 1, 1);
                    let ys = y.shape().to_vec();
                    (&y + &bias.expand_channels(ys[0], ys[2], ys[3])).relu()
                }
                None => max_pool2d(&f, 2),
            };
        }
        Ok(f.flatten_batch())
    }
}

/// Features of individual images as plain vectors.
pub fn extract_images(extractor: &dyn FeatureExtractor, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let f = no_grad(|| extractor.extract(&Var::constant(images_to_tensor(images))))?;
    Ok(f.value().outer_iter().map(|row| row.iter().copied().collect()).collect())
}
