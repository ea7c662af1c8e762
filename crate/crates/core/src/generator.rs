//! The progressive upsampling network.
//!
//! Layout for base width `C`, encoder depth `d` and `r` residual blocks per
//! stage, with stage widths `w_0 = C` and `w_i = max(C >> i, 1)`:
//!
//! | block            | layers                                                   |
//! |------------------|----------------------------------------------------------|
//! | encoder `j < d`  | conv 4x4/s2/p1 (3 or C -> C), BN, leaky ReLU 0.2          |
//! | fuse             | attributes tiled over the bottleneck, conv 1x1 (C+12 -> C), BN, ReLU |
//! | decoder `j < d`  | transposed conv 4x4/s2/p1 (C -> C), BN, ReLU              |
//! | stage `i`, x r   | residual: conv 3x3, BN, ReLU, conv 3x3, BN, add, ReLU at `w_{i-1}` |
//! | stage `i` up     | transposed conv 4x4/s2/p1 (`w_{i-1} -> w_i`), BN, ReLU     |
//! | stage `i` RGB    | conv 5x5/s1/p2 (`w_i -> 3`) with bias, no activation      |
//!
//! Convolutions followed by batch norm carry no bias. The stage output is
//! `merged_i = rgb_i + up2(merged_{i-1})` with `merged_0 = lr`.

use halluface_autograd::{no_grad, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeVector, N_ATTRIBUTES};
use crate::data::{LR_SIZE, STAGE_SIZES};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, ForwardCtx, Kind, Module};
use crate::resample::upsample2x;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_attributes: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub residual_blocks_per_stage: usize,
    pub stage_resolutions: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_attributes: N_ATTRIBUTES,
            base_channels: 64,
            encoder_depth: 2,
            residual_blocks_per_stage: 2,
            stage_resolutions: STAGE_SIZES.to_vec(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_attributes != N_ATTRIBUTES {
            return Err(Error::Config(format!("n_attributes must be {N_ATTRIBUTES}")));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.encoder_depth == 0 || LR_SIZE >> self.encoder_depth == 0 {
            return Err(Error::Config(format!("encoder_depth must be in 1..={}", LR_SIZE.trailing_zeros())));
        }
        if self.residual_blocks_per_stage == 0 {
            return Err(Error::Config("residual_blocks_per_stage must be at least 1".into()));
        }
        if self.stage_resolutions != STAGE_SIZES {
            return Err(Error::Config(format!("stage_resolutions must be {STAGE_SIZES:?}")));
        }
        Ok(())
    }

    /// Feature width after stage `i` (0 is the decoder output).
    pub fn width(&self, i: usize) -> usize {
        (self.base_channels >> i).max(1)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn forward(&self, x: &Var, ctx: &mut ForwardCtx) -> Var {
        self.bn.forward(&self.conv.forward(x), ctx)
    }
}

#[derive(Clone, Debug)]
struct UpBn {
    up: ConvTranspose2d,
    bn: BatchNorm2d,
}

impl UpBn {
    fn forward(&self, x: &Var, ctx: &mut ForwardCtx) -> Var {
        self.bn.forward(&self.up.forward(x), ctx).relu()
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
}

impl ResidualBlock {
    fn forward(&self, x: &Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.a.forward(x, ctx).relu();
        (x + &self.b.forward(&h, ctx)).relu()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResidualBlock>,
    up: UpBn,
    rgb: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    encoder: Vec<ConvBn>,
    fuse: ConvBn,
    decoder: Vec<UpBn>,
    stages: Vec<Stage>,
}

/// Per-stage tensors from one forward pass, each `[N, 3, s, s]`.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    /// Stage outputs after the skip merge, index `i - 1` for stage `i`.
    pub merged: Vec<Var>,
    /// Pre-merge RGB block maps.
    pub rgb: Vec<Var>,
}

impl StageOutputs {
    pub fn active_stage(&self) -> usize {
        self.merged.len()
    }

    pub fn merged(&self, stage: usize) -> Result<&Var> {
        self.check(stage)?;
        Ok(&self.merged[stage - 1])
    }

    pub fn intermediate_rgb(&self, stage: usize) -> Result<&Var> {
        self.check(stage)?;
        Ok(&self.rgb[stage - 1])
    }

    pub fn last(&self) -> &Var {
        self.merged.last().expect("at least one stage")
    }

    fn check(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.active_stage() {
            return Err(Error::Config(format!(
                "stage {stage} was not computed; the forward pass stopped at stage {}",
                self.active_stage()
            )));
        }
        Ok(())
    }
}

pub fn check_stage(stage: usize) -> Result<()> {
    if (1..=3).contains(&stage) {
        Ok(())
    } else {
        Err(Error::InvalidStage(stage))
    }
}

/// Attribute batch as a `[N, 12]` tensor.
pub fn attributes_to_var(attrs: &[AttributeVector]) -> Var {
    let data: Vec<f64> = attrs.iter().flat_map(|a| a.values().to_vec()).collect();
    Var::constant(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[attrs.len(), N_ATTRIBUTES]), data).expect("attribute batch"))
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let conv_bn = |name: String, cin, cout, k, s, p, rng: &mut ChaCha8Rng| ConvBn {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, k, s, p, false, rng),
            bn: BatchNorm2d::new(format!("{name}.bn"), cout),
        };
        let up_bn = |name: String, cin, cout, rng: &mut ChaCha8Rng| UpBn {
            up: ConvTranspose2d::new(format!("{name}.conv"), cin, cout, 4, 2, 1, false, rng),
            bn: BatchNorm2d::new(format!("{name}.bn"), cout),
        };
        let encoder = (0..config.encoder_depth)
            .map(|j| conv_bn(format!("encoder.{j}"), if j == 0 { 3 } else { c }, c, 4, 2, 1, &mut rng))
            .collect();
        let fuse = conv_bn("fuse".into(), c + N_ATTRIBUTES, c, 1, 1, 0, &mut rng);
        let decoder = (0..config.encoder_depth).map(|j| up_bn(format!("decoder.{j}"), c, c, &mut rng)).collect();
        let stages = (1..=STAGE_SIZES.len())
            .map(|i| {
                let (win, wout) = (config.width(i - 1), config.width(i));
                let blocks = (0..config.residual_blocks_per_stage)
                    .map(|b| ResidualBlock {
                        a: conv_bn(format!("stage{i}.res{b}.a"), win, win, 3, 1, 1, &mut rng),
                        b: conv_bn(format!("stage{i}.res{b}.b"), win, win, 3, 1, 1, &mut rng),
                    })
                    .collect();
                Stage {
                    blocks,
                    up: up_bn(format!("stage{i}.up"), win, wout, &mut rng),
                    rgb: Conv2d::new(format!("stage{i}.rgb"), wout, 3, 5, 1, 2, true, &mut rng),
                }
            })
            .collect();
        Ok(Self { config, encoder, fuse, decoder, stages })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Runs stages `1..=active_stage` on `lr` `[N, 3, 16, 16]` conditioned on
    /// `attrs` `[N, 12]`.
    pub fn forward(&self, lr: &Var, attrs: &Var, active_stage: usize, ctx: &mut ForwardCtx) -> Result<StageOutputs> {
        check_stage(active_stage)?;
        let s = lr.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != LR_SIZE || s[3] != LR_SIZE {
            return Err(Error::Shape(format!("generator input must be [N, 3, 16, 16], got {s:?}")));
        }
        let n = s[0];
        if attrs.shape() != [n, N_ATTRIBUTES] {
            return Err(Error::Shape(format!("attributes must be [{n}, {N_ATTRIBUTES}], got {:?}", attrs.shape())));
        }

        let mut h = lr.clone();
        for layer in &self.encoder {
            h = layer.forward(&h, ctx).leaky_relu(LEAKY_SLOPE);
        }
        let b = h.shape()[2];
        let tiled = attrs.expand_axis(2, b).expand_axis(3, b);
        h = self.fuse.forward(&h.concat(&tiled, 1), ctx).relu();
        for layer in &self.decoder {
            h = layer.forward(&h, ctx);
        }

        let mut merged = Vec::with_capacity(active_stage);
        let mut rgb = Vec::with_capacity(active_stage);
        let mut previous = lr.clone();
        for stage in &self.stages[..active_stage] {
            for block in &stage.blocks {
                h = block.forward(&h, ctx);
            }
            h = stage.up.forward(&h, ctx);
            let r = stage.rgb.forward(&h);
            let m = &r + &upsample2x(&previous);
            previous = m.clone();
            rgb.push(r);
            merged.push(m);
        }
        Ok(StageOutputs { merged, rgb })
    }

    /// Evaluation-mode inference on images; returns the merged outputs of
    /// every stage up to `active_stage`, clamped to `[0, 1]`.
    pub fn hallucinate(&self, lr: &[Image], attrs: &[AttributeVector], active_stage: usize) -> Result<Vec<Vec<Image>>> {
        if lr.len() != attrs.len() || lr.is_empty() {
            return Err(Error::Shape("need one attribute vector per input image".into()));
        }
        let out = no_grad(|| {
            self.forward(
                &Var::constant(images_to_tensor(lr)),
                &attributes_to_var(attrs),
                active_stage,
                &mut ForwardCtx::eval(),
            )
        })?;
        Ok(out.merged.iter().map(|m| tensor_to_images(m.value())).collect())
    }

    /// Zeroes every RGB block, leaving only the bilinear skip path.
    pub fn zero_rgb_blocks(&mut self) {
        for s in &mut self.stages {
            s.rgb.weight = Var::param(ndarray::ArrayD::zeros(s.rgb.weight.shape()));
            if let Some(b) = &mut s.rgb.bias {
                *b = Var::param(ndarray::ArrayD::zeros(b.shape()));
            }
        }
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&str, Kind, &Var)) {
        let conv_bn = |l: &ConvBn, f: &mut dyn FnMut(&str, Kind, &Var)| {
            l.conv.visit(f);
            l.bn.visit(f);
        };
        for l in &self.encoder {
            conv_bn(l, f);
        }
        conv_bn(&self.fuse, f);
        for l in &self.decoder {
            l.up.visit(f);
            l.bn.visit(f);
        }
        for s in &self.stages {
            for b in &s.blocks {
                conv_bn(&b.a, f);
                conv_bn(&b.b, f);
            }
            s.up.up.visit(f);
            s.up.bn.visit(f);
            s.rgb.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Kind, &mut Var)) {
        let conv_bn = |l: &mut ConvBn, f: &mut dyn FnMut(&str, Kind, &mut Var)| {
            l.conv.visit_mut(f);
            l.bn.visit_mut(f);
        };
        for l in &mut self.encoder {
            conv_bn(l, f);
        }
        conv_bn(&mut self.fuse, f);
        for l in &mut self.decoder {
            l.up.visit_mut(f);
            l.bn.visit_mut(f);
        }
        for s in &mut self.stages {
            for b in &mut s.blocks {
                conv_bn(&mut b.a, f);
                conv_bn(&mut b.b, f);
            }
            s.up.up.visit_mut(f);
            s.up.bn.visit_mut(f);
            s.rgb.visit_mut(f);
        }
    }
}
