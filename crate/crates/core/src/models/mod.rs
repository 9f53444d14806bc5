//! The segmentation network and its discriminators.
//!
//! * [`GeneratorG`] maps an image `[3, H, W]` to features `[n, H/s, W/s]`.
//! * [`HeadCh`] turns features into per-pixel class probabilities at input
//!   resolution (1x1 conv, bilinear upsample, channel softmax).
//! * [`GlobalDiscriminator`] scores a probability map per patch as source
//!   (channel 0) or target (channel 1).
//! * [`SemanticDiscriminatorFc`] and [`SemanticDiscriminatorConv`] classify a
//!   feature into one of `2c` (domain, class) cells: channels `0..c` are
//!   source classes, `c..2c` target classes. The conv variant is the FC
//!   variant applied at every pixel through 1x1 convolutions.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{bind, collect_grads, Bound, Conv2d, Linear, Parameterized, LEAKY_SLOPE};

/// Architecture hyper-parameters shared by all modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of classes `c`.
    pub classes: usize,
    /// Feature channels `n` of the generator output.
    pub feature_channels: usize,
    /// Total generator stride `s`; a power of two up to 16.
    pub stride: usize,
    /// Output channels of the first three generator convolutions.
    pub generator_widths: [usize; 3],
    /// Output channels of the first two global-discriminator convolutions.
    pub global_widths: [usize; 2],
    /// Hidden width of the semantic discriminators.
    pub semantic_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 4,
            feature_channels: 64,
            stride: 4,
            generator_widths: [32, 64, 64],
            global_widths: [64, 128],
            semantic_hidden: 1024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes = {} (need >= 2)", self.classes)));
        }
        if !self.stride.is_power_of_two() || self.stride > 16 {
            return Err(Error::Config(format!("stride {} is not a power of two <= 16", self.stride)));
        }
        let widths = self.generator_widths.iter().chain(&self.global_widths);
        if self.feature_channels == 0 || self.semantic_hidden == 0 || widths.clone().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn conv_params<'a, T: Real>(prefix: &str, layers: &'a [Conv2d<T>]) -> Vec<(String, &'a Tensor<T>)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [(format!("{prefix}.{i}.weight"), &l.weight), (format!("{prefix}.{i}.bias"), &l.bias)]
        })
        .collect()
}

fn conv_params_mut<T: Real>(layers: &mut [Conv2d<T>]) -> Vec<&mut Tensor<T>> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

/// Runs a conv stack with leaky ReLU between layers (none after the last).
fn conv_stack<T: Real>(tape: &mut Tape<T>, layers: &[Conv2d<T>], vars: &[Var], mut x: Var) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        x = layer.apply(tape, vars[2 * i], vars[2 * i + 1], x)?;
        if i + 1 < layers.len() {
            x = tape.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
        }
    }
    Ok(x)
}

/// Feature generator: four 3x3 convolutions, the first `log2(s)` of them strided.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorG<T> {
    pub layers: Vec<Conv2d<T>>,
    pub stride: usize,
}

impl<T: Real> GeneratorG<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = module_rng(seed, 1);
        let [w1, w2, w3] = cfg.generator_widths;
        let chans = [3, w1, w2, w3, cfg.feature_channels];
        let mut strided = cfg.stride.trailing_zeros() as usize;
        let layers = (0..4)
            .map(|i| {
                let s = if strided > 0 {
                    strided -= 1;
                    2
                } else {
                    1
                };
                Conv2d::new(&mut rng, chans[i], chans[i + 1], 3, s, 1)
            })
            .collect();
        GeneratorG { layers, stride: cfg.stride }
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map(Conv2d::out_channels).unwrap_or(0)
    }
}

impl<T: Real> Parameterized<T> for GeneratorG<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        conv_params("generator", &self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        conv_params_mut(&mut self.layers)
    }
}

impl<T: Real> Bound<'_, GeneratorG<T>> {
    /// `[3, H, W]` image to `[n, H/s, W/s]` features.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let s = self.module.stride;
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("generator expects a [3,H,W] image, got {shape:?}")));
        }
        if shape[1] % s != 0 || shape[2] % s != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the generator stride {s}",
                shape[1], shape[2]
            )));
        }
        conv_stack(tape, &self.module.layers, self.vars(), image)
    }
}

/// Classification head: one 1x1 convolution from `n` features to `c` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCh<T> {
    pub conv: Conv2d<T>,
}

impl<T: Real> HeadCh<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = module_rng(seed, 2);
        HeadCh { conv: Conv2d::new(&mut rng, cfg.feature_channels, cfg.classes, 1, 1, 0) }
    }
}

impl<T: Real> Parameterized<T> for HeadCh<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("head.weight".into(), &self.conv.weight), ("head.bias".into(), &self.conv.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.conv.weight, &mut self.conv.bias]
    }
}

impl<T: Real> Bound<'_, HeadCh<T>> {
    /// Class scores upsampled to `out_h x out_w`, before the softmax.
    pub fn logits(&self, tape: &mut Tape<T>, features: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let scores = self.module.conv.apply(tape, self.var(0), self.var(1), features)?;
        tape.bilinear_upsample(scores, out_h, out_w)
    }

    /// Score map `P`: per-pixel class probabilities at `out_h x out_w`.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let up = self.logits(tape, features, out_h, out_w)?;
        tape.softmax_channel(up)
    }
}

/// Patch discriminator on score maps: three 4x4 stride-2 convolutions ending
/// in two channels (0 = source, 1 = target) and a channel softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDiscriminator<T> {
    pub layers: Vec<Conv2d<T>>,
}

impl<T: Real> GlobalDiscriminator<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = module_rng(seed, 3);
        let [w1, w2] = cfg.global_widths;
        let chans = [cfg.classes, w1, w2, 2];
        let layers = (0..3).map(|i| Conv2d::new(&mut rng, chans[i], chans[i + 1], 4, 2, 1)).collect();
        GlobalDiscriminator { layers }
    }
}

impl<T: Real> Parameterized<T> for GlobalDiscriminator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        conv_params("global_disc", &self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        conv_params_mut(&mut self.layers)
    }
}

impl<T: Real> Bound<'_, GlobalDiscriminator<T>> {
    /// `[c, H, W]` score map to a `[2, h', w']` domain confidence map.
    pub fn forward(&self, tape: &mut Tape<T>, scores: Var) -> Result<Var> {
        let x = conv_stack(tape, &self.module.layers, self.vars(), scores)?;
        tape.softmax_channel(x)
    }
}

/// Two fully connected layers `n -> hidden -> 2c` with a leaky ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDiscriminatorFc<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
    pub classes: usize,
}

impl<T: Real> SemanticDiscriminatorFc<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = module_rng(seed, 4);
        SemanticDiscriminatorFc {
            hidden: Linear::new(&mut rng, cfg.feature_channels, cfg.semantic_hidden),
            output: Linear::new(&mut rng, cfg.semantic_hidden, 2 * cfg.classes),
            classes: cfg.classes,
        }
    }
}

impl<T: Real> Parameterized<T> for SemanticDiscriminatorFc<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("semantic_fc.0.weight".into(), &self.hidden.weight),
            ("semantic_fc.0.bias".into(), &self.hidden.bias),
            ("semantic_fc.1.weight".into(), &self.output.weight),
            ("semantic_fc.1.bias".into(), &self.output.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.hidden.weight, &mut self.hidden.bias, &mut self.output.weight, &mut self.output.bias]
    }
}

impl<T: Real> Bound<'_, SemanticDiscriminatorFc<T>> {
    /// `[n]` semantic vector to a `[2c]` simplex.
    pub fn forward(&self, tape: &mut Tape<T>, vector: Var) -> Result<Var> {
        let h = tape.linear(vector, self.var(0), self.var(1))?;
        let h = tape.leaky_relu(h, T::lit(LEAKY_SLOPE))?;
        let o = tape.linear(h, self.var(2), self.var(3))?;
        tape.softmax_channel(o)
    }
}

/// The FC discriminator as two 1x1 convolutions, applied at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDiscriminatorConv<T> {
    pub hidden: Conv2d<T>,
    pub output: Conv2d<T>,
    pub classes: usize,
}

impl<T: Real> SemanticDiscriminatorConv<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = module_rng(seed, 5);
        SemanticDiscriminatorConv {
            hidden: Conv2d::new(&mut rng, cfg.feature_channels, cfg.semantic_hidden, 1, 1, 0),
            output: Conv2d::new(&mut rng, cfg.semantic_hidden, 2 * cfg.classes, 1, 1, 0),
            classes: cfg.classes,
        }
    }

    /// Copies FC weights `[out, in]` into 1x1 kernels `[out, in, 1, 1]`.
    pub fn from_fc(fc: &SemanticDiscriminatorFc<T>) -> Self {
        let as_kernel = |l: &Linear<T>| {
            let s = l.weight.shape();
            Conv2d {
                weight: l.weight.clone().reshape(vec![s[0], s[1], 1, 1]).expect("same element count"),
                bias: l.bias.clone(),
                stride: 1,
                padding: 0,
            }
        };
        SemanticDiscriminatorConv { hidden: as_kernel(&fc.hidden), output: as_kernel(&fc.output), classes: fc.classes }
    }
}

impl<T: Real> Parameterized<T> for SemanticDiscriminatorConv<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("semantic_conv.0.weight".into(), &self.hidden.weight),
            ("semantic_conv.0.bias".into(), &self.hidden.bias),
            ("semantic_conv.1.weight".into(), &self.output.weight),
            ("semantic_conv.1.bias".into(), &self.output.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.hidden.weight, &mut self.hidden.bias, &mut self.output.weight, &mut self.output.bias]
    }
}

impl<T: Real> Bound<'_, SemanticDiscriminatorConv<T>> {
    /// `[n, h, w]` features to a per-pixel `[2c, h, w]` simplex.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let x = self.module.hidden.apply(tape, self.var(0), self.var(1), features)?;
        let x = tape.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
        let x = self.module.output.apply(tape, self.var(2), self.var(3), x)?;
        tape.softmax_channel(x)
    }
}

/// The semantic-level discriminator of whichever adaptation variant is used.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticDiscriminator<T> {
    Fc(SemanticDiscriminatorFc<T>),
    Conv(SemanticDiscriminatorConv<T>),
}

impl<T: Real> Parameterized<T> for SemanticDiscriminator<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            SemanticDiscriminator::Fc(d) => d.params(),
            SemanticDiscriminator::Conv(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            SemanticDiscriminator::Fc(d) => d.params_mut(),
            SemanticDiscriminator::Conv(d) => d.params_mut(),
        }
    }
}
