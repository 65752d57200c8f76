use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv3d, ConvGrad};
use super::norm::{instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, NormCache};
use super::resize::{upsample2, upsample2_backward};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub final_activation: FinalActivation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_features: 8,
            in_channels: 1,
            out_channels: 1,
            final_activation: FinalActivation::None,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_features < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return invalid(format!("unet config fields must all be >= 1: {self:?}"));
        }
        Ok(())
    }

    /// Feature width at a resolution level: `base * 2^level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Every spatial dimension must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if shape.iter().any(|&s| s == 0 || s % d != 0) {
            return invalid(format!(
                "input dims {shape:?} must be divisible by {d} for a {}-level U-Net",
                self.levels
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<Vec<usize>>,
    up: Vec<usize>,
    dec: Vec<Vec<usize>>,
    head: usize,
}

/// Encoder-decoder with skip connections.
///
/// Level 0 runs two 3^3 conv + instance-norm + leaky-ReLU blocks; every
/// deeper level starts with a stride-2 block that doubles the width. The
/// decoder projects with a 1^3 convolution, upsamples trilinearly,
/// concatenates the skip and runs two more blocks. A 1^3 head maps to
/// `out_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    convs: Vec<Conv3d>,
    names: Vec<String>,
    layout: Layout,
}

/// Activations retained by [`UNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache {
    shape: [usize; 3],
    inputs: Vec<Option<Tensor>>,
    norms: Vec<Option<NormCache>>,
    output: Tensor,
}

impl UNetCache {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl UNet {
    /// Builds with He-uniform weights from `rng`. With `zero_head` the final
    /// projection starts at exactly zero.
    pub fn build(config: UNetConfig, rng: &mut impl Rng, zero_head: bool) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut names = Vec::new();
        let mut push = |c: Conv3d, name: String, convs: &mut Vec<Conv3d>| {
            convs.push(c);
            names.push(name);
            convs.len() - 1
        };
        let l = config.levels;
        let mut enc = Vec::new();
        for k in 0..l {
            let mut ids = Vec::new();
            let w = config.width(k);
            if k == 0 {
                ids.push(push(Conv3d::new(config.in_channels, w, 3, 1, rng), "enc0.conv0".into(), &mut convs));
            } else {
                ids.push(push(Conv3d::new(config.width(k - 1), w, 3, 2, rng), format!("enc{k}.down"), &mut convs));
                ids.push(push(Conv3d::new(w, w, 3, 1, rng), format!("enc{k}.conv0"), &mut convs));
            }
            ids.push(push(Conv3d::new(w, w, 3, 1, rng), format!("enc{k}.conv1"), &mut convs));
            enc.push(ids);
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for k in 0..l.saturating_sub(1) {
            up.push(push(Conv3d::new(config.width(k + 1), config.width(k), 1, 1, rng), format!("up{k}.proj"), &mut convs));
        }
        for k in 0..l.saturating_sub(1) {
            let w = config.width(k);
            dec.push(vec![
                push(Conv3d::new(2 * w, w, 3, 1, rng), format!("dec{k}.conv0"), &mut convs),
                push(Conv3d::new(w, w, 3, 1, rng), format!("dec{k}.conv1"), &mut convs),
            ]);
        }
        let head_conv = if zero_head {
            Conv3d::zeros(config.width(0), config.out_channels, 1, 1)
        } else {
            Conv3d::new(config.width(0), config.out_channels, 1, 1, rng)
        };
        let head = push(head_conv, "head".into(), &mut convs);
        Ok(Self { config, convs, names, layout: Layout { enc, up, dec, head } })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn convs(&self) -> &[Conv3d] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Conv3d] {
        &mut self.convs
    }

    /// Stable layer names, parallel to [`UNet::convs`].
    pub fn conv_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(Conv3d::parameter_count).sum()
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.convs.iter().map(ConvGrad::zeros_like).collect()
    }

    pub fn head_mut(&mut self) -> &mut Conv3d {
        let h = self.layout.head;
        &mut self.convs[h]
    }

    fn block(&self, i: usize, x: Tensor, cache: &mut UNetCache) -> Tensor {
        let y = self.convs[i].forward(&x);
        let norm = instance_norm(&y);
        let out = leaky_relu(&norm.normalized);
        cache.inputs[i] = Some(x);
        cache.norms[i] = Some(norm);
        out
    }

    fn block_backward(&self, i: usize, dy: Tensor, cache: &UNetCache, grads: &mut [ConvGrad], need_dx: bool) -> Option<Tensor> {
        let norm = cache.norms[i].as_ref().expect("missing norm cache");
        let mut d = dy;
        leaky_relu_backward(&norm.normalized, &mut d);
        let d = instance_norm_backward(norm, &d);
        let x = cache.inputs[i].as_ref().expect("missing conv input");
        self.convs[i].backward(x, &d, &mut grads[i], need_dx)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, UNetCache)> {
        if x.channels != self.config.in_channels {
            return invalid(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, x.channels
            ));
        }
        self.config.check_input(x.shape)?;
        let n = self.convs.len();
        let mut cache = UNetCache {
            shape: x.shape,
            inputs: vec![None; n],
            norms: vec![None; n],
            output: Tensor::zeros([1, 1, 1], 1),
        };
        let l = self.config.levels;
        let mut skips: Vec<Tensor> = Vec::with_capacity(l);
        let mut h = x.clone();
        for k in 0..l {
            for &i in &self.layout.enc[k] {
                h = self.block(i, h, &mut cache);
            }
            skips.push(h.clone());
        }
        for k in (0..l - 1).rev() {
            let pi = self.layout.up[k];
            let p = self.convs[pi].forward(&h);
            cache.inputs[pi] = Some(h);
            let u = upsample2(&p);
            h = Tensor::concat(&u, &skips[k])?;
            for &i in &self.layout.dec[k] {
                h = self.block(i, h, &mut cache);
            }
        }
        let hi = self.layout.head;
        let mut out = self.convs[hi].forward(&h);
        cache.inputs[hi] = Some(h);
        if self.config.final_activation == FinalActivation::Sigmoid {
            out.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        }
        cache.output = out.clone();
        Ok((out, cache))
    }

    /// Inference without keeping the backward cache around.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients for `d loss / d output` and returns
    /// the input gradient when requested.
    pub fn backward(&self, cache: &UNetCache, d_out: &Tensor, grads: &mut [ConvGrad], need_input_grad: bool) -> Option<Tensor> {
        assert_eq!(grads.len(), self.convs.len());
        let l = self.config.levels;
        let mut d = d_out.clone();
        if self.config.final_activation == FinalActivation::Sigmoid {
            for (g, &s) in d.data.iter_mut().zip(&cache.output.data) {
                *g *= s * (1.0 - s);
            }
        }
        let hi = self.layout.head;
        let mut d = self.convs[hi]
            .backward(cache.inputs[hi].as_ref().unwrap(), &d, &mut grads[hi], true)
            .unwrap();
        let mut d_skips: Vec<Option<Tensor>> = vec![None; l];
        for k in 0..l - 1 {
            for &i in self.layout.dec[k].iter().rev() {
                d = self.block_backward(i, d, cache, grads, true).unwrap();
            }
            let w = self.config.width(k);
            let (du, ds) = d.split(w);
            d_skips[k] = Some(ds);
            let dp = upsample2_backward(&du);
            let pi = self.layout.up[k];
            d = self.convs[pi]
                .backward(cache.inputs[pi].as_ref().unwrap(), &dp, &mut grads[pi], true)
                .unwrap();
        }
        for k in (0..l).rev() {
            if let Some(ds) = &d_skips[k] {
                d.add_assign(ds);
            }
            let ids = &self.layout.enc[k];
            for (j, &i) in ids.iter().enumerate().rev() {
                let first = k == 0 && j == 0;
                let need = !first || need_input_grad;
                match self.block_backward(i, d.clone(), cache, grads, need) {
                    Some(dx) => d = dx,
                    None => return None,
                }
            }
        }
        debug_assert_eq!(d.shape, cache.shape);
        Some(d)
    }
}
