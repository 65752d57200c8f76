//! The three-network composite: two segmentation U-Nets produce soft masks,
//! the masked ("attentive") volumes are concatenated and fed to a
//! registration U-Net that predicts a voxel-unit displacement field.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ConvGrad, FinalActivation, Tensor, UNet, UNetCache, UNetConfig};
use crate::volume::{warp_volume, DisplacementField, Volume};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WSSAMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture shared by all three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub levels: usize,
    pub base_features: usize,
    pub seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self { levels: 3, base_features: 8, seed: 0 }
    }
}

impl BundleConfig {
    pub fn seg_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.levels,
            base_features: self.base_features,
            in_channels: 1,
            out_channels: 1,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    pub fn reg_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.levels,
            base_features: self.base_features,
            in_channels: 2,
            out_channels: 3,
            final_activation: FinalActivation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg_config().validate()
    }
}

/// Builds a U-Net with a deterministic ChaCha stream derived from `seed`.
pub fn build_unet(cfg: UNetConfig, seed: u64) -> Result<UNet> {
    UNet::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub seg_fixed: UNet,
    pub seg_moving: UNet,
    pub reg: UNet,
}

#[derive(Debug, Clone)]
pub struct WSSAMOutput {
    pub mask_fixed: Volume,
    pub mask_moving: Volume,
    pub attentive_fixed: Volume,
    pub attentive_moving: Volume,
    pub field: DisplacementField,
    pub warped_moving: Volume,
}

/// Everything [`ModelBundle::backward`] needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct BundleCache {
    fixed: Vec<f32>,
    moving: Vec<f32>,
    cache_f: UNetCache,
    cache_m: UNetCache,
    cache_r: UNetCache,
}

/// Parameter gradients for the three networks, parallel to their convs.
#[derive(Debug, Clone)]
pub struct BundleGrads {
    pub seg_fixed: Vec<ConvGrad>,
    pub seg_moving: Vec<ConvGrad>,
    pub reg: Vec<ConvGrad>,
}

fn tensor_to_volume(t: &Tensor, like: &Volume) -> Result<Volume> {
    like.with_data(t.data.iter().map(|&v| v as f64).collect())
}

impl ModelBundle {
    /// Fresh bundle; each network draws from its own stream of the seed and
    /// the registration head starts at zero so the initial field is identity.
    pub fn new(config: BundleConfig) -> Result<Self> {
        config.validate()?;
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(stream);
            r
        };
        Ok(Self {
            config,
            seg_fixed: UNet::build(config.seg_config(), &mut rng(0), false)?,
            seg_moving: UNet::build(config.seg_config(), &mut rng(1), false)?,
            reg: UNet::build(config.reg_config(), &mut rng(2), true)?,
        })
    }

    pub fn nets(&self) -> [(&'static str, &UNet); 3] {
        [("seg_fixed", &self.seg_fixed), ("seg_moving", &self.seg_moving), ("reg", &self.reg)]
    }

    pub fn parameter_count(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.parameter_count()).sum()
    }

    pub fn zero_grads(&self) -> BundleGrads {
        BundleGrads {
            seg_fixed: self.seg_fixed.zero_grads(),
            seg_moving: self.seg_moving.zero_grads(),
            reg: self.reg.zero_grads(),
        }
    }

    /// Every parameter buffer in a fixed order: per net, per conv, weight then bias.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for net in [&mut self.seg_fixed, &mut self.seg_moving, &mut self.reg] {
            for c in net.convs_mut() {
                out.push(c.weight.as_mut_slice());
                out.push(c.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (_, net) in self.nets() {
            for c in net.convs() {
                out.push(c.weight.len());
                out.push(c.bias.len());
            }
        }
        out
    }

    /// Named parameter blobs as stored in checkpoints.
    pub fn named_parameters(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        for (prefix, net) in self.nets() {
            for (c, name) in net.convs().iter().zip(net.conv_names()) {
                out.push((format!("{prefix}.{name}.weight"), c.weight.as_slice()));
                out.push((format!("{prefix}.{name}.bias"), c.bias.as_slice()));
            }
        }
        out
    }

    fn check_pair(&self, fixed: &Volume, moving: &Volume) -> Result<()> {
        if fixed.shape() != moving.shape() {
            return invalid(format!(
                "fixed {:?} and moving {:?} shapes differ",
                fixed.shape(),
                moving.shape()
            ));
        }
        self.config.reg_config().check_input(fixed.shape())
    }

    /// Full forward pass keeping the activations needed for training.
    pub fn forward_train(&self, fixed: &Volume, moving: &Volume) -> Result<(WSSAMOutput, BundleCache)> {
        self.check_pair(fixed, moving)?;
        let tf = Tensor::from_volume(fixed);
        let tm = Tensor::from_volume(moving);
        let (mask_f, cache_f) = self.seg_fixed.forward(&tf)?;
        let (mask_m, cache_m) = self.seg_moving.forward(&tm)?;
        let att = |mask: &Tensor, vol: &Tensor| Tensor {
            shape: vol.shape,
            channels: 1,
            data: mask.data.iter().zip(&vol.data).map(|(a, b)| a * b).collect(),
        };
        let att_f = att(&mask_f, &tf);
        let att_m = att(&mask_m, &tm);
        let (out, cache_r) = self.reg.forward(&Tensor::concat(&att_f, &att_m)?)?;
        let field = DisplacementField::new(fixed.shape(), out.data.iter().map(|&v| v as f64).collect())?;
        let warped_moving = warp_volume(moving, &field)?;
        let output = WSSAMOutput {
            mask_fixed: tensor_to_volume(&mask_f, fixed)?,
            mask_moving: tensor_to_volume(&mask_m, moving)?,
            attentive_fixed: tensor_to_volume(&att_f, fixed)?,
            attentive_moving: tensor_to_volume(&att_m, moving)?,
            field,
            warped_moving,
        };
        let cache = BundleCache { fixed: tf.data, moving: tm.data, cache_f, cache_m, cache_r };
        Ok((output, cache))
    }

    pub fn forward(&self, fixed: &Volume, moving: &Volume) -> Result<WSSAMOutput> {
        Ok(self.forward_train(fixed, moving)?.0)
    }

    /// Back-propagates loss gradients with respect to the two masks and the
    /// field (interleaved) into parameter gradients of all three networks.
    pub fn backward(&self, cache: &BundleCache, d_mask_f: &[f64], d_mask_m: &[f64], d_field: &[f64], grads: &mut BundleGrads) {
        let shape = cache.cache_r.shape();
        let d_out = Tensor { shape, channels: 3, data: d_field.iter().map(|&v| v as f32).collect() };
        let d_in = self.reg.backward(&cache.cache_r, &d_out, &mut grads.reg, true).expect("input grad requested");
        let (d_att_f, d_att_m) = d_in.split(1);
        let dm = |d_att: &Tensor, vol: &[f32], extra: &[f64]| Tensor {
            shape,
            channels: 1,
            data: d_att.data.iter().zip(vol).zip(extra).map(|((g, v), e)| g * v + *e as f32).collect(),
        };
        let df = dm(&d_att_f, &cache.fixed, d_mask_f);
        let dmm = dm(&d_att_m, &cache.moving, d_mask_m);
        self.seg_fixed.backward(&cache.cache_f, &df, &mut grads.seg_fixed, false);
        self.seg_moving.backward(&cache.cache_m, &dmm, &mut grads.seg_moving, false);
    }
}

impl BundleGrads {
    /// Flat view matching [`ModelBundle::parameters_mut`].
    pub fn buffers(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for net in [&self.seg_fixed, &self.seg_moving, &self.reg] {
            for g in net {
                out.push(g.weight.as_slice());
                out.push(g.bias.as_slice());
            }
        }
        out
    }
}

/// Free-function form of [`ModelBundle::forward`].
pub fn forward_wssamnet(bundle: &ModelBundle, fixed: &Volume, moving: &Volume) -> Result<WSSAMOutput> {
    bundle.forward(fixed, moving)
}

/// On-disk container: magic, version, JSON header, named little-endian f32 blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BundleConfig,
    /// Free-form metadata such as training progress.
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BundleConfig,
    meta: serde_json::Value,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        Self {
            config: bundle.config,
            meta: serde_json::Value::Null,
            blobs: bundle.named_parameters().into_iter().map(|(n, d)| (n, d.to_vec())).collect(),
        }
    }

    pub fn blob(&self, name: &str) -> Option<&[f32]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    /// Rebuilds the bundle, requiring every named parameter to be present
    /// with the expected length.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let mut bundle = ModelBundle::new(self.config)?;
        let names: Vec<String> = bundle.named_parameters().into_iter().map(|(n, _)| n).collect();
        for (name, buf) in names.iter().zip(bundle.parameters_mut()) {
            let Some(src) = self.blob(name) else {
                return ckpt_err(format!("missing parameter blob {name}"));
            };
            if src.len() != buf.len() {
                return ckpt_err(format!("blob {name} has {} values, expected {}", src.len(), buf.len()));
            }
            buf.copy_from_slice(src);
        }
        Ok(bundle)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { config: self.config, meta: self.meta.clone() })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for (name, data) in &self.blobs {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return ckpt_err("not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(take::<4>(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return ckpt_err(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
        }
        let hlen = read_len(&mut r)?;
        let header: Header = serde_json::from_slice(take_slice(&mut r, hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = read_len(&mut r)?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let nlen = read_len(&mut r)?;
            let name = std::str::from_utf8(take_slice(&mut r, nlen)?)
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
                .to_string();
            let n = read_len(&mut r)?;
            let raw = take_slice(&mut r, n.checked_mul(4).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blobs.push((name, data));
        }
        if !r.is_empty() {
            return ckpt_err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { config: header.config, meta: header.meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return ckpt_err("truncated checkpoint");
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return ckpt_err("truncated checkpoint");
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take::<8>(r)?)).map_err(|_| Error::Checkpoint("length overflow".into()))
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    Checkpoint::from_bundle(bundle).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    Checkpoint::load(path)?.to_bundle()
}
