//! Affine self-registration pretraining and fixed/moving pair training.
//!
//! Both phases optimise the same objective: the registration loss on the
//! predicted field plus `seg_loss_weight` times the focal losses of the two
//! segmentation masks against landmark patch targets. All three networks
//! are updated jointly by one Adam optimiser.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{focal_loss_grad, FocalParams, LossComponents, RegistrationLoss};
use crate::models::{BundleGrads, Checkpoint, ModelBundle};
use crate::nn::{Adam, AdamConfig};
use crate::roi::{landmarks_to_mask, RoiMaskSpec};
use crate::volume::{sample_raw, voxel_count, Frame, LandmarkSet, Padding, Point, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineAugmentSpec {
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// Bound on the Euclidean length of the translation vector.
    pub max_translation_vox: f64,
    pub identity_prob: f64,
}

impl Default for AffineAugmentSpec {
    fn default() -> Self {
        Self { max_rotation_deg: 10.0, scale_range: [0.9, 1.1], max_translation_vox: 5.0, identity_prob: 0.1 }
    }
}

impl AffineAugmentSpec {
    /// Translation-only augmentation with no identity draws.
    pub fn translation_only(max_vox: f64) -> Self {
        Self { max_rotation_deg: 0.0, scale_range: [1.0, 1.0], max_translation_vox: max_vox, identity_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return invalid(format!("max_rotation_deg must be >= 0, got {}", self.max_rotation_deg));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid(format!("scale_range must satisfy 0 < min <= max, got {:?}", self.scale_range));
        }
        if !(self.max_translation_vox >= 0.0 && self.max_translation_vox.is_finite()) {
            return invalid(format!("max_translation_vox must be >= 0, got {}", self.max_translation_vox));
        }
        if !(0.0..=1.0).contains(&self.identity_prob) {
            return invalid(format!("identity_prob must lie in [0, 1], got {}", self.identity_prob));
        }
        Ok(())
    }
}

/// Uniform draw from the ball of radius `r` by rejection from the cube.
fn sample_ball(rng: &mut impl Rng, r: f64) -> [f64; 3] {
    if r <= 0.0 {
        return [0.0; 3];
    }
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-r..=r));
        if v.iter().map(|c| c * c).sum::<f64>() <= r * r {
            return v;
        }
    }
}

/// `p -> center + A (p - center) + translation` in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn matvec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

fn invert3(a: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]
    };
    let det: f64 = (0..3).map(|j| a[0][j] * c(0, j)).sum();
    if det.abs() < 1e-12 {
        return None;
    }
    // inverse is the transposed cofactor matrix over the determinant
    Some(std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det)))
}

impl AffineTransform {
    pub fn identity(center: [f64; 3]) -> Self {
        Self { linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3], center }
    }

    /// Geometric centre of a grid of the given shape.
    pub fn grid_center(shape: [usize; 3]) -> [f64; 3] {
        shape.map(|s| (s as f64 - 1.0) / 2.0)
    }

    /// Rotation `Rz Ry Rx` by the given angles (degrees), then isotropic scale.
    pub fn from_params(angles_deg: [f64; 3], scale: f64, translation: [f64; 3], center: [f64; 3]) -> Self {
        let [ax, ay, az] = angles_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = matmul(&rz, &matmul(&ry, &rx));
        let linear = r.map(|row| row.map(|v| v * scale));
        Self { linear, translation, center }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.center)
    }

    pub fn sample(spec: &AffineAugmentSpec, shape: [usize; 3], rng: &mut impl Rng) -> Self {
        let center = Self::grid_center(shape);
        if spec.identity_prob > 0.0 && rng.random::<f64>() < spec.identity_prob {
            return Self::identity(center);
        }
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angles = std::array::from_fn(|_| sym(rng, spec.max_rotation_deg));
        let [lo, hi] = spec.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let t = sample_ball(rng, spec.max_translation_vox);
        Self::from_params(angles, scale, t, center)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = std::array::from_fn(|a| p[a] - self.center[a]);
        let r = matvec(&self.linear, d);
        std::array::from_fn(|a| self.center[a] + r[a] + self.translation[a])
    }

    pub fn apply_inverse(&self, q: [f64; 3]) -> Result<[f64; 3]> {
        let inv = invert3(&self.linear).ok_or_else(|| Error::InvalidInput("singular affine transform".into()))?;
        let d = std::array::from_fn(|a| q[a] - self.center[a] - self.translation[a]);
        let r = matvec(&inv, d);
        Ok(std::array::from_fn(|a| self.center[a] + r[a]))
    }

    /// `out(q) = vol(T^-1 q)`, trilinear with zero padding; the identity is
    /// returned as an exact copy.
    pub fn resample(&self, vol: &Volume) -> Result<Volume> {
        if self.is_identity() {
            return Ok(vol.clone());
        }
        let inv = invert3(&self.linear).ok_or_else(|| Error::InvalidInput("singular affine transform".into()))?;
        let s = vol.shape();
        let mut data = Vec::with_capacity(voxel_count(s));
        for x in 0..s[0] {
            for y in 0..s[1] {
                for z in 0..s[2] {
                    let d = [
                        x as f64 - self.center[0] - self.translation[0],
                        y as f64 - self.center[1] - self.translation[1],
                        z as f64 - self.center[2] - self.translation[2],
                    ];
                    let r = matvec(&inv, d);
                    let p = std::array::from_fn(|a| self.center[a] + r[a]);
                    data.push(sample_raw(vol.data(), s, p, Padding::Zero));
                }
            }
        }
        vol.with_data(data)
    }

    /// Maps landmarks forward, preserving their frame.
    pub fn map_landmarks(&self, lms: &LandmarkSet, vol: &Volume) -> Result<LandmarkSet> {
        let frame = lms.frame();
        lms.map_points(|p| {
            let v = vol.world_to_voxel(p);
            let q = Point::voxel(self.apply(v.coords));
            Ok(match frame {
                Frame::Voxel => q,
                Frame::World => vol.voxel_to_world(q),
            })
        })
    }
}

/// Draws a transform from `spec` with `seed`, resamples `vol` and maps `lms`.
pub fn affine_augment(vol: &Volume, lms: &LandmarkSet, spec: &AffineAugmentSpec, seed: u64) -> Result<(Volume, LandmarkSet)> {
    spec.validate()?;
    let t = AffineTransform::sample(spec, vol.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((t.resample(vol)?, t.map_landmarks(lms, vol)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub step_size: usize,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { step_size: 100, decay: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub seg_loss_weight: f64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            schedule: Schedule::default(),
            epochs: 10,
            batch_size: 1,
            seed: 0,
            seg_loss_weight: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.schedule.step_size == 0 {
            return invalid("schedule.step_size must be >= 1");
        }
        if !(self.schedule.decay > 0.0 && self.schedule.decay < 1.0) {
            return invalid(format!("schedule.decay must lie in (0, 1), got {}", self.schedule.decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch_size must be >= 1");
        }
        if !(self.seg_loss_weight >= 0.0 && self.seg_loss_weight.is_finite()) {
            return invalid(format!("seg_loss_weight must be >= 0, got {}", self.seg_loss_weight));
        }
        Ok(())
    }

    /// Step schedule: `lr * decay^(epoch / step_size)` for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.schedule.decay.powi((epoch / self.schedule.step_size) as i32)
    }
}

/// Loss configuration shared by both phases.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub registration: RegistrationLoss,
    pub focal: FocalParams,
    pub roi: RoiMaskSpec,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        self.focal.validate()?;
        self.roi.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub cc: f64,
    pub mi: f64,
    pub smooth: f64,
    pub focal_fixed: f64,
    pub focal_moving: f64,
    pub lr: f64,
}

impl EpochRecord {
    /// Recombines the recorded components into the objective value.
    pub fn recombine(&self, obj: &Objective, seg_loss_weight: f64) -> f64 {
        let reg = LossComponents { cc: self.cc, mi: self.mi, smooth: self.smooth }.combine(&obj.registration.weights);
        reg + seg_loss_weight * (self.focal_fixed + self.focal_moving)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

/// A training pair with voxel-frame landmarks on each side.
#[derive(Debug, Clone)]
pub struct PairCase {
    pub id: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
}

/// A single volume used for self-registration pretraining.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub id: String,
    pub volume: Volume,
    pub landmarks: LandmarkSet,
}

impl PairCase {
    /// Both sides of every pair as independent pretraining volumes.
    pub fn pretrain_items(cases: &[PairCase]) -> Vec<PretrainItem> {
        cases
            .iter()
            .flat_map(|c| {
                [
                    PretrainItem { id: format!("{}:fixed", c.id), volume: c.fixed.clone(), landmarks: c.fixed_landmarks.clone() },
                    PretrainItem { id: format!("{}:moving", c.id), volume: c.moving.clone(), landmarks: c.moving_landmarks.clone() },
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ItemLoss {
    total: f64,
    comps: LossComponents,
    focal_f: f64,
    focal_m: f64,
}

/// Optimiser state plus the bundle it updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub adam: Adam,
    pub epochs_completed: usize,
    pub opt: OptimConfig,
    pub objective: Objective,
}

const META_EPOCHS: &str = "epochs_completed";
const META_STEP: &str = "adam_step";

impl Trainer {
    pub fn new(bundle: ModelBundle, opt: OptimConfig, objective: Objective) -> Result<Self> {
        opt.validate()?;
        objective.validate()?;
        let adam = Adam::new(opt.adam, &bundle.parameter_sizes());
        Ok(Self { bundle, adam, epochs_completed: 0, opt, objective })
    }

    /// Checkpoint carrying parameters, Adam moments and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_bundle(&self.bundle);
        let names: Vec<String> = self.bundle.named_parameters().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            ck.blobs.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            ck.blobs.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        ck.meta = serde_json::json!({ META_EPOCHS: self.epochs_completed, META_STEP: self.adam.step });
        ck
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. Checkpoints
    /// without optimiser state start Adam afresh at epoch 0.
    pub fn resume(ck: &Checkpoint, opt: OptimConfig, objective: Objective) -> Result<Self> {
        let mut t = Self::new(ck.to_bundle()?, opt, objective)?;
        let names: Vec<String> = t.bundle.named_parameters().into_iter().map(|(n, _)| n).collect();
        if ck.blob(&format!("adam.m.{}", names[0])).is_none() {
            return Ok(t);
        }
        for (i, name) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut t.adam.m[i]), ("v", &mut t.adam.v[i])] {
                let key = format!("adam.{kind}.{name}");
                let src = ck.blob(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimiser blob {key}")))?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimiser blob {key} has the wrong length")));
                }
                dst.copy_from_slice(src);
            }
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k}")))
        };
        t.epochs_completed = field(META_EPOCHS)? as usize;
        t.adam.step = field(META_STEP)?;
        Ok(t)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.opt.seed);
        r.set_stream(epoch as u64 + 1);
        r
    }

    fn item(
        &self,
        fixed: &Volume,
        moving: &Volume,
        roi_f: &Volume,
        roi_m: &Volume,
        grads: &mut BundleGrads,
        scale: f64,
    ) -> Result<ItemLoss> {
        let obj = &self.objective;
        let sw = self.opt.seg_loss_weight;
        let (out, cache) = self.bundle.forward_train(fixed, moving)?;
        let (reg_total, comps, g) = obj.registration.evaluate_with_grad(fixed, moving, &out.field)?;
        let (ff, dff) = focal_loss_grad(out.mask_fixed.data(), roi_f.data(), &obj.focal)?;
        let (fm, dfm) = focal_loss_grad(out.mask_moving.data(), roi_m.data(), &obj.focal)?;
        let total = reg_total + sw * (ff + fm);
        if !total.is_finite() || g.field.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss ({total})")));
        }
        let dmf: Vec<f64> = dff.iter().map(|v| v * sw * scale).collect();
        let dmm: Vec<f64> = dfm.iter().map(|v| v * sw * scale).collect();
        let dfield: Vec<f64> = g.field.iter().map(|v| v * scale).collect();
        self.bundle.backward(&cache, &dmf, &dmm, &dfield, grads);
        Ok(ItemLoss { total, comps, focal_f: ff, focal_m: fm })
    }

    /// Runs one epoch over `n` items. `prepare(i, rng)` returns
    /// `(fixed, moving, roi_fixed, roi_moving)` for item `i`.
    fn epoch<F>(&mut self, n: usize, mut prepare: F) -> Result<EpochRecord>
    where
        F: FnMut(usize, &mut ChaCha8Rng) -> Result<(Volume, Volume, Volume, Volume)>,
    {
        if n == 0 {
            return invalid("training dataset is empty");
        }
        let epoch = self.epochs_completed;
        let lr = self.opt.lr_at(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochRecord { epoch, total: 0.0, cc: 0.0, mi: 0.0, smooth: 0.0, focal_fixed: 0.0, focal_moving: 0.0, lr };
        for batch in order.chunks(self.opt.batch_size) {
            let step = self.adam.step + 1;
            let mut grads = self.bundle.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (f, m, rf, rm) = prepare(i, &mut rng)?;
                let l = self.item(&f, &m, &rf, &rm, &mut grads, scale).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {step} (epoch {epoch})")),
                    other => other,
                })?;
                acc.total += l.total;
                acc.cc += l.comps.cc;
                acc.mi += l.comps.mi;
                acc.smooth += l.comps.smooth;
                acc.focal_fixed += l.focal_f;
                acc.focal_moving += l.focal_m;
            }
            self.adam.update(lr, &mut self.bundle.parameters_mut(), &grads.buffers());
        }
        let k = n as f64;
        for v in [&mut acc.total, &mut acc.cc, &mut acc.mi, &mut acc.smooth, &mut acc.focal_fixed, &mut acc.focal_moving] {
            *v /= k;
        }
        self.epochs_completed += 1;
        Ok(acc)
    }

    /// One self-registration epoch: each item is registered to an augmented copy of itself.
    pub fn pretrain_epoch(&mut self, data: &[PretrainItem], spec: &AffineAugmentSpec) -> Result<EpochRecord> {
        spec.validate()?;
        let roi = self.objective.roi;
        self.epoch(data.len(), |i, rng| {
            let it = &data[i];
            let seed = rng.random::<u64>();
            let (aug, aug_lms) = affine_augment(&it.volume, &it.landmarks, spec, seed)?;
            let rf = landmarks_to_mask(&it.landmarks.to_voxel(&it.volume), it.volume.shape(), &roi)?;
            let rm = landmarks_to_mask(&aug_lms.to_voxel(&it.volume), it.volume.shape(), &roi)?;
            Ok((it.volume.clone(), aug, rf, rm))
        })
    }

    pub fn train_epoch(&mut self, data: &[PairCase], masks: &[(Volume, Volume)]) -> Result<EpochRecord> {
        self.epoch(data.len(), |i, _| Ok((data[i].fixed.clone(), data[i].moving.clone(), masks[i].0.clone(), masks[i].1.clone())))
    }

    /// Runs epochs until `opt.epochs` have been completed in total.
    pub fn run_pretrain(&mut self, data: &[PretrainItem], spec: &AffineAugmentSpec, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainRecord> {
        let mut rec = TrainRecord::default();
        while self.epochs_completed < self.opt.epochs {
            let r = self.pretrain_epoch(data, spec)?;
            on_epoch(&r);
            rec.epochs.push(r);
        }
        Ok(rec)
    }

    pub fn run_train(&mut self, data: &[PairCase], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainRecord> {
        let masks = pair_masks(data, &self.objective.roi)?;
        let mut rec = TrainRecord::default();
        while self.epochs_completed < self.opt.epochs {
            let r = self.train_epoch(data, &masks)?;
            on_epoch(&r);
            rec.epochs.push(r);
        }
        Ok(rec)
    }
}

/// Landmark patch targets for both sides of every case.
pub fn pair_masks(data: &[PairCase], roi: &RoiMaskSpec) -> Result<Vec<(Volume, Volume)>> {
    data.iter()
        .map(|c| {
            Ok((
                landmarks_to_mask(&c.fixed_landmarks.to_voxel(&c.fixed), c.fixed.shape(), roi)?,
                landmarks_to_mask(&c.moving_landmarks.to_voxel(&c.moving), c.moving.shape(), roi)?,
            ))
        })
        .collect()
}

pub fn pretrain(
    bundle: ModelBundle,
    data: &[PretrainItem],
    spec: &AffineAugmentSpec,
    opt: &OptimConfig,
    objective: &Objective,
) -> Result<(ModelBundle, TrainRecord)> {
    let mut t = Trainer::new(bundle, *opt, objective.clone())?;
    let rec = t.run_pretrain(data, spec, |_| {})?;
    Ok((t.bundle, rec))
}

pub fn train(bundle: ModelBundle, data: &[PairCase], opt: &OptimConfig, objective: &Objective) -> Result<(ModelBundle, TrainRecord)> {
    let mut t = Trainer::new(bundle, *opt, objective.clone())?;
    let rec = t.run_train(data, |_| {})?;
    Ok((t.bundle, rec))
}
