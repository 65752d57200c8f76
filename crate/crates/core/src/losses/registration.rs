use serde::{Deserialize, Serialize};

use super::cc::{cc_raw, cc_raw_grad, CCParams};
use super::mi::{mi_raw, mi_raw_grad, resolve_range, MIParams};
use super::smooth::{smoothness_loss_grad, smoothness_loss_with, SmoothnessMode};
use crate::error::{invalid, Result};
use crate::filters::{filter_adjoint, filter_raw, log_kernel, LoGParams};
use crate::volume::{warp_adjoint, warp_raw, DisplacementField, Padding, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cc: f64,
    pub w_mi: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cc: 1.0, w_mi: 1.0, w_smooth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_cc", self.w_cc), ("w_mi", self.w_mi), ("w_smooth", self.w_smooth)] {
            if !(w >= 0.0) || !w.is_finite() {
                return invalid(format!("loss weight {name} must be >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// The three similarity/regularity terms as entered into the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// Local cross-correlation, divided by the voxel count unless raw mode is set.
    pub cc: f64,
    pub mi: f64,
    pub smooth: f64,
}

impl LossComponents {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        -w.w_cc * self.cc - w.w_mi * self.mi + w.w_smooth * self.smooth
    }
}

/// Gradients of the total registration loss.
#[derive(Debug, Clone)]
pub struct RegistrationGrad {
    /// Interleaved `[ux, uy, uz]` per voxel.
    pub field: Vec<f64>,
    pub moving: Vec<f64>,
    /// Gradient with respect to the fixed volume. The automatic MI intensity
    /// range is derived from the filtered fixed image and treated as a
    /// constant here.
    pub fixed: Vec<f64>,
}

/// `-w_cc cc(F, M) - w_mi MI(F, M) + w_smooth smooth(u)` with `F = LoG(f)`
/// and `M = LoG(m o phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationLoss {
    pub weights: LossWeights,
    pub log: LoGParams,
    pub cc: CCParams,
    pub mi: MIParams,
    pub smoothness: SmoothnessMode,
    /// Use the unnormalised windowed sum for cc.
    pub raw_cc: bool,
    pub padding: Padding,
}

impl Default for RegistrationLoss {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            log: LoGParams::default(),
            cc: CCParams::default(),
            mi: MIParams::default(),
            smoothness: SmoothnessMode::Gradient,
            raw_cc: false,
            padding: Padding::Zero,
        }
    }
}

impl RegistrationLoss {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.log.validate()?;
        self.cc.validate()?;
        self.mi.validate()
    }

    fn check(&self, f: &Volume, m: &Volume, field: &DisplacementField) -> Result<()> {
        self.validate()?;
        if f.shape() != m.shape() || f.shape() != field.shape() {
            return invalid(format!(
                "registration loss shapes differ: fixed {:?}, moving {:?}, field {:?}",
                f.shape(),
                m.shape(),
                field.shape()
            ));
        }
        Ok(())
    }

    fn cc_scale(&self, n: usize) -> f64 {
        if self.raw_cc {
            1.0
        } else {
            1.0 / n as f64
        }
    }

    pub fn evaluate(&self, f: &Volume, m: &Volume, field: &DisplacementField) -> Result<(f64, LossComponents)> {
        self.check(f, m, field)?;
        let shape = f.shape();
        let k = log_kernel(&self.log)?;
        let mw = warp_raw(m.data(), shape, field, self.padding)?;
        let ff = filter_raw(f.data(), shape, &k)?;
        let mf = filter_raw(&mw, shape, &k)?;
        let range = resolve_range(&self.mi, &ff, None)?;
        let comps = LossComponents {
            cc: cc_raw(&ff, &mf, shape, &self.cc) * self.cc_scale(f.len()),
            mi: mi_raw(&ff, &mf, range, &self.mi),
            smooth: smoothness_loss_with(field, self.smoothness)?,
        };
        Ok((comps.combine(&self.weights), comps))
    }

    pub fn evaluate_with_grad(
        &self,
        f: &Volume,
        m: &Volume,
        field: &DisplacementField,
    ) -> Result<(f64, LossComponents, RegistrationGrad)> {
        self.check(f, m, field)?;
        let shape = f.shape();
        let n = f.len();
        let w = &self.weights;
        let k = log_kernel(&self.log)?;
        let mw = warp_raw(m.data(), shape, field, self.padding)?;
        let ff = filter_raw(f.data(), shape, &k)?;
        let mf = filter_raw(&mw, shape, &k)?;
        let range = resolve_range(&self.mi, &ff, None)?;
        let scale = self.cc_scale(n);
        let (cc, dcc_f, dcc_m) = cc_raw_grad(&ff, &mf, shape, &self.cc);
        let (mi, dmi_f, dmi_m) = mi_raw_grad(&ff, &mf, range, &self.mi);
        let (smooth, dsmooth) = smoothness_loss_grad(field, self.smoothness)?;
        let comps = LossComponents { cc: cc * scale, mi, smooth };

        let d_mf: Vec<f64> = (0..n).map(|i| -w.w_cc * scale * dcc_m[i] - w.w_mi * dmi_m[i]).collect();
        let d_ff: Vec<f64> = (0..n).map(|i| -w.w_cc * scale * dcc_f[i] - w.w_mi * dmi_f[i]).collect();
        let d_mw = filter_adjoint(&d_mf, shape, &k)?;
        let (d_m, mut d_field) = warp_adjoint(m, field, &d_mw, self.padding)?;
        for (g, s) in d_field.iter_mut().zip(&dsmooth) {
            *g += w.w_smooth * s;
        }
        let d_f = filter_adjoint(&d_ff, shape, &k)?;
        Ok((comps.combine(w), comps, RegistrationGrad { field: d_field, moving: d_m, fixed: d_f }))
    }
}

/// Free-function form of [`RegistrationLoss::evaluate`] with per-voxel cc
/// scaling and first-order smoothness.
pub fn registration_loss(
    f: &Volume,
    m: &Volume,
    field: &DisplacementField,
    w: &LossWeights,
    log_p: &LoGParams,
    cc_p: &CCParams,
    mi_p: &MIParams,
) -> Result<(f64, LossComponents)> {
    RegistrationLoss {
        weights: *w,
        log: *log_p,
        cc: *cc_p,
        mi: *mi_p,
        ..RegistrationLoss::default()
    }
    .evaluate(f, m, field)
}
