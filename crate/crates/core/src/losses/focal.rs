use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, epsilon: 1e-8, reduction: Reduction::Mean }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return invalid(format!("focal gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return invalid(format!("focal epsilon must lie in (0, 1e-3), got {}", self.epsilon));
        }
        Ok(())
    }
}

fn check(pred: &[f64], target: &[f64], params: &FocalParams) -> Result<()> {
    params.validate()?;
    if pred.len() != target.len() {
        return invalid(format!(
            "prediction has {} voxels, target has {}",
            pred.len(),
            target.len()
        ));
    }
    if pred.is_empty() {
        return invalid("focal loss on an empty volume");
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("prediction {p} outside [0, 1]"));
    }
    if let Some(t) = target.iter().find(|t| **t != 0.0 && **t != 1.0) {
        return invalid(format!("target value {t} is not binary"));
    }
    Ok(())
}

/// `-(1 - p_t)^gamma * ln(p_t + eps)` per voxel with `p_t = pred` on
/// foreground and `1 - pred` on background.
pub fn focal_loss(pred: &[f64], target: &[f64], params: &FocalParams) -> Result<f64> {
    check(pred, target, params)?;
    let g = params.gamma;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pt = if t == 1.0 { p } else { 1.0 - p };
            -(1.0 - pt).powf(g) * (pt + params.epsilon).ln()
        })
        .sum();
    Ok(reduce(sum, pred.len(), params.reduction))
}

fn reduce(sum: f64, n: usize, r: Reduction) -> f64 {
    match r {
        Reduction::Mean => sum / n as f64,
        Reduction::Sum => sum,
    }
}

pub fn focal_loss_grad(pred: &[f64], target: &[f64], params: &FocalParams) -> Result<(f64, Vec<f64>)> {
    let value = focal_loss(pred, target, params)?;
    let g = params.gamma;
    let scale = match params.reduction {
        Reduction::Mean => 1.0 / pred.len() as f64,
        Reduction::Sum => 1.0,
    };
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (pt, sign) = if t == 1.0 { (p, 1.0) } else { (1.0 - p, -1.0) };
            let q = 1.0 - pt;
            let log_term = (pt + params.epsilon).ln();
            // d/dpt [-(q^g) ln(pt+eps)] = g q^(g-1) ln(pt+eps) - q^g / (pt+eps)
            let focus = if g == 0.0 || q == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * log_term };
            let d_pt = focus - q.powf(g) / (pt + params.epsilon);
            sign * d_pt * scale
        })
        .collect();
    Ok((value, grad))
}

/// `-(t ln(p + eps) + (1 - t) ln(1 - p + eps))`, reduced like the focal loss.
pub fn binary_cross_entropy(pred: &[f64], target: &[f64], epsilon: f64, reduction: Reduction) -> Result<f64> {
    check(pred, target, &FocalParams { gamma: 0.0, epsilon, reduction })?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -(t * (p + epsilon).ln() + (1.0 - t) * (1.0 - p + epsilon).ln()))
        .sum();
    Ok(reduce(sum, pred.len(), reduction))
}
