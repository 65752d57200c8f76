use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{linear_index, DisplacementField};

/// Which spatial derivative of the field is penalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessMode {
    /// Forward differences along each axis (first order).
    #[default]
    Gradient,
    /// Seven-point discrete Laplacian on interior voxels (second order).
    Laplacian,
}

/// Mean over voxels of the squared norm of the 3x3 forward-difference
/// stack. Only voxels with a forward neighbour on every axis contribute.
pub fn smoothness_loss(field: &DisplacementField) -> Result<f64> {
    smoothness_loss_with(field, SmoothnessMode::Gradient)
}

pub fn smoothness_loss_with(field: &DisplacementField, mode: SmoothnessMode) -> Result<f64> {
    Ok(eval(field, mode, false)?.0)
}

/// Value and interleaved gradient with respect to the field.
pub fn smoothness_loss_grad(field: &DisplacementField, mode: SmoothnessMode) -> Result<(f64, Vec<f64>)> {
    eval(field, mode, true)
}

fn eval(field: &DisplacementField, mode: SmoothnessMode, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let s = field.shape();
    let u = field.data();
    let mut grad = if want_grad { vec![0.0; u.len()] } else { Vec::new() };
    let strides = [s[1] * s[2], s[2], 1];
    match mode {
        SmoothnessMode::Gradient => {
            if s.iter().any(|&d| d < 2) {
                return invalid(format!("smoothness needs every dimension >= 2, got {s:?}"));
            }
            let count = (s[0] - 1) * (s[1] - 1) * (s[2] - 1);
            let inv = 1.0 / count as f64;
            let mut total = 0.0;
            for x in 0..s[0] - 1 {
                for y in 0..s[1] - 1 {
                    for z in 0..s[2] - 1 {
                        let p = linear_index(s, x, y, z);
                        let mut local = 0.0;
                        for st in strides {
                            let q = p + st;
                            for c in 0..3 {
                                let d = u[3 * q + c] - u[3 * p + c];
                                local += d * d;
                                if want_grad {
                                    grad[3 * q + c] += 2.0 * d * inv;
                                    grad[3 * p + c] -= 2.0 * d * inv;
                                }
                            }
                        }
                        total += local;
                    }
                }
            }
            Ok((total * inv, grad))
        }
        SmoothnessMode::Laplacian => {
            if s.iter().any(|&d| d < 3) {
                return invalid(format!("laplacian smoothness needs every dimension >= 3, got {s:?}"));
            }
            let count = (s[0] - 2) * (s[1] - 2) * (s[2] - 2);
            let inv = 1.0 / count as f64;
            let mut total = 0.0;
            for x in 1..s[0] - 1 {
                for y in 1..s[1] - 1 {
                    for z in 1..s[2] - 1 {
                        let p = linear_index(s, x, y, z);
                        for c in 0..3 {
                            let mut lap = -6.0 * u[3 * p + c];
                            for st in strides {
                                lap += u[3 * (p + st) + c] + u[3 * (p - st) + c];
                            }
                            total += lap * lap;
                            if want_grad {
                                let g = 2.0 * lap * inv;
                                grad[3 * p + c] -= 6.0 * g;
                                for st in strides {
                                    grad[3 * (p + st) + c] += g;
                                    grad[3 * (p - st) + c] += g;
                                }
                            }
                        }
                    }
                }
            }
            Ok((total * inv, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_zero() {
        let f = DisplacementField::constant([5, 6, 7], [1.5, -2.0, 0.25]).unwrap();
        assert_eq!(smoothness_loss(&f).unwrap(), 0.0);
        assert_eq!(smoothness_loss_with(&f, SmoothnessMode::Laplacian).unwrap(), 0.0);
    }

    #[test]
    fn linear_ramp_has_unit_penalty() {
        let f = DisplacementField::from_fn([6, 5, 4], |x, _, _| [x as f64, 0.0, 0.0]).unwrap();
        assert!((smoothness_loss(&f).unwrap() - 1.0).abs() < 1e-12);
        // a linear field has no curvature
        assert!(smoothness_loss_with(&f, SmoothnessMode::Laplacian).unwrap().abs() < 1e-20);
    }

    #[test]
    fn quadratic_homogeneity_and_shift_invariance() {
        let f = DisplacementField::from_fn([5, 5, 5], |x, y, z| {
            [((x * y) as f64).sin(), (z as f64 * 0.3).cos(), (x + 2 * z) as f64 * 0.1]
        })
        .unwrap();
        let base = smoothness_loss(&f).unwrap();
        let doubled = smoothness_loss(&f.scaled(2.0).unwrap()).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-9);
        let shifted = DisplacementField::new(f.shape(), f.data().iter().map(|v| v + 3.0).collect()).unwrap();
        assert!((smoothness_loss(&shifted).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn too_small() {
        let f = DisplacementField::zeros([1, 4, 4]).unwrap();
        assert!(smoothness_loss(&f).is_err());
        let g = DisplacementField::zeros([2, 4, 4]).unwrap();
        assert!(smoothness_loss_with(&g, SmoothnessMode::Laplacian).is_err());
    }
}
