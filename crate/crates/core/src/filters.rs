//! Laplacian-of-Gaussian filtering with mirror boundary handling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par;
use crate::volume::{linear_index, voxel_count, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoGParams {
    /// Gaussian scale in voxels.
    pub sigma: f64,
    /// Half-width of the cubic kernel; the kernel side is `2 * radius + 1`.
    pub radius: usize,
}

impl Default for LoGParams {
    fn default() -> Self {
        Self { sigma: 1.0, radius: 2 }
    }
}

impl LoGParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return invalid(format!("LoG sigma must be positive, got {}", self.sigma));
        }
        if self.radius < 1 {
            return invalid("LoG radius must be at least 1");
        }
        if (self.radius as f64) < (2.0 * self.sigma).ceil() {
            log::warn!(
                "LoG radius {} is below ceil(2 sigma) = {}; the kernel is truncated",
                self.radius,
                (2.0 * self.sigma).ceil()
            );
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }
}

/// A cubic kernel of side `2 * radius + 1`, indexed like a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3 {
    pub radius: usize,
    pub data: Vec<f64>,
}

impl Kernel3 {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }
    pub fn at(&self, dx: i64, dy: i64, dz: i64) -> f64 {
        let r = self.radius as i64;
        let s = self.side();
        let i = ((dx + r) as usize * s + (dy + r) as usize) * s + (dz + r) as usize;
        self.data[i]
    }
}

/// `((x^2+y^2+z^2 - 3 sigma^2) / sigma^4) * G_sigma` over `[-r, r]^3`, shifted by
/// its mean so the entries sum to zero.
pub fn log_kernel(params: &LoGParams) -> Result<Kernel3> {
    params.validate()?;
    let r = params.radius as i64;
    let s2 = params.sigma * params.sigma;
    let norm = (2.0 * std::f64::consts::PI * s2).powf(-1.5);
    let mut data = Vec::with_capacity(params.side().pow(3));
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                let d2 = (x * x + y * y + z * z) as f64;
                let g = norm * (-d2 / (2.0 * s2)).exp();
                data.push((d2 - 3.0 * s2) / (s2 * s2) * g);
            }
        }
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter_mut().for_each(|v| *v -= mean);
    Ok(Kernel3 { radius: params.radius, data })
}

/// Mirror index without repeating the edge sample (`c b | a b c d | c b`).
#[inline]
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn check_dims(shape: [usize; 3], k: &Kernel3) -> Result<()> {
    if shape.iter().any(|&s| s < k.side()) {
        return invalid(format!(
            "volume {shape:?} is smaller than the {}^3 filter kernel",
            k.side()
        ));
    }
    Ok(())
}

/// Same-size correlation of raw grid data with a symmetric kernel.
pub(crate) fn filter_raw(data: &[f64], shape: [usize; 3], k: &Kernel3) -> Result<Vec<f64>> {
    check_dims(shape, k)?;
    let r = k.radius as i64;
    let side = k.side();
    let mut out = vec![0.0; voxel_count(shape)];
    let slab = shape[1] * shape[2];
    par::for_each_chunk_mut(&mut out, slab, |x, row| {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let mut acc = 0.0;
                let mut ki = 0;
                for dx in -r..=r {
                    let sx = mirror(x as i64 + dx, shape[0]);
                    for dy in -r..=r {
                        let sy = mirror(y as i64 + dy, shape[1]);
                        let base = linear_index(shape, sx, sy, 0);
                        for dz in -r..=r {
                            let sz = mirror(z as i64 + dz, shape[2]);
                            acc += k.data[ki] * data[base + sz];
                            ki += 1;
                        }
                    }
                }
                debug_assert_eq!(ki, side * side * side);
                row[y * shape[2] + z] = acc;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`filter_raw`]: maps an output-space gradient back to input space.
pub(crate) fn filter_adjoint(grad_out: &[f64], shape: [usize; 3], k: &Kernel3) -> Result<Vec<f64>> {
    check_dims(shape, k)?;
    // For each axis and input index, the (output index, tap offset) pairs that read it.
    let r = k.radius as i64;
    let readers = |n: usize| -> Vec<Vec<(usize, i64)>> {
        let mut lists = vec![Vec::new(); n];
        for o in 0..n {
            for d in -r..=r {
                lists[mirror(o as i64 + d, n)].push((o, d));
            }
        }
        lists
    };
    let rx = readers(shape[0]);
    let ry = readers(shape[1]);
    let rz = readers(shape[2]);
    let mut out = vec![0.0; voxel_count(shape)];
    let slab = shape[1] * shape[2];
    par::for_each_chunk_mut(&mut out, slab, |x, row| {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let mut acc = 0.0;
                for &(ox, dx) in &rx[x] {
                    for &(oy, dy) in &ry[y] {
                        let base = linear_index(shape, ox, oy, 0);
                        for &(oz, dz) in &rz[z] {
                            acc += k.at(dx, dy, dz) * grad_out[base + oz];
                        }
                    }
                }
                row[y * shape[2] + z] = acc;
            }
        }
    });
    Ok(out)
}

/// Filters `vol` with the LoG kernel; output has the input's shape and geometry.
pub fn apply_log(vol: &Volume, params: &LoGParams) -> Result<Volume> {
    let k = log_kernel(params)?;
    vol.with_data(filter_raw(vol.data(), vol.shape(), &k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_zero_and_is_symmetric() {
        for (sigma, radius) in [(1.0, 2), (0.7, 3), (1.5, 3)] {
            let k = log_kernel(&LoGParams { sigma, radius }).unwrap();
            assert!(k.data.iter().sum::<f64>().abs() < 1e-12);
            let r = radius as i64;
            for x in -r..=r {
                for y in -r..=r {
                    for z in -r..=r {
                        assert_eq!(k.at(x, y, z), k.at(-x, -y, -z));
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_center_is_minimum() {
        let k = log_kernel(&LoGParams { sigma: 1.0, radius: 2 }).unwrap();
        let c = k.at(0, 0, 0);
        assert!(k.data.iter().all(|&v| v >= c));
        assert_eq!(k.data.iter().filter(|&&v| v == c).count(), 1);
    }

    #[test]
    fn invalid_params() {
        assert!(log_kernel(&LoGParams { sigma: 0.0, radius: 2 }).is_err());
        assert!(log_kernel(&LoGParams { sigma: 1.0, radius: 0 }).is_err());
    }

    #[test]
    fn constant_volume_gives_zero() {
        let v = Volume::from_data([7, 8, 9], vec![3.25; 7 * 8 * 9]).unwrap();
        let out = apply_log(&v, &LoGParams::default()).unwrap();
        assert_eq!(out.shape(), v.shape());
        assert!(out.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let n = 11;
        let mut data = vec![0.0; n * n * n];
        data[linear_index([n; 3], 5, 5, 5)] = 1.0;
        let v = Volume::from_data([n; 3], data).unwrap();
        let p = LoGParams::default();
        let out = apply_log(&v, &p).unwrap();
        let k = log_kernel(&p).unwrap();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let d = [x as i64 - 5, y as i64 - 5, z as i64 - 5];
                    let expect = if d.iter().all(|c| c.abs() <= 2) { k.at(d[0], d[1], d[2]) } else { 0.0 };
                    assert!((out.get(x, y, z) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn too_small_volume_rejected() {
        let v = Volume::zeros([4, 8, 8]).unwrap();
        assert!(apply_log(&v, &LoGParams::default()).is_err());
    }

    #[test]
    fn linear_and_shift_equivariant() {
        let shape = [12, 12, 12];
        let f = |x: usize, y: usize, z: usize| ((x * 3 + y * 5 + z * 7) as f64 * 0.37).sin();
        let g = |x: usize, y: usize, z: usize| ((x * y + z) as f64 * 0.11).cos();
        let v1 = Volume::from_fn(shape, f).unwrap();
        let v2 = Volume::from_fn(shape, g).unwrap();
        let p = LoGParams::default();
        let combo = v1.with_data(v1.data().iter().zip(v2.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
        let lhs = apply_log(&combo, &p).unwrap();
        let (o1, o2) = (apply_log(&v1, &p).unwrap(), apply_log(&v2, &p).unwrap());
        for i in 0..lhs.len() {
            let rhs = 2.0 * o1.data()[i] - 0.5 * o2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-6 * rhs.abs().max(1e-6));
        }
        // shift by one voxel along y, compare away from the boundary
        let shifted = Volume::from_fn(shape, |x, y, z| f(x, y + 1, z)).unwrap();
        let os = apply_log(&shifted, &p).unwrap();
        for x in 3..9 {
            for y in 3..8 {
                for z in 3..9 {
                    assert!((os.get(x, y, z) - o1.get(x, y + 1, z)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_dot_product() {
        let shape = [6, 7, 5];
        let k = log_kernel(&LoGParams::default()).unwrap();
        let a: Vec<f64> = (0..210).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.1).collect();
        let b: Vec<f64> = (0..210).map(|i| ((i * 13 % 11) as f64 - 5.0) * 0.2).collect();
        let fa = filter_raw(&a, shape, &k).unwrap();
        let atb = filter_adjoint(&b, shape, &k).unwrap();
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&atb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
