use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par;
use crate::volume::Volume;

/// Soft-histogram (Parzen) mutual information estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MIParams {
    pub bins: usize,
    /// Gaussian kernel width in normalised-intensity units.
    pub kernel_bandwidth: f64,
    /// Intensity window mapped to `[0, 1]`. `None` derives it from the data:
    /// the joint min/max for [`mutual_information`], the fixed image range
    /// inside the registration loss.
    #[serde(default)]
    pub intensity_range: Option<[f64; 2]>,
}

impl Default for MIParams {
    fn default() -> Self {
        Self { bins: 32, kernel_bandwidth: 1.0 / 32.0, intensity_range: None }
    }
}

impl MIParams {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return invalid("mi bins must be at least 2");
        }
        if !(self.kernel_bandwidth > 0.0) || !self.kernel_bandwidth.is_finite() {
            return invalid("mi kernel_bandwidth must be positive");
        }
        if let Some([lo, hi]) = self.intensity_range {
            check_range(lo, hi)?;
        }
        Ok(())
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return invalid(format!("degenerate intensity range [{lo}, {hi}]"));
    }
    Ok(())
}

const BLOCK: usize = 2048;
const P_FLOOR: f64 = 1e-12;

/// Per-voxel normalised Gaussian bin weights and their derivative with
/// respect to the raw intensity.
struct Parzen {
    bins: usize,
    w: Vec<f64>,
    dw: Vec<f64>,
}

fn parzen(x: &[f64], lo: f64, hi: f64, bins: usize, bw: f64, want_grad: bool) -> Parzen {
    let inv_range = 1.0 / (hi - lo);
    let inv_var = 1.0 / (bw * bw);
    let mut w = vec![0.0; x.len() * bins];
    let mut dw = if want_grad { vec![0.0; x.len() * bins] } else { Vec::new() };
    par::for_each_chunk_mut(&mut w, BLOCK * bins, |blk, wc| {
        for (j, row) in wc.chunks_mut(bins).enumerate() {
            let v = x[blk * BLOCK + j];
            let a = ((v - lo) * inv_range).clamp(0.0, 1.0);
            let mut total = 0.0;
            for (k, slot) in row.iter_mut().enumerate() {
                let d = a - (k as f64 + 0.5) / bins as f64;
                *slot = (-0.5 * d * d * inv_var).exp();
                total += *slot;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
    });
    if want_grad {
        let wr = &w;
        par::for_each_chunk_mut(&mut dw, BLOCK * bins, |blk, dc| {
            for (j, row) in dc.chunks_mut(bins).enumerate() {
                let vi = blk * BLOCK + j;
                let v = x[vi];
                let da = if v < lo || v > hi { 0.0 } else { inv_range };
                if da == 0.0 {
                    continue;
                }
                let a = ((v - lo) * inv_range).clamp(0.0, 1.0);
                let wv = &wr[vi * bins..(vi + 1) * bins];
                let slope = |k: usize| -(a - (k as f64 + 0.5) / bins as f64) * inv_var;
                let mean_slope: f64 = (0..bins).map(|k| wv[k] * slope(k)).sum();
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = wv[k] * (slope(k) - mean_slope) * da;
                }
            }
        });
    }
    Parzen { bins, w, dw }
}

fn joint(pa: &Parzen, pb: &Parzen, n: usize) -> Vec<f64> {
    let bins = pa.bins;
    let blocks = n.div_ceil(BLOCK);
    let partial = par::map(blocks, |b| {
        let mut h = vec![0.0; bins * bins];
        for v in b * BLOCK..((b + 1) * BLOCK).min(n) {
            let wa = &pa.w[v * bins..(v + 1) * bins];
            let wb = &pb.w[v * bins..(v + 1) * bins];
            for (i, &x) in wa.iter().enumerate() {
                let row = &mut h[i * bins..(i + 1) * bins];
                for (slot, &y) in row.iter_mut().zip(wb) {
                    *slot += x * y;
                }
            }
        }
        h
    });
    let mut h = vec![0.0; bins * bins];
    for p in partial {
        for (a, b) in h.iter_mut().zip(p) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

fn marginals(p: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pa = vec![0.0; bins];
    let mut pb = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            pa[a] += p[a * bins + b];
            pb[b] += p[a * bins + b];
        }
    }
    (pa, pb)
}

fn mi_from_joint(p: &[f64], bins: usize) -> f64 {
    let (pa, pb) = marginals(p, bins);
    let term = |a: usize, b: usize| {
        let pab = p[a * bins + b];
        if pab > P_FLOOR {
            pab * (pab / (pa[a] * pb[b])).ln()
        } else {
            0.0
        }
    };
    // visit (a, b) and (b, a) together so swapping the inputs is bitwise exact
    let mut mi = 0.0;
    for a in 0..bins {
        mi += term(a, a);
        for b in a + 1..bins {
            mi += term(a, b) + term(b, a);
        }
    }
    mi
}

pub(crate) fn resolve_range(params: &MIParams, f: &[f64], m: Option<&[f64]>) -> Result<(f64, f64)> {
    if let Some([lo, hi]) = params.intensity_range {
        check_range(lo, hi)?;
        return Ok((lo, hi));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in f.iter().chain(m.unwrap_or(&[]).iter()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return invalid("cannot derive an intensity range from empty or non-finite data");
    }
    // flat images get a unit window so the estimate degrades to zero information
    if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        return Ok((lo - 0.5, lo + 0.5));
    }
    Ok((lo, hi))
}

pub(crate) fn mi_raw(f: &[f64], m: &[f64], range: (f64, f64), params: &MIParams) -> f64 {
    let pf = parzen(f, range.0, range.1, params.bins, params.kernel_bandwidth, false);
    let pm = parzen(m, range.0, range.1, params.bins, params.kernel_bandwidth, false);
    mi_from_joint(&joint(&pf, &pm, f.len()), params.bins)
}

/// Value plus `(d/df, d/dm)` with the intensity range held fixed.
pub(crate) fn mi_raw_grad(
    f: &[f64],
    m: &[f64],
    range: (f64, f64),
    params: &MIParams,
) -> (f64, Vec<f64>, Vec<f64>) {
    let bins = params.bins;
    let n = f.len();
    let pf = parzen(f, range.0, range.1, bins, params.kernel_bandwidth, true);
    let pm = parzen(m, range.0, range.1, bins, params.kernel_bandwidth, true);
    let p = joint(&pf, &pm, n);
    let (pa, pb) = marginals(&p, bins);
    let value = mi_from_joint(&p, bins);
    // dMI/dp(a,b) for the thresholded sum, marginals tied to the joint
    let mut rho_a = vec![0.0; bins];
    let mut rho_b = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            let pab = p[a * bins + b];
            if pab > P_FLOOR {
                rho_a[a] += pab / pa[a];
                rho_b[b] += pab / pb[b];
            }
        }
    }
    let mut g = vec![0.0; bins * bins];
    for a in 0..bins {
        for b in 0..bins {
            let pab = p[a * bins + b];
            let direct = if pab > P_FLOOR { (pab / (pa[a] * pb[b])).ln() + 1.0 } else { 0.0 };
            g[a * bins + b] = direct - rho_a[a] - rho_b[b];
        }
    }
    let inv_n = 1.0 / n as f64;
    let grad_side = |own: &Parzen, other: &Parzen, transpose: bool| -> Vec<f64> {
        par::map(n, |v| {
            let dw = &own.dw[v * bins..(v + 1) * bins];
            if dw.iter().all(|&d| d == 0.0) {
                return 0.0;
            }
            let wo = &other.w[v * bins..(v + 1) * bins];
            let mut acc = 0.0;
            for (i, &d) in dw.iter().enumerate() {
                let t: f64 = if transpose {
                    (0..bins).map(|j| g[j * bins + i] * wo[j]).sum()
                } else {
                    (0..bins).map(|j| g[i * bins + j] * wo[j]).sum()
                };
                acc += d * t;
            }
            acc * inv_n
        })
    };
    let df = grad_side(&pf, &pm, false);
    let dm = grad_side(&pm, &pf, true);
    (value, df, dm)
}

fn check(f: &Volume, m: &Volume, params: &MIParams) -> Result<()> {
    params.validate()?;
    if f.shape() != m.shape() {
        return invalid(format!("mi shape mismatch {:?} vs {:?}", f.shape(), m.shape()));
    }
    Ok(())
}

/// Mutual information in nats from a soft joint histogram.
pub fn mutual_information(f: &Volume, mw: &Volume, params: &MIParams) -> Result<f64> {
    check(f, mw, params)?;
    let range = resolve_range(params, f.data(), Some(mw.data()))?;
    Ok(mi_raw(f.data(), mw.data(), range, params))
}

pub fn mutual_information_grad(f: &Volume, mw: &Volume, params: &MIParams) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check(f, mw, params)?;
    let range = resolve_range(params, f.data(), Some(mw.data()))?;
    Ok(mi_raw_grad(f.data(), mw.data(), range, params))
}

/// Entropy in nats of the soft marginal histogram of `f`.
pub fn soft_entropy(f: &Volume, params: &MIParams) -> Result<f64> {
    params.validate()?;
    let (lo, hi) = resolve_range(params, f.data(), None)?;
    let pf = parzen(f.data(), lo, hi, params.bins, params.kernel_bandwidth, false);
    let n = f.len();
    let mut h = vec![0.0; params.bins];
    for v in 0..n {
        for (k, slot) in h.iter_mut().enumerate() {
            *slot += pf.w[v * params.bins + k];
        }
    }
    Ok(h.iter()
        .map(|&c| c / n as f64)
        .filter(|&p| p > P_FLOOR)
        .map(|p| -p * p.ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random::<f64>()).collect()
    }

    #[test]
    fn symmetric() {
        let a = Volume::from_data([6, 6, 6], noise(1, 216)).unwrap();
        let b = Volume::from_data([6, 6, 6], noise(2, 216)).unwrap();
        let p = MIParams::default();
        assert_eq!(
            mutual_information(&a, &b, &p).unwrap(),
            mutual_information(&b, &a, &p).unwrap()
        );
    }

    #[test]
    fn independent_noise_has_low_mi() {
        let a = Volume::from_data([32; 3], noise(3, 32768)).unwrap();
        let b = Volume::from_data([32; 3], noise(4, 32768)).unwrap();
        let mi = mutual_information(&a, &b, &MIParams::default()).unwrap();
        assert!(mi >= -1e-9 && mi < 0.05, "mi = {mi}");
    }

    #[test]
    fn self_information_hard_limit_is_entropy() {
        // intensities on bin centres with a narrow kernel make the soft
        // histogram effectively hard, where I(f, f) = H(f)
        let bins = 8;
        let data: Vec<f64> = noise(5, 512)
            .into_iter()
            .map(|u| ((u * bins as f64).floor() + 0.5) / bins as f64)
            .collect();
        let f = Volume::from_data([8; 3], data).unwrap();
        let p = MIParams { bins, kernel_bandwidth: 0.05 / bins as f64, intensity_range: Some([0.0, 1.0]) };
        let mi = mutual_information(&f, &f, &p).unwrap();
        let h = soft_entropy(&f, &p).unwrap();
        assert!((mi - h).abs() < 1e-6, "mi {mi} h {h}");
        // with the default kernel the soft estimate sits below the entropy
        let d = MIParams { intensity_range: Some([0.0, 1.0]), ..MIParams::default() };
        assert!(mutual_information(&f, &f, &d).unwrap() < soft_entropy(&f, &d).unwrap());
    }

    #[test]
    fn degenerate_range_rejected() {
        let a = Volume::from_data([2, 2, 2], vec![1.0; 8]).unwrap();
        // a flat image with an automatic range carries no information
        assert!(mutual_information(&a, &a, &MIParams::default()).unwrap().abs() < 1e-12);
        let p = MIParams { intensity_range: Some([1.0, 1.0]), ..MIParams::default() };
        assert!(p.validate().is_err());
    }
}
