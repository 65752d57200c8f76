use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par;
use crate::volume::{voxel_count, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CCParams {
    /// Window half-width; the window side is `2 * window_radius + 1`.
    pub window_radius: usize,
    pub epsilon: f64,
}

impl Default for CCParams {
    fn default() -> Self {
        Self { window_radius: 4, epsilon: 1e-5 }
    }
}

impl CCParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 {
            return invalid("cc window_radius must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return invalid("cc epsilon must be positive");
        }
        Ok(())
    }
}

/// Sum over the cube `[p - r, p + r]^3` for every voxel `p`, treating
/// out-of-grid samples as zero. Separable, one prefix-sum pass per axis.
pub fn box_sum(data: &[f64], shape: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        cur = box_sum_axis(&cur, shape, strides, axis, r);
    }
    cur
}

fn box_sum_axis(data: &[f64], shape: [usize; 3], strides: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let n = shape[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; data.len()];
    // each x-slab is independent except when summing along x itself
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (o0, o1) = (others[0], others[1]);
    let lines = shape[o0] * shape[o1];
    let starts: Vec<usize> = (0..lines)
        .map(|l| (l / shape[o1]) * strides[o0] + (l % shape[o1]) * strides[o1])
        .collect();
    let sums = par::map(lines, |l| {
        let start = starts[l];
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + data[start + i * stride];
        }
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(n);
                prefix[hi] - prefix[lo]
            })
            .collect::<Vec<f64>>()
    });
    for (l, line) in sums.into_iter().enumerate() {
        let start = starts[l];
        for (i, v) in line.into_iter().enumerate() {
            out[start + i * stride] = v;
        }
    }
    out
}

struct WindowStats {
    s_i: Vec<f64>,
    s_j: Vec<f64>,
    s_ii: Vec<f64>,
    s_jj: Vec<f64>,
    s_ij: Vec<f64>,
    /// In-grid voxels per window.
    n: Vec<f64>,
}

fn window_counts(shape: [usize; 3], r: usize) -> Vec<f64> {
    let axis = |len: usize| -> Vec<f64> {
        (0..len).map(|i| ((i + r + 1).min(len) - i.saturating_sub(r)) as f64).collect()
    };
    let (cx, cy, cz) = (axis(shape[0]), axis(shape[1]), axis(shape[2]));
    let mut out = Vec::with_capacity(voxel_count(shape));
    for a in &cx {
        for b in &cy {
            for c in &cz {
                out.push(a * b * c);
            }
        }
    }
    out
}

fn window_stats(f: &[f64], m: &[f64], shape: [usize; 3], r: usize) -> WindowStats {
    let ii: Vec<f64> = f.iter().map(|v| v * v).collect();
    let jj: Vec<f64> = m.iter().map(|v| v * v).collect();
    let ij: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    WindowStats {
        s_i: box_sum(f, shape, r),
        s_j: box_sum(m, shape, r),
        s_ii: box_sum(&ii, shape, r),
        s_jj: box_sum(&jj, shape, r),
        s_ij: box_sum(&ij, shape, r),
        n: window_counts(shape, r),
    }
}

fn check(f: &Volume, m: &Volume, params: &CCParams) -> Result<()> {
    params.validate()?;
    if f.shape() != m.shape() {
        return invalid(format!("cc shape mismatch {:?} vs {:?}", f.shape(), m.shape()));
    }
    Ok(())
}

pub(crate) fn cc_raw(f: &[f64], m: &[f64], shape: [usize; 3], params: &CCParams) -> f64 {
    let st = window_stats(f, m, shape, params.window_radius);
    par::sum_f64(voxel_count(shape), |p| {
        let n = st.n[p];
        let cross = st.s_ij[p] - st.s_i[p] * st.s_j[p] / n;
        let var_i = st.s_ii[p] - st.s_i[p] * st.s_i[p] / n;
        let var_j = st.s_jj[p] - st.s_j[p] * st.s_j[p] / n;
        cross * cross / (var_i * var_j + params.epsilon)
    })
}

pub(crate) fn cc_raw_grad(
    f: &[f64],
    m: &[f64],
    shape: [usize; 3],
    params: &CCParams,
) -> (f64, Vec<f64>, Vec<f64>) {
    let r = params.window_radius;
    let st = window_stats(f, m, shape, r);
    let count = voxel_count(shape);
    // per-window sensitivities with respect to the five box sums
    let coeffs = par::map(count, |p| {
        let n = st.n[p];
        let cross = st.s_ij[p] - st.s_i[p] * st.s_j[p] / n;
        let var_i = st.s_ii[p] - st.s_i[p] * st.s_i[p] / n;
        let var_j = st.s_jj[p] - st.s_j[p] * st.s_j[p] / n;
        let d = var_i * var_j + params.epsilon;
        let val = cross * cross / d;
        let a = 2.0 * cross / d;
        let b = -cross * cross * var_j / (d * d);
        let c = -cross * cross * var_i / (d * d);
        let c_i = -a * st.s_j[p] / n - 2.0 * b * st.s_i[p] / n;
        let c_j = -a * st.s_i[p] / n - 2.0 * c * st.s_j[p] / n;
        [val, c_i, c_j, b, c, a]
    });
    let value = {
        const BLOCK: usize = 4096;
        coeffs.chunks(BLOCK).map(|ch| ch.iter().map(|c| c[0]).sum::<f64>()).sum()
    };
    let field = |k: usize| -> Vec<f64> { box_sum(&coeffs.iter().map(|c| c[k]).collect::<Vec<_>>(), shape, r) };
    let (b_i, b_j, b_ii, b_jj, b_ij) = (field(1), field(2), field(3), field(4), field(5));
    let df = (0..count).map(|q| b_i[q] + 2.0 * f[q] * b_ii[q] + m[q] * b_ij[q]).collect();
    let dm = (0..count).map(|q| b_j[q] + 2.0 * m[q] * b_jj[q] + f[q] * b_ij[q]).collect();
    (value, df, dm)
}

/// Sum over voxels of the squared normalised correlation inside each local
/// window. Windows are truncated at the boundary: out-of-grid samples
/// contribute nothing and the means use the in-grid count.
pub fn local_cross_correlation(f: &Volume, mw: &Volume, params: &CCParams) -> Result<f64> {
    check(f, mw, params)?;
    Ok(cc_raw(f.data(), mw.data(), f.shape(), params))
}

/// Value and gradients `(d/df, d/dmw)`.
pub fn local_cross_correlation_grad(
    f: &Volume,
    mw: &Volume,
    params: &CCParams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check(f, mw, params)?;
    Ok(cc_raw_grad(f.data(), mw.data(), f.shape(), params))
}
