use super::tensor::Tensor;

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f32 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// What [`instance_norm`] keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel standardisation over the spatial grid (no affine parameters).
pub fn instance_norm(x: &Tensor) -> NormCache {
    let c = x.channels;
    let n = x.voxels() as f64;
    let mut mean = vec![0.0f64; c];
    for row in x.data.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for row in x.data.chunks_exact(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + NORM_EPS).sqrt()).collect();
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = ((row[ch] as f64 - mean[ch]) * inv_std[ch]) as f32;
        }
    }
    NormCache { normalized: out, inv_std: inv_std.iter().map(|&v| v as f32).collect() }
}

/// `dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))` per channel.
pub fn instance_norm_backward(cache: &NormCache, dy: &Tensor) -> Tensor {
    let c = dy.channels;
    let n = dy.voxels() as f64;
    let xh = &cache.normalized;
    let mut s_dy = vec![0.0f64; c];
    let mut s_dyx = vec![0.0f64; c];
    for (g, h) in dy.data.chunks_exact(c).zip(xh.data.chunks_exact(c)) {
        for ch in 0..c {
            s_dy[ch] += g[ch] as f64;
            s_dyx[ch] += g[ch] as f64 * h[ch] as f64;
        }
    }
    let mut dx = dy.clone();
    for (row, h) in dx.data.chunks_exact_mut(c).zip(xh.data.chunks_exact(c)) {
        for ch in 0..c {
            let v = row[ch] as f64 - s_dy[ch] / n - h[ch] as f64 * s_dyx[ch] / n;
            row[ch] = (v * cache.inv_std[ch] as f64) as f32;
        }
    }
    dx
}

pub(crate) fn leaky_relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE
        }
    });
    y
}

/// Backward of the leaky rectifier given its input.
pub(crate) fn leaky_relu_backward(input: &Tensor, dy: &mut Tensor) {
    for (g, &x) in dy.data.iter_mut().zip(&input.data) {
        if x < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalised_channels_have_zero_mean_unit_var() {
        let data: Vec<f32> = (0..64 * 2).map(|i| ((i * 7) % 13) as f32 * 0.3 + (i % 2) as f32 * 5.0).collect();
        let x = Tensor::new([4, 4, 4], 2, data).unwrap();
        let c = instance_norm(&x);
        for ch in 0..2 {
            let v = c.normalized.channel(ch);
            let m = v.iter().map(|&a| a as f64).sum::<f64>() / 64.0;
            let s = v.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-6);
            assert!((s - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = 27;
        let data: Vec<f32> = (0..n).map(|i| ((i * 5) % 11) as f32 * 0.2 - 1.0).collect();
        let x = Tensor::new([3, 3, 3], 1, data).unwrap();
        let w: Vec<f32> = (0..n).map(|i| ((i * 3) % 7) as f32 * 0.1 - 0.3).collect();
        let loss = |t: &Tensor| -> f64 {
            instance_norm(t).normalized.data.iter().zip(&w).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let cache = instance_norm(&x);
        let dy = Tensor::new([3, 3, 3], 1, w.clone()).unwrap();
        let dx = instance_norm_backward(&cache, &dy);
        for i in [0, 5, 13, 26] {
            let h = 1e-2f32;
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-3, "{fd} vs {}", dx.data[i]);
        }
    }
}
