use std::borrow::Cow;

use rand::Rng;

use super::gemm::sgemm;
use super::tensor::Tensor;
use crate::par;

/// 3D convolution with cubic kernel (1 or 3), stride 1 or 2 and "same"
/// zero padding of `kernel / 2`. Weights are `[out][tap][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(c: &Conv3d) -> Self {
        Self { weight: vec![0.0; c.weight.len()], bias: vec![0.0; c.bias.len()] }
    }
}

impl Conv3d {
    /// He-uniform weights for a leaky rectifier, zero bias.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(in_c, out_c, kernel, stride);
        let fan_in = (kernel.pow(3) * in_c) as f64;
        let bound = (6.0 / ((1.0 + super::LEAKY_SLOPE as f64 * super::LEAKY_SLOPE as f64) * fan_in)).sqrt();
        for w in c.weight.iter_mut() {
            *w = rng.random_range(-bound..bound) as f32;
        }
        c
    }

    pub fn zeros(in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            weight: vec![0.0; out_c * kernel.pow(3) * in_c],
            bias: vec![0.0; out_c],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    fn cols_width(&self) -> usize {
        self.taps() * self.in_c
    }

    pub fn output_shape(&self, s: [usize; 3]) -> [usize; 3] {
        let pad = self.kernel / 2;
        s.map(|d| (d + 2 * pad - self.kernel) / self.stride + 1)
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Patch rows `[tap * in + ci]` for every output voxel in x-slab `ox`.
    fn im2col_slab(&self, x: &Tensor, out: [usize; 3], ox: usize, rows: &mut [f32]) {
        let k = self.cols_width();
        let ic = self.in_c;
        let s = x.shape;
        let pad = (self.kernel / 2) as i64;
        let ks = self.kernel as i64;
        rows.fill(0.0);
        for oy in 0..out[1] {
            for oz in 0..out[2] {
                let row = &mut rows[(oy * out[2] + oz) * k..][..k];
                let mut tap = 0;
                for tx in 0..ks {
                    let ix = (ox * self.stride) as i64 - pad + tx;
                    for ty in 0..ks {
                        let iy = (oy * self.stride) as i64 - pad + ty;
                        for tz in 0..ks {
                            let iz = (oz * self.stride) as i64 - pad + tz;
                            if ix >= 0
                                && iy >= 0
                                && iz >= 0
                                && (ix as usize) < s[0]
                                && (iy as usize) < s[1]
                                && (iz as usize) < s[2]
                            {
                                let v = ((ix as usize * s[1] + iy as usize) * s[2] + iz as usize) * ic;
                                row[tap * ic..(tap + 1) * ic].copy_from_slice(&x.data[v..v + ic]);
                            }
                            tap += 1;
                        }
                    }
                }
            }
        }
    }

    /// Patch rows for slab `ox`, borrowed directly for pointwise convolutions.
    fn slab_rows<'a>(&self, x: &'a Tensor, out: [usize; 3], ox: usize) -> Cow<'a, [f32]> {
        let rows = out[1] * out[2];
        if self.pointwise() {
            return Cow::Borrowed(&x.data[ox * rows * self.in_c..][..rows * self.in_c]);
        }
        let mut buf = vec![0.0f32; rows * self.cols_width()];
        self.im2col_slab(x, out, ox, &mut buf);
        Cow::Owned(buf)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_c, "conv input channel mismatch");
        let out_shape = self.output_shape(x.shape);
        let k = self.cols_width();
        let oc = self.out_c;
        let rows = out_shape[1] * out_shape[2];
        let mut y = Tensor::zeros(out_shape, oc);
        par::for_each_chunk_mut(&mut y.data, rows * oc, |ox, ych| {
            let a = self.slab_rows(x, out_shape, ox);
            sgemm(rows, k, oc, &a, (k, 1), &self.weight, (1, k), 0.0, ych, (oc, 1));
            for row in ych.chunks_exact_mut(oc) {
                for (v, b) in row.iter_mut().zip(&self.bias) {
                    *v += b;
                }
            }
        });
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `d loss / d x`
    /// when `need_input_grad` is set.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut ConvGrad, need_input_grad: bool) -> Option<Tensor> {
        let out_shape = self.output_shape(x.shape);
        assert_eq!(dy.shape, out_shape);
        let k = self.cols_width();
        let oc = self.out_c;
        let rows = out_shape[1] * out_shape[2];

        // per-slab partial sums of dW = dy^T cols and db, combined in order
        let partial = par::map(out_shape[0], |ox| {
            let cols = self.slab_rows(x, out_shape, ox);
            let d = &dy.data[ox * rows * oc..][..rows * oc];
            let mut w = vec![0.0f32; oc * k];
            sgemm(oc, rows, k, d, (1, oc), &cols, (k, 1), 0.0, &mut w, (k, 1));
            let mut b = vec![0.0f64; oc];
            for row in d.chunks_exact(oc) {
                for (a, &g) in b.iter_mut().zip(row) {
                    *a += g as f64;
                }
            }
            (w, b)
        });
        let mut bsum = vec![0.0f64; oc];
        for (w, b) in partial {
            for (g, v) in grad.weight.iter_mut().zip(w) {
                *g += v;
            }
            for (a, v) in bsum.iter_mut().zip(b) {
                *a += v;
            }
        }
        for (g, s) in grad.bias.iter_mut().zip(bsum) {
            *g += s as f32;
        }

        if !need_input_grad {
            return None;
        }
        Some(self.input_grad(dy, x.shape, out_shape))
    }

    /// `dx[q] = sum over (o, tap) of dy[src(q, tap)][o] * W[o][tap]`, where
    /// `src(q, tap)` is the output voxel that read `q` through `tap`. The
    /// gathered `dy` rows are laid out `[o][tap]` so `W` serves as the
    /// right-hand matrix unchanged.
    fn input_grad(&self, dy: &Tensor, in_shape: [usize; 3], out_shape: [usize; 3]) -> Tensor {
        let ic = self.in_c;
        let oc = self.out_c;
        let taps = self.taps();
        let kk = oc * taps;
        let mut dx = Tensor::zeros(in_shape, ic);
        let rows = in_shape[1] * in_shape[2];
        if self.pointwise() {
            par::for_each_chunk_mut(&mut dx.data, rows * ic, |qx, ch| {
                let d = &dy.data[qx * rows * oc..][..rows * oc];
                sgemm(rows, oc, ic, d, (oc, 1), &self.weight, (ic, 1), 0.0, ch, (ic, 1));
            });
            return dx;
        }
        let pad = self.kernel / 2;
        let stride = self.stride;
        let ks = self.kernel;
        // per axis and input index: output index reached through each tap
        let sources = |n_in: usize, n_out: usize| -> Vec<Vec<Option<usize>>> {
            (0..n_in)
                .map(|q| {
                    (0..ks)
                        .map(|t| {
                            let num = q + pad;
                            if num < t || (num - t) % stride != 0 {
                                return None;
                            }
                            let o = (num - t) / stride;
                            (o < n_out).then_some(o)
                        })
                        .collect()
                })
                .collect()
        };
        let sx = sources(in_shape[0], out_shape[0]);
        let sy = sources(in_shape[1], out_shape[1]);
        let sz = sources(in_shape[2], out_shape[2]);
        par::for_each_chunk_mut(&mut dx.data, rows * ic, |qx, ch| {
            let mut g = vec![0.0f32; rows * kk];
            for qy in 0..in_shape[1] {
                for qz in 0..in_shape[2] {
                    let row = &mut g[(qy * in_shape[2] + qz) * kk..][..kk];
                    for tx in 0..ks {
                        let Some(ox) = sx[qx][tx] else { continue };
                        for ty in 0..ks {
                            let Some(oy) = sy[qy][ty] else { continue };
                            for tz in 0..ks {
                                let Some(oz) = sz[qz][tz] else { continue };
                                let tap = (tx * ks + ty) * ks + tz;
                                let src = &dy.data[((ox * out_shape[1] + oy) * out_shape[2] + oz) * oc..][..oc];
                                for (o, &v) in src.iter().enumerate() {
                                    row[o * taps + tap] = v;
                                }
                            }
                        }
                    }
                }
            }
            sgemm(rows, kk, ic, &g, (kk, 1), &self.weight, (ic, 1), 0.0, ch, (ic, 1));
        });
        dx
    }
}
