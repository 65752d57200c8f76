use super::tensor::Tensor;
use crate::par;

/// Source indices and weights for doubling a length-`n` axis with
/// half-pixel-centre linear interpolation, clamped at the ends.
fn taps(n: usize) -> Vec<(usize, f32, usize, f32)> {
    (0..2 * n)
        .map(|i| {
            let j = i / 2;
            if i % 2 == 0 {
                if j == 0 {
                    (0, 1.0, 0, 0.0)
                } else {
                    (j - 1, 0.25, j, 0.75)
                }
            } else if j + 1 >= n {
                (j, 1.0, j, 0.0)
            } else {
                (j, 0.75, j + 1, 0.25)
            }
        })
        .collect()
}

/// Views a channels-last tensor as `[outer][n][inner]` for an axis.
fn layout(shape: [usize; 3], c: usize, axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (1, shape[0], shape[1] * shape[2] * c),
        1 => (shape[0], shape[1], shape[2] * c),
        _ => (shape[0] * shape[1], shape[2], c),
    }
}

fn up_axis(x: &Tensor, axis: usize) -> Tensor {
    let (_, n, inner) = layout(x.shape, x.channels, axis);
    let t = taps(n);
    let mut shape = x.shape;
    shape[axis] *= 2;
    let mut y = Tensor::zeros(shape, x.channels);
    par::for_each_chunk_mut(&mut y.data, 2 * n * inner, |o, chunk| {
        let src = &x.data[o * n * inner..(o + 1) * n * inner];
        for (i, &(j0, w0, j1, w1)) in t.iter().enumerate() {
            let dst = &mut chunk[i * inner..(i + 1) * inner];
            let a = &src[j0 * inner..(j0 + 1) * inner];
            let b = &src[j1 * inner..(j1 + 1) * inner];
            for ((d, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * p + w1 * q;
            }
        }
    });
    y
}

fn up_axis_backward(dy: &Tensor, axis: usize) -> Tensor {
    let mut shape = dy.shape;
    shape[axis] /= 2;
    let (_, n, inner) = layout(shape, dy.channels, axis);
    let t = taps(n);
    let mut dx = Tensor::zeros(shape, dy.channels);
    par::for_each_chunk_mut(&mut dx.data, n * inner, |o, chunk| {
        let src = &dy.data[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for (i, &(j0, w0, j1, w1)) in t.iter().enumerate() {
            let g = &src[i * inner..(i + 1) * inner];
            for (k, &v) in g.iter().enumerate() {
                chunk[j0 * inner + k] += w0 * v;
            }
            if w1 != 0.0 {
                for (k, &v) in g.iter().enumerate() {
                    chunk[j1 * inner + k] += w1 * v;
                }
            }
        }
    });
    dx
}

/// Separable trilinear upsampling by a factor of two on every axis.
pub fn upsample2(x: &Tensor) -> Tensor {
    up_axis(&up_axis(&up_axis(x, 0), 1), 2)
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    up_axis_backward(&up_axis_backward(&up_axis_backward(dy, 2), 1), 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::new([2, 3, 4], 2, vec![1.5; 48]).unwrap();
        let y = upsample2(&x);
        assert_eq!(y.shape, [4, 6, 8]);
        assert!(y.data.iter().all(|&v| (v - 1.5).abs() < 1e-6));
    }

    #[test]
    fn linear_ramp_interior() {
        let x = Tensor::new([4, 1, 1], 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample2(&x);
        assert_eq!(y.shape, [8, 2, 2]);
        let along_x: Vec<f32> = y.data.iter().step_by(4).copied().collect();
        assert_eq!(along_x, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::new([2, 3, 2], 2, (0..24).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let y = upsample2(&x);
        let dy = Tensor::new(y.shape, 2, (0..y.data.len()).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
        let dx = upsample2_backward(&dy);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
