use crate::error::{invalid, Result};
use crate::volume::{voxel_count, Volume};

/// Single-sample channels-last activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 3], channels: usize) -> Self {
        Self { shape, channels, data: vec![0.0; voxel_count(shape) * channels] }
    }

    pub fn new(shape: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(shape) * channels {
            return invalid(format!(
                "tensor data length {} does not match {shape:?} x {channels}",
                data.len()
            ));
        }
        Ok(Self { shape, channels, data })
    }

    pub fn from_volume(v: &Volume) -> Self {
        Self { shape: v.shape(), channels: 1, data: v.data().iter().map(|&x| x as f32).collect() }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return invalid("concat: spatial shapes differ");
        }
        let c = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.voxels() * c);
        for (ra, rb) in a.data.chunks_exact(a.channels).zip(b.data.chunks_exact(b.channels)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        Ok(Tensor { shape: a.shape, channels: c, data })
    }

    /// Inverse of [`Tensor::concat`]: the first `first` channels and the rest.
    pub fn split(&self, first: usize) -> (Tensor, Tensor) {
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.voxels() * first);
        let mut b = Vec::with_capacity(self.voxels() * rest);
        for row in self.data.chunks_exact(self.channels) {
            a.extend_from_slice(&row[..first]);
            b.extend_from_slice(&row[first..]);
        }
        (
            Tensor { shape: self.shape, channels: first, data: a },
            Tensor { shape: self.shape, channels: rest, data: b },
        )
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
