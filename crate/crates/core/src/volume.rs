//! Grids, displacement fields, landmarks and the sampling primitives built on them.
//!
//! Voxels are indexed `(x, y, z)` with `z` varying fastest in memory. A
//! displacement field lives on the fixed grid in voxel units and defines the
//! map `p -> p + u(p)` into moving-volume coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;

/// How samples outside the grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Out-of-grid corners contribute 0.
    #[default]
    Zero,
    /// Out-of-grid corners are clamped to the nearest border voxel.
    Border,
}

#[inline]
pub(crate) fn linear_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

pub(crate) fn voxel_count(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return invalid(format!("shape {shape:?} has a zero extent"));
    }
    Ok(())
}

/// A 3D scalar grid with axis-aligned world geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return invalid(format!("spacing {spacing:?} must be positive and finite"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return invalid("origin must be finite");
        }
        if data.len() != voxel_count(shape) {
            return invalid(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("volume contains non-finite values");
        }
        Ok(Self { shape, spacing, origin, data })
    }

    /// Unit spacing, zero origin.
    pub fn from_data(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3], data)
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![0.0; voxel_count(shape)],
        })
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        check_shape(shape)?;
        let mut data = Vec::with_capacity(voxel_count(shape));
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_data(shape, data)
    }

    /// Same geometry as `self` with new voxel values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape, self.spacing, self.origin, data)
    }

    pub fn with_geometry(mut self, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let v = Self::new(self.shape, spacing, origin, std::mem::take(&mut self.data))?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn voxel_to_world(&self, p: Point) -> Point {
        voxel_world_convert(p, self, Frame::World)
    }

    pub fn world_to_voxel(&self, p: Point) -> Point {
        voxel_world_convert(p, self, Frame::Voxel)
    }
}

/// Coordinate frame of a [`Point`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Voxel,
    World,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub coords: [f64; 3],
    pub frame: Frame,
}

impl Point {
    pub fn voxel(coords: [f64; 3]) -> Self {
        Self { coords, frame: Frame::Voxel }
    }
    pub fn world(coords: [f64; 3]) -> Self {
        Self { coords, frame: Frame::World }
    }
    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Converts `p` into `target` frame using the axis-aligned geometry of `vol`
/// (`world = origin + voxel * spacing`). Points already in `target` are
/// returned unchanged.
pub fn voxel_world_convert(p: Point, vol: &Volume, target: Frame) -> Point {
    match (p.frame, target) {
        (Frame::Voxel, Frame::World) => {
            let c = std::array::from_fn(|a| vol.origin[a] + p.coords[a] * vol.spacing[a]);
            Point::world(c)
        }
        (Frame::World, Frame::Voxel) => {
            let c = std::array::from_fn(|a| (p.coords[a] - vol.origin[a]) / vol.spacing[a]);
            Point::voxel(c)
        }
        _ => p,
    }
}

/// Identified points of one case, ordered by insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub case_id: String,
    entries: Vec<(u32, Point)>,
}

impl LandmarkSet {
    pub fn new(case_id: impl Into<String>, entries: Vec<(u32, Point)>) -> Result<Self> {
        if entries.is_empty() {
            return invalid("landmark set must contain at least one landmark");
        }
        let mut ids: Vec<u32> = entries.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return invalid(format!("duplicate landmark id {}", w[0]));
        }
        let frame = entries[0].1.frame;
        for (id, p) in &entries {
            if !p.is_finite() {
                return invalid(format!("landmark {id} has non-finite coordinates"));
            }
            if p.frame != frame {
                return invalid("landmark set mixes voxel and world frames");
            }
        }
        Ok(Self { case_id: case_id.into(), entries })
    }

    pub fn entries(&self) -> &[(u32, Point)] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn frame(&self) -> Frame {
        self.entries[0].1.frame
    }
    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    /// Applies `f` to every point, keeping ids and order.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Result<Point>) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|&(id, p)| f(p).map(|q| (id, q)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.case_id.clone(), entries)
    }

    pub fn to_voxel(&self, vol: &Volume) -> Self {
        self.convert(vol, Frame::Voxel)
    }
    pub fn to_world(&self, vol: &Volume) -> Self {
        self.convert(vol, Frame::World)
    }
    fn convert(&self, vol: &Volume, target: Frame) -> Self {
        Self {
            case_id: self.case_id.clone(),
            entries: self
                .entries
                .iter()
                .map(|&(id, p)| (id, voxel_world_convert(p, vol, target)))
                .collect(),
        }
    }
}

/// Per-voxel displacement vectors in voxel units, stored interleaved
/// (`[ux, uy, uz]` per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != 3 * voxel_count(shape) {
            return invalid(format!(
                "field data length {} does not match 3 x {shape:?}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("displacement field contains non-finite values");
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self { shape, data: vec![0.0; 3 * voxel_count(shape)] })
    }

    pub fn constant(shape: [usize; 3], u: [f64; 3]) -> Result<Self> {
        check_shape(shape)?;
        let data = (0..voxel_count(shape)).flat_map(|_| u).collect();
        Self::new(shape, data)
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        check_shape(shape)?;
        let mut data = Vec::with_capacity(3 * voxel_count(shape));
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.extend_from_slice(&f(x, y, z));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = 3 * linear_index(self.shape, x, y, z);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One displacement component as a scalar grid.
    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.data.iter().skip(axis).step_by(3).copied().collect()
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|v| v * s).collect())
    }

    /// Largest Euclidean displacement over the grid.
    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks_exact(3)
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.voxels();
        self.data
            .chunks_exact(3)
            .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .sum::<f64>()
            / n as f64
    }

    /// Trilinear sample of all three components at a voxel-frame position.
    pub fn sample(&self, p: [f64; 3], padding: Padding) -> [f64; 3] {
        let mut out = [0.0; 3];
        for_each_corner(self.shape, p, padding, |idx, w| {
            for a in 0..3 {
                out[a] += w * self.data[3 * idx + a];
            }
        });
        out
    }
}

/// Calls `emit(linear_index, weight)` for each in-bounds trilinear corner of `p`.
#[inline]
fn for_each_corner(shape: [usize; 3], p: [f64; 3], padding: Padding, mut emit: impl FnMut(usize, f64)) {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut idx = [[0usize; 2]; 3];
    let mut wts = [[0.0f64; 2]; 3];
    for a in 0..3 {
        let n = shape[a] as i64;
        for c in 0..2 {
            let i = base[a] as i64 + c as i64;
            let w = if c == 0 { 1.0 - frac[a] } else { frac[a] };
            match padding {
                Padding::Zero => {
                    if i >= 0 && i < n {
                        idx[a][c] = i as usize;
                        wts[a][c] = w;
                    } else {
                        wts[a][c] = 0.0;
                    }
                }
                Padding::Border => {
                    idx[a][c] = i.clamp(0, n - 1) as usize;
                    wts[a][c] = w;
                }
            }
        }
    }
    for cx in 0..2 {
        if wts[0][cx] == 0.0 {
            continue;
        }
        for cy in 0..2 {
            let wxy = wts[0][cx] * wts[1][cy];
            if wxy == 0.0 {
                continue;
            }
            for cz in 0..2 {
                let w = wxy * wts[2][cz];
                if w == 0.0 {
                    continue;
                }
                emit(linear_index(shape, idx[0][cx], idx[1][cy], idx[2][cz]), w);
            }
        }
    }
}

#[inline]
pub(crate) fn sample_raw(data: &[f64], shape: [usize; 3], p: [f64; 3], padding: Padding) -> f64 {
    let mut acc = 0.0;
    for_each_corner(shape, p, padding, |i, w| acc += w * data[i]);
    acc
}

/// Trilinear sample and its derivative with respect to the sample position.
/// Uses the floor cell, so at integer coordinates this is the one-sided
/// derivative from the right.
#[inline]
pub(crate) fn sample_with_grad(
    data: &[f64],
    shape: [usize; 3],
    p: [f64; 3],
    padding: Padding,
) -> (f64, [f64; 3]) {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let fetch = |dx: i64, dy: i64, dz: i64| -> f64 {
        let mut ii = [0usize; 3];
        for (a, d) in [dx, dy, dz].into_iter().enumerate() {
            let i = base[a] as i64 + d;
            let n = shape[a] as i64;
            match padding {
                Padding::Zero => {
                    if i < 0 || i >= n {
                        return 0.0;
                    }
                    ii[a] = i as usize;
                }
                Padding::Border => ii[a] = i.clamp(0, n - 1) as usize,
            }
        }
        data[linear_index(shape, ii[0], ii[1], ii[2])]
    };
    let mut c = [[[0.0; 2]; 2]; 2];
    for (i, ci) in c.iter_mut().enumerate() {
        for (j, cij) in ci.iter_mut().enumerate() {
            for (k, v) in cij.iter_mut().enumerate() {
                *v = fetch(i as i64, j as i64, k as i64);
            }
        }
    }
    let [fx, fy, fz] = frac;
    let w = |f: f64, c: usize| if c == 0 { 1.0 - f } else { f };
    let dw = |c: usize| if c == 0 { -1.0 } else { 1.0 };
    let mut val = 0.0;
    let mut g = [0.0; 3];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let v = c[i][j][k];
                val += w(fx, i) * w(fy, j) * w(fz, k) * v;
                g[0] += dw(i) * w(fy, j) * w(fz, k) * v;
                g[1] += w(fx, i) * dw(j) * w(fz, k) * v;
                g[2] += w(fx, i) * w(fy, j) * dw(k) * v;
            }
        }
    }
    (val, g)
}

/// Trilinear interpolation of `vol` at a voxel-frame point with zero padding.
pub fn trilinear_sample(vol: &Volume, p: Point) -> Result<f64> {
    trilinear_sample_with(vol, p, Padding::Zero)
}

pub fn trilinear_sample_with(vol: &Volume, p: Point, padding: Padding) -> Result<f64> {
    if p.frame != Frame::Voxel {
        return invalid("trilinear_sample expects a voxel-frame point");
    }
    if !p.is_finite() {
        return invalid(format!("non-finite sample coordinates {:?}", p.coords));
    }
    Ok(sample_raw(&vol.data, vol.shape, p.coords, padding))
}

/// `output(p) = m(p + u(p))` on the field's grid, zero padded.
pub fn warp_volume(m: &Volume, field: &DisplacementField) -> Result<Volume> {
    warp_volume_with(m, field, Padding::Zero)
}

pub fn warp_volume_with(m: &Volume, field: &DisplacementField, padding: Padding) -> Result<Volume> {
    let data = warp_raw(m.data(), m.shape(), field, padding)?;
    Volume::new(field.shape, m.spacing, m.origin, data)
}

pub(crate) fn warp_raw(
    m: &[f64],
    m_shape: [usize; 3],
    field: &DisplacementField,
    padding: Padding,
) -> Result<Vec<f64>> {
    if m_shape != field.shape {
        return invalid(format!(
            "moving shape {m_shape:?} does not match field shape {:?}",
            field.shape
        ));
    }
    let shape = field.shape;
    let slab = shape[1] * shape[2];
    let mut out = vec![0.0; voxel_count(shape)];
    par::for_each_chunk_mut(&mut out, slab, |x, row| {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let u = field.get(x, y, z);
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                row[y * shape[2] + z] = sample_raw(m, m_shape, p, padding);
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`warp_volume_with`]: given `d loss / d output`, returns
/// `(d loss / d moving, d loss / d field)` with the field gradient interleaved.
pub fn warp_adjoint(
    m: &Volume,
    field: &DisplacementField,
    grad_out: &[f64],
    padding: Padding,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = field.shape;
    if m.shape != shape || grad_out.len() != voxel_count(shape) {
        return invalid("warp_adjoint: shape mismatch");
    }
    let slab = shape[1] * shape[2];
    let mut grad_field = vec![0.0; 3 * voxel_count(shape)];
    par::for_each_chunk_mut(&mut grad_field, 3 * slab, |x, row| {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let i = linear_index(shape, x, y, z);
                let go = grad_out[i];
                if go == 0.0 {
                    continue;
                }
                let u = field.get(x, y, z);
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                let (_, g) = sample_with_grad(&m.data, shape, p, padding);
                let o = 3 * (y * shape[2] + z);
                for a in 0..3 {
                    row[o + a] = go * g[a];
                }
            }
        }
    });
    // scatter into the moving volume; sequential to keep accumulation order fixed
    let mut grad_m = vec![0.0; voxel_count(shape)];
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let i = linear_index(shape, x, y, z);
                let go = grad_out[i];
                if go == 0.0 {
                    continue;
                }
                let u = field.get(x, y, z);
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                for_each_corner(shape, p, padding, |j, w| grad_m[j] += w * go);
            }
        }
    }
    Ok((grad_m, grad_field))
}

/// Default number of fixed-point iterations for [`map_landmark`].
pub const DEFAULT_INVERSION_ITERS: usize = 20;

/// Finds `q` with `q + u(q) = p_follow` by the fixed-point iteration
/// `q <- p_follow - u(q)`, starting at `p_follow`. The field is sampled
/// trilinearly with border clamping so points near the edge keep their
/// local displacement.
pub fn map_landmark(p_follow: Point, field: &DisplacementField, iters: usize) -> Result<Point> {
    if iters == 0 {
        return invalid("map_landmark needs at least one iteration");
    }
    if p_follow.frame != Frame::Voxel {
        return invalid("map_landmark expects a voxel-frame point");
    }
    if !p_follow.is_finite() {
        return invalid("map_landmark: non-finite input point");
    }
    let s = field.shape;
    let diag = ((s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) as f64).sqrt();
    let target = p_follow.coords;
    let mut q = target;
    for it in 0..iters {
        let u = field.sample(q, Padding::Border);
        q = [target[0] - u[0], target[1] - u[1], target[2] - u[2]];
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if !norm.is_finite() || norm > 10.0 * diag {
            return Err(Error::Numeric(format!(
                "landmark inversion diverged at iteration {it} (|q| = {norm:.3e})"
            )));
        }
    }
    Ok(Point::voxel(q))
}
