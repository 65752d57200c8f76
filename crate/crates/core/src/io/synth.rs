//! Synthetic cases with a known smooth deformation.
//!
//! The fixed volume is a sum of Gaussian blobs plus mild noise. A random
//! vector field `u` is smoothed and scaled to the requested maximum
//! magnitude. Moving landmarks are `x_f + u(x_f)`, and the moving volume is
//! resampled so that the content found at `x_f` in the fixed volume sits at
//! `x_f + u(x_f)`; registering moving onto fixed therefore recovers `u`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::landmarks::write_landmarks;
use super::manifest::{write_manifest, CaseRecord};
use super::nifti::{write_field, write_volume};
use crate::error::{invalid, Result};
use crate::volume::{map_landmark, voxel_count, warp_volume, DisplacementField, LandmarkSet, Padding, Point, Volume, DEFAULT_INVERSION_ITERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: [usize; 3],
    pub n_landmarks: usize,
    pub warp_magnitude_vox: f64,
    pub warp_smoothness_sigma: f64,
    pub n_blobs: usize,
    pub seed: u64,
    pub n_cases: usize,
    pub noise_std: f64,
    pub spacing: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            n_landmarks: 8,
            warp_magnitude_vox: 3.0,
            warp_smoothness_sigma: 4.0,
            n_blobs: 16,
            seed: 0,
            n_cases: 1,
            noise_std: 0.01,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0 || s % 4 != 0) {
            return invalid(format!("synthetic shape {:?} must be divisible by 4 on every axis", self.shape));
        }
        let min = *self.shape.iter().min().expect("three axes") as f64;
        if !(self.warp_magnitude_vox >= 0.0 && self.warp_magnitude_vox < min / 4.0) {
            return invalid(format!(
                "warp_magnitude_vox must lie in [0, min(shape)/4 = {}), got {}",
                min / 4.0,
                self.warp_magnitude_vox
            ));
        }
        if !(self.warp_smoothness_sigma > 0.0) {
            return invalid("warp_smoothness_sigma must be positive");
        }
        if self.n_landmarks == 0 || self.n_landmarks > self.n_blobs {
            return invalid(format!(
                "n_landmarks must lie in [1, n_blobs = {}], got {}",
                self.n_blobs, self.n_landmarks
            ));
        }
        if self.n_cases == 0 {
            return invalid("n_cases must be >= 1");
        }
        if !(self.noise_std >= 0.0) {
            return invalid("noise_std must be >= 0");
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return invalid("spacing must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub case_id: String,
    pub fixed: Volume,
    pub moving: Volume,
    /// World frame.
    pub fixed_landmarks: LandmarkSet,
    /// World frame.
    pub moving_landmarks: LandmarkSet,
    pub truth_field: DisplacementField,
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn place_blobs(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let s = spec.shape;
    let margin = (spec.warp_magnitude_vox.ceil() + 3.0).min(s.iter().min().copied().unwrap_or(1) as f64 / 2.0 - 1.0);
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.n_blobs);
    for i in 0..spec.n_blobs {
        let landmark = i < spec.n_landmarks;
        let m = if landmark { margin } else { 2.0 };
        let mut center = [0.0; 3];
        // keep landmark blobs apart so each peak stays distinctive
        for attempt in 0..200 {
            center = std::array::from_fn(|a| uniform(rng, m.max(0.0), s[a] as f64 - 1.0 - m.max(0.0)));
            let clear = blobs[..i.min(spec.n_landmarks)].iter().all(|b| {
                let d2: f64 = (0..3).map(|a| (b.center[a] - center[a]).powi(2)).sum();
                d2 >= 25.0
            });
            if !landmark || clear || attempt == 199 {
                break;
            }
        }
        let sigma = if landmark { uniform(rng, 1.5, 2.0) } else { uniform(rng, 1.5, 3.0) };
        let amplitude = uniform(rng, 0.5, 1.0);
        blobs.push(Blob { center, sigma, amplitude });
    }
    blobs
}

/// Separable Gaussian smoothing of one scalar component with clamped borders.
fn gaussian_smooth(data: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut out = vec![0.0; cur.len()];
        let n = shape[axis] as i64;
        for (idx, o) in out.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % shape[axis];
            let base = idx - pos * strides[axis];
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = (pos as i64 + t as i64 - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + q * strides[axis]];
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

fn random_field(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<DisplacementField> {
    if spec.warp_magnitude_vox == 0.0 {
        return DisplacementField::zeros(spec.shape);
    }
    // noise on a grid padded by the kernel radius, so the cropped field is
    // stationary rather than inflated next to the borders
    let pad = (3.0 * spec.warp_smoothness_sigma).ceil() as usize;
    let big = spec.shape.map(|s| s + 2 * pad);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let raw: Vec<f64> = (0..voxel_count(big)).map(|_| normal.sample(rng)).collect();
            gaussian_smooth(&raw, big, spec.warp_smoothness_sigma)
        })
        .collect();
    let s = spec.shape;
    let field = DisplacementField::from_fn(s, |x, y, z| {
        let i = ((x + pad) * big[1] + y + pad) * big[2] + z + pad;
        [comps[0][i], comps[1][i], comps[2][i]]
    })?;
    let max = field.max_magnitude();
    field.scaled(spec.warp_magnitude_vox / max)
}

/// Generates case `index` of `spec`; each index draws from its own stream.
pub fn synthesize_case_index(spec: &SyntheticSpec, index: usize) -> Result<SyntheticCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.shape;
    let blobs = place_blobs(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(voxel_count(s));
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                let p = [x as f64, y as f64, z as f64];
                let mut v = 0.0;
                for b in &blobs {
                    let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                    v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                data.push(v);
            }
        }
    }
    if spec.noise_std > 0.0 {
        data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    data.iter_mut().for_each(|v| *v = (*v - lo) / span);
    let fixed = Volume::new(s, spec.spacing, [0.0; 3], data)?;

    let truth = random_field(spec, &mut rng)?;
    // inverse displacement on the moving grid: v(p) = q - p where q + u(q) = p
    let inverse = DisplacementField::from_fn(s, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        match map_landmark(Point::voxel(p), &truth, DEFAULT_INVERSION_ITERS) {
            Ok(q) => std::array::from_fn(|a| q.coords[a] - p[a]),
            Err(_) => [0.0; 3],
        }
    })?;
    let moving = warp_volume(&fixed, &inverse)?;

    let case_id = format!("case{index:03}");
    let fixed_vox: Vec<(u32, Point)> =
        blobs[..spec.n_landmarks].iter().enumerate().map(|(i, b)| (i as u32 + 1, Point::voxel(b.center))).collect();
    let moving_vox: Vec<(u32, Point)> = fixed_vox
        .iter()
        .map(|&(id, p)| {
            let u = truth.sample(p.coords, Padding::Border);
            (id, Point::voxel(std::array::from_fn(|a| p.coords[a] + u[a])))
        })
        .collect();
    let fixed_landmarks = LandmarkSet::new(case_id.clone(), fixed_vox)?.to_world(&fixed);
    let moving_landmarks = LandmarkSet::new(case_id.clone(), moving_vox)?.to_world(&moving);
    Ok(SyntheticCase { case_id, fixed, moving, fixed_landmarks, moving_landmarks, truth_field: truth })
}

/// The first case of `spec`.
pub fn synthesize_case(spec: &SyntheticSpec) -> Result<SyntheticCase> {
    synthesize_case_index(spec, 0)
}

pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Vec<SyntheticCase>> {
    (0..spec.n_cases).map(|i| synthesize_case_index(spec, i)).collect()
}

/// File names used for one case inside an output directory.
pub fn case_file_names(case_id: &str) -> [String; 5] {
    [
        format!("{case_id}_fixed.nii.gz"),
        format!("{case_id}_moving.nii.gz"),
        format!("{case_id}_fixed_landmarks.csv"),
        format!("{case_id}_moving_landmarks.csv"),
        format!("{case_id}_truth_field.nii.gz"),
    ]
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes every case plus `manifest.json` (with relative paths) into `dir`.
pub fn write_dataset(cases: &[SyntheticCase], dir: &Path) -> Result<Vec<CaseRecord>> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(cases.len());
    for c in cases {
        let [f, m, fl, ml, t] = case_file_names(&c.case_id);
        write_volume(&c.fixed, &dir.join(&f))?;
        write_volume(&c.moving, &dir.join(&m))?;
        write_landmarks(&c.fixed_landmarks, &dir.join(&fl))?;
        write_landmarks(&c.moving_landmarks, &dir.join(&ml))?;
        write_field(&c.truth_field, &dir.join(&t), c.fixed.spacing(), c.fixed.origin())?;
        records.push(CaseRecord {
            case_id: c.case_id.clone(),
            fixed_path: PathBuf::from(f),
            moving_path: PathBuf::from(m),
            fixed_landmarks_path: PathBuf::from(fl),
            moving_landmarks_path: PathBuf::from(ml),
            truth_field_path: Some(PathBuf::from(t)),
        });
    }
    write_manifest(&records, &dir.join(MANIFEST_NAME))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { shape: [16, 16, 16], n_landmarks: 4, n_blobs: 6, warp_magnitude_vox: 2.0, warp_smoothness_sigma: 3.0, ..Default::default() }
    }

    #[test]
    fn zero_warp_keeps_moving_equal() {
        let c = synthesize_case(&SyntheticSpec { warp_magnitude_vox: 0.0, ..small() }).unwrap();
        assert_eq!(c.fixed, c.moving);
        assert_eq!(c.fixed_landmarks.entries(), c.moving_landmarks.entries());
    }

    #[test]
    fn moving_landmarks_follow_truth() {
        let c = synthesize_case(&small()).unwrap();
        assert!((c.truth_field.max_magnitude() - 2.0).abs() < 1e-9);
        for ((_, f), (_, m)) in c.fixed_landmarks.entries().iter().zip(c.moving_landmarks.entries()) {
            let u = c.truth_field.sample(f.coords, Padding::Border);
            for a in 0..3 {
                assert!((m.coords[a] - (f.coords[a] + u[a])).abs() < 1e-6);
            }
        }
        let (lo, hi) = c.fixed.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(synthesize_case(&small()).unwrap(), synthesize_case(&small()).unwrap());
        let other = synthesize_case(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(other.fixed, synthesize_case(&small()).unwrap().fixed);
    }

    #[test]
    fn validation() {
        assert!(SyntheticSpec { shape: [30, 32, 32], ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { warp_magnitude_vox: 8.0, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { n_landmarks: 20, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec::default().validate().is_ok());
    }
}
