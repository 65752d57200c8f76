//! Landmark patch masks used as weak segmentation targets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{linear_index, voxel_count, Frame, LandmarkSet, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiMaskSpec {
    /// Side of the cube painted around each landmark; must be odd.
    pub patch_size: usize,
}

impl Default for RoiMaskSpec {
    fn default() -> Self {
        Self { patch_size: 9 }
    }
}

impl RoiMaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return invalid(format!("roi patch_size must be odd and >= 1, got {}", self.patch_size));
        }
        Ok(())
    }
}

/// Binary mask with a `patch_size^3` cube of ones around every landmark,
/// centred on the nearest voxel and clipped to the grid.
pub fn landmarks_to_mask(lms: &LandmarkSet, shape: [usize; 3], spec: &RoiMaskSpec) -> Result<Volume> {
    spec.validate()?;
    if lms.frame() != Frame::Voxel {
        return invalid("landmarks_to_mask expects voxel-frame landmarks");
    }
    let mut data = vec![0.0; voxel_count(shape)];
    let half = (spec.patch_size / 2) as i64;
    for (_, p) in lms.entries() {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            // f64::round rounds half away from zero
            let c = p.coords[a].round();
            let l = (c - half as f64).max(0.0);
            let h = (c + half as f64).min(shape[a] as f64 - 1.0);
            if h < l {
                empty = true;
                break;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        if empty {
            continue;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    data[linear_index(shape, x, y, z)] = 1.0;
                }
            }
        }
    }
    Volume::from_data(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Point;

    fn set(points: &[[f64; 3]]) -> LandmarkSet {
        LandmarkSet::new(
            "t",
            points.iter().enumerate().map(|(i, &p)| (i as u32 + 1, Point::voxel(p))).collect(),
        )
        .unwrap()
    }

    fn ones(v: &Volume) -> usize {
        v.data().iter().filter(|&&x| x == 1.0).count()
    }

    #[test]
    fn centred_patch() {
        let m = landmarks_to_mask(&set(&[[15.0, 15.0, 15.0]]), [31; 3], &RoiMaskSpec::default()).unwrap();
        assert_eq!(ones(&m), 729);
        assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn corner_patch_is_clipped() {
        let m = landmarks_to_mask(&set(&[[0.0, 0.0, 0.0]]), [31; 3], &RoiMaskSpec::default()).unwrap();
        assert_eq!(ones(&m), 125);
    }

    #[test]
    fn overlapping_patches_union() {
        let m = landmarks_to_mask(&set(&[[12.0, 15.0, 15.0], [16.0, 15.0, 15.0]]), [31; 3], &RoiMaskSpec::default())
            .unwrap();
        assert_eq!(ones(&m), 9 * 9 * 13);
    }

    #[test]
    fn rounding_and_outside_points() {
        // 2.5 rounds to 3, -0.5 rounds to -1
        let m = landmarks_to_mask(&set(&[[2.5, 5.0, 5.0]]), [11; 3], &RoiMaskSpec { patch_size: 1 }).unwrap();
        assert_eq!(m.get(3, 5, 5), 1.0);
        let far = landmarks_to_mask(&set(&[[-40.0, 5.0, 5.0]]), [11; 3], &RoiMaskSpec::default()).unwrap();
        assert_eq!(ones(&far), 0);
        let edge = landmarks_to_mask(&set(&[[-0.5, 5.0, 5.0]]), [11; 3], &RoiMaskSpec::default()).unwrap();
        assert_eq!(ones(&edge), 4 * 81);
    }

    #[test]
    fn even_patch_rejected() {
        assert!(landmarks_to_mask(&set(&[[1.0; 3]]), [4; 3], &RoiMaskSpec { patch_size: 4 }).is_err());
    }
}
