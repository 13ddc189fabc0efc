//! Pixel-space volumes and ground-truth segmentations.
//!
//! A [`VolumeGrid`] is a short-axis stack: depth (slice) axis first, then
//! rows and columns. Values live in `[0, 1]`. Slices past the acquired depth
//! are padding and always carry the mean intensity of the real slices.

use ndarray::Array3;
use thiserror::Error;

/// Voxel spacing in millimetres along `[slice, row, col]`.
pub type Spacing = [f64; 3];

/// The full-scale target spacing: 1.8269 mm in-plane, 10 mm between slices.
pub const TARGET_SPACING: Spacing = [10.0, 1.8269, 1.8269];

/// Full-scale grid: 13 slices of 96 x 96.
pub const FULL_SCALE_DIMS: [usize; 3] = [13, 96, 96];

/// Segmentation label values.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LV: u8 = 1;
pub const LABEL_MYO: u8 = 2;
pub const LABEL_RV: u8 = 3;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("value {value} at {index:?} outside [0,1]")]
    OutOfRange { index: [usize; 3], value: f32 },
    #[error("pad mask length {mask} does not match depth {depth}")]
    PadMaskMismatch { mask: usize, depth: usize },
    #[error("volume has no real (non-padded) slices")]
    AllPadded,
    #[error("segmentation label {label} at {index:?} not in {{0,1,2,3}}")]
    BadLabel { index: [usize; 3], label: u8 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// A 3D image of reals in `[0, 1]` with spacing metadata and a per-slice
/// padding mask (`true` = real slice).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub data: Array3<f32>,
    pub spacing: Spacing,
    pub pad_mask: Vec<bool>,
}

impl VolumeGrid {
    /// Builds a grid from already-normalized data, enforcing the range and
    /// mean-padding invariants. Padded slices are overwritten with the mean
    /// of the real slices.
    pub fn new(data: Array3<f32>, spacing: Spacing, pad_mask: Vec<bool>) -> Result<Self, VolumeError> {
        let depth = data.shape()[0];
        if pad_mask.len() != depth {
            return Err(VolumeError::PadMaskMismatch { mask: pad_mask.len(), depth });
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(VolumeError::AllPadded);
        }
        let mut grid = Self { data, spacing, pad_mask };
        grid.check_range()?;
        grid.apply_mean_padding();
        Ok(grid)
    }

    /// Grid with every slice real.
    pub fn all_real(data: Array3<f32>, spacing: Spacing) -> Result<Self, VolumeError> {
        let depth = data.shape()[0];
        Self::new(data, spacing, vec![true; depth])
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Number of real (non-padded) slices.
    pub fn real_depth(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    fn check_range(&self) -> Result<(), VolumeError> {
        for ((d, y, x), &v) in self.data.indexed_iter() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(VolumeError::OutOfRange { index: [d, y, x], value: v });
            }
        }
        Ok(())
    }

    /// Mean intensity over real slices, accumulated in f64.
    pub fn real_mean(&self) -> f32 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (d, slice) in self.data.outer_iter().enumerate() {
            if self.pad_mask[d] {
                for &v in slice.iter() {
                    sum += v as f64;
                }
                n += slice.len();
            }
        }
        (sum / n as f64) as f32
    }

    /// Overwrites padded slices with the mean of the real slices.
    pub fn apply_mean_padding(&mut self) {
        let mean = self.real_mean();
        for (d, mut slice) in self.data.outer_iter_mut().enumerate() {
            if !self.pad_mask[d] {
                slice.fill(mean);
            }
        }
    }

    /// Checks every invariant; used by tests and at trust boundaries.
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.pad_mask.len() != self.depth() {
            return Err(VolumeError::PadMaskMismatch { mask: self.pad_mask.len(), depth: self.depth() });
        }
        if !self.pad_mask.iter().any(|&m| m) {
            return Err(VolumeError::AllPadded);
        }
        self.check_range()?;
        let mean = self.real_mean();
        for (d, slice) in self.data.outer_iter().enumerate() {
            if !self.pad_mask[d] {
                for &v in slice.iter() {
                    if (v - mean).abs() > 1e-6 {
                        return Err(VolumeError::ShapeMismatch(format!(
                            "padded slice {d} not constant at real mean: {v} vs {mean}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Integer label volume aligned with a [`VolumeGrid`].
///
/// Labels: 0 background, 1 LV cavity, 2 myocardium, 3 RV cavity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array3<u8>,
}

impl SegmentationMask {
    pub fn new(labels: Array3<u8>) -> Result<Self, VolumeError> {
        for ((d, y, x), &l) in labels.indexed_iter() {
            if l > LABEL_RV {
                return Err(VolumeError::BadLabel { index: [d, y, x], label: l });
            }
        }
        Ok(Self { labels })
    }

    pub fn depth(&self) -> usize {
        self.labels.shape()[0]
    }

    /// Voxel count for one label.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Slices that contain at least one non-background voxel.
    pub fn occupied_slices(&self) -> Vec<usize> {
        self.labels
            .outer_iter()
            .enumerate()
            .filter(|(_, s)| s.iter().any(|&l| l != LABEL_BACKGROUND))
            .map(|(d, _)| d)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mean_padding_fills_padded_slices() {
        let mut data = Array3::<f32>::zeros((3, 2, 2));
        data.slice_mut(ndarray::s![0, .., ..]).fill(0.2);
        data.slice_mut(ndarray::s![1, .., ..]).fill(0.6);
        let grid = VolumeGrid::new(data, TARGET_SPACING, vec![true, true, false]).unwrap();
        let mean = grid.data[[2, 0, 0]];
        assert!((mean - 0.4).abs() < 1e-6);
        grid.validate().unwrap();
    }

    #[test]
    fn out_of_range_rejected() {
        let mut data = Array3::<f32>::zeros((1, 2, 2));
        data[[0, 0, 0]] = 1.5;
        assert!(VolumeGrid::all_real(data, TARGET_SPACING).is_err());
    }

    #[test]
    fn bad_label_rejected() {
        let mut labels = Array3::<u8>::zeros((1, 2, 2));
        labels[[0, 1, 1]] = 4;
        assert!(SegmentationMask::new(labels).is_err());
    }
}
