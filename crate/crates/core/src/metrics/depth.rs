//! Scale-aligned depth error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::PatchGrid;
use crate::mask::MergeMask;

/// Threshold of the δ accuracy: a pixel is an inlier when
/// `max(pred/gt, gt/pred) < DELTA_THRESHOLD`.
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels are valid when their depth is positive and finite.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::with_validity(height, width, values, valid)
    }

    pub fn with_validity(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != values.len() {
            return Err(Error::dim(format!(
                "depth map {height}x{width} needs {} values and flags, got {} and {}",
                height * width,
                values.len(),
                valid.len()
            )));
        }
        if values.iter().zip(&valid).any(|(v, &ok)| ok && !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain("valid depths must be positive and finite"));
        }
        Ok(Self { height, width, values, valid })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "depth maps {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub l1: f64,
    pub delta_1_25: f64,
    pub pixels: usize,
}

/// Least-squares scale `s` minimising `Σ (s·pred − gt)²` over jointly valid pixels.
pub fn align_scale(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    for i in 0..pred.values.len() {
        if pred.valid[i] && gt.valid[i] {
            num += gt.values[i] * pred.values[i];
            den += pred.values[i] * pred.values[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("no jointly valid pixels for scale alignment"));
    }
    Ok(num / den)
}

/// L1 and δ accuracy over valid pixels that are not excluded.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, exclude: Option<&[bool]>) -> Result<DepthScores> {
    pred.check_same_shape(gt)?;
    if let Some(ex) = exclude {
        if ex.len() != pred.values.len() {
            return Err(Error::dim(format!("exclusion mask has {} pixels, map has {}", ex.len(), pred.values.len())));
        }
    }
    let (mut l1, mut inliers, mut count) = (0.0, 0usize, 0usize);
    for i in 0..pred.values.len() {
        if !(pred.valid[i] && gt.valid[i]) || exclude.is_some_and(|ex| ex[i]) {
            continue;
        }
        let (p, g) = (pred.values[i], gt.values[i]);
        l1 += (p - g).abs();
        if (p / g).max(g / p) < DELTA_THRESHOLD {
            inliers += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::domain("depth evaluation set is empty"));
    }
    Ok(DepthScores { l1: l1 / count as f64, delta_1_25: inliers as f64 / count as f64, pixels: count })
}

/// Pixel mask of one frame that is true wherever the token covering the
/// pixel belongs to a merged group. Each patch covers a `patch`×`patch`
/// pixel square of an image of `grid.height·patch` × `grid.width·patch`.
pub fn merged_pixel_mask(mask: &MergeMask, b: usize, frame: usize, grid: PatchGrid, patch: usize) -> Result<Vec<bool>> {
    let layout = mask.layout();
    grid.check(layout)?;
    if b >= mask.batch() {
        return Err(Error::OutOfRange { index: b, limit: mask.batch() });
    }
    if frame >= layout.frames() {
        return Err(Error::OutOfRange { index: frame, limit: layout.frames() });
    }
    if patch == 0 {
        return Err(Error::Parameter("patch size must be ≥ 1".into()));
    }
    let flags = mask.flags(b);
    let n = layout.group_size();
    let first_group = frame * layout.groups_per_frame();
    let width = grid.width * patch;
    let mut out = vec![false; grid.height * patch * width];
    for (i, px) in out.iter_mut().enumerate() {
        let (y, x) = (i / width, i % width);
        let patch_id = (y / patch) * grid.width + x / patch;
        *px = flags[first_group + patch_id / n];
    }
    Ok(out)
}
