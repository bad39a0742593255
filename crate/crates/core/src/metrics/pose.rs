//! Relative camera pose accuracy and similarity alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Upper threshold of the AUC curves: 30 degrees and 30 centimetres.
pub const AUC_MAX_THRESHOLD: usize = 30;

const ORTHO_TOL: f64 = 1e-6;

/// Camera-to-world rotations and translations (metres), one per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet {
    rotations: Vec<Matrix3<f64>>,
    translations: Vec<Vector3<f64>>,
}

impl PoseSet {
    pub fn new(rotations: Vec<Matrix3<f64>>, translations: Vec<Vector3<f64>>) -> Result<Self> {
        if rotations.len() != translations.len() {
            return Err(Error::dim(format!("{} rotations but {} translations", rotations.len(), translations.len())));
        }
        for (i, r) in rotations.iter().enumerate() {
            let off = (r.transpose() * r - Matrix3::identity()).abs().max();
            let proper = off < ORTHO_TOL && (r.determinant() - 1.0).abs() < ORTHO_TOL;
            if !proper {
                return Err(Error::domain(format!("rotation {i} is not a proper orthonormal matrix")));
            }
        }
        if translations.iter().any(|t| !t.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("translations must be finite"));
        }
        Ok(Self { rotations, translations })
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotation(&self, i: usize) -> &Matrix3<f64> {
        &self.rotations[i]
    }

    pub fn translation(&self, i: usize) -> &Vector3<f64> {
        &self.translations[i]
    }

    /// Camera centres as a point cloud.
    pub fn centers(&self) -> Result<PointCloud> {
        PointCloud::new(self.translations.clone())
    }

    /// Applies `x ↦ s·R·x + t` to every camera.
    pub fn transformed(&self, sim: &Sim3) -> Self {
        Self {
            rotations: self.rotations.iter().map(|r| sim.rotation * r).collect(),
            translations: self.translations.iter().map(|t| sim.apply(t)).collect(),
        }
    }
}

/// Pose of frame `j` expressed in the coordinates of frame `i`.
pub fn relative_pose(poses: &PoseSet, i: usize, j: usize) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = poses.len();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::OutOfRange { index: idx, limit: n });
        }
    }
    if i == j {
        return Err(Error::domain("relative pose of a frame with itself is excluded"));
    }
    let ri_t = poses.rotations[i].transpose();
    Ok((ri_t * poses.rotations[j], ri_t * (poses.translations[j] - poses.translations[i])))
}

/// Geodesic angle in degrees between two rotations.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseScores {
    pub auc_r30: f64,
    pub auc_t30: f64,
    pub pairs: usize,
}

/// Mean over thresholds 1..=30 of the fraction of errors strictly below the threshold.
fn auc(errors: &[f64]) -> f64 {
    let total: usize = (1..=AUC_MAX_THRESHOLD).map(|x| errors.iter().filter(|&&e| e < x as f64).count()).sum();
    total as f64 / (AUC_MAX_THRESHOLD * errors.len()) as f64
}

/// Rotation (degrees) and translation (centimetres) AUC over all unordered frame pairs.
pub fn auc_at_30(pred: &PoseSet, gt: &PoseSet) -> Result<PoseScores> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!("{} predicted poses vs {} ground-truth poses", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::domain("pose accuracy needs at least two frames"));
    }
    let mut rot = Vec::new();
    let mut trans = Vec::new();
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let (rp, tp) = relative_pose(pred, i, j)?;
            let (rg, tg) = relative_pose(gt, i, j)?;
            rot.push(rotation_angle_deg(&rg, &rp));
            trans.push(100.0 * (tp - tg).norm());
        }
    }
    Ok(PoseScores { auc_r30: auc(&rot), auc_t30: auc(&trans), pairs: rot.len() })
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares similarity mapping `src[a]` onto `dst[b]` for
/// every correspondence `(a, b)`.
pub fn umeyama_sim3(src: &PointCloud, dst: &PointCloud, correspondences: &[(usize, usize)]) -> Result<Sim3> {
    if correspondences.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences, need at least 3", correspondences.len())));
    }
    let mut xs = Vec::with_capacity(correspondences.len());
    let mut ys = Vec::with_capacity(correspondences.len());
    for &(a, b) in correspondences {
        xs.push(*src.points().get(a).ok_or(Error::OutOfRange { index: a, limit: src.len() })?);
        ys.push(*dst.points().get(b).ok_or(Error::OutOfRange { index: b, limit: dst.len() })?);
    }
    let inv = 1.0 / xs.len() as f64;
    let mu_x = xs.iter().sum::<Vector3<f64>>() * inv;
    let mu_y = ys.iter().sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - mu_x, y - mu_y);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv;
    var_x *= inv;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (s0, s1) = (svd.singular_values[order[0]], svd.singular_values[order[1]]);
    if var_x <= 0.0 || s0 <= 0.0 || s1 <= 1e-12 * s0 {
        return Err(Error::Degenerate("covariance has rank below 2 (coincident or collinear points)".into()));
    }
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        sign[(order[2], order[2])] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * sign[(k, k)]).sum();
    let scale = trace_ds / var_x;
    let translation = mu_y - scale * (rotation * mu_x);
    Ok(Sim3 { scale, rotation, translation })
}

/// Aligns predicted cameras to the ground truth by the similarity that maps
/// predicted camera centres onto ground-truth centres.
pub fn align_poses(pred: &PoseSet, gt: &PoseSet) -> Result<(PoseSet, Sim3)> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!("{} predicted poses vs {} ground-truth poses", pred.len(), gt.len())));
    }
    let pairs: Vec<(usize, usize)> = (0..pred.len()).map(|i| (i, i)).collect();
    let sim = umeyama_sim3(&pred.centers()?, &gt.centers()?, &pairs)?;
    Ok((pred.transformed(&sim), sim))
}
