//! Evaluation metrics: depth error, relative pose accuracy, similarity
//! alignment and Chamfer distances.

mod chamfer;
mod depth;
mod pose;

use std::io::Write;

use serde::Serialize;

pub use chamfer::{chamfer, chamfer_brute_force, ChamferScores, PointCloud, SpatialHash};
pub use depth::{align_scale, depth_metrics, merged_pixel_mask, DepthMap, DepthScores, DELTA_THRESHOLD};
pub use pose::{
    align_poses, auc_at_30, relative_pose, rotation_angle_deg, umeyama_sim3, PoseScores, PoseSet, Sim3,
    AUC_MAX_THRESHOLD,
};

use crate::error::{Error, Result};

/// Writes one metric result as a single-line JSON record tagged with `metric`.
pub fn write_record<W: Write, T: Serialize>(w: &mut W, metric: &str, value: &T) -> Result<()> {
    let mut obj = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut obj {
        map.insert("metric".into(), metric.into());
    }
    writeln!(w, "{obj}")?;
    Ok(())
}
