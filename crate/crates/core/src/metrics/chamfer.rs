//! Point clouds and Chamfer completeness/accuracy.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::domain("point coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn from_slices(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vector3::from(*p)).collect())
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads whitespace-separated `x y z` lines; blank lines and `#` comments are skipped.
    pub fn read_xyz<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let coords: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", n + 1))))
                .collect::<Result<_>>()?;
            if coords.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 coordinates, got {}", n + 1, coords.len())));
            }
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    pub fn write_xyz<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in &self.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferScores {
    /// Mean distance from each ground-truth point to the prediction.
    pub completeness: f64,
    /// Mean distance from each predicted point to the ground truth.
    pub accuracy: f64,
}

type Cell = [i64; 3];

/// Uniform hash grid answering exact nearest-neighbour queries.
pub struct SpatialHash<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    buckets: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> SpatialHash<'a> {
    /// Cell edge is the edge of a cube holding one point on average over the
    /// bounding box, which tracks the mean nearest-neighbour spacing.
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = if points.is_empty() { Vector3::zeros() } else { max - min };
        let spread = extent.max();
        let volume: f64 = extent.iter().map(|e| e.max(spread * 1e-3)).product();
        let mut cell = (volume / points.len().max(1) as f64).cbrt();
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let mut hash = Self { points, cell, buckets: HashMap::new(), lo: [i64::MAX; 3], hi: [i64::MIN; 3] };
        for (i, p) in points.iter().enumerate() {
            let c = hash.cell_of(p);
            for ((lo, hi), &ck) in hash.lo.iter_mut().zip(hash.hi.iter_mut()).zip(&c) {
                *lo = (*lo).min(ck);
                *hi = (*hi).max(ck);
            }
            hash.buckets.entry(c).or_default().push(i);
        }
        hash
    }

    fn cell_of(&self, p: &Vector3<f64>) -> Cell {
        [0, 1, 2].map(|k| (p[k] / self.cell).floor() as i64)
    }

    /// Distance to the nearest indexed point, or `None` for an empty index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let c = self.cell_of(q);
        // shells beyond this radius contain no occupied cells
        let max_r = (0..3).map(|k| (c[k] - self.lo[k]).abs().max((self.hi[k] - c[k]).abs())).max().unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            // points in shell r or beyond are at least r - 1 cells away
            if best <= (r - 1) as f64 * self.cell {
                break;
            }
            self.visit_shell(c, r, |i| {
                let d = (self.points[i] - q).norm();
                if d < best {
                    best = d;
                }
            });
        }
        Some(best)
    }

    fn visit_shell(&self, c: Cell, r: i64, mut f: impl FnMut(usize)) {
        for dx in -r..=r {
            for dy in -r..=r {
                let on_face = dx.abs() == r || dy.abs() == r;
                let dzs: Vec<i64> = if on_face { (-r..=r).collect() } else { vec![-r, r] };
                for dz in dzs {
                    if let Some(bucket) = self.buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        bucket.iter().for_each(|&i| f(i));
                    }
                }
                if r == 0 {
                    return;
                }
            }
        }
    }
}

fn check_nonempty(pred: &PointCloud, gt: &PointCloud) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::domain("Chamfer distance needs non-empty clouds"));
    }
    Ok(())
}

fn mean_nearest(queries: &[Vector3<f64>], index: &SpatialHash) -> f64 {
    queries.iter().map(|q| index.nearest(q).unwrap_or(f64::INFINITY)).sum::<f64>() / queries.len() as f64
}

pub fn chamfer(pred: &PointCloud, gt: &PointCloud) -> Result<ChamferScores> {
    check_nonempty(pred, gt)?;
    let pred_index = SpatialHash::new(pred.points());
    let gt_index = SpatialHash::new(gt.points());
    Ok(ChamferScores {
        completeness: mean_nearest(gt.points(), &pred_index),
        accuracy: mean_nearest(pred.points(), &gt_index),
    })
}

/// Quadratic reference implementation.
pub fn chamfer_brute_force(pred: &PointCloud, gt: &PointCloud) -> Result<ChamferScores> {
    check_nonempty(pred, gt)?;
    let mean_min = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        a.iter().map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    Ok(ChamferScores {
        completeness: mean_min(gt.points(), pred.points()),
        accuracy: mean_min(pred.points(), gt.points()),
    })
}
