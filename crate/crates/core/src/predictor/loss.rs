use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::mask::MergeMask;
use crate::rng::Rng;

/// Ordered patch pairs `(i, j)` whose teacher confidence satisfies
/// `teacher[i] > teacher[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingPairSet {
    pairs: Vec<(u32, u32)>,
}

impl RankingPairSet {
    pub fn new(pairs: Vec<(u32, u32)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i == j {
                return Err(Error::Parameter(format!("self pair ({i}, {i})")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Parameter(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(Self { pairs })
    }

    /// Every strictly ordered pair.
    pub fn all(teacher: &[f32]) -> Self {
        let mut pairs = Vec::new();
        for i in 0..teacher.len() {
            for j in 0..teacher.len() {
                if teacher[i] > teacher[j] {
                    pairs.push((i as u32, j as u32));
                }
            }
        }
        Self { pairs }
    }

    /// Up to `budget` distinct ordered pairs drawn uniformly; falls back to
    /// [`all`](Self::all) when there are no more pairs than the budget.
    pub fn sample(teacher: &[f32], budget: usize, rng: &mut Rng) -> Self {
        let n = teacher.len();
        if n < 2 {
            return Self { pairs: Vec::new() };
        }
        if n * (n - 1) / 2 <= budget {
            return Self::all(teacher);
        }
        let mut seen = HashSet::with_capacity(budget);
        let mut pairs = Vec::with_capacity(budget);
        let mut attempts = 0;
        while pairs.len() < budget && attempts < budget * 20 {
            attempts += 1;
            let (a, b) = (rng.below(n), rng.below(n));
            let (i, j) = if teacher[a] > teacher[b] {
                (a, b)
            } else if teacher[b] > teacher[a] {
                (b, a)
            } else {
                continue;
            };
            if seen.insert((i, j)) {
                pairs.push((i as u32, j as u32));
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    fn check(&self, scores: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::domain("ranking loss over an empty pair set"));
        }
        if let Some(&(i, j)) = self.pairs.iter().find(|&&(i, j)| i as usize >= scores || j as usize >= scores) {
            return Err(Error::OutOfRange { index: i.max(j) as usize, limit: scores });
        }
        Ok(())
    }
}

/// `log(1 + e^m)` without overflow.
fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic ranking loss `log(1 + exp(s_j - s_i))` over the pairs.
pub fn ranking_loss(scores: &[f64], pairs: &RankingPairSet) -> Result<f64> {
    pairs.check(scores.len())?;
    let sum: f64 = pairs.pairs.iter().map(|&(i, j)| softplus(scores[j as usize] - scores[i as usize])).sum();
    Ok(sum / pairs.len() as f64)
}

/// Gradient of [`ranking_loss`] with respect to every score.
pub fn ranking_loss_grad(scores: &[f64], pairs: &RankingPairSet) -> Result<Vec<f64>> {
    pairs.check(scores.len())?;
    let inv = 1.0 / pairs.len() as f64;
    let mut g = vec![0.0; scores.len()];
    for &(i, j) in &pairs.pairs {
        let s = inv * sigmoid(scores[j as usize] - scores[i as usize]);
        g[j as usize] += s;
        g[i as usize] -= s;
    }
    Ok(g)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != teacher.len() {
        return Err(Error::dim(format!("{} predictions for {} targets", pred.len(), teacher.len())));
    }
    if pred.is_empty() {
        return Err(Error::domain("mean squared error over no values"));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(teacher).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(teacher).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Intersection over union of the flagged groups of two masks, pooled over
/// the batch. Two empty masks score 1.
pub fn mask_iou(a: &MergeMask, b: &MergeMask) -> Result<f64> {
    if a.group_count() != b.group_count() || a.batch() != b.batch() {
        return Err(Error::dim(format!(
            "masks over {}x{} and {}x{} groups",
            a.batch(),
            a.group_count(),
            b.batch(),
            b.group_count()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for s in 0..a.batch() {
        for (&x, &y) in a.flags(s).iter().zip(b.flags(s)) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
