//! Distillation of the predictor from a synthetic teacher by plain gradient
//! descent on a fixed training set.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{backward, forward, forward_cached, sample_features, PredictorParams, RankingPairSet, SampleShape};
use super::{mask_iou, mse_loss, ranking_loss, ranking_loss_grad};
use crate::error::{Error, Result};
use crate::layout::LayoutDescriptor;
use crate::mask::{mask_from_confidence, ConfidenceMap, ConfidenceSource};
use crate::rng::Rng;
use crate::synth::Workload;
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Ranking,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub latent: usize,
    pub pairs_per_sample: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub frames: usize,
    pub group_size: usize,
    /// Merge ratio of the masks compared by the hold-out IoU.
    pub ratio: f64,
    pub eval_every: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            seed: 0,
            latent: 32,
            pairs_per_sample: 4096,
            train_samples: 8,
            holdout_samples: 8,
            frames: 2,
            group_size: 4,
            ratio: 0.5,
            eval_every: 100,
            objective: Objective::Ranking,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub holdout_iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    /// One row per step (loss before that step's update) plus a final row
    /// for the trained parameters.
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_iou(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|r| r.holdout_iou)
    }
}

struct Example {
    features: DMatrix<f64>,
    teacher: Vec<f32>,
    pairs: RankingPairSet,
}

fn draw(workload: &Workload, cfg: &TrainConfig, count: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    (0..count)
        .map(|s| {
            let (seq, teacher) = workload.sample(1, cfg.frames, cfg.group_size, rng)?;
            let teacher = teacher.into_data();
            let pairs = RankingPairSet::sample(&teacher, cfg.pairs_per_sample, &mut rng.fork(1000 + s as u64));
            Ok(Example { features: sample_features(&seq, 0), teacher, pairs })
        })
        .collect()
}

fn objective_and_grad(out: &DVector<f64>, ex: &Example, objective: Objective) -> Result<(f64, Vec<f64>)> {
    let scores = out.as_slice();
    match objective {
        Objective::Ranking => Ok((ranking_loss(scores, &ex.pairs)?, ranking_loss_grad(scores, &ex.pairs)?)),
        Objective::Mse => {
            let t: Vec<f64> = ex.teacher.iter().map(|&v| v as f64).collect();
            mse_loss(scores, &t)
        }
    }
}

/// Mean IoU between predictor and teacher masks over the hold-out set.
fn holdout_iou(
    params: &PredictorParams,
    holdout: &[Example],
    layout: &LayoutDescriptor,
    shape: SampleShape,
    ratio: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in holdout {
        let pred = forward(&ex.features, params, shape)?;
        let to_map = |v: Vec<f32>, src| {
            let t = DenseTensor::new(vec![1, v.len()], v)?;
            ConfidenceMap::from_patches(layout, &t, src)
        };
        let pm = to_map(pred.iter().map(|&v| v as f32).collect(), ConfidenceSource::Predictor)?;
        let tm = to_map(ex.teacher.clone(), ConfidenceSource::Teacher)?;
        total += mask_iou(&mask_from_confidence(&pm, ratio, layout)?, &mask_from_confidence(&tm, ratio, layout)?)?;
    }
    Ok(total / holdout.len().max(1) as f64)
}

pub fn train(workload: &Workload, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.train_samples == 0 || cfg.frames == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Parameter("training needs samples, frames and a finite lr ≥ 0".into()));
    }
    let root = Rng::new(cfg.seed);
    let layout = workload.layout(cfg.frames, cfg.group_size)?;
    let shape = SampleShape { frames: cfg.frames, grid: workload.grid };
    let train_set = draw(workload, cfg, cfg.train_samples, &mut root.fork(1))?;
    let holdout = draw(workload, cfg, cfg.holdout_samples, &mut root.fork(2))?;
    let mut params = PredictorParams::random(workload.channels, cfg.latent, &mut root.fork(3))?;

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let inv = 1.0 / train_set.len() as f64;
    for step in 0..=cfg.steps {
        let mut loss = 0.0;
        let mut grad = PredictorParams::zeros(params.channels(), params.latent());
        for ex in &train_set {
            let cache = forward_cached(&ex.features, &params, shape)?;
            let (l, g) = objective_and_grad(&cache.output, ex, cfg.objective)?;
            loss += inv * l;
            if step < cfg.steps {
                grad.add_scaled(&backward(&cache, &params, &DVector::from_vec(g)), inv);
            }
        }
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let evaluate = !holdout.is_empty() && (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0));
        let holdout_iou =
            if evaluate { Some(holdout_iou(&params, &holdout, &layout, shape, cfg.ratio)?) } else { None };
        trace.push(TraceRow { step, loss, holdout_iou });
        if step < cfg.steps {
            params.add_scaled(&grad, -cfg.lr);
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Writes `step,loss,holdout_iou` rows; the IoU column is empty on steps
/// without an evaluation.
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,loss,holdout_iou")?;
    for r in trace {
        match r.holdout_iou {
            Some(iou) => writeln!(w, "{},{},{}", r.step, r.loss, iou)?,
            None => writeln!(w, "{},{},", r.step, r.loss)?,
        }
    }
    Ok(())
}
