//! Per-component wall-time shares of the merged pipeline.

use std::time::Duration;

use come_core::predictor::PredictorParams;
use come_core::synth::{Workload, WorkloadKind};
use come_core::{PatchGrid, Rng};
use serde::{Deserialize, Serialize};

use crate::config::Strategy;
use crate::pipeline::{run_merged, Confidence, Model, PipelineTimes};
use crate::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownConfig {
    /// Total tokens per sample; a multiple of the tokens per frame.
    pub tokens: usize,
    pub ratio: f64,
    pub group: usize,
    pub grid: PatchGrid,
    pub specials: usize,
    pub channels: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub warmup: bool,
    /// Score tokens with a predictor instead of reading teacher confidence.
    pub predictor: bool,
    pub latent: usize,
    pub bias: bool,
}

impl Default for BreakdownConfig {
    fn default() -> Self {
        Self {
            tokens: 1024,
            ratio: 0.5,
            group: 4,
            grid: PatchGrid::new(32, 32),
            specials: 0,
            channels: 8,
            d_ff: 16,
            heads: 1,
            layers: 1,
            seed: 0,
            repetitions: 3,
            warmup: true,
            predictor: false,
            latent: 8,
            bias: true,
        }
    }
}

impl BreakdownConfig {
    pub fn frames(&self) -> Result<usize, BenchError> {
        let per_frame = self.grid.patches() + self.specials;
        if self.tokens == 0 || !self.tokens.is_multiple_of(per_frame) {
            return Err(BenchError::Config(format!(
                "{} tokens is not a positive multiple of {per_frame} tokens per frame",
                self.tokens
            )));
        }
        Ok(self.tokens / per_frame)
    }
}

/// Percent of merged-pipeline wall time per component, each timed
/// separately; `other` covers the residual additions. Time outside every
/// timed region makes the shares sum to less than 100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub tokens: usize,
    pub merged_tokens: usize,
    /// Mean wall time of one run, in milliseconds.
    pub total_ms: f64,
    pub attention: f64,
    pub mlp: f64,
    pub merge_split: f64,
    pub mask_generation: f64,
    pub predictor: f64,
    pub other: f64,
}

impl Breakdown {
    /// Share spent outside the compute modules on merging bookkeeping.
    pub fn overhead(&self) -> f64 {
        self.merge_split + self.mask_generation
    }

    pub fn share_sum(&self) -> f64 {
        self.attention + self.mlp + self.merge_split + self.mask_generation + self.predictor + self.other
    }
}

pub fn runtime_breakdown(cfg: &BreakdownConfig) -> Result<Breakdown, BenchError> {
    let frames = cfg.frames()?;
    if !(0.0..1.0).contains(&cfg.ratio) || cfg.repetitions == 0 {
        return Err(BenchError::Config("ratio must lie in [0, 1) and repetitions ≥ 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut workload = Workload::smooth(cfg.grid, cfg.channels, cfg.specials);
    workload.kind = WorkloadKind::Smooth;
    let (seq, teacher) = workload.sample(1, frames, cfg.group, &mut root.fork(2))?;
    let model = Model::random(cfg.channels, cfg.d_ff, cfg.heads, cfg.layers, &mut root.fork(1))?;
    let predictor =
        if cfg.predictor { Some(PredictorParams::random(cfg.channels, cfg.latent, &mut root.fork(3))?) } else { None };
    let conf = match &predictor {
        Some(p) => Confidence::Predictor(p, cfg.grid),
        None => Confidence::Teacher(&teacher),
    };

    let run = || run_merged(&seq, &model, Strategy::Confidence, conf, cfg.ratio, cfg.bias, cfg.seed);
    if cfg.warmup {
        run()?;
    }
    let mut acc = PipelineTimes::default();
    let mut merged_tokens = 0;
    for _ in 0..cfg.repetitions {
        let r = run()?;
        merged_tokens = r.slots;
        acc.predictor += r.times.predictor;
        acc.mask_generation += r.times.mask_generation;
        acc.blocks.accumulate(&r.times.blocks);
        acc.total += r.times.total;
    }
    let total = acc.total.as_secs_f64();
    let pct = |d: Duration| 100.0 * d.as_secs_f64() / total;
    let (attention, mlp, merge_split) = (pct(acc.blocks.attention), pct(acc.blocks.mlp), pct(acc.blocks.merge_split));
    let (mask_generation, predictor) = (pct(acc.mask_generation), pct(acc.predictor));
    Ok(Breakdown {
        tokens: cfg.tokens,
        merged_tokens,
        total_ms: 1e3 * total / cfg.repetitions as f64,
        attention,
        mlp,
        merge_split,
        mask_generation,
        predictor,
        other: pct(acc.blocks.other),
    })
}
