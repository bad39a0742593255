//! Sweeps over merge settings, comparing the merged pipeline with the oracle.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use come_core::block::{merged_block_traced, MergedOptions, Timings};
use come_core::predictor::{train, PredictorParams, TrainConfig};
use come_core::synth::Workload;
use come_core::tensor::write_sections;
use come_core::{DenseTensor, Rng, TokenSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfidenceOrigin, Strategy, SweepConfig};
use crate::pipeline::{
    confidence_mask, retained_l1, run_merged, run_oracle, strategy_mask, Confidence, Model, PipelineTimes,
};
use crate::BenchError;

/// One point of a sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strategy: Strategy,
    pub bias: bool,
    pub ratio: f64,
    pub group: usize,
    pub frames: usize,
    pub tokens: usize,
}

/// Median and quartiles of repeated wall-clock measurements, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl TimingStats {
    /// Quartiles by linear interpolation between order statistics.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| {
            if s.is_empty() {
                return f64::NAN;
            }
            let pos = q * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Self { median: at(0.5), q1: at(0.25), q3: at(0.75) }
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Sequence length seen by attention and the MLP after merging.
    pub merged_tokens: usize,
    pub flops_oracle: f64,
    pub flops_merged: f64,
    pub oracle_ms: TimingStats,
    pub merged_ms: TimingStats,
    /// Oracle median time over merged median time.
    pub speedup: f64,
    /// Mean absolute output error on image tokens kept by the confidence mask.
    pub retained_l1: f64,
    /// Mean absolute output error on all image tokens.
    pub image_l1: f64,
}

impl Measurement {
    pub fn flop_reduction(&self) -> f64 {
        self.flops_oracle / self.flops_merged
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(flatten)]
    pub point: SweepPoint,
    #[serde(flatten)]
    pub measurement: Option<Measurement>,
    pub failure: Option<String>,
}

/// Shared state of a sweep: workload, weights and the distilled predictor.
pub struct SweepContext {
    pub config: SweepConfig,
    pub workload: Workload,
    pub model: Model,
    pub predictor: Option<PredictorParams>,
}

impl SweepContext {
    pub fn new(config: SweepConfig) -> Result<Self, BenchError> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut workload = Workload::smooth(config.grid, config.channels, config.specials);
        workload.kind = config.workload;
        let model = Model::random(config.channels, config.d_ff, config.heads, config.layers, &mut root.fork(1))?;
        let predictor = match config.confidence {
            ConfidenceOrigin::Teacher => None,
            ConfidenceOrigin::Predictor => Some(distil(&workload, &config)?),
        };
        Ok(Self { config, workload, model, predictor })
    }

    /// Tokens and teacher scores for `(frames, group)`; every strategy and
    /// ratio at that size sees the same sample.
    pub fn sample(&self, frames: usize, group: usize) -> Result<(TokenSequence, DenseTensor), BenchError> {
        let stream = 1000 + (frames as u64) * 64 + group as u64;
        Ok(self.workload.sample(1, frames, group, &mut Rng::new(self.config.seed).fork(stream))?)
    }

    fn confidence<'a>(&'a self, teacher: &'a DenseTensor) -> Confidence<'a> {
        match &self.predictor {
            Some(p) => Confidence::Predictor(p, self.config.grid),
            None => Confidence::Teacher(teacher),
        }
    }

    fn pick_seed(&self, point: &SweepPoint) -> u64 {
        self.config.seed ^ 0x9e37_79b9 ^ ((point.frames as u64) << 8) ^ point.group as u64
    }

    /// All grid points of the configured sweep.
    pub fn points(&self) -> Vec<SweepPoint> {
        let c = &self.config;
        let per_frame = c.grid.patches() + c.specials;
        let mut out = Vec::new();
        for &frames in &c.frames {
            for &group in &c.group_sizes {
                for &ratio in &c.ratios {
                    out.push(SweepPoint {
                        strategy: c.strategy,
                        bias: c.bias,
                        ratio,
                        group,
                        frames,
                        tokens: frames * per_frame,
                    });
                }
            }
        }
        out
    }

    /// Measures one point; errors and panics become failure records.
    pub fn run_point(&self, point: &SweepPoint) -> BenchRecord {
        let result = if point.tokens > self.config.max_tokens {
            Err(format!("{} tokens exceed max_tokens = {}", point.tokens, self.config.max_tokens))
        } else {
            match catch_unwind(AssertUnwindSafe(|| self.measure(point))) {
                Ok(Ok(m)) => Ok(m),
                Ok(Err(e)) => Err(e.to_string()),
                Err(panic) => Err(panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into())),
            }
        };
        match result {
            Ok(m) => BenchRecord { point: *point, measurement: Some(m), failure: None },
            Err(f) => BenchRecord { point: *point, measurement: None, failure: Some(f) },
        }
    }

    fn measure(&self, point: &SweepPoint) -> Result<Measurement, BenchError> {
        let (seq, teacher) = self.sample(point.frames, point.group)?;
        let conf = self.confidence(&teacher);
        let seed = self.pick_seed(point);
        let run = || run_merged(&seq, &self.model, point.strategy, conf, point.ratio, point.bias, seed);

        // the first round of each pipeline is a discarded warmup
        let (reference, _, warm_oracle) = run_oracle(&seq, &self.model)?;
        let merged = run()?;
        let warm_ms = (warm_oracle + merged.times.total).as_secs_f64() * 1e3;
        let region = if point.strategy.uses_confidence() {
            merged.mask.clone()
        } else {
            confidence_mask(&seq, conf, point.ratio, &mut PipelineTimes::default())?
        };
        let (retained, image) = retained_l1(&merged.output, &reference, &region)?;

        let reps = repetitions(self.config.repetitions, self.config.min_time_ms, warm_ms);
        let mut oracle_ms = Vec::with_capacity(reps);
        let mut merged_ms = Vec::with_capacity(reps);
        for _ in 0..reps {
            oracle_ms.push(run_oracle(&seq, &self.model)?.2.as_secs_f64() * 1e3);
            merged_ms.push(run()?.times.total.as_secs_f64() * 1e3);
        }
        let oracle_ms = TimingStats::from_samples(&oracle_ms);
        let merged_ms = TimingStats::from_samples(&merged_ms);
        Ok(Measurement {
            merged_tokens: merged.slots,
            flops_oracle: self.model.flops(point.tokens),
            flops_merged: self.model.flops(merged.slots),
            oracle_ms,
            merged_ms,
            speedup: oracle_ms.median / merged_ms.median,
            retained_l1: retained,
            image_l1: image,
        })
    }

    /// Runs `points` on the configured worker pool, preserving order.
    pub fn run_points(&self, points: &[SweepPoint]) -> Result<Vec<BenchRecord>, BenchError> {
        if self.config.workers == 1 {
            return Ok(points.iter().map(|p| self.run_point(p)).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(pool.install(|| points.par_iter().map(|p| self.run_point(p)).collect()))
    }

    /// Writes the first layer's pre- and post-merge tensors of `point` as a
    /// section container, next to a plain-text layout header and mask flags.
    pub fn dump_activations(&self, point: &SweepPoint, dir: &Path, stem: &str) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        let (seq, teacher) = self.sample(point.frames, point.group)?;
        let (mask, coalesce) = strategy_mask(
            &seq,
            point.strategy,
            self.confidence(&teacher),
            point.ratio,
            self.pick_seed(point),
            &mut PipelineTimes::default(),
        )?;
        let opts = MergedOptions { bias_correction: point.bias, coalesce };
        let mut traced: Vec<(String, DenseTensor)> = vec![("input".into(), seq.tokens().clone())];
        let out =
            merged_block_traced(&seq, &mask, &self.model.layers[0], &opts, &mut Timings::default(), &mut |n, t| {
                traced.push((n.to_string(), t.clone()))
            })?;
        traced.push(("output".into(), out.into_tokens()));
        let sections: Vec<(&str, &DenseTensor)> = traced.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.bin")))?);
        write_sections(&mut f, &sections)?;
        std::fs::write(dir.join(format!("{stem}.layout")), format!("{}\n", seq.layout()))?;
        let mut flags = std::fs::File::create(dir.join(format!("{stem}.mask")))?;
        mask.write_flags(&mut flags)?;
        Ok(())
    }
}

/// Upper bound on timed rounds per point.
pub const MAX_REPETITIONS: usize = 50;

/// Rounds needed so that rounds of `round_ms` cover `min_time_ms`, never
/// fewer than `configured`.
pub fn repetitions(configured: usize, min_time_ms: f64, round_ms: f64) -> usize {
    let needed = if round_ms > 0.0 { (min_time_ms / round_ms).ceil() as usize } else { MAX_REPETITIONS };
    configured.max(needed.min(MAX_REPETITIONS))
}

/// Ratio at which drop-all keeps as many token slots as averaging keeps at
/// `ratio`: averaging keeps one slot per merged group, so drop-all removes
/// `k·(n−1)/n` groups where averaging merges `k`.
pub fn matched_drop_ratio(ratio: f64, groups: usize, group_size: usize) -> Result<f64, BenchError> {
    let k = come_core::mask::merge_count(ratio, groups)?;
    let dropped = k * (group_size - 1) / group_size;
    Ok(dropped as f64 / groups as f64)
}

/// Distils a predictor on single frames of the sweep's workload.
pub fn distil(workload: &Workload, config: &SweepConfig) -> Result<PredictorParams, BenchError> {
    let cfg = TrainConfig {
        steps: config.train_steps,
        seed: config.seed,
        latent: config.latent,
        pairs_per_sample: 1024,
        train_samples: 4,
        holdout_samples: 0,
        frames: 1,
        group_size: 1,
        ..TrainConfig::default()
    };
    Ok(train(workload, &cfg)?.params)
}

pub fn run_sweep(config: &SweepConfig) -> Result<Vec<BenchRecord>, BenchError> {
    let ctx = SweepContext::new(config.clone())?;
    ctx.run_points(&ctx.points())
}

/// Strategy × bias × ratio grid at the first configured size and group.
/// With `match_tokens`, drop-all ratios are rescaled so every strategy runs
/// attention and the MLP on the same number of token slots.
pub fn tradeoff_points(
    ctx: &SweepContext,
    strategies: &[Strategy],
    biases: &[bool],
    ratios: &[f64],
    match_tokens: bool,
) -> Result<Vec<SweepPoint>, BenchError> {
    let c = &ctx.config;
    let (frames, group) = (c.frames[0], c.group_sizes[0]);
    let tokens = frames * (c.grid.patches() + c.specials);
    let groups = frames * (c.grid.patches() / group);
    let mut out = Vec::new();
    for &strategy in strategies {
        for &bias in biases {
            for &ratio in ratios {
                let ratio = if match_tokens && strategy == Strategy::DropAll {
                    matched_drop_ratio(ratio, groups, group)?
                } else {
                    ratio
                };
                out.push(SweepPoint { strategy, bias, ratio, group, frames, tokens });
            }
        }
    }
    Ok(out)
}

pub fn tradeoff_table(
    config: &SweepConfig,
    strategies: &[Strategy],
    biases: &[bool],
    ratios: &[f64],
    match_tokens: bool,
) -> Result<Vec<BenchRecord>, BenchError> {
    if strategies.is_empty() || biases.is_empty() || ratios.is_empty() {
        return Err(BenchError::Config("strategies, biases and ratios must be non-empty".into()));
    }
    if let Some(p) = ratios.iter().find(|p| !(0.0..1.0).contains(*p)) {
        return Err(BenchError::Config(format!("merge ratio {p} outside [0, 1)")));
    }
    let ctx = SweepContext::new(config.clone())?;
    ctx.run_points(&tradeoff_points(&ctx, strategies, biases, ratios, match_tokens)?)
}

const CSV_HEADER: &str = "strategy,bias,ratio,group,frames,tokens,merged_tokens,flops_oracle,flops_merged,\
flop_reduction,oracle_ms,oracle_iqr_ms,merged_ms,merged_iqr_ms,speedup,retained_l1,image_l1,failure";

pub fn write_csv<W: Write>(w: &mut W, records: &[BenchRecord]) -> Result<(), BenchError> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        let p = &r.point;
        write!(
            w,
            "{},{},{},{},{},{},",
            p.strategy,
            if p.bias { "on" } else { "off" },
            p.ratio,
            p.group,
            p.frames,
            p.tokens
        )?;
        match &r.measurement {
            Some(m) => write!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},",
                m.merged_tokens,
                m.flops_oracle,
                m.flops_merged,
                m.flop_reduction(),
                m.oracle_ms.median,
                m.oracle_ms.iqr(),
                m.merged_ms.median,
                m.merged_ms.iqr(),
                m.speedup,
                m.retained_l1,
                m.image_l1
            )?,
            None => write!(w, ",,,,,,,,,,,")?,
        }
        writeln!(w, "{}", r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";"))?;
    }
    Ok(())
}

pub fn write_json<W: Write>(w: &mut W, records: &[BenchRecord]) -> Result<(), BenchError> {
    serde_json::to_writer_pretty(&mut *w, records)?;
    writeln!(w)?;
    Ok(())
}

/// Human-readable table for stdout.
pub fn summary_table(records: &[BenchRecord]) -> String {
    let mut s = format!(
        "{:<11} {:>4} {:>5} {:>3} {:>7} {:>7} {:>10} {:>10} {:>8} {:>8} {:>11}\n",
        "strategy", "bias", "p", "n", "tokens", "merged", "oracle ms", "merged ms", "speedup", "flops÷", "retained L1"
    );
    for r in records {
        let p = &r.point;
        let head = format!(
            "{:<11} {:>4} {:>5.2} {:>3} {:>7}",
            p.strategy.name(),
            if p.bias { "on" } else { "off" },
            p.ratio,
            p.group,
            p.tokens
        );
        match (&r.measurement, &r.failure) {
            (Some(m), _) => s.push_str(&format!(
                "{head} {:>7} {:>10.3} {:>10.3} {:>8.3} {:>8.3} {:>11.3e}\n",
                m.merged_tokens,
                m.oracle_ms.median,
                m.merged_ms.median,
                m.speedup,
                m.flop_reduction(),
                m.retained_l1
            )),
            (None, f) => s.push_str(&format!("{head} failed: {}\n", f.as_deref().unwrap_or("unknown"))),
        }
    }
    s
}
