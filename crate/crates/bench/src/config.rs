//! Sweep configuration and its `key = value` text format.

use std::fmt;
use std::str::FromStr;

use come_core::synth::WorkloadKind;
use come_core::PatchGrid;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "COME_SEED";

/// How merge masks are chosen and how merged groups are coalesced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Lowest-confidence groups, averaged.
    Confidence,
    /// Most self-similar groups, averaged.
    Similarity,
    /// Lowest-confidence groups, represented by one random member.
    PickOne,
    /// Lowest-confidence groups, removed from the compute modules.
    DropAll,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Confidence, Strategy::Similarity, Strategy::PickOne, Strategy::DropAll];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Confidence => "confidence",
            Strategy::Similarity => "similarity",
            Strategy::PickOne => "pick-one",
            Strategy::DropAll => "drop-all",
        }
    }

    /// Whether the mask comes from confidence scores.
    pub fn uses_confidence(self) -> bool {
        self != Strategy::Similarity
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| BenchError::Config(format!("unknown strategy {s:?}")))
    }
}

/// Where confidence scores come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceOrigin {
    /// The synthetic teacher read-out.
    Teacher,
    /// A predictor distilled from the teacher before the sweep.
    Predictor,
}

impl FromStr for ConfidenceOrigin {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "teacher" => Ok(Self::Teacher),
            "predictor" => Ok(Self::Predictor),
            other => Err(BenchError::Config(format!("unknown confidence origin {other:?}"))),
        }
    }
}

pub fn parse_bool(s: &str) -> Result<bool, BenchError> {
    match s.trim() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(BenchError::Config(format!("expected on/off, got {other:?}"))),
    }
}

/// Parses `HxW`.
pub fn parse_grid(s: &str) -> Result<PatchGrid, BenchError> {
    let bad = || BenchError::Config(format!("expected a grid like 16x16, got {s:?}"));
    let (h, w) = s.trim().split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok(PatchGrid::new(h, w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub group_sizes: Vec<usize>,
    /// Sequence lengths, counted in frames.
    pub frames: Vec<usize>,
    pub grid: PatchGrid,
    pub specials: usize,
    pub channels: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub bias: bool,
    pub repetitions: usize,
    /// Cheap points repeat until each pipeline has been timed for at least
    /// this long, up to `MAX_REPETITIONS`.
    pub min_time_ms: f64,
    pub workload: WorkloadKind,
    pub confidence: ConfidenceOrigin,
    /// Gradient steps used to distil the predictor.
    pub train_steps: usize,
    pub latent: usize,
    /// Points run concurrently; 1 keeps timings free of contention.
    pub workers: usize,
    /// Points with more tokens than this are reported as failures.
    pub max_tokens: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.5],
            group_sizes: vec![4],
            frames: vec![1, 4, 16],
            grid: PatchGrid::new(16, 16),
            specials: 0,
            channels: 32,
            d_ff: 128,
            heads: 1,
            layers: 8,
            seed: 0,
            strategy: Strategy::Confidence,
            bias: true,
            repetitions: 5,
            min_time_ms: 300.0,
            workload: WorkloadKind::Smooth,
            confidence: ConfidenceOrigin::Predictor,
            train_steps: 300,
            latent: 8,
            workers: 1,
            max_tokens: 1 << 17,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, BenchError> {
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| BenchError::Config(format!("{key}: cannot parse {:?}", v.trim()))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
    value.trim().parse().map_err(|_| BenchError::Config(format!("{key}: cannot parse {:?}", value.trim())))
}

impl SweepConfig {
    /// Parses `key = value` lines. List keys (`ratio`, `group`, `frames`)
    /// accept comma-separated values and may be repeated to append; every
    /// other key may appear once. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut cfg = Self::default();
        let (mut ratios, mut groups, mut frames) = (Vec::new(), Vec::new(), Vec::new());
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            match key {
                "ratio" | "ratios" => ratios.extend(parse_list::<f64>(key, value)?),
                "group" | "groups" | "group_sizes" => groups.extend(parse_list::<usize>(key, value)?),
                "frames" => frames.extend(parse_list::<usize>(key, value)?),
                _ => {
                    if !seen.insert(key.to_string()) {
                        return Err(BenchError::Config(format!("line {}: duplicate key {key}", n + 1)));
                    }
                    match key {
                        "grid" => cfg.grid = parse_grid(value)?,
                        "specials" => cfg.specials = parse_one(key, value)?,
                        "channels" => cfg.channels = parse_one(key, value)?,
                        "d_ff" => cfg.d_ff = parse_one(key, value)?,
                        "heads" => cfg.heads = parse_one(key, value)?,
                        "layers" => cfg.layers = parse_one(key, value)?,
                        "seed" => cfg.seed = parse_one(key, value)?,
                        "strategy" => cfg.strategy = value.parse()?,
                        "bias" => cfg.bias = parse_bool(value)?,
                        "repetitions" => cfg.repetitions = parse_one(key, value)?,
                        "min_time_ms" => cfg.min_time_ms = parse_one(key, value)?,
                        "workload" => {
                            cfg.workload = value.trim().parse().map_err(|e| BenchError::Config(format!("{e}")))?
                        }
                        "confidence" => cfg.confidence = value.parse()?,
                        "train_steps" => cfg.train_steps = parse_one(key, value)?,
                        "latent" => cfg.latent = parse_one(key, value)?,
                        "workers" => cfg.workers = parse_one(key, value)?,
                        "max_tokens" => cfg.max_tokens = parse_one(key, value)?,
                        other => return Err(BenchError::Config(format!("line {}: unknown key {other}", n + 1))),
                    }
                }
            }
        }
        if !ratios.is_empty() {
            cfg.ratios = ratios;
        }
        if !groups.is_empty() {
            cfg.group_sizes = groups;
        }
        if !frames.is_empty() {
            cfg.frames = frames;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed with `value` when present.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<(), BenchError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| BenchError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    /// Applies the `COME_SEED` override from the process environment.
    pub fn apply_env(&mut self) -> Result<(), BenchError> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: String| Err(BenchError::Config(m));
        if self.ratios.is_empty() || self.group_sizes.is_empty() || self.frames.is_empty() {
            return fail("ratio, group and frames lists must be non-empty".into());
        }
        if let Some(p) = self.ratios.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return fail(format!("merge ratio {p} outside [0, 1)"));
        }
        if self.group_sizes.contains(&0) || self.frames.contains(&0) {
            return fail("group sizes and frame counts must be positive".into());
        }
        if self.repetitions < 3 {
            return fail(format!("repetitions must be at least 3, got {}", self.repetitions));
        }
        if self.channels == 0 || self.d_ff == 0 || self.layers == 0 || self.heads == 0 || self.latent == 0 {
            return fail("channels, d_ff, layers, heads and latent must be positive".into());
        }
        if !self.channels.is_multiple_of(self.heads) {
            return fail(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if !(self.min_time_ms >= 0.0 && self.min_time_ms.is_finite()) {
            return fail(format!("min_time_ms must be finite and ≥ 0, got {}", self.min_time_ms));
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        Ok(())
    }
}
