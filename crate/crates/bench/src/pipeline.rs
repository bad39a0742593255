//! Oracle and merged multi-layer pipelines with per-component timing.

use std::path::Path;
use std::time::{Duration, Instant};

use come_core::block::{merged_block_with, oracle_block_timed, BlockParams, FlopCount, MergedOptions, Timings};
use come_core::mask::{mask_from_confidence, merge_count, similarity_mask, ConfidenceMap, ConfidenceSource, MergeMask};
use come_core::merge::{slot_count, Coalesce};
use come_core::predictor::{predictor_forward, PredictorParams};
use come_core::{DenseTensor, PatchGrid, Rng, TokenSequence};

use crate::config::Strategy;
use crate::BenchError;

/// A stack of transformer blocks sharing one merge mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<BlockParams>,
}

impl Model {
    pub fn random(
        channels: usize,
        d_ff: usize,
        heads: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<Self, BenchError> {
        let layers = (0..layers)
            .map(|i| BlockParams::random(channels, d_ff, heads, &mut rng.fork(i as u64)))
            .collect::<come_core::Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.channels())
    }

    /// Writes one `layer_<i>.bin` tensor-dump file per block.
    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        for (i, l) in self.layers.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("layer_{i}.bin")))?);
            l.write(&mut f)?;
        }
        Ok(())
    }

    /// Loads `layer_0.bin`, `layer_1.bin`, ... until the first missing index.
    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let mut layers = Vec::new();
        while let Ok(f) = std::fs::File::open(dir.join(format!("layer_{}.bin", layers.len()))) {
            layers.push(BlockParams::read(&mut std::io::BufReader::new(f))?);
        }
        if layers.is_empty() {
            return Err(BenchError::Config(format!("no layer_0.bin in {}", dir.display())));
        }
        Ok(Self { layers })
    }

    /// Analytic FLOPs of all layers at `tokens` tokens per sample.
    pub fn flops(&self, tokens: usize) -> f64 {
        self.layers.iter().map(|l| FlopCount::for_tokens(tokens, l.channels(), l.d_ff()).total()).sum()
    }
}

/// Source of per-patch confidence for one batch of tokens.
#[derive(Clone, Copy)]
pub enum Confidence<'a> {
    /// Teacher scores, `(batch, image_tokens)`.
    Teacher(&'a DenseTensor),
    Predictor(&'a PredictorParams, PatchGrid),
}

/// Wall time of one merged-pipeline run, split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PipelineTimes {
    pub predictor: Duration,
    pub mask_generation: Duration,
    pub blocks: Timings,
    pub total: Duration,
}

/// Confidence-guided mask: scores, group means, top-k selection and index map.
pub fn confidence_mask(
    seq: &TokenSequence,
    conf: Confidence<'_>,
    ratio: f64,
    times: &mut PipelineTimes,
) -> Result<MergeMask, BenchError> {
    let layout = seq.layout();
    let map = match conf {
        Confidence::Teacher(t) => {
            let t0 = Instant::now();
            let map = ConfidenceMap::from_patches(layout, t, ConfidenceSource::Teacher)?;
            times.mask_generation += t0.elapsed();
            map
        }
        Confidence::Predictor(p, grid) => {
            let t0 = Instant::now();
            let map = predictor_forward(seq, p, grid)?;
            times.predictor += t0.elapsed();
            map
        }
    };
    let t0 = Instant::now();
    let mask = mask_from_confidence(&map, ratio, layout)?;
    times.mask_generation += t0.elapsed();
    Ok(mask)
}

/// Mask and coalescing rule of `strategy`.
pub fn strategy_mask(
    seq: &TokenSequence,
    strategy: Strategy,
    conf: Confidence<'_>,
    ratio: f64,
    pick_seed: u64,
    times: &mut PipelineTimes,
) -> Result<(MergeMask, Coalesce), BenchError> {
    if merge_count(ratio, seq.layout().group_count())? == 0 {
        return Ok((MergeMask::identity(seq.layout(), seq.batch()), Coalesce::Average));
    }
    if strategy == Strategy::Similarity {
        let t0 = Instant::now();
        let mask = similarity_mask(seq, ratio)?;
        times.mask_generation += t0.elapsed();
        return Ok((mask, Coalesce::Average));
    }
    let mask = confidence_mask(seq, conf, ratio, times)?;
    let coalesce = match strategy {
        Strategy::PickOne => {
            let t0 = Instant::now();
            let c = Coalesce::pick_one(&mask, &mut Rng::new(pick_seed));
            times.mask_generation += t0.elapsed();
            c
        }
        Strategy::DropAll => Coalesce::DropAll,
        _ => Coalesce::Average,
    };
    Ok((mask, coalesce))
}

/// Runs every layer without merging.
pub fn run_oracle(seq: &TokenSequence, model: &Model) -> Result<(TokenSequence, Timings, Duration), BenchError> {
    let t0 = Instant::now();
    let mut t = Timings::default();
    let mut x = oracle_block_timed(seq, &model.layers[0], &mut t)?;
    for layer in &model.layers[1..] {
        x = oracle_block_timed(&x, layer, &mut t)?;
    }
    Ok((x, t, t0.elapsed()))
}

/// Merged pipeline output together with the mask it used.
pub struct MergedRun {
    pub output: TokenSequence,
    pub mask: MergeMask,
    pub slots: usize,
    pub times: PipelineTimes,
}

/// Generates the mask once, then runs every layer in merged form.
pub fn run_merged(
    seq: &TokenSequence,
    model: &Model,
    strategy: Strategy,
    conf: Confidence<'_>,
    ratio: f64,
    bias_correction: bool,
    pick_seed: u64,
) -> Result<MergedRun, BenchError> {
    let t0 = Instant::now();
    let mut times = PipelineTimes::default();
    let (mask, coalesce) = strategy_mask(seq, strategy, conf, ratio, pick_seed, &mut times)?;
    let opts = MergedOptions { bias_correction, coalesce };
    let mut x = merged_block_with(seq, &mask, &model.layers[0], &opts, &mut times.blocks)?;
    for layer in &model.layers[1..] {
        x = merged_block_with(&x, &mask, layer, &opts, &mut times.blocks)?;
    }
    times.total = t0.elapsed();
    let slots = slot_count(&mask, opts.coalesce.drops_slots());
    Ok(MergedRun { output: x, mask, slots, times })
}

/// Mean absolute difference over the image tokens of groups left unmerged
/// by `region`, and over all image tokens.
pub fn retained_l1(
    out: &TokenSequence,
    reference: &TokenSequence,
    region: &MergeMask,
) -> Result<(f64, f64), BenchError> {
    let layout = out.layout();
    if reference.tokens().shape() != out.tokens().shape() || region.layout() != layout {
        return Err(BenchError::Config("outputs and mask describe different sequences".into()));
    }
    let c = out.channels();
    let (mut kept, mut kept_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    for b in 0..out.batch() {
        let flags = region.flags(b);
        for (g, &merged) in flags.iter().enumerate() {
            for t in layout.group_range(g) {
                let d: f64 = out.token(b, t).iter().zip(reference.token(b, t)).map(|(a, r)| (a - r).abs() as f64).sum();
                all += d;
                all_n += c;
                if !merged {
                    kept += d;
                    kept_n += c;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(kept, kept_n), mean(all, all_n)))
}
