//! Merge-mask generation.
//!
//! Per-token confidence is pooled per group, the `k = floor(p * G)` least
//! confident groups of every sample are flagged, and the flags are compiled
//! into an index map from original tokens to merged slots. Because `k`
//! depends only on `p` and the group count, every sample in a batch ends up
//! with the same merged length.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutDescriptor, TokenSequence};
use crate::scan::exclusive_scan_tiled;
use crate::tensor::DenseTensor;

const SCAN_TILE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfidenceSource {
    Teacher,
    Predictor,
}

/// Per-token confidence of shape `(batch, total_tokens)`. Special tokens
/// hold `+inf` so they never rank among the least confident.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    values: DenseTensor,
    source: ConfidenceSource,
}

impl ConfidenceMap {
    pub fn new(values: DenseTensor, source: ConfidenceSource) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim("confidence map must be (batch, tokens)"));
        }
        if values.data().iter().any(|v| v.is_nan() || *v == f32::NEG_INFINITY) {
            return Err(Error::domain("confidence values must be finite or +inf"));
        }
        Ok(Self { values, source })
    }

    /// Builds a full-token map from per-patch values of shape
    /// `(batch, image_tokens)`, inserting the `+inf` sentinel at specials.
    pub fn from_patches(layout: &LayoutDescriptor, patches: &DenseTensor, source: ConfidenceSource) -> Result<Self> {
        if patches.rank() != 2 || patches.shape()[1] != layout.image_tokens() {
            return Err(Error::dim(format!(
                "patch confidence {:?} does not match {} image tokens",
                patches.shape(),
                layout.image_tokens()
            )));
        }
        let batch = patches.shape()[0];
        let total = layout.total_tokens();
        let ppf = layout.patches_per_frame();
        let mut values = vec![f32::INFINITY; batch * total];
        for b in 0..batch {
            let src = patches.row(b);
            for f in 0..layout.frames() {
                let dst = b * total + layout.image_token(f, 0);
                values[dst..dst + ppf].copy_from_slice(&src[f * ppf..(f + 1) * ppf]);
            }
        }
        Self::new(DenseTensor::new(vec![batch, total], values)?, source)
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    pub fn source(&self) -> ConfidenceSource {
        self.source
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    /// Image-token values only, `(batch, image_tokens)`.
    pub fn patch_values(&self, layout: &LayoutDescriptor) -> Result<DenseTensor> {
        self.check_layout(layout)?;
        let ppf = layout.patches_per_frame();
        let mut out = Vec::with_capacity(self.batch() * layout.image_tokens());
        for b in 0..self.batch() {
            let row = self.values.row(b);
            for f in 0..layout.frames() {
                let s = layout.image_token(f, 0);
                out.extend_from_slice(&row[s..s + ppf]);
            }
        }
        DenseTensor::new(vec![self.batch(), layout.image_tokens()], out)
    }

    fn check_layout(&self, layout: &LayoutDescriptor) -> Result<()> {
        if self.values.shape()[1] != layout.total_tokens() {
            return Err(Error::dim(format!(
                "confidence covers {} tokens, layout has {}",
                self.values.shape()[1],
                layout.total_tokens()
            )));
        }
        Ok(())
    }
}

/// Compiled merge mask for a batch.
///
/// `index_map` sends every original token to its slot in the merged
/// sequence; `inverse_counts` holds the number of original tokens each slot
/// stands for; `slot_starts` holds the first original token of each slot.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeMask {
    layout: LayoutDescriptor,
    batch: usize,
    flags: Vec<bool>,
    merged_count: usize,
    merged_len: usize,
    index_map: Vec<u32>,
    inverse_counts: Vec<u32>,
    slot_starts: Vec<u32>,
}

impl MergeMask {
    /// Compiles per-sample group flags; every sample must flag the same
    /// number of groups.
    pub fn from_flags(layout: &LayoutDescriptor, flags: &[Vec<bool>]) -> Result<Self> {
        let groups = layout.group_count();
        let k = flags.first().map_or(0, |f| f.iter().filter(|&&x| x).count());
        for f in flags {
            if f.len() != groups {
                return Err(Error::dim(format!("{} flags for {} groups", f.len(), groups)));
            }
            if f.iter().filter(|&&x| x).count() != k {
                return Err(Error::Parameter("every sample must merge the same number of groups".into()));
            }
        }
        let total = layout.total_tokens();
        let merged_len = total - k * (layout.group_size() - 1);
        let mut index_map = Vec::with_capacity(flags.len() * total);
        let mut inverse_counts = Vec::with_capacity(flags.len() * merged_len);
        let mut slot_starts = Vec::with_capacity(flags.len() * merged_len);
        for f in flags {
            let (map, counts) = compile_index_map(f, layout)?;
            debug_assert_eq!(counts.len(), merged_len);
            let mut starts = vec![0u32; merged_len];
            let mut prev = u32::MAX;
            for (t, &slot) in map.iter().enumerate() {
                if slot != prev {
                    starts[slot as usize] = t as u32;
                    prev = slot;
                }
            }
            index_map.extend(map);
            inverse_counts.extend(counts);
            slot_starts.extend(starts);
        }
        Ok(Self {
            layout: *layout,
            batch: flags.len(),
            flags: flags.iter().flatten().copied().collect(),
            merged_count: k,
            merged_len,
            index_map,
            inverse_counts,
            slot_starts,
        })
    }

    /// All-false mask.
    pub fn identity(layout: &LayoutDescriptor, batch: usize) -> Self {
        Self::from_flags(layout, &vec![vec![false; layout.group_count()]; batch])
            .expect("identity mask is always valid")
    }

    pub fn layout(&self) -> &LayoutDescriptor {
        &self.layout
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn group_count(&self) -> usize {
        self.layout.group_count()
    }

    /// Number of merged groups per sample (`k`).
    pub fn merged_count(&self) -> usize {
        self.merged_count
    }

    pub fn merged_len(&self) -> usize {
        self.merged_len
    }

    pub fn is_identity(&self) -> bool {
        self.merged_count == 0
    }

    pub fn flags(&self, b: usize) -> &[bool] {
        let g = self.group_count();
        &self.flags[b * g..(b + 1) * g]
    }

    pub fn index_map(&self, b: usize) -> &[u32] {
        let n = self.layout.total_tokens();
        &self.index_map[b * n..(b + 1) * n]
    }

    pub fn inverse_counts(&self, b: usize) -> &[u32] {
        &self.inverse_counts[b * self.merged_len..(b + 1) * self.merged_len]
    }

    pub fn slot_starts(&self, b: usize) -> &[u32] {
        &self.slot_starts[b * self.merged_len..(b + 1) * self.merged_len]
    }

    /// Per-token flag: true if the token was left unmerged.
    pub fn retained_tokens(&self, b: usize) -> Vec<bool> {
        let map = self.index_map(b);
        let counts = self.inverse_counts(b);
        map.iter().map(|&s| counts[s as usize] == 1).collect()
    }

    /// Writes one line of `0`/`1` group flags per sample.
    pub fn write_flags<W: Write>(&self, w: &mut W) -> Result<()> {
        for b in 0..self.batch {
            let line: String = self.flags(b).iter().map(|&f| if f { '1' } else { '0' }).collect();
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Parses a mask dump written by [`MergeMask::write_flags`].
pub fn read_flags<R: BufRead>(r: R) -> Result<Vec<Vec<bool>>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Format(format!("unexpected character {c:?} in mask dump"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

/// Mean confidence of each group, `(batch, group_count)`.
pub fn group_confidence(conf: &ConfidenceMap, layout: &LayoutDescriptor) -> Result<DenseTensor> {
    conf.check_layout(layout)?;
    let groups = layout.group_count();
    let n = layout.group_size() as f64;
    let mut out = Vec::with_capacity(conf.batch() * groups);
    for b in 0..conf.batch() {
        let row = conf.values.row(b);
        for g in 0..groups {
            let sum: f64 = row[layout.group_range(g)].iter().map(|&v| v as f64).sum();
            out.push((sum / n) as f32);
        }
    }
    DenseTensor::new(vec![conf.batch(), groups], out)
}

/// Number of groups merged for ratio `p` over `groups` groups.
pub fn merge_count(p: f64, groups: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("merge ratio {p} outside [0, 1)")));
    }
    if groups == 0 {
        return Ok(0);
    }
    // The epsilon keeps products like 0.29 * 100 from flooring one short.
    let k = (p * groups as f64 + 1e-9).floor() as usize;
    Ok(k.min(groups - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pick {
    Lowest,
    Highest,
}

/// Indices of the `k` extreme scores, ties broken toward the lower index.
fn select(scores: &[f32], k: usize, pick: Pick) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        let c = if pick == Pick::Highest { c.reverse() } else { c };
        c.then(a.cmp(&b))
    });
    let mut flags = vec![false; scores.len()];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

/// Flags the `floor(p * G)` lowest-confidence groups of every sample and
/// compiles the result.
pub fn build_mask(group_conf: &DenseTensor, p: f64, layout: &LayoutDescriptor) -> Result<MergeMask> {
    if group_conf.rank() != 2 || group_conf.shape()[1] != layout.group_count() {
        return Err(Error::dim(format!(
            "group confidence {:?} for {} groups",
            group_conf.shape(),
            layout.group_count()
        )));
    }
    if layout.group_count() == 0 {
        return Err(Error::domain("layout has no groups"));
    }
    let k = merge_count(p, layout.group_count())?;
    let flags: Vec<Vec<bool>> =
        (0..group_conf.shape()[0]).map(|b| select(group_conf.row(b), k, Pick::Lowest)).collect();
    MergeMask::from_flags(layout, &flags)
}

/// Convenience pipeline: pool confidence per group and build the mask.
pub fn mask_from_confidence(conf: &ConfidenceMap, p: f64, layout: &LayoutDescriptor) -> Result<MergeMask> {
    build_mask(&group_confidence(conf, layout)?, p, layout)
}

/// Compiles one sample's group flags into `(index_map, inverse_counts)`.
///
/// Every token contributes one slot, except the non-leading members of a
/// merged group, which contribute none. An exclusive scan over the
/// contributions gives each contributing token its slot; non-leading members
/// take the slot opened by their group leader.
pub fn compile_index_map(flags: &[bool], layout: &LayoutDescriptor) -> Result<(Vec<u32>, Vec<u32>)> {
    if flags.len() != layout.group_count() {
        return Err(Error::dim(format!("{} flags for {} groups", flags.len(), layout.group_count())));
    }
    let total = layout.total_tokens();
    let n = layout.group_size();
    let mut contrib = vec![1u32; total];
    for (g, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let r = layout.group_range(g);
        contrib[r.start + 1..r.end].iter_mut().for_each(|c| *c = 0);
    }
    let mut map = contrib.clone();
    let merged_len = exclusive_scan_tiled(&mut map, SCAN_TILE) as usize;
    let mut counts = vec![1u32; merged_len];
    for (t, c) in contrib.iter().enumerate() {
        if *c == 0 {
            map[t] -= 1;
        }
    }
    for (g, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let r = layout.group_range(g);
        counts[map[r.start] as usize] = n as u32;
    }
    Ok((map, counts))
}

/// Mean pairwise cosine similarity between the members of one group.
/// Zero-norm tokens have similarity 0 with everything; a single-token group
/// scores 1.
pub(crate) fn group_similarity(members: &[&[f32]]) -> f64 {
    let n = members.len();
    if n < 2 {
        return 1.0;
    }
    let norms: Vec<f64> =
        members.iter().map(|m| m.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = members[i].iter().zip(members[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
                sum += dot / (norms[i] * norms[j]);
            }
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Per-group similarity scores, `(batch, group_count)`.
pub fn group_similarity_scores(tokens: &TokenSequence) -> DenseTensor {
    let layout = tokens.layout();
    let groups = layout.group_count();
    let mut out = Vec::with_capacity(tokens.batch() * groups);
    for b in 0..tokens.batch() {
        for g in 0..groups {
            let members: Vec<&[f32]> = layout.group_range(g).map(|t| tokens.token(b, t)).collect();
            out.push(group_similarity(&members) as f32);
        }
    }
    DenseTensor::new(vec![tokens.batch(), groups], out).expect("shape is consistent")
}

/// Similarity-guided baseline: flags the `floor(p * G)` groups whose members
/// are most alike.
pub fn similarity_mask(tokens: &TokenSequence, p: f64) -> Result<MergeMask> {
    let layout = tokens.layout();
    if tokens.channels() == 0 {
        return Err(Error::dim("tokens need at least one channel"));
    }
    if layout.group_count() == 0 {
        return Err(Error::domain("layout has no groups"));
    }
    let k = merge_count(p, layout.group_count())?;
    let scores = group_similarity_scores(tokens);
    let flags: Vec<Vec<bool>> = (0..tokens.batch()).map(|b| select(scores.row(b), k, Pick::Highest)).collect();
    MergeMask::from_flags(layout, &flags)
}
