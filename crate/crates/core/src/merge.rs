//! Merge and split operators.
//!
//! Both walk the precomputed index map of a [`MergeMask`]: merge gathers each
//! merged slot from its contiguous run of source tokens, split scatters each
//! slot back to every token that maps to it. Nothing is concatenated.

use crate::error::{Error, Result};
use crate::layout::TokenSequence;
use crate::mask::MergeMask;
use crate::rng::Rng;
use crate::tensor::DenseTensor;

/// How a flagged group is reduced to its representative.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Coalesce {
    /// Arithmetic mean of the group members.
    #[default]
    Average,
    /// Weighted mean; one non-negative weight per `(batch, token)`.
    Weighted(Vec<f32>),
    /// One member per `(batch, group)`, given as an offset into the group.
    PickOne(Vec<u32>),
    /// Flagged groups produce no slot at all; split refills them with zeros.
    DropAll,
}

impl Coalesce {
    /// Draws a uniformly random member for every group of every sample.
    pub fn pick_one(mask: &MergeMask, rng: &mut Rng) -> Self {
        let n = mask.layout().group_size();
        let picks = (0..mask.batch() * mask.group_count()).map(|_| rng.below(n) as u32).collect();
        Coalesce::PickOne(picks)
    }

    pub fn drops_slots(&self) -> bool {
        matches!(self, Coalesce::DropAll)
    }
}

/// Output of [`merge`]: `(batch, merged_len, channels)` tokens tied to the
/// mask that produced them.
#[derive(Clone, Debug)]
pub struct MergedSequence<'m> {
    tokens: DenseTensor,
    mask: &'m MergeMask,
    dropped: bool,
}

impl<'m> MergedSequence<'m> {
    /// Wraps tokens computed at merged resolution (e.g. a module output).
    pub fn from_parts(tokens: DenseTensor, mask: &'m MergeMask, dropped: bool) -> Result<Self> {
        let len = slot_count(mask, dropped);
        if tokens.rank() != 3 || tokens.shape()[0] != mask.batch() || tokens.shape()[1] != len {
            return Err(Error::dim(format!(
                "merged tokens {:?} do not match mask (batch {}, {} slots)",
                tokens.shape(),
                mask.batch(),
                len
            )));
        }
        Ok(Self { tokens, mask, dropped })
    }

    pub fn tokens(&self) -> &DenseTensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> DenseTensor {
        self.tokens
    }

    pub fn mask(&self) -> &'m MergeMask {
        self.mask
    }

    pub fn is_dropped(&self) -> bool {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequence length after coalescing with `mask`.
pub fn slot_count(mask: &MergeMask, dropped: bool) -> usize {
    if dropped {
        mask.layout().total_tokens() - mask.merged_count() * mask.layout().group_size()
    } else {
        mask.merged_len()
    }
}

/// Averages every flagged group into one token.
pub fn merge<'m>(seq: &TokenSequence, mask: &'m MergeMask) -> Result<MergedSequence<'m>> {
    merge_with(seq, mask, &Coalesce::Average)
}

pub fn merge_with<'m>(seq: &TokenSequence, mask: &'m MergeMask, how: &Coalesce) -> Result<MergedSequence<'m>> {
    check_mask(seq, mask)?;
    let layout = mask.layout();
    let (batch, c) = (seq.batch(), seq.channels());
    let dropped = how.drops_slots();
    let len = slot_count(mask, dropped);
    let mut out = vec![0.0f32; batch * len * c];
    let mut acc = vec![0.0f64; c];
    for b in 0..batch {
        let src = seq.sample(b);
        let dst = &mut out[b * len * c..(b + 1) * len * c];
        if dropped {
            let flags = mask.flags(b);
            let mut pos = 0;
            let mut copy = |t: usize, pos: &mut usize| {
                dst[*pos * c..(*pos + 1) * c].copy_from_slice(&src[t * c..(t + 1) * c]);
                *pos += 1;
            };
            for f in 0..layout.frames() {
                let base = f * layout.tokens_per_frame();
                for t in base..base + layout.special_per_frame() {
                    copy(t, &mut pos);
                }
                for gl in 0..layout.groups_per_frame() {
                    let g = f * layout.groups_per_frame() + gl;
                    if !flags[g] {
                        for t in layout.group_range(g) {
                            copy(t, &mut pos);
                        }
                    }
                }
            }
            debug_assert_eq!(pos, len);
            continue;
        }
        let starts = mask.slot_starts(b);
        let counts = mask.inverse_counts(b);
        for s in 0..len {
            let (start, cnt) = (starts[s] as usize, counts[s] as usize);
            let row = &mut dst[s * c..(s + 1) * c];
            if cnt == 1 {
                row.copy_from_slice(&src[start * c..(start + 1) * c]);
                continue;
            }
            match how {
                Coalesce::Average => {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for t in start..start + cnt {
                        for (a, &v) in acc.iter_mut().zip(&src[t * c..(t + 1) * c]) {
                            *a += v as f64;
                        }
                    }
                    let inv = cnt as f64;
                    for (o, a) in row.iter_mut().zip(&acc) {
                        *o = (a / inv) as f32;
                    }
                }
                Coalesce::Weighted(w) => {
                    let w = &w[b * layout.total_tokens()..(b + 1) * layout.total_tokens()];
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut wsum = 0.0f64;
                    for t in start..start + cnt {
                        let wt = w[t] as f64;
                        wsum += wt;
                        for (a, &v) in acc.iter_mut().zip(&src[t * c..(t + 1) * c]) {
                            *a += wt * v as f64;
                        }
                    }
                    if wsum <= 0.0 {
                        return Err(Error::domain("group weights sum to zero"));
                    }
                    for (o, a) in row.iter_mut().zip(&acc) {
                        *o = (a / wsum) as f32;
                    }
                }
                Coalesce::PickOne(picks) => {
                    let g = layout.group_of(start)?.expect("merged slots cover image groups");
                    let t = start + picks[b * layout.group_count() + g] as usize;
                    row.copy_from_slice(&src[t * c..(t + 1) * c]);
                }
                Coalesce::DropAll => unreachable!(),
            }
        }
    }
    if let Coalesce::Weighted(w) = how {
        if w.len() != batch * layout.total_tokens() {
            return Err(Error::dim("one weight per token is required"));
        }
    }
    if let Coalesce::PickOne(p) = how {
        if p.len() != batch * layout.group_count() {
            return Err(Error::dim("one pick per group is required"));
        }
    }
    Ok(MergedSequence { tokens: DenseTensor::new(vec![batch, len, c], out)?, mask, dropped })
}

/// Restores full length: merged slots are replicated to every position of
/// their group; dropped groups come back as zeros.
pub fn split(seq: &MergedSequence<'_>) -> Result<TokenSequence> {
    let mask = seq.mask;
    let layout = mask.layout();
    let (batch, c) = (mask.batch(), seq.tokens.shape()[2]);
    let total = layout.total_tokens();
    let len = seq.len();
    let mut out = vec![0.0f32; batch * total * c];
    for b in 0..batch {
        let src = &seq.tokens.data()[b * len * c..(b + 1) * len * c];
        let dst = &mut out[b * total * c..(b + 1) * total * c];
        if seq.dropped {
            let flags = mask.flags(b);
            let mut pos = 0;
            for f in 0..layout.frames() {
                let base = f * layout.tokens_per_frame();
                for t in base..base + layout.special_per_frame() {
                    dst[t * c..(t + 1) * c].copy_from_slice(&src[pos * c..(pos + 1) * c]);
                    pos += 1;
                }
                for gl in 0..layout.groups_per_frame() {
                    let g = f * layout.groups_per_frame() + gl;
                    if !flags[g] {
                        for t in layout.group_range(g) {
                            dst[t * c..(t + 1) * c].copy_from_slice(&src[pos * c..(pos + 1) * c]);
                            pos += 1;
                        }
                    }
                }
            }
        } else {
            for (t, &s) in mask.index_map(b).iter().enumerate() {
                let s = s as usize;
                dst[t * c..(t + 1) * c].copy_from_slice(&src[s * c..(s + 1) * c]);
            }
        }
    }
    TokenSequence::new(*layout, DenseTensor::new(vec![batch, total, c], out)?)
}

fn check_mask(seq: &TokenSequence, mask: &MergeMask) -> Result<()> {
    if seq.layout() != mask.layout() || seq.batch() != mask.batch() {
        return Err(Error::Layout(format!(
            "mask compiled for batch {} ({}) applied to batch {} ({})",
            mask.batch(),
            mask.layout(),
            seq.batch(),
            seq.layout()
        )));
    }
    Ok(())
}
