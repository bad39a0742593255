//! Transformer block (single- or multi-head attention followed by a
//! token-wise MLP, both with residual connections) in two flavors: the exact
//! unmerged reference and the merged variant that runs each module at merged
//! resolution.
//!
//! The merged block applies merge → attention → split and merge → MLP →
//! split, with residuals added at full resolution. With bias correction on,
//! every merged key standing for `n` tokens gets `ln n` added to its logit.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::layout::{LayoutDescriptor, TokenSequence};
use crate::mask::MergeMask;
use crate::merge::{merge_with, slot_count, split, Coalesce, MergedSequence};
use crate::rng::Rng;
use crate::tensor::{matmul_into, softmax_row_into, write_sections, DenseTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: DenseTensor,
    pub wk: DenseTensor,
    pub wv: DenseTensor,
    pub wo: DenseTensor,
    pub w1: DenseTensor,
    pub w2: DenseTensor,
    pub heads: usize,
}

impl BlockParams {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random(channels: usize, d_ff: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let sc = 1.0 / (channels as f32).sqrt();
        let sf = 1.0 / (d_ff as f32).sqrt();
        let p = Self {
            wq: DenseTensor::randn(&[channels, channels], sc, rng),
            wk: DenseTensor::randn(&[channels, channels], sc, rng),
            wv: DenseTensor::randn(&[channels, channels], sc, rng),
            wo: DenseTensor::randn(&[channels, channels], sc, rng),
            w1: DenseTensor::randn(&[channels, d_ff], sc, rng),
            w2: DenseTensor::randn(&[d_ff, channels], sf, rng),
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(channels: usize, d_ff: usize) -> Self {
        let sq = DenseTensor::zeros(&[channels, channels]);
        Self {
            wq: sq.clone(),
            wk: sq.clone(),
            wv: sq.clone(),
            wo: sq,
            w1: DenseTensor::zeros(&[channels, d_ff]),
            w2: DenseTensor::zeros(&[d_ff, channels]),
            heads: 1,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != [c, c] {
                return Err(Error::dim(format!("{name} must be {c}x{c}, got {:?}", w.shape())));
            }
        }
        let f = self.d_ff();
        if self.w1.shape() != [c, f] || self.w2.shape() != [f, c] {
            return Err(Error::dim("MLP weights must be (c, d_ff) and (d_ff, c)"));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!("{} heads do not divide {c} channels", self.heads)));
        }
        let all = [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2];
        if !all.iter().all(|w| w.all_finite()) {
            return Err(Error::domain("non-finite block weight"));
        }
        Ok(())
    }

    pub fn write<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let heads = DenseTensor::new(vec![1], vec![self.heads as f32])?;
        write_sections(
            w,
            &[
                ("wq", &self.wq),
                ("wk", &self.wk),
                ("wv", &self.wv),
                ("wo", &self.wo),
                ("w1", &self.w1),
                ("w2", &self.w2),
                ("heads", &heads),
            ],
        )
    }

    pub fn read<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let mut sections = crate::tensor::read_sections(r)?;
        let mut take = |name: &str| {
            sections
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| sections.swap_remove(i).1)
                .ok_or_else(|| Error::Format(format!("missing section {name}")))
        };
        let p = Self {
            wq: take("wq")?,
            wk: take("wk")?,
            wv: take("wv")?,
            wo: take("wo")?,
            w1: take("w1")?,
            w2: take("w2")?,
            heads: take("heads")?.data().first().copied().unwrap_or(1.0) as usize,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Additive per-key logit bias: `ln n_j` for a slot standing for `n_j`
/// original tokens, zero for unmerged slots.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias(Vec<f32>);

impl AttentionBias {
    pub fn from_counts(counts: &[u32]) -> Self {
        Self(counts.iter().map(|&n| (n as f32).ln()).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Options for [`merged_block_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct MergedOptions {
    pub bias_correction: bool,
    pub coalesce: Coalesce,
}

impl Default for MergedOptions {
    fn default() -> Self {
        Self { bias_correction: true, coalesce: Coalesce::Average }
    }
}

/// Wall time spent per component of a block.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub attention: Duration,
    pub mlp: Duration,
    pub merge_split: Duration,
    pub other: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.attention + self.mlp + self.merge_split + self.other
    }

    pub fn accumulate(&mut self, o: &Timings) {
        self.attention += o.attention;
        self.mlp += o.mlp;
        self.merge_split += o.merge_split;
        self.other += o.other;
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let out = f();
    *slot += t0.elapsed();
    out
}

/// Query rows processed together so their reductions run side by side.
const ROW_BLOCK: usize = 4;

/// Dot products of the `ROW_BLOCK` query rows packed in `qb` with `k`,
/// each accumulated in four interleaved partial sums.
#[inline]
fn dot_rows(qb: &[f64], k: &[f64]) -> [f64; ROW_BLOCK] {
    let dh = k.len();
    let mut lanes = [[0.0f64; 4]; ROW_BLOCK];
    let whole = dh - dh % 4;
    for c in (0..whole).step_by(4) {
        let kc = &k[c..c + 4];
        for (r, lane) in lanes.iter_mut().enumerate() {
            let qc = &qb[r * dh + c..r * dh + c + 4];
            for l in 0..4 {
                lane[l] += qc[l] * kc[l];
            }
        }
    }
    let mut out = [0.0f64; ROW_BLOCK];
    for (r, (o, lane)) in out.iter_mut().zip(&lanes).enumerate() {
        let mut s = (lane[0] + lane[1]) + (lane[2] + lane[3]);
        for d in whole..dh {
            s += qb[r * dh + d] * k[d];
        }
        *o = s;
    }
    out
}

/// Multi-head softmax attention over one sample's `len × c` tokens, followed
/// by the output projection.
fn attention(x: &[f32], len: usize, p: &BlockParams, bias: Option<&[f32]>) -> Vec<f32> {
    let c = p.channels();
    let dh = c / p.heads;
    let mut q = vec![0.0f32; len * c];
    let mut k = vec![0.0f32; len * c];
    let mut v = vec![0.0f32; len * c];
    matmul_into(x, len, &p.wq, &mut q);
    matmul_into(x, len, &p.wk, &mut k);
    matmul_into(x, len, &p.wv, &mut v);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0f32; len * c];
    let mut kh = vec![0.0f64; len * dh];
    let mut vh = vec![0.0f64; len * dh];
    let mut qb = vec![0.0f64; ROW_BLOCK * dh];
    let mut logits = vec![0.0f32; ROW_BLOCK * len];
    let mut weights = vec![0.0f32; ROW_BLOCK * len];
    let mut scratch = vec![0.0f64; len];
    let mut rows = vec![0.0f64; ROW_BLOCK * dh];
    for h in 0..p.heads {
        let off = h * dh;
        for j in 0..len {
            for d in 0..dh {
                kh[j * dh + d] = k[j * c + off + d] as f64;
                vh[j * dh + d] = v[j * c + off + d] as f64;
            }
        }
        for i0 in (0..len).step_by(ROW_BLOCK) {
            let block = ROW_BLOCK.min(len - i0);
            // rows past the end of the sequence get zero queries and are discarded
            qb.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..block {
                for d in 0..dh {
                    qb[r * dh + d] = q[(i0 + r) * c + off + d] as f64;
                }
            }
            for (j, kj) in kh.chunks_exact(dh).enumerate() {
                let dots = dot_rows(&qb, kj);
                for r in 0..block {
                    logits[r * len + j] = (dots[r] * scale) as f32;
                }
            }
            for r in 0..block {
                let span = r * len..(r + 1) * len;
                softmax_row_into(&logits[span.clone()], bias, &mut scratch, &mut weights[span]);
            }
            rows.iter_mut().for_each(|r| *r = 0.0);
            {
                let (r0, rest) = rows.split_at_mut(dh);
                let (r1, rest) = rest.split_at_mut(dh);
                let (r2, r3) = rest.split_at_mut(dh);
                for (j, vj) in vh.chunks_exact(dh).enumerate() {
                    let w = |r: usize| if r < block { weights[r * len + j] as f64 } else { 0.0 };
                    let (w0, w1, w2, w3) = (w(0), w(1), w(2), w(3));
                    for ((((y0, y1), y2), y3), &vv) in
                        r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(vj)
                    {
                        *y0 += w0 * vv;
                        *y1 += w1 * vv;
                        *y2 += w2 * vv;
                        *y3 += w3 * vv;
                    }
                }
            }
            for r in 0..block {
                let dst = &mut ctx[(i0 + r) * c + off..(i0 + r) * c + off + dh];
                for (o, &y) in dst.iter_mut().zip(&rows[r * dh..(r + 1) * dh]) {
                    *o = y as f32;
                }
            }
        }
    }
    let mut out = vec![0.0f32; len * c];
    matmul_into(&ctx, len, &p.wo, &mut out);
    out
}

pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

/// Token-wise `gelu(x W1) W2`.
fn mlp(x: &[f32], len: usize, p: &BlockParams) -> Vec<f32> {
    let mut hidden = vec![0.0f32; len * p.d_ff()];
    matmul_into(x, len, &p.w1, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = gelu(*h));
    let mut out = vec![0.0f32; len * p.channels()];
    matmul_into(&hidden, len, &p.w2, &mut out);
    out
}

fn check_channels(seq: &TokenSequence, p: &BlockParams) -> Result<()> {
    if seq.channels() != p.channels() {
        return Err(Error::dim(format!("tokens have {} channels, block expects {}", seq.channels(), p.channels())));
    }
    Ok(())
}

fn add_in_place(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Exact block: full attention then MLP, residuals after each.
pub fn oracle_block(seq: &TokenSequence, p: &BlockParams) -> Result<TokenSequence> {
    oracle_block_timed(seq, p, &mut Timings::default())
}

pub fn oracle_block_timed(seq: &TokenSequence, p: &BlockParams, t: &mut Timings) -> Result<TokenSequence> {
    check_channels(seq, p)?;
    let len = seq.layout().total_tokens();
    let mut out = Vec::with_capacity(seq.tokens().len());
    for b in 0..seq.batch() {
        let x = seq.sample(b);
        let a = timed(&mut t.attention, || attention(x, len, p, None));
        let mut h = x.to_vec();
        timed(&mut t.other, || add_in_place(&mut h, &a));
        let f = timed(&mut t.mlp, || mlp(&h, len, p));
        timed(&mut t.other, || add_in_place(&mut h, &f));
        out.extend(h);
    }
    TokenSequence::new(*seq.layout(), DenseTensor::new(seq.tokens().shape().to_vec(), out)?)
}

/// Merged block with the default average coalescing.
pub fn merged_block(
    seq: &TokenSequence,
    mask: &MergeMask,
    p: &BlockParams,
    bias_correction: bool,
) -> Result<TokenSequence> {
    let opts = MergedOptions { bias_correction, coalesce: Coalesce::Average };
    merged_block_with(seq, mask, p, &opts, &mut Timings::default())
}

pub fn merged_block_with(
    seq: &TokenSequence,
    mask: &MergeMask,
    p: &BlockParams,
    opts: &MergedOptions,
    t: &mut Timings,
) -> Result<TokenSequence> {
    if mask.is_identity() && mask.layout() == seq.layout() && mask.batch() == seq.batch() {
        return oracle_block_timed(seq, p, t);
    }
    merged_block_traced(seq, mask, p, opts, t, &mut |_, _| {})
}

/// Like [`merged_block_with`], handing intermediate tensors to `trace`:
/// `merged_in`, `attention_merged`, `attention_split`, `mlp_merged`,
/// `mlp_split`.
pub fn merged_block_traced(
    seq: &TokenSequence,
    mask: &MergeMask,
    p: &BlockParams,
    opts: &MergedOptions,
    t: &mut Timings,
    trace: &mut dyn FnMut(&str, &DenseTensor),
) -> Result<TokenSequence> {
    check_channels(seq, p)?;
    let dropped = opts.coalesce.drops_slots();
    let len = slot_count(mask, dropped);
    let c = p.channels();
    let biases: Option<Vec<AttentionBias>> = (opts.bias_correction && !dropped)
        .then(|| (0..mask.batch()).map(|b| AttentionBias::from_counts(mask.inverse_counts(b))).collect());

    let merged = timed(&mut t.merge_split, || merge_with(seq, mask, &opts.coalesce))?;
    trace("merged_in", merged.tokens());
    let mut att = Vec::with_capacity(mask.batch() * len * c);
    for b in 0..mask.batch() {
        let x = &merged.tokens().data()[b * len * c..(b + 1) * len * c];
        let bias = biases.as_ref().map(|v| v[b].values());
        att.extend(timed(&mut t.attention, || attention(x, len, p, bias)));
    }
    let att = MergedSequence::from_parts(DenseTensor::new(vec![mask.batch(), len, c], att)?, mask, dropped)?;
    trace("attention_merged", att.tokens());
    let att_full = timed(&mut t.merge_split, || split(&att))?;
    trace("attention_split", att_full.tokens());
    let mut h = seq.tokens().data().to_vec();
    timed(&mut t.other, || add_in_place(&mut h, att_full.tokens().data()));
    let h = TokenSequence::new(*seq.layout(), DenseTensor::new(seq.tokens().shape().to_vec(), h)?)?;

    let merged_h = timed(&mut t.merge_split, || merge_with(&h, mask, &opts.coalesce))?;
    let mut f = Vec::with_capacity(mask.batch() * len * c);
    for b in 0..mask.batch() {
        let x = &merged_h.tokens().data()[b * len * c..(b + 1) * len * c];
        f.extend(timed(&mut t.mlp, || mlp(x, len, p)));
    }
    let f = MergedSequence::from_parts(DenseTensor::new(vec![mask.batch(), len, c], f)?, mask, dropped)?;
    trace("mlp_merged", f.tokens());
    let f_full = timed(&mut t.merge_split, || split(&f))?;
    trace("mlp_split", f_full.tokens());
    let mut out = h.into_tokens().into_data();
    timed(&mut t.other, || add_in_place(&mut out, f_full.tokens().data()));
    TokenSequence::new(*seq.layout(), DenseTensor::new(seq.tokens().shape().to_vec(), out)?)
}

/// Analytic per-block FLOP count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopCount {
    pub tokens: usize,
    pub attention: f64,
    pub mlp: f64,
}

impl FlopCount {
    /// `4 N² d + 8 N d²` for attention and `4 N d d_ff` for the MLP.
    pub fn for_tokens(tokens: usize, channels: usize, d_ff: usize) -> Self {
        let (n, d, f) = (tokens as f64, channels as f64, d_ff as f64);
        Self { tokens, attention: 4.0 * n * n * d + 8.0 * n * d * d, mlp: 4.0 * n * d * f }
    }

    pub fn total(&self) -> f64 {
        self.attention + self.mlp
    }
}

/// FLOPs of one block over `layout`, at merged length when a mask is given.
pub fn flop_count(layout: &LayoutDescriptor, mask: Option<&MergeMask>, p: &BlockParams) -> FlopCount {
    let tokens = match mask {
        Some(m) => m.merged_len(),
        None => layout.total_tokens(),
    };
    FlopCount::for_tokens(tokens, p.channels(), p.d_ff())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutDescriptor;

    /// Scalar re-implementation of one single-head block on one sample.
    fn scalar_block(x: &[Vec<f64>], p: &BlockParams) -> Vec<Vec<f64>> {
        let c = p.channels();
        let f = p.d_ff();
        let w = |m: &DenseTensor, i: usize, j: usize| m.data()[i * m.shape()[1] + j] as f64;
        let proj = |v: &[f64], m: &DenseTensor, cols: usize| -> Vec<f64> {
            (0..cols).map(|j| (0..v.len()).map(|i| v[i] * w(m, i, j)).sum()).collect()
        };
        let q: Vec<Vec<f64>> = x.iter().map(|t| proj(t, &p.wq, c)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|t| proj(t, &p.wk, c)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|t| proj(t, &p.wv, c)).collect();
        let mut out = Vec::new();
        for i in 0..x.len() {
            let logits: Vec<f64> =
                (0..x.len()).map(|j| (0..c).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (c as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let ctx: Vec<f64> =
                (0..c).map(|d| (0..x.len()).map(|j| (logits[j] - m).exp() / z * v[j][d]).sum()).collect();
            let a = proj(&ctx, &p.wo, c);
            let h: Vec<f64> = (0..c).map(|d| x[i][d] + a[d]).collect();
            let hid: Vec<f64> = proj(&h, &p.w1, f)
                .into_iter()
                .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect();
            let m2 = proj(&hid, &p.w2, c);
            out.push((0..c).map(|d| h[d] + m2[d]).collect());
        }
        out
    }

    fn seq_from(l: LayoutDescriptor, batch: usize, c: usize, data: Vec<f32>) -> TokenSequence {
        TokenSequence::new(l, DenseTensor::new(vec![batch, l.total_tokens(), c], data).unwrap()).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = Rng::new(1);
        let p = BlockParams::random(4, 16, 1, &mut rng).unwrap();
        let l = LayoutDescriptor::new(1, 0, 1, 1).unwrap();
        let x = seq_from(l, 1, 4, vec![0.3, -1.0, 0.5, 2.0]);
        let y = oracle_block(&x, &p).unwrap();
        let xv: Vec<f64> = x.sample(0).iter().map(|&v| v as f64).collect();
        // softmax over one key is 1, so attention reduces to x Wv Wo
        let wv = |i: usize, j: usize| p.wv.data()[i * 4 + j] as f64;
        let wo = |i: usize, j: usize| p.wo.data()[i * 4 + j] as f64;
        let v: Vec<f64> = (0..4).map(|j| (0..4).map(|i| xv[i] * wv(i, j)).sum()).collect();
        let a: Vec<f64> = (0..4).map(|j| (0..4).map(|i| v[i] * wo(i, j)).sum()).collect();
        let h: Vec<f64> = (0..4).map(|d| xv[d] + a[d]).collect();
        let expect = scalar_block(&[xv], &p);
        for (got, want) in y.sample(0).iter().zip(&expect[0]) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
        let mut one = DenseTensor::zeros(&[1, 1, 4]);
        one.data_mut().iter_mut().zip(&h).for_each(|(o, v)| *o = *v as f32);
        let mlp_only = mlp(one.data(), 1, &p);
        for d in 0..4 {
            assert!((y.sample(0)[d] - (h[d] as f32 + mlp_only[d])).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let p = BlockParams::zeros(3, 12);
        let l = LayoutDescriptor::new(1, 1, 4, 2).unwrap();
        let mut rng = Rng::new(2);
        let x = TokenSequence::new(l, DenseTensor::randn(&[2, 5, 3], 1.0, &mut rng)).unwrap();
        assert_eq!(oracle_block(&x, &p).unwrap(), x);
    }

    #[test]
    fn oracle_matches_scalar_reimplementation() {
        let mut rng = Rng::new(3);
        let p = BlockParams::random(5, 20, 1, &mut rng).unwrap();
        let l = LayoutDescriptor::new(1, 2, 4, 2).unwrap();
        let x = TokenSequence::new(l, DenseTensor::randn(&[1, 6, 5], 1.0, &mut rng)).unwrap();
        let y = oracle_block(&x, &p).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|t| x.token(0, t).iter().map(|&v| v as f64).collect()).collect();
        let expect = scalar_block(&rows, &p);
        for (t, row) in expect.iter().enumerate() {
            for (got, want) in y.token(0, t).iter().zip(row) {
                assert!((*got as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_mask_is_bitwise_oracle() {
        let mut rng = Rng::new(4);
        for heads in [1, 2] {
            let p = BlockParams::random(8, 32, heads, &mut rng).unwrap();
            let l = LayoutDescriptor::new(2, 1, 8, 4).unwrap();
            let x = TokenSequence::new(l, DenseTensor::randn(&[2, 18, 8], 1.0, &mut rng)).unwrap();
            let m = MergeMask::identity(&l, 2);
            let o = oracle_block(&x, &p).unwrap();
            assert_eq!(merged_block(&x, &m, &p, true).unwrap(), o);
            assert_eq!(merged_block(&x, &m, &p, false).unwrap(), o);
        }
    }

    #[test]
    fn group_constant_tokens_are_exact_with_bias() {
        let mut rng = Rng::new(5);
        let p = BlockParams::random(6, 24, 1, &mut rng).unwrap();
        let l = LayoutDescriptor::new(1, 1, 16, 4).unwrap();
        let mut x = DenseTensor::randn(&[1, 17, 6], 1.5, &mut rng);
        let flags = vec![true, false, true, false];
        for g in [0usize, 2] {
            let r = l.group_index(g).unwrap();
            let first = x.row(r.start).to_vec();
            for t in r {
                x.row_mut(t).copy_from_slice(&first);
            }
        }
        let x = TokenSequence::new(l, x).unwrap();
        let m = MergeMask::from_flags(&l, &[flags]).unwrap();
        let o = oracle_block(&x, &p).unwrap();
        let on = merged_block(&x, &m, &p, true).unwrap();
        let off = merged_block(&x, &m, &p, false).unwrap();
        assert!(on.tokens().max_abs_diff(o.tokens()).unwrap() < 1e-5);
        assert!(off.tokens().max_abs_diff(o.tokens()).unwrap() > 1e-3);
    }

    #[test]
    fn bias_rows_still_normalize() {
        let counts = [1u32, 4, 1, 2];
        let bias = AttentionBias::from_counts(&counts);
        assert_eq!(bias.values()[0], 0.0);
        assert!((bias.values()[1] - 4f32.ln()).abs() < 1e-7);
        let mut rng = Rng::new(6);
        let logits = DenseTensor::randn(&[5, 4], 3.0, &mut rng);
        let w = crate::tensor::softmax_rows(&logits, Some(bias.values())).unwrap();
        for i in 0..5 {
            let s: f64 = w.row(i).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_commutes_with_split() {
        let mut rng = Rng::new(7);
        let p = BlockParams::random(4, 8, 1, &mut rng).unwrap();
        let l = LayoutDescriptor::new(1, 1, 8, 2).unwrap();
        let x = TokenSequence::new(l, DenseTensor::randn(&[1, 9, 4], 1.0, &mut rng)).unwrap();
        let m = MergeMask::from_flags(&l, &[vec![true, false, true, true]]).unwrap();
        let merged = crate::merge::merge(&x, &m).unwrap();
        let a = mlp(merged.tokens().data(), m.merged_len(), &p);
        let a = split(
            &MergedSequence::from_parts(DenseTensor::new(vec![1, m.merged_len(), 4], a).unwrap(), &m, false).unwrap(),
        )
        .unwrap();
        let s = split(&merged).unwrap();
        let b = mlp(s.sample(0), 9, &p);
        assert_eq!(a.sample(0), b.as_slice());
    }

    #[test]
    fn flop_model() {
        let p = BlockParams::zeros(16, 64);
        let l = LayoutDescriptor::new(1, 0, 1024, 4).unwrap();
        assert_eq!(flop_count(&l, None, &p).tokens, 1024);
        let k = crate::mask::merge_count(0.5, l.group_count()).unwrap();
        assert_eq!(k, 128);
        let gc = DenseTensor::zeros(&[1, 256]);
        let m = crate::mask::build_mask(&gc, 0.5, &l).unwrap();
        assert_eq!(flop_count(&l, Some(&m), &p).tokens, 1024 - 384);

        let mut prev = 0.0;
        for frames in [1usize, 2, 4, 8, 16, 64] {
            let n = frames * 1024;
            let merged = n - frames * 128 * 3;
            let s = FlopCount::for_tokens(n, 16, 64).total() / FlopCount::for_tokens(merged, 16, 64).total();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn weights_roundtrip_through_dump() {
        let mut rng = Rng::new(8);
        let p = BlockParams::random(4, 16, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(BlockParams::read(&mut buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn channel_mismatch() {
        let p = BlockParams::zeros(4, 8);
        let l = LayoutDescriptor::new(1, 0, 2, 1).unwrap();
        let x = seq_from(l, 1, 3, vec![0.0; 6]);
        assert!(matches!(oracle_block(&x, &p), Err(Error::Dimension(_))));
    }
}
