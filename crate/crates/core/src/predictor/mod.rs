//! Lightweight confidence predictor.
//!
//! Per sample, image-token features `X` (tokens × channels) go through
//!
//! ```text
//! Z = X P + b                      linear projection to the latent space
//! H = Z + softmax(Z Wq (Z Wk)ᵀ / √l) Z Wv   single-head attention, residual
//! C'[f, y, x] = Σ_taps Σ_ch K[tap, ch] H[f, y+dy, x+dx, ch] + c   3×3 conv
//! ```
//!
//! Attention spans every patch of every frame in the sample; the 3×3
//! convolution runs per frame with zero padding. Parameters and activations
//! are `f64` so that the hand-written gradients can be checked tightly.

mod loss;
mod train;

pub use loss::{mask_iou, mse_loss, ranking_loss, ranking_loss_grad, RankingPairSet};
pub use train::{train, write_trace_csv, Objective, TraceRow, TrainConfig, TrainOutcome};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layout::{PatchGrid, TokenSequence};
use crate::mask::{ConfidenceMap, ConfidenceSource};
use crate::rng::Rng;
use crate::tensor::{read_sections, write_sections, DenseTensor};

const TAPS: usize = 9;
/// Query rows processed together by the cache-free forward pass.
const QUERY_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    /// channels × latent
    pub proj: DMatrix<f64>,
    pub proj_bias: DVector<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    /// 9 × latent; row `3 * ky + kx` is the tap at offset `(ky - 1, kx - 1)`.
    pub conv: DMatrix<f64>,
    pub conv_bias: f64,
}

/// Names of the parameter blocks, in [`PredictorParams::blocks`] order.
pub const PARAM_BLOCKS: [&str; 7] = ["proj", "proj_bias", "wq", "wk", "wv", "conv", "conv_bias"];

impl PredictorParams {
    pub fn random(channels: usize, latent: usize, rng: &mut Rng) -> Result<Self> {
        if latent == 0 || channels == 0 {
            return Err(Error::Parameter("latent and channel sizes must be at least 1".into()));
        }
        let mut gauss = |r: usize, c: usize, std: f64| DMatrix::from_fn(r, c, |_, _| std * rng.normal() as f64);
        let l = latent as f64;
        Ok(Self {
            proj: gauss(channels, latent, 1.0 / (channels as f64).sqrt()),
            proj_bias: DVector::zeros(latent),
            wq: gauss(latent, latent, 0.5 / l.sqrt()),
            wk: gauss(latent, latent, 0.5 / l.sqrt()),
            wv: gauss(latent, latent, 0.5 / l.sqrt()),
            conv: gauss(TAPS, latent, 1.0 / (TAPS as f64 * l).sqrt()),
            conv_bias: 0.0,
        })
    }

    pub fn zeros(channels: usize, latent: usize) -> Self {
        Self {
            proj: DMatrix::zeros(channels, latent),
            proj_bias: DVector::zeros(latent),
            wq: DMatrix::zeros(latent, latent),
            wk: DMatrix::zeros(latent, latent),
            wv: DMatrix::zeros(latent, latent),
            conv: DMatrix::zeros(TAPS, latent),
            conv_bias: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.proj.nrows()
    }

    pub fn latent(&self) -> usize {
        self.proj.ncols()
    }

    /// Parameter blocks as flat slices, in [`PARAM_BLOCKS`] order.
    pub fn blocks(&self) -> [&[f64]; 7] {
        [
            self.proj.as_slice(),
            self.proj_bias.as_slice(),
            self.wq.as_slice(),
            self.wk.as_slice(),
            self.wv.as_slice(),
            self.conv.as_slice(),
            std::slice::from_ref(&self.conv_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.proj.as_mut_slice(),
            self.proj_bias.as_mut_slice(),
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.conv.as_mut_slice(),
            std::slice::from_mut(&mut self.conv_bias),
        ]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check(&self, channels: usize) -> Result<()> {
        let l = self.latent();
        let ok = self.proj.nrows() == channels
            && self.proj_bias.len() == l
            && [&self.wq, &self.wk, &self.wv].iter().all(|w| w.shape() == (l, l))
            && self.conv.shape() == (TAPS, l);
        if !ok {
            return Err(Error::dim(format!(
                "predictor for {} channels / latent {} applied to {} channels",
                self.proj.nrows(),
                l,
                channels
            )));
        }
        Ok(())
    }

    /// Saves the parameters as `f32` sections.
    pub fn write<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let to_tensor = |m: &DMatrix<f64>| -> DenseTensor {
            let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)] as f32)).collect();
            DenseTensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
        };
        let pb = DenseTensor::new(vec![self.proj_bias.len()], self.proj_bias.iter().map(|&v| v as f32).collect())?;
        let cb = DenseTensor::new(vec![1], vec![self.conv_bias as f32])?;
        let (p, q, k, v, c) = (
            to_tensor(&self.proj),
            to_tensor(&self.wq),
            to_tensor(&self.wk),
            to_tensor(&self.wv),
            to_tensor(&self.conv),
        );
        write_sections(
            w,
            &[("proj", &p), ("proj_bias", &pb), ("wq", &q), ("wk", &k), ("wv", &v), ("conv", &c), ("conv_bias", &cb)],
        )
    }

    pub fn read<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let sections = read_sections(r)?;
        let get = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing section {name}")))
        };
        let mat = |name: &str| -> Result<DMatrix<f64>> {
            let t = get(name)?;
            if t.rank() != 2 {
                return Err(Error::Format(format!("{name} must be rank 2")));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            Ok(DMatrix::from_row_iterator(r, c, t.data().iter().map(|&v| v as f64)))
        };
        let params = Self {
            proj: mat("proj")?,
            proj_bias: DVector::from_iterator(
                get("proj_bias")?.len(),
                get("proj_bias")?.data().iter().map(|&v| v as f64),
            ),
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
            conv: mat("conv")?,
            conv_bias: get("conv_bias")?.data().first().copied().unwrap_or(0.0) as f64,
        };
        params.check(params.channels())?;
        Ok(params)
    }
}

/// Geometry of one sample's image tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleShape {
    pub frames: usize,
    pub grid: PatchGrid,
}

impl SampleShape {
    pub fn tokens(&self) -> usize {
        self.frames * self.grid.patches()
    }

    /// Token fed by tap `tap` when producing output `m`, if inside the frame.
    #[inline]
    fn neighbor(&self, m: usize, tap: usize) -> Option<usize> {
        let (h, w) = (self.grid.height, self.grid.width);
        let per = h * w;
        let (f, local) = (m / per, m % per);
        let (y, x) = ((local / w) as isize, (local % w) as isize);
        let (ny, nx) = (y + (tap / 3) as isize - 1, x + (tap % 3) as isize - 1);
        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
            return None;
        }
        Some(f * per + ny as usize * w + nx as usize)
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    shape: SampleShape,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Attention weights, transposed: `at[(j, i)]` is query `i`'s weight on key `j`.
    at: DMatrix<f64>,
    h: DMatrix<f64>,
    pub output: DVector<f64>,
}

/// Column-wise softmax in place.
fn softmax_columns(m: &mut DMatrix<f64>) {
    let rows = m.nrows();
    for col in m.as_mut_slice().chunks_exact_mut(rows.max(1)) {
        // four partial reductions keep the loops free of a single dependency chain
        let mut maxes = [f64::NEG_INFINITY; 4];
        let mut chunks = col.chunks_exact(4);
        for c in &mut chunks {
            for (m, &x) in maxes.iter_mut().zip(c) {
                *m = m.max(x);
            }
        }
        let max = chunks.remainder().iter().chain(&maxes).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sums = [0.0f64; 4];
        let mut chunks = col.chunks_exact_mut(4);
        for c in &mut chunks {
            for (acc, v) in sums.iter_mut().zip(c) {
                *v = (*v - max).exp();
                *acc += *v;
            }
        }
        for v in chunks.into_remainder() {
            *v = (*v - max).exp();
            sums[0] += *v;
        }
        let inv = 1.0 / ((sums[0] + sums[1]) + (sums[2] + sums[3]));
        col.iter_mut().for_each(|v| *v *= inv);
    }
}

fn project(x: &DMatrix<f64>, p: &PredictorParams) -> DMatrix<f64> {
    let mut z = x * &p.proj;
    for mut row in z.row_iter_mut() {
        row += p.proj_bias.transpose();
    }
    z
}

fn conv_head(h: &DMatrix<f64>, p: &PredictorParams, shape: SampleShape) -> DVector<f64> {
    // taps[m, t] = Σ_ch H[m, ch] K[t, ch]
    let taps = h * p.conv.transpose();
    DVector::from_fn(shape.tokens(), |m, _| {
        let mut s = p.conv_bias;
        for t in 0..TAPS {
            if let Some(n) = shape.neighbor(m, t) {
                s += taps[(n, t)];
            }
        }
        s
    })
}

/// Full forward pass for one sample, keeping every activation.
pub fn forward_cached(x: &DMatrix<f64>, p: &PredictorParams, shape: SampleShape) -> Result<ForwardCache> {
    p.check(x.ncols())?;
    if x.nrows() != shape.tokens() {
        return Err(Error::Layout(format!("{} feature rows for {} patches", x.nrows(), shape.tokens())));
    }
    let scale = 1.0 / (p.latent() as f64).sqrt();
    let z = project(x, p);
    let q = &z * &p.wq;
    let k = &z * &p.wk;
    let v = &z * &p.wv;
    let mut at = (&k * q.transpose()) * scale;
    softmax_columns(&mut at);
    let h = &z + at.tr_mul(&v);
    let output = conv_head(&h, p, shape);
    Ok(ForwardCache { shape, x: x.clone(), z, q, k, v, at, h, output })
}

/// Forward pass without caches; attention is evaluated in blocks of query
/// rows so memory stays linear in the token count.
pub fn forward(x: &DMatrix<f64>, p: &PredictorParams, shape: SampleShape) -> Result<DVector<f64>> {
    p.check(x.ncols())?;
    if x.nrows() != shape.tokens() {
        return Err(Error::Layout(format!("{} feature rows for {} patches", x.nrows(), shape.tokens())));
    }
    let m = x.nrows();
    let scale = 1.0 / (p.latent() as f64).sqrt();
    let z = project(x, p);
    let q = &z * &p.wq;
    let k = &z * &p.wk;
    let v = &z * &p.wv;
    let mut h = z.clone();
    let mut start = 0;
    while start < m {
        let rows = QUERY_BLOCK.min(m - start);
        let qb = q.rows(start, rows);
        let mut at = (&k * qb.transpose()) * scale;
        softmax_columns(&mut at);
        let y = at.tr_mul(&v);
        let mut hb = h.rows_mut(start, rows);
        hb += y;
        start += rows;
    }
    Ok(conv_head(&h, p, shape))
}

/// Parameter gradients given `upstream = dL/dC'` for one sample.
pub fn backward(cache: &ForwardCache, p: &PredictorParams, upstream: &DVector<f64>) -> PredictorParams {
    let shape = cache.shape;
    let m = shape.tokens();
    let l = p.latent();
    let scale = 1.0 / (l as f64).sqrt();
    let mut g = PredictorParams::zeros(p.channels(), l);

    g.conv_bias = upstream.sum();
    // d taps[n, t] collects the output gradient of every pixel that read n through t
    let mut dtaps = DMatrix::<f64>::zeros(m, TAPS);
    for out in 0..m {
        for t in 0..TAPS {
            if let Some(n) = shape.neighbor(out, t) {
                dtaps[(n, t)] += upstream[out];
            }
        }
    }
    g.conv = dtaps.tr_mul(&cache.h);
    let dh = &dtaps * &p.conv;

    // H = Z + Aᵀ-weighted values
    let dy = &dh;
    let dat = &cache.v * dy.transpose();
    let dv = &cache.at * dy;
    let mut dst = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let a = cache.at.column(i);
        let da = dat.column(i);
        let dot = a.dot(&da);
        for j in 0..m {
            dst[(j, i)] = a[j] * (da[j] - dot);
        }
    }
    let dq = dst.tr_mul(&cache.k) * scale;
    let dk = (&dst * &cache.q) * scale;
    g.wq = cache.z.tr_mul(&dq);
    g.wk = cache.z.tr_mul(&dk);
    g.wv = cache.z.tr_mul(&dv);
    let dz = dh + dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
    g.proj = cache.x.tr_mul(&dz);
    g.proj_bias = DVector::from_iterator(l, dz.column_iter().map(|c| c.sum()));
    g
}

/// Image-token features of sample `b` as a `tokens × channels` matrix.
pub fn sample_features(seq: &TokenSequence, b: usize) -> DMatrix<f64> {
    let layout = seq.layout();
    let c = seq.channels();
    let ppf = layout.patches_per_frame();
    DMatrix::from_fn(layout.image_tokens(), c, |m, ch| {
        let t = layout.image_token(m / ppf, m % ppf);
        seq.token(b, t)[ch] as f64
    })
}

/// Runs the predictor over every sample and returns a full-token confidence
/// map (specials carry `+inf`).
pub fn predictor_forward(seq: &TokenSequence, p: &PredictorParams, grid: PatchGrid) -> Result<ConfidenceMap> {
    grid.check(seq.layout())?;
    let shape = SampleShape { frames: seq.layout().frames(), grid };
    let mut values = Vec::with_capacity(seq.batch() * shape.tokens());
    for b in 0..seq.batch() {
        let out = forward(&sample_features(seq, b), p, shape)?;
        values.extend(out.iter().map(|&v| v as f32));
    }
    let patches = DenseTensor::new(vec![seq.batch(), shape.tokens()], values)?;
    ConfidenceMap::from_patches(seq.layout(), &patches, ConfidenceSource::Predictor)
}

/// Ranking loss of one sample and its parameter gradient.
pub fn backprop(
    x: &DMatrix<f64>,
    p: &PredictorParams,
    shape: SampleShape,
    pairs: &RankingPairSet,
) -> Result<(f64, PredictorParams)> {
    let cache = forward_cached(x, p, shape)?;
    let scores = cache.output.as_slice();
    let loss = ranking_loss(scores, pairs)?;
    let upstream = DVector::from_vec(ranking_loss_grad(scores, pairs)?);
    Ok((loss, backward(&cache, p, &upstream)))
}

#[cfg(test)]
mod tests;
