use super::*;
use crate::layout::LayoutDescriptor;
use crate::mask::{build_mask, MergeMask};

fn shape(frames: usize, h: usize, w: usize) -> SampleShape {
    SampleShape { frames, grid: PatchGrid::new(h, w) }
}

fn random_x(rows: usize, c: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, c, |_, _| rng.normal() as f64)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(a.iter().map(|v| v * v).sum::<f64>().sqrt());
    if norm < 1e-9 {
        diff
    } else {
        diff / norm
    }
}

/// Layer-by-layer scalar re-implementation.
fn scalar_forward(x: &DMatrix<f64>, p: &PredictorParams, s: SampleShape) -> Vec<f64> {
    let (m, c, l) = (x.nrows(), x.ncols(), p.latent());
    let z: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..l).map(|o| p.proj_bias[o] + (0..c).map(|ch| x[(i, ch)] * p.proj[(ch, o)]).sum::<f64>()).collect())
        .collect();
    let lin = |w: &DMatrix<f64>| -> Vec<Vec<f64>> {
        z.iter().map(|r| (0..l).map(|o| (0..l).map(|d| r[d] * w[(d, o)]).sum()).collect()).collect()
    };
    let (q, k, v) = (lin(&p.wq), lin(&p.wk), lin(&p.wv));
    let mut h = z.clone();
    for i in 0..m {
        let logits: Vec<f64> =
            (0..m).map(|j| (0..l).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (l as f64).sqrt()).collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let den: f64 = logits.iter().map(|a| (a - mx).exp()).sum();
        for d in 0..l {
            h[i][d] += (0..m).map(|j| (logits[j] - mx).exp() / den * v[j][d]).sum::<f64>();
        }
    }
    let (gh, gw) = (s.grid.height as isize, s.grid.width as isize);
    let mut out = Vec::new();
    for f in 0..s.frames {
        for y in 0..gh {
            for xx in 0..gw {
                let mut acc = p.conv_bias;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (ny, nx) = (y + ky - 1, xx + kx - 1);
                        if ny < 0 || nx < 0 || ny >= gh || nx >= gw {
                            continue;
                        }
                        let n = f * (gh * gw) as usize + (ny * gw + nx) as usize;
                        for (ch, hv) in h[n].iter().enumerate() {
                            acc += p.conv[((ky * 3 + kx) as usize, ch)] * hv;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn zero_weights_give_conv_bias() {
    let mut p = PredictorParams::zeros(3, 4);
    p.conv_bias = 0.7;
    let mut rng = Rng::new(1);
    let x = random_x(8, 3, &mut rng);
    let out = forward(&x, &p, shape(2, 2, 2)).unwrap();
    assert!(out.iter().all(|&v| v == 0.7));
}

#[test]
fn single_patch_is_affine() {
    let mut rng = Rng::new(2);
    let p = PredictorParams::random(3, 2, &mut rng).unwrap();
    let s = shape(1, 1, 1);
    let f = |x: [f64; 3]| forward(&DMatrix::from_row_slice(1, 3, &x), &p, s).unwrap()[0];
    // one key, so attention is the identity on values: H = Z (I + Wv)
    let eye = DMatrix::<f64>::identity(2, 2);
    let center = p.conv.row(4).transpose();
    let lin = &p.proj * (&eye + &p.wv) * &center;
    let offset = (p.proj_bias.transpose() * (&eye + &p.wv) * &center)[0] + p.conv_bias;
    for x in [[1.0, 0.0, 0.0], [0.3, -2.0, 1.5], [0.0, 0.0, 0.0]] {
        let expect = lin[0] * x[0] + lin[1] * x[1] + lin[2] * x[2] + offset;
        assert!((f(x) - expect).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_scalar_oracle() {
    let mut rng = Rng::new(3);
    let p = PredictorParams::random(5, 4, &mut rng).unwrap();
    let s = shape(1, 4, 4);
    let x = random_x(16, 5, &mut rng);
    let got = forward(&x, &p, s).unwrap();
    let expect = scalar_forward(&x, &p, s);
    assert!(rel_err(got.as_slice(), &expect) < 1e-10);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-5);
    }
    let cached = forward_cached(&x, &p, s).unwrap();
    for (a, b) in cached.output.iter().zip(got.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn blocked_forward_spans_blocks() {
    let mut rng = Rng::new(4);
    let p = PredictorParams::random(3, 4, &mut rng).unwrap();
    let s = shape(3, 10, 10);
    let x = random_x(300, 3, &mut rng);
    let a = forward(&x, &p, s).unwrap();
    let b = forward_cached(&x, &p, s).unwrap().output;
    assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-12);
}

#[test]
fn grid_mismatch_is_rejected() {
    let mut rng = Rng::new(5);
    let p = PredictorParams::random(3, 4, &mut rng).unwrap();
    let x = random_x(10, 3, &mut rng);
    assert!(matches!(forward(&x, &p, shape(1, 3, 3)), Err(Error::Layout(_))));
    let l = LayoutDescriptor::new(1, 0, 8, 4).unwrap();
    let seq = TokenSequence::new(l, DenseTensor::zeros(&[1, 8, 3])).unwrap();
    assert!(predictor_forward(&seq, &p, PatchGrid::new(3, 3)).is_err());
    let c = predictor_forward(&seq, &p, PatchGrid::new(2, 4)).unwrap();
    assert_eq!(c.source(), ConfidenceSource::Predictor);
}

#[test]
fn equal_scores_cost_ln2() {
    let pairs = RankingPairSet::new(vec![(0, 1)]).unwrap();
    let l = ranking_loss(&[0.4, 0.4], &pairs).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    let g = ranking_loss_grad(&[0.4, 0.4], &pairs).unwrap();
    assert_eq!(g, vec![-0.5, 0.5]);
}

#[test]
fn saturated_pair() {
    let pairs = RankingPairSet::new(vec![(0, 1)]).unwrap();
    assert!(ranking_loss(&[20.0, 0.0], &pairs).unwrap() < 1e-8);
    let g = ranking_loss_grad(&[20.0, 0.0], &pairs).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-8));
    // huge margins stay finite
    assert!(ranking_loss(&[0.0, 1e6], &pairs).unwrap().is_finite());
    assert!((ranking_loss(&[0.0, 1e6], &pairs).unwrap() - 1e6).abs() < 1e-6);
}

#[test]
fn loss_matches_direct_summation() {
    let mut rng = Rng::new(6);
    let s: Vec<f64> = (0..4).map(|_| rng.normal() as f64).collect();
    let pairs = RankingPairSet::new(vec![(0, 1), (2, 3), (3, 0)]).unwrap();
    let direct =
        ((1.0 + (s[1] - s[0]).exp()).ln() + (1.0 + (s[3] - s[2]).exp()).ln() + (1.0 + (s[0] - s[3]).exp()).ln()) / 3.0;
    assert!((ranking_loss(&s, &pairs).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let s: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal() as f64).collect();
    let teacher: Vec<f32> = (0..6).map(|_| rng.normal()).collect();
    let pairs = RankingPairSet::all(&teacher);
    let g = ranking_loss_grad(&s, &pairs).unwrap();
    let h = 1e-3;
    let fd: Vec<f64> = (0..6)
        .map(|i| {
            let mut a = s.clone();
            let mut b = s.clone();
            a[i] += h;
            b[i] -= h;
            (ranking_loss(&a, &pairs).unwrap() - ranking_loss(&b, &pairs).unwrap()) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(&g, &fd) < 1e-4);
}

#[test]
fn empty_pairs_and_bad_pairs() {
    let empty = RankingPairSet::new(vec![]).unwrap();
    assert!(matches!(ranking_loss(&[1.0], &empty), Err(Error::Domain(_))));
    assert!(ranking_loss_grad(&[1.0], &empty).is_err());
    assert!(RankingPairSet::new(vec![(1, 1)]).is_err());
    assert!(RankingPairSet::new(vec![(0, 1), (0, 1)]).is_err());
    let p = RankingPairSet::new(vec![(0, 5)]).unwrap();
    assert!(matches!(ranking_loss(&[0.0, 1.0], &p), Err(Error::OutOfRange { .. })));
}

#[test]
fn sampled_pairs_are_ordered_and_distinct() {
    let mut rng = Rng::new(8);
    let teacher: Vec<f32> = (0..200).map(|i| (i % 50) as f32).collect();
    let pairs = RankingPairSet::sample(&teacher, 500, &mut rng);
    assert_eq!(pairs.len(), 500);
    let mut seen = std::collections::HashSet::new();
    for &(i, j) in pairs.pairs() {
        assert!(teacher[i as usize] > teacher[j as usize]);
        assert!(seen.insert((i, j)));
    }
    let small = RankingPairSet::sample(&[1.0, 2.0, 2.0, 0.0], 100, &mut rng);
    assert_eq!(small, RankingPairSet::all(&[1.0, 2.0, 2.0, 0.0]));
    assert_eq!(small.len(), 5);
}

#[test]
fn shift_invariance() {
    let mut rng = Rng::new(9);
    let s: Vec<f64> = (0..10).map(|_| rng.normal() as f64).collect();
    let t: Vec<f32> = (0..10).map(|_| rng.normal()).collect();
    let pairs = RankingPairSet::all(&t);
    let shifted: Vec<f64> = s.iter().map(|v| v + 3.25).collect();
    assert!((ranking_loss(&s, &pairs).unwrap() - ranking_loss(&shifted, &pairs).unwrap()).abs() < 1e-12);
    assert!(ranking_loss(&s, &pairs).unwrap() >= 0.0);
}

#[test]
fn mask_invariant_under_monotone_transform() {
    let l = LayoutDescriptor::new(1, 0, 32, 4).unwrap();
    let mut rng = Rng::new(10);
    let v: Vec<f32> = (0..32).map(|_| rng.normal()).collect();
    let to_mask = |vals: Vec<f32>| {
        let t = DenseTensor::new(vec![1, 32], vals).unwrap();
        let c = ConfidenceMap::from_patches(&l, &t, ConfidenceSource::Predictor).unwrap();
        crate::mask::mask_from_confidence(&c, 0.5, &l).unwrap()
    };
    // per-token transforms keep group means ordered only when linear; exp of a
    // group-constant map is order preserving on the groups themselves
    let group_const: Vec<f32> = (0..32).map(|i| v[i / 4]).collect();
    let a = to_mask(group_const.clone());
    let b = to_mask(group_const.iter().map(|x| x.exp() * 3.0 - 1.0).collect());
    assert_eq!(a, b);
}

#[test]
fn iou_cases() {
    let l = LayoutDescriptor::new(1, 0, 4, 1).unwrap();
    let m = |f: [bool; 4]| MergeMask::from_flags(&l, &[f.to_vec()]).unwrap();
    let a = m([true, true, false, false]);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(mask_iou(&a, &m([false, false, true, true])).unwrap(), 0.0);
    assert!((mask_iou(&a, &m([true, false, true, false])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let e = MergeMask::identity(&l, 1);
    assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
    let other = MergeMask::identity(&LayoutDescriptor::new(1, 0, 8, 1).unwrap(), 1);
    assert!(mask_iou(&a, &other).is_err());
    let gc = DenseTensor::zeros(&[1, 4]);
    assert!(build_mask(&gc, 0.5, &l).is_ok());
}

#[test]
fn mse_cases() {
    assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
    assert_eq!(mse_loss(&[2.0, 3.0], &[1.0, 2.0]).unwrap().0, 1.0);
    assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    let p = [0.3, -1.2, 2.0];
    let t = [0.0, 0.5, 1.0];
    let (_, g) = mse_loss(&p, &t).unwrap();
    let h = 1e-4;
    for i in 0..3 {
        let mut a = p;
        let mut b = p;
        a[i] += h;
        b[i] -= h;
        let fd = (mse_loss(&a, &t).unwrap().0 - mse_loss(&b, &t).unwrap().0) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-5 * g[i].abs().max(1.0));
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = Rng::new(11);
    let p = PredictorParams::random(3, 4, &mut rng).unwrap();
    let s = shape(1, 3, 3);
    let cache = forward_cached(&random_x(9, 3, &mut rng), &p, s).unwrap();
    let g = backward(&cache, &p, &DVector::zeros(9));
    assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
}

#[test]
fn conv_bias_gradient_is_upstream_sum() {
    let mut rng = Rng::new(12);
    let p = PredictorParams::random(3, 4, &mut rng).unwrap();
    let s = shape(1, 3, 3);
    let cache = forward_cached(&random_x(9, 3, &mut rng), &p, s).unwrap();
    let up = DVector::from_fn(9, |_, _| rng.normal() as f64);
    let g = backward(&cache, &p, &up);
    assert!((g.conv_bias - up.sum()).abs() < 1e-12);
}

/// Central differences of the ranking loss through the cache-free forward.
pub(crate) fn finite_difference(
    x: &DMatrix<f64>,
    p: &PredictorParams,
    s: SampleShape,
    pairs: &RankingPairSet,
    h: f64,
) -> Vec<Vec<f64>> {
    let loss = |q: &PredictorParams| ranking_loss(forward(x, q, s).unwrap().as_slice(), pairs).unwrap();
    let mut out = Vec::new();
    for b in 0..PARAM_BLOCKS.len() {
        let len = p.blocks()[b].len();
        let mut fd = Vec::with_capacity(len);
        for i in 0..len {
            let mut a = p.clone();
            a.blocks_mut()[b][i] += h;
            let mut c = p.clone();
            c.blocks_mut()[b][i] -= h;
            fd.push((loss(&a) - loss(&c)) / (2.0 * h));
        }
        out.push(fd);
    }
    out
}

#[test]
fn every_block_matches_finite_differences() {
    let mut rng = Rng::new(13);
    let p = PredictorParams::random(4, 3, &mut rng).unwrap();
    let s = shape(1, 4, 4);
    let x = random_x(16, 4, &mut rng);
    let teacher: Vec<f32> = (0..16).map(|_| rng.normal()).collect();
    let pairs = RankingPairSet::all(&teacher);
    let (_, g) = backprop(&x, &p, s, &pairs).unwrap();
    let fd = finite_difference(&x, &p, s, &pairs, 1e-5);
    for (b, name) in PARAM_BLOCKS.iter().enumerate() {
        let e = rel_err(g.blocks()[b], &fd[b]);
        assert!(e < 1e-3, "{name}: relative error {e}");
    }
}

#[test]
fn params_roundtrip_as_f32() {
    let mut rng = Rng::new(14);
    let p = PredictorParams::random(3, 5, &mut rng).unwrap();
    let mut buf = Vec::new();
    p.write(&mut buf).unwrap();
    let q = PredictorParams::read(&mut buf.as_slice()).unwrap();
    for (a, b) in p.blocks().iter().zip(q.blocks()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}

mod training {
    use super::*;
    use crate::synth::Workload;

    fn small() -> (Workload, TrainConfig) {
        let wl = Workload::smooth(PatchGrid::new(4, 4), 4, 1);
        let cfg = TrainConfig {
            steps: 20,
            latent: 4,
            train_samples: 2,
            holdout_samples: 2,
            frames: 1,
            eval_every: 5,
            ..TrainConfig::default()
        };
        (wl, cfg)
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let (wl, mut cfg) = small();
        cfg.lr = 0.0;
        let out = train(&wl, &cfg).unwrap();
        assert_eq!(out.trace.len(), 21);
        assert!(out.trace.iter().all(|r| r.loss == out.trace[0].loss));
    }

    #[test]
    fn deterministic_trace() {
        let (wl, cfg) = small();
        let a = train(&wl, &cfg).unwrap();
        let b = train(&wl, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert!(a.trace.iter().filter(|r| r.holdout_iou.is_some()).count() == 5);
    }

    #[test]
    fn divergence_is_reported() {
        let (wl, mut cfg) = small();
        cfg.lr = 1e12;
        cfg.objective = Objective::Mse;
        match train(&wl, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv() {
        let rows = [
            TraceRow { step: 0, loss: 0.5, holdout_iou: Some(0.25) },
            TraceRow { step: 1, loss: 0.4, holdout_iou: None },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,holdout_iou\n0,0.5,0.25\n1,0.4,\n");
    }
}
