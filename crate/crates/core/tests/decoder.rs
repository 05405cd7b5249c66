use std::collections::BTreeMap;

use afformer::decoder::{
    attend, axis_offsets, decomposed_relpos, mca, msa, Attention, AttentionKind, AttentionProbe, Decoder,
    DecoderConfig, Relpos, RelposIndex, TemporalPyramidConfig, TemporalSchedule,
};
use afformer::encoder::FeaturePyramid;
use afformer_autograd::{Ctx, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

/// `x · W + b` with `W: (in, out)`.
fn linear(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = w.dims2();
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut s = b.data()[o];
            for k in 0..din {
                s += x[i * din + k] * w.data()[k * dout + o];
            }
            y[i * dout + o] = s;
        }
    }
    y
}

fn offset(iq: usize, nq: usize, ik: usize, nk: usize) -> i64 {
    let s = nq.max(nk) as f64;
    let v = iq as f64 * s / nq as f64 - ik as f64 * s / nk as f64;
    (v - 0.5).ceil() as i64
}

struct Grids {
    query: (usize, usize),
    keys: (usize, usize, usize),
    tables: (Tensor, Tensor),
}

/// Multi-head attention written out with loops.
fn attention_oracle(store: &ParamStore, name: &str, heads: usize, q: &Tensor, k: &Tensor, v: &Tensor, rel: Option<&Grids>) -> Vec<f64> {
    let p = |s: &str| store.by_name(&format!("{name}.{s}")).unwrap();
    let (nq, c) = q.dims2();
    let nk = k.dims2().0;
    let qq = linear(q.data(), nq, p("q.weight"), p("q.bias"));
    let kk = linear(k.data(), nk, p("k.weight"), p("k.bias"));
    let vv = linear(v.data(), nk, p("v.weight"), p("v.bias"));
    let d = c / heads;
    let mut concat = vec![0.0; nq * c];
    for h in 0..heads {
        for i in 0..nq {
            let qi = &qq[i * c + h * d..i * c + h * d + d];
            let mut logits = vec![0.0; nk];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &kk[j * c + h * d..j * c + h * d + d];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                if let Some(g) = rel {
                    let (hq, wq) = g.query;
                    let (_, hk, wk) = g.keys;
                    let (yq, xq) = (i / wq, i % wq);
                    let (yk, xk) = ((j / wk) % hk, j % wk);
                    let (rh, rw) = &g.tables;
                    let sh = rh.dims2().0.div_ceil(2) as i64;
                    let sw = rw.dims2().0.div_ceil(2) as i64;
                    let ry = (offset(yq, hq, yk, hk) + sh - 1) as usize;
                    let rx = (offset(xq, wq, xk, wk) + sw - 1) as usize;
                    for e in 0..d {
                        *l += qi[e] * (rh.data()[ry * d + e] + rw.data()[rx * d + e]);
                    }
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let a = (l - m).exp() / z;
                for e in 0..d {
                    concat[i * c + h * d + e] += a * vv[j * c + h * d + e];
                }
            }
        }
    }
    linear(&concat, nq, p("o.weight"), p("o.bias"))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn cross_attention_matches_loop_oracle_with_relpos() {
    let (c, heads) = (4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "mca", c, heads, &mut rng);
    let rh = store.register("rh", random_tensor(&mut rng, &[5, c / heads]));
    let rw = store.register("rw", random_tensor(&mut rng, &[5, c / heads]));
    randomize_biases(&mut store, &mut rng);
    let (query, keys) = ((2, 3), (2, 2, 2));
    let q = random_tensor(&mut rng, &[6, c]);
    let k = random_tensor(&mut rng, &[8, c]);
    let v = random_tensor(&mut rng, &[8, c]);
    let index = RelposIndex::new(query, keys, (3, 3)).unwrap();
    let mut ctx = Ctx::inference(&store);
    let (qv, kv, vv) = (ctx.constant(q.clone()), ctx.constant(k.clone()), ctx.constant(v.clone()));
    let y = mca(&mut ctx, &att, qv, kv, vv, Some(Relpos { rh, rw, index: &index })).unwrap();
    let grids = Grids {
        query,
        keys,
        tables: (store.get(rh).clone(), store.get(rw).clone()),
    };
    let want = attention_oracle(&store, "mca", heads, &q, &k, &v, Some(&grids));
    assert!(max_diff(ctx.value(y).data(), &want) < 1e-12);

    let y0 = mca(&mut ctx, &att, qv, kv, vv, None).unwrap();
    let want0 = attention_oracle(&store, "mca", heads, &q, &k, &v, None);
    assert!(max_diff(ctx.value(y0).data(), &want0) < 1e-12);
}

#[test]
fn self_attention_matches_loop_oracle() {
    let (c, heads) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "msa", c, heads, &mut rng);
    randomize_biases(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[4, c]);
    let mut ctx = Ctx::inference(&store);
    let xv = ctx.constant(x.clone());
    let y = msa(&mut ctx, &att, xv).unwrap();
    let want = attention_oracle(&store, "msa", heads, &x, &x, &x, None);
    assert!(max_diff(ctx.value(y).data(), &want) < 1e-12);
}

#[test]
fn attention_rejects_mismatched_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "a", 4, 1, &mut rng);
    let mut ctx = Ctx::inference(&store);
    let q = ctx.constant(Tensor::zeros(&[2, 4]));
    let k = ctx.constant(Tensor::zeros(&[3, 6]));
    assert!(attend(&mut ctx, &att, q, k, k, None, None).is_err());
    let k = ctx.constant(Tensor::zeros(&[3, 4]));
    let v = ctx.constant(Tensor::zeros(&[2, 4]));
    assert!(attend(&mut ctx, &att, q, k, v, None, None).is_err());
}

#[test]
fn decomposed_relpos_on_2x2_grids_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 3;
    let q = random_tensor(&mut rng, &[4, d]);
    let rh = random_tensor(&mut rng, &[3, d]);
    let rw = random_tensor(&mut rng, &[3, d]);
    let r = decomposed_relpos((2, 2), (1, 2, 2), &q, &rh, &rw).unwrap();
    for iq in 0..4 {
        for ik in 0..4 {
            let dy = (iq / 2) as i64 - (ik / 2) as i64;
            let dx = (iq % 2) as i64 - (ik % 2) as i64;
            let mut want = 0.0;
            for e in 0..d {
                want += q.data()[iq * d + e] * (rh.data()[(dy + 1) as usize * d + e] + rw.data()[(dx + 1) as usize * d + e]);
            }
            assert!((r.data()[iq * 4 + ik] - want).abs() < 1e-14);
        }
    }
    assert!(decomposed_relpos((2, 2), (1, 2, 2), &q, &random_tensor(&mut rng, &[2, d]), &rw).is_err());
}

proptest! {
    #[test]
    fn axis_offsets_match_scaled_difference(nq in 1usize..12, nk in 1usize..12) {
        let o = axis_offsets(nq, nk);
        for iq in 0..nq {
            for ik in 0..nk {
                prop_assert_eq!(o[iq * nk + ik], offset(iq, nq, ik, nk));
            }
        }
    }
}

#[test]
fn temporal_pyramid_matches_explicit_3d_convolution() {
    let c = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        heads: Some(1),
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(cfg, c, &[2, 3], (4, 4), &mut store, &mut rng).unwrap();
    randomize_biases(&mut store, &mut rng);
    let (t, h, w) = (5, 3, 4);
    let x = random_tensor(&mut rng, &[t, c, h, w]);
    let mut ctx = Ctx::inference(&store);
    let xv = ctx.constant(x.clone());
    let steps = dec.temporal_pyramid(&mut ctx, xv).unwrap();
    assert_eq!(steps.len(), 2);
    let y = ctx.value(steps[1]);
    assert_eq!(y.shape(), [3, c, h, w]);
    let taps: Vec<&Tensor> = (0..3).map(|dt| store.by_name(&format!("decoder.c3d1.t{dt}")).unwrap()).collect();
    let bias = store.by_name("decoder.c3d1.bias").unwrap();
    let at = |f: usize, ci: usize, yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            return 0.0;
        }
        x.data()[((f * c + ci) * h + yy as usize) * w + xx as usize]
    };
    let mut worst = 0f64;
    for to in 0..3 {
        for co in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = bias.data()[co];
                    for (dt, tap) in taps.iter().enumerate() {
                        let f = (2 * to + dt) as isize - 1;
                        if f < 0 || f >= t as isize {
                            continue;
                        }
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = tap.data()[((co * c + ci) * 3 + ky) * 3 + kx];
                                    s += wv * at(f as usize, ci, yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                }
                            }
                        }
                    }
                    let got = y.data()[((to * c + co) * h + yy) * w + xx];
                    worst = worst.max((got - s).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn flat_schedule_reuses_video_tokens() {
    let cfg = TemporalPyramidConfig {
        schedule: TemporalSchedule::Flat,
        ..TemporalPyramidConfig::default()
    };
    assert_eq!(cfg.lengths(7, 4), vec![7; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let dcfg = DecoderConfig {
        temporal: cfg,
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(dcfg, 8, &[2, 3, 4], (8, 8), &mut store, &mut rng).unwrap();
    assert!(store.iter().all(|(n, _)| !n.contains("c3d")));
    let mut ctx = Ctx::inference(&store);
    let v = ctx.constant(random_tensor(&mut rng, &[3, 8, 2, 2]));
    let steps = dec.temporal_pyramid(&mut ctx, v).unwrap();
    assert!(steps.iter().all(|&s| s == v));
}

#[test]
fn halving_lengths_follow_strided_formula() {
    let t = TemporalPyramidConfig::default();
    for n in 1..100 {
        let l = t.lengths(n, 3);
        assert_eq!(l[1], (n - 1) / 2 + 1);
        assert_eq!(l[2], (l[1] - 1) / 2 + 1);
    }
}

fn pyramids(ctx: &mut Ctx, rng: &mut ChaCha8Rng, c: usize, levels: &[u32], t: usize) -> (FeaturePyramid, FeaturePyramid) {
    let mut img = BTreeMap::new();
    let mut vid = BTreeMap::new();
    for &l in levels {
        let s = 32 >> l;
        img.insert(l, ctx.constant(random_tensor(rng, &[1, c, s, s])));
        vid.insert(l, ctx.constant(random_tensor(rng, &[t, c, s, s])));
    }
    let img = FeaturePyramid {
        levels: img,
        frames: None,
        channels: c,
        input_dims: (32, 32),
    };
    let vid = FeaturePyramid {
        levels: vid,
        frames: Some(t),
        channels: c,
        input_dims: (32, 32),
    };
    (img, vid)
}

#[test]
fn single_level_multi_decode_equals_single_decode() {
    let c = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dec = Decoder::new(DecoderConfig::default(), c, &[3], (4, 4), &mut store, &mut rng).unwrap();
    let mut ctx = Ctx::inference(&store);
    let (img, vid) = pyramids(&mut ctx, &mut rng, c, &[3], 2);
    let a = dec.decode_multi(&mut ctx, &img, &vid, None).unwrap();
    let b = dec.decode_single(&mut ctx, 3, img.level(3).unwrap(), vid.level(3).unwrap(), None).unwrap();
    assert_eq!(ctx.value(a.tokens), ctx.value(b.tokens));
    assert_eq!(a.dims, (4, 4));
}

#[test]
fn probe_records_every_head_of_every_attention() {
    let c = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        heads: Some(2),
        blocks_per_stage: 2,
        share_blocks: false,
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(cfg, c, &[2, 3], (8, 8), &mut store, &mut rng).unwrap();
    let mut ctx = Ctx::inference(&store);
    let (img, vid) = pyramids(&mut ctx, &mut rng, c, &[2, 3], 4);
    let mut probe = AttentionProbe::default();
    let d = dec.decode_multi(&mut ctx, &img, &vid, Some(&mut probe)).unwrap();
    assert_eq!(d.dims, (8, 8));
    // 2 stages x 2 blocks x {self, cross} x 2 heads
    assert_eq!(probe.records.len(), 16);
    for r in &probe.records {
        let (nq, nk) = r.weights.dims2();
        let (side, frames) = if r.stage == 0 { (4, 4) } else { (8, 2) };
        assert_eq!(nq, side * side);
        match r.kind {
            AttentionKind::SelfAttention => assert_eq!(nk, nq),
            AttentionKind::CrossAttention => assert_eq!(nk, frames * 16),
        }
    }
}

#[test]
fn unshared_blocks_and_extra_blocks_add_parameters() {
    let count = |cfg: DecoderConfig| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Decoder::new(cfg, 8, &[2, 3], (8, 8), &mut store, &mut rng).unwrap();
        store
    };
    let shared = count(DecoderConfig::default());
    let split = count(DecoderConfig {
        share_blocks: false,
        ..DecoderConfig::default()
    });
    let block0: usize = shared.iter().filter(|(n, _)| n.starts_with("decoder.block0.")).map(|(_, t)| t.len()).sum();
    assert_eq!(split.numel() - shared.numel(), block0);
    let deeper = count(DecoderConfig {
        blocks_per_stage: 2,
        ..DecoderConfig::default()
    });
    assert!(deeper.id("decoder.block1.ln_self.gamma").is_some());
    assert!(shared.id("decoder.block0.ln_self.gamma").is_none());
}
