mod common;

use afformer::encoder::{uniform_sample_indices, Encoder, EncoderConfig};
use afformer::media::VideoClip;
use afformer_autograd::{Ctx, ParamStore, Tensor};
use common::{random_clip, random_image};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        channels: 8,
        levels: vec![2, 3, 4],
        trunk_channels: 6,
        ..EncoderConfig::default()
    }
}

fn build(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
    (enc, store)
}

#[test]
fn pyramid_shapes_follow_strides() {
    let (enc, store) = build(small_cfg(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ctx = Ctx::inference(&store);
    let img = enc.encode_image(&mut ctx, &random_image(&mut rng, 32, 48)).unwrap();
    let vid = enc.encode_video(&mut ctx, &random_clip(&mut rng, 3, 32, 48)).unwrap();
    for l in [2u32, 3, 4] {
        let s = 1 << l;
        assert_eq!(ctx.shape(img.level(l).unwrap()), [1, 8, 32 / s, 48 / s]);
        assert_eq!(ctx.shape(vid.level(l).unwrap()), [3, 8, 32 / s, 48 / s]);
        assert_eq!(img.dims(l), (32 / s, 48 / s));
    }
    assert_eq!(img.min_level(), Some(2));
    assert!(img.level(5).is_err());
}

#[test]
fn rejects_sizes_not_divisible_by_coarsest_stride() {
    let (enc, store) = build(small_cfg(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ctx = Ctx::inference(&store);
    let err = enc.encode_image(&mut ctx, &random_image(&mut rng, 24, 32)).unwrap_err();
    assert!(err.to_string().contains("multiple of 16"), "{err}");
}

#[test]
fn config_rejects_gapped_levels() {
    let cfg = EncoderConfig {
        levels: vec![2, 4],
        ..small_cfg()
    };
    assert!(cfg.validate().is_err());
    let cfg = EncoderConfig {
        levels: vec![],
        ..small_cfg()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn encoding_is_deterministic() {
    let (a, sa) = build(small_cfg(), 4);
    let (b, sb) = build(small_cfg(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = random_clip(&mut rng, 2, 32, 32);
    let mut ca = Ctx::inference(&sa);
    let mut cb = Ctx::inference(&sb);
    let pa = a.encode_video(&mut ca, &clip).unwrap().materialize(&ca);
    let pb = b.encode_video(&mut cb, &clip).unwrap().materialize(&cb);
    assert_eq!(pa, pb);
}

#[test]
fn single_frame_video_matches_image_with_shared_weights() {
    let (enc, store) = build(small_cfg(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 32, 32);
    let mut ctx = Ctx::inference(&store);
    let pi = enc.encode_image(&mut ctx, &img).unwrap().materialize(&ctx);
    let clip = VideoClip::new(vec![img]).unwrap();
    let pv = enc.encode_video(&mut ctx, &clip).unwrap().materialize(&ctx);
    for (l, t) in &pi {
        let v = &pv[l];
        assert_eq!(v.shape()[0], 1);
        assert_eq!(v.data(), t.data());
    }
}

#[test]
fn frames_are_encoded_independently() {
    let (enc, store) = build(small_cfg(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clip = random_clip(&mut rng, 3, 32, 32);
    let perm = [2, 0, 1];
    let permuted = VideoClip::new(perm.iter().map(|&i| clip.frames()[i].clone()).collect()).unwrap();
    let mut ctx = Ctx::inference(&store);
    let a = enc.encode_video(&mut ctx, &clip).unwrap().materialize(&ctx);
    let b = enc.encode_video(&mut ctx, &permuted).unwrap().materialize(&ctx);
    for (l, ta) in &a {
        let tb: &Tensor = &b[l];
        let plane = ta.len() / 3;
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(&tb.data()[j * plane..(j + 1) * plane], &ta.data()[i * plane..(i + 1) * plane]);
        }
    }
}

#[test]
fn parameter_count_tracks_sharing_toggles() {
    let base = small_cfg();
    let count = |cfg: EncoderConfig| build(cfg, 0).1.numel();
    let (tc, c, nl) = (base.trunk_channels, base.channels, base.levels.len());
    let proj = tc * c + c;
    let trunk: usize = (1..=4).map(|l| if l == 1 { 3 * tc * 9 + tc } else { tc * tc * 9 + tc }).sum();
    let n = count(base.clone());
    assert_eq!(n, trunk + nl * proj);
    let shared_proj = count(EncoderConfig {
        per_level_input_proj: false,
        ..base.clone()
    });
    assert_eq!(n - shared_proj, (nl - 1) * proj);
    let split_modalities = count(EncoderConfig {
        shared_input_proj_between_modalities: false,
        ..base.clone()
    });
    assert_eq!(split_modalities - n, nl * proj);
    let split_backbone = count(EncoderConfig {
        shared_backbone: false,
        ..base
    });
    assert_eq!(split_backbone - n, trunk);
}

proptest! {
    #[test]
    fn sampled_indices_are_sorted_in_range_and_cover_ends(t in 1usize..300, max_t in 1usize..80) {
        let idx = uniform_sample_indices(t, max_t).unwrap();
        prop_assert_eq!(idx.len(), t.min(max_t));
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < t));
        prop_assert_eq!(idx[0], 0);
        if max_t > 1 {
            prop_assert_eq!(*idx.last().unwrap(), t - 1);
        }
    }
}
