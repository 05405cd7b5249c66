mod common;

use std::collections::BTreeMap;

use afformer::harness::dataset::load_synth_dataset;
use afformer::heatmaps::{gaussian_blur, BoxF, GaussianTargetSpec, Point};
use afformer::maskahand::{
    apply_homography, homography_from_points, interaction_boxes, load_detections, make_pretrain_dataset, mine_clips,
    random_homography, save_detections, synthesize_target, warp_image, warped_box_mask, write_synth_dataset, ClipSpan,
    HandDetection, MaskFill, MiningParams, SynthParams,
};
use afformer::media::VideoClip;
use afformer::Error;
use common::{random_clip, random_image};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(frame: usize, score: f64, interacting: bool) -> HandDetection {
    HandDetection {
        frame,
        bbox: [4.0, 6.0, 14.0, 18.0],
        score,
        interacting,
    }
}

fn brute_force(dets: &[HandDetection], len: usize, m: &MiningParams) -> Vec<ClipSpan> {
    let mut out = Vec::new();
    let mut start = 0;
    while m.clip_len > 0 && start + m.clip_len <= len {
        let frames: Vec<usize> = (start..start + m.clip_len)
            .filter(|&f| dets.iter().any(|d| d.frame == f && d.interacting && d.score >= m.threshold))
            .collect();
        if !frames.is_empty() {
            out.push(ClipSpan {
                start_frame: start,
                length: m.clip_len,
                interaction_frames: frames,
            });
        }
        start += m.stride;
    }
    out
}

proptest! {
    #[test]
    fn mining_equals_window_enumeration(
        len in 1usize..512,
        clip_len in 1usize..64,
        stride in 1usize..40,
        raw in prop::collection::vec((0usize..512, 0usize..4, any::<bool>()), 0..30),
    ) {
        let dets: Vec<HandDetection> = raw
            .into_iter()
            .map(|(f, s, i)| det(f % len, [0.5, 0.98, 0.99, 1.0][s], i))
            .collect();
        let m = MiningParams { clip_len, stride, threshold: 0.99 };
        prop_assert_eq!(mine_clips(&dets, len, &m), brute_force(&dets, len, &m));
    }

    #[test]
    fn homography_reproduces_corner_correspondences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: [Point; 4] = [[0.0, 0.0], [40.0, 0.0], [40.0, 30.0], [0.0, 30.0]];
        let dst = src.map(|[x, y]| [x + rng.random_range(-8.0..8.0), y + rng.random_range(-8.0..8.0)]);
        let m = homography_from_points(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let q = apply_homography(&m, *s);
            prop_assert!((q[0] - d[0]).abs() < 1e-9 && (q[1] - d[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn mining_examples() {
    let m = MiningParams::default();
    let starts = |d: &[HandDetection]| mine_clips(d, 64, &m).iter().map(|c| c.start_frame).collect::<Vec<_>>();
    assert_eq!(starts(&[det(40, 0.995, true)]), vec![16, 32]);
    assert!(starts(&[]).is_empty());
    assert!(starts(&[det(40, 0.98, true)]).is_empty());
    assert!(starts(&[det(40, 0.999, false)]).is_empty());
    assert!(mine_clips(&[det(3, 1.0, true)], 20, &m).is_empty());
}

#[test]
fn best_box_per_frame_wins() {
    let mut a = det(5, 0.991, true);
    let mut b = det(5, 0.999, true);
    a.bbox = [0.0, 0.0, 2.0, 2.0];
    b.bbox = [1.0, 1.0, 9.0, 9.0];
    let boxes = interaction_boxes(&[a, b, det(6, 0.5, true)], 0.99);
    assert_eq!(boxes.len(), 1);
    assert_eq!(boxes[&5].as_array(), b.bbox);
}

#[test]
fn zero_distortion_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = random_homography(64, 48, 0.0, &mut rng).unwrap();
    assert!((m - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
    assert!(random_homography(64, 48, 1.0, &mut rng).is_err());
}

fn span0() -> ClipSpan {
    ClipSpan {
        start_frame: 0,
        length: 1,
        interaction_frames: vec![0],
    }
}

#[test]
fn identity_pipeline_blacks_out_the_hand_in_place() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frame = random_image(&mut rng, 24, 32);
    let hand = BoxF::new(5.0, 4.0, 15.0, 12.0);
    let params = SynthParams {
        random_masks: 0,
        mask_scale: 1.0,
        distortion: 0.0,
        fill: MaskFill::Zero,
        ..SynthParams::default()
    };
    let clip = VideoClip::new(vec![frame.clone()]).unwrap();
    let s = synthesize_target(&clip, &span0(), &BTreeMap::from([(0, hand)]), &params).unwrap();
    let mut want = frame;
    for y in 0..24 {
        for x in 0..32 {
            if hand.contains([x as f64 + 0.5, y as f64 + 0.5]) {
                want.set_rgb(y, x, [0.0; 3]);
            }
        }
    }
    assert_eq!(s.target_image, want);
    let mask: Vec<f64> = (0..24 * 32)
        .map(|i| if hand.contains([(i % 32) as f64 + 0.5, (i / 32) as f64 + 0.5]) { 1.0 } else { 0.0 })
        .collect();
    let blurred = gaussian_blur(&mask, 24, 32, &GaussianTargetSpec::for_frame(24, 32));
    let total: f64 = blurred.iter().sum();
    for (a, b) in s.gt_heatmap.values().iter().zip(&blurred) {
        assert!((a - b / total).abs() < 1e-12);
    }
}

#[test]
fn gt_is_a_distribution_peaking_inside_the_warped_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..40 {
        let frame = random_image(&mut rng, 40, 40);
        let x0 = rng.random_range(0.0..25.0);
        let y0 = rng.random_range(0.0..25.0);
        let hand = BoxF::new(x0, y0, x0 + 12.0, y0 + 12.0);
        let params = SynthParams {
            seed,
            ..SynthParams::default()
        };
        let clip = VideoClip::new(vec![frame]).unwrap();
        let s = synthesize_target(&clip, &span0(), &BTreeMap::from([(0, hand)]), &params).unwrap();
        assert!((s.gt_heatmap.sum() - 1.0).abs() < 1e-9);
        let mask = warped_box_mask(&hand, &s.transform, 40, 40).unwrap();
        let (y, x) = s.gt_heatmap.argmax();
        assert_eq!(mask[y * 40 + x], 1.0, "seed {seed}");
        assert_eq!(s.provenance.mask_rects.len(), 2);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = VideoClip::new(vec![random_image(&mut rng, 16, 16)]).unwrap();
    let whole = BTreeMap::from([(0, BoxF::new(0.0, 0.0, 16.0, 16.0))]);
    let r = synthesize_target(&clip, &span0(), &whole, &SynthParams::default());
    assert!(matches!(r, Err(Error::MaskDegenerate)));
    let empty = ClipSpan {
        interaction_frames: vec![],
        ..span0()
    };
    let r = synthesize_target(&clip, &empty, &whole, &SynthParams::default());
    assert!(matches!(r, Err(Error::NoInteractionFrame(_))));
}

#[test]
fn warping_with_identity_copies_the_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 9, 13);
    assert_eq!(warp_image(&img, &nalgebra::Matrix3::identity()).unwrap(), img);
}

fn track(len: usize) -> Vec<HandDetection> {
    (0..len)
        .filter(|f| f % 3 != 0)
        .map(|f| HandDetection {
            frame: f,
            bbox: [8.0, 10.0, 20.0, 22.0],
            score: 0.995,
            interacting: f > 4,
        })
        .collect()
}

#[test]
fn pretrain_dataset_is_deterministic_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let video = random_clip(&mut rng, 24, 32, 32);
    let dets = track(24);
    let mining = MiningParams {
        clip_len: 8,
        stride: 4,
        threshold: 0.99,
    };
    let params = SynthParams {
        seed: 9,
        ..SynthParams::default()
    };
    let a = make_pretrain_dataset(&video, &dets, &params, &mining, 6).unwrap();
    let b = make_pretrain_dataset(&video, &dets, &params, &mining, 6).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    let pairs: usize = mine_clips(&dets, 24, &mining).iter().map(|c| c.interaction_frames.len()).sum();
    let all = make_pretrain_dataset(&video, &dets, &params, &mining, 10_000).unwrap();
    assert_eq!(all.len(), pairs);
    for s in &all {
        assert!(s.clip.frames().contains(&s.provenance.source_frame));
        assert_eq!(s.clip_frames(false).len(), 8);
        assert_eq!(s.clip_frames(true).len(), 7);
    }
    assert!(matches!(
        make_pretrain_dataset(&video, &[], &params, &mining, 3),
        Err(Error::NoClips)
    ));
}

#[test]
fn detections_and_datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let dets = track(16);
    let path = dir.path().join("dets.jsonl");
    save_detections(&path, &dets).unwrap();
    assert_eq!(load_detections(&path).unwrap(), dets);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().contains("\"box\""));
    std::fs::write(&path, "{\"frame\":0,\"box\":[5,5,2,9],\"score\":0.9,\"interacting\":true}\n").unwrap();
    assert!(load_detections(&path).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let video = random_clip(&mut rng, 16, 32, 32);
    let mining = MiningParams {
        clip_len: 8,
        stride: 8,
        threshold: 0.99,
    };
    let params = SynthParams::default();
    let samples = make_pretrain_dataset(&video, &dets, &params, &mining, 4).unwrap();
    let manifest = write_synth_dataset(&dir.path().join("synth"), &video, &samples, &params).unwrap();
    let loaded = load_synth_dataset(&manifest).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (l, s) in loaded.iter().zip(&samples) {
        assert_eq!(l.image, s.target_image.quantized());
        assert_eq!(l.heatmap, s.gt_heatmap);
        assert_eq!(l.clip.len(), 8);
        assert!(l.action.is_none());
    }
}
