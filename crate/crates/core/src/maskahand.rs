//! Masked-hand self-supervision: turn hand-detection tracks over unlabeled
//! video into (clip, target image, heatmap) training triples.
//!
//! A frame with an interacting hand is picked from a mined clip, the hand is
//! hidden under an enlarged noise rectangle (plus decoy rectangles of the same
//! size), the frame is perspective-warped to act as the "target image", and
//! the original hand box pushed through the same warp becomes the ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::{gaussian_blur, save_heatmap, sum_normalize, BoxF, GaussianTargetSpec, Heatmap, Point};
use crate::media::{Image, VideoClip};

/// One hand box from an external detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandDetection {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub interacting: bool,
}

impl HandDetection {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::EmptyBox);
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!("detection score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn boxf(&self) -> BoxF {
        let [x0, y0, x1, y1] = self.bbox;
        BoxF::new(x0, y0, x1, y1)
    }

    fn qualifies(&self, threshold: f64) -> bool {
        self.interacting && self.score >= threshold
    }
}

/// Reads a detection sidecar: one JSON record per line, blank lines ignored.
pub fn load_detections(path: &Path) -> Result<Vec<HandDetection>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: HandDetection =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[HandDetection]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in dets {
        let line = serde_json::to_string(d).map_err(|e| Error::format(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub clip_len: usize,
    pub stride: usize,
    pub threshold: f64,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            clip_len: 32,
            stride: 16,
            threshold: 0.99,
        }
    }
}

/// A window of consecutive frames containing at least one confident
/// interacting hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start_frame: usize,
    pub length: usize,
    /// Absolute frame indices, ascending, no duplicates.
    pub interaction_frames: Vec<usize>,
}

impl ClipSpan {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start_frame..self.start_frame + self.length
    }
}

pub fn mine_clips(dets: &[HandDetection], video_length: usize, mining: &MiningParams) -> Vec<ClipSpan> {
    if video_length < mining.clip_len || mining.clip_len == 0 {
        log::warn!(
            "video of {video_length} frames is shorter than the {}-frame clip length; nothing mined",
            mining.clip_len
        );
        return Vec::new();
    }
    let mut hits: Vec<usize> = dets.iter().filter(|d| d.qualifies(mining.threshold)).map(|d| d.frame).collect();
    hits.sort_unstable();
    hits.dedup();
    let stride = mining.stride.max(1);
    (0..=video_length - mining.clip_len)
        .step_by(stride)
        .filter_map(|start| {
            let end = start + mining.clip_len;
            let lo = hits.partition_point(|&f| f < start);
            let hi = hits.partition_point(|&f| f < end);
            (lo < hi).then(|| ClipSpan {
                start_frame: start,
                length: mining.clip_len,
                interaction_frames: hits[lo..hi].to_vec(),
            })
        })
        .collect()
}

/// Highest-scoring qualifying box per frame.
pub fn interaction_boxes(dets: &[HandDetection], threshold: f64) -> BTreeMap<usize, BoxF> {
    let mut best: BTreeMap<usize, (f64, BoxF)> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.qualifies(threshold)) {
        let e = best.entry(d.frame).or_insert((f64::NEG_INFINITY, d.boxf()));
        if d.score > e.0 {
            *e = (d.score, d.boxf());
        }
    }
    best.into_iter().map(|(f, (_, b))| (f, b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    RandomNoise,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub hand_masks: usize,
    pub random_masks: usize,
    pub mask_scale: f64,
    pub distortion: f64,
    pub fill: MaskFill,
    pub seed: u64,
    /// Remove the chosen source frame from the clip handed to the model.
    pub drop_source_frame: bool,
    pub target: Option<GaussianTargetSpec>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            hand_masks: 1,
            random_masks: 1,
            mask_scale: 1.5,
            distortion: 0.5,
            fill: MaskFill::RandomNoise,
            seed: 0,
            drop_source_frame: false,
            target: None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.hand_masks > 1 {
            return Err(Error::Config("at most one hand mask".into()));
        }
        if !(self.mask_scale >= 1.0) {
            return Err(Error::Config(format!("mask scale {} below 1", self.mask_scale)));
        }
        if !(0.0..1.0).contains(&self.distortion) {
            return Err(Error::Config(format!("distortion {} outside [0, 1)", self.distortion)));
        }
        if let Some(t) = &self.target {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_frame: usize,
    pub hand_box: [f64; 4],
    pub mask_rects: Vec<[f64; 4]>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub clip: ClipSpan,
    pub target_image: Image,
    pub gt_heatmap: Heatmap,
    pub transform: Matrix3<f64>,
    pub provenance: Provenance,
}

impl SynthSample {
    /// Frame indices of the clip handed to the model.
    pub fn clip_frames(&self, drop_source_frame: bool) -> Vec<usize> {
        self.clip
            .frames()
            .filter(|&f| !(drop_source_frame && f == self.provenance.source_frame))
            .collect()
    }
}

/// Applies a homography to a point.
pub fn apply_homography(h: &Matrix3<f64>, p: Point) -> Point {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Exact homography from four point correspondences (`h33 = 1`).
pub fn homography_from_points(src: &[Point; 4], dst: &[Point; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    (m.determinant().abs() > 1e-9 && m.iter().all(|v| v.is_finite())).then_some(m)
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() < 1e-9
}

/// Random perspective transform of a `w × h` frame: each image corner moves
/// inward by independent offsets in `[0, distortion·w/2) × [0, distortion·h/2)`.
pub fn random_homography<R: rand::Rng + ?Sized>(w: usize, h: usize, distortion: f64, rng: &mut R) -> Result<Matrix3<f64>> {
    if !(0.0..1.0).contains(&distortion) {
        return Err(Error::Config(format!("distortion {distortion} outside [0, 1)")));
    }
    let (wf, hf) = (w as f64, h as f64);
    let src = [[0.0, 0.0], [wf, 0.0], [wf, hf], [0.0, hf]];
    let inward = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    for attempt in 0..8 {
        let mut dst = src;
        for (d, s) in dst.iter_mut().zip(inward) {
            d[0] += s[0] * rng.random::<f64>() * distortion * wf / 2.0;
            d[1] += s[1] * rng.random::<f64>() * distortion * hf / 2.0;
        }
        let degenerate = (0..4).any(|i| collinear(dst[i], dst[(i + 1) % 4], dst[(i + 2) % 4]));
        if !degenerate {
            if let Some(m) = homography_from_points(&src, &dst) {
                return Ok(m);
            }
        }
        log::debug!("degenerate homography sample {attempt}, resampling");
    }
    Err(Error::DegenerateHomography(8))
}

/// Backward-maps every output pixel center through `h⁻¹`; bilinear sampling,
/// zero outside the source frame.
pub fn warp_image(img: &Image, h: &Matrix3<f64>) -> Result<Image> {
    let inv = h.try_inverse().ok_or(Error::DegenerateHomography(0))?;
    let (ht, wd) = img.dims();
    let mut out = Image::filled(ht, wd, [0.0; 3]);
    for y in 0..ht {
        for x in 0..wd {
            let [sx, sy] = apply_homography(&inv, [x as f64 + 0.5, y as f64 + 0.5]);
            if !(sx >= 0.0 && sx <= wd as f64 && sy >= 0.0 && sy <= ht as f64) {
                continue;
            }
            let (u, v) = ((sx - 0.5).max(0.0), (sy - 0.5).max(0.0));
            let x0 = (u.floor() as usize).min(wd - 1);
            let y0 = (v.floor() as usize).min(ht - 1);
            let x1 = (x0 + 1).min(wd - 1);
            let y1 = (y0 + 1).min(ht - 1);
            let (lx, ly) = (u - x0 as f64, v - y0 as f64);
            for c in 0..3 {
                let top = img.get(c, y0, x0) * (1.0 - lx) + img.get(c, y0, x1) * lx;
                let bot = img.get(c, y1, x0) * (1.0 - lx) + img.get(c, y1, x1) * lx;
                out.set(c, y, x, top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(out)
}

/// Binary mask of `b` after warping by `h`: a pixel is set when its center
/// maps back inside the box (nearest sampling).
pub fn warped_box_mask(b: &BoxF, h: &Matrix3<f64>, height: usize, width: usize) -> Result<Vec<f64>> {
    let inv = h.try_inverse().ok_or(Error::DegenerateHomography(0))?;
    let mut m = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            if b.contains(apply_homography(&inv, [x as f64 + 0.5, y as f64 + 0.5])) {
                m[y * width + x] = 1.0;
            }
        }
    }
    Ok(m)
}

/// `b` scaled by `s` about its center, clipped to the frame.
pub fn enlarge_box(b: &BoxF, s: f64, height: usize, width: usize) -> BoxF {
    let [cx, cy] = b.center();
    let (hw, hh) = (b.width() * s / 2.0, b.height() * s / 2.0);
    BoxF::new(cx - hw, cy - hh, cx + hw, cy + hh).clip(height, width)
}

fn fill_rect<R: rand::Rng + ?Sized>(img: &mut Image, r: &BoxF, fill: MaskFill, rng: &mut R) {
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            if r.contains([x as f64 + 0.5, y as f64 + 0.5]) {
                let px = match fill {
                    MaskFill::RandomNoise => [0, 1, 2].map(|_| f64::from(rng.random_range(0u8..=255))),
                    MaskFill::Zero => [0.0; 3],
                };
                img.set_rgb(y, x, px);
            }
        }
    }
}

/// Builds one masked, warped target image and its heatmap from a mined clip.
/// `hand_boxes` maps absolute frame index to the interacting hand box.
pub fn synthesize_target(
    frames: &VideoClip,
    span: &ClipSpan,
    hand_boxes: &BTreeMap<usize, BoxF>,
    params: &SynthParams,
) -> Result<SynthSample> {
    params.validate()?;
    if span.interaction_frames.is_empty() {
        return Err(Error::NoInteractionFrame(span.start_frame));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let source = span.interaction_frames[rng.random_range(0..span.interaction_frames.len())];
    let frame = frames
        .frames()
        .get(source)
        .ok_or_else(|| Error::Shape(format!("frame {source} beyond a {}-frame video", frames.len())))?;
    let hand = *hand_boxes.get(&source).ok_or(Error::NoInteractionFrame(source))?;
    let (h, w) = frame.dims();
    let hand = hand.clip(h, w);
    if hand.area() <= 0.0 {
        return Err(Error::EmptyBox);
    }
    let enlarged = enlarge_box(&hand, params.mask_scale, h, w);
    if enlarged.width() >= w as f64 && enlarged.height() >= h as f64 {
        return Err(Error::MaskDegenerate);
    }

    let mut img = frame.clone();
    let mut rects = Vec::new();
    if params.hand_masks == 1 {
        fill_rect(&mut img, &enlarged, params.fill, &mut rng);
        rects.push(enlarged);
    }
    let (mw, mh) = (enlarged.width(), enlarged.height());
    for _ in 0..params.random_masks {
        let x0 = rng.random::<f64>() * (w as f64 - mw);
        let y0 = rng.random::<f64>() * (h as f64 - mh);
        let r = BoxF::new(x0, y0, x0 + mw, y0 + mh);
        fill_rect(&mut img, &r, params.fill, &mut rng);
        rects.push(r);
    }

    let transform = random_homography(w, h, params.distortion, &mut rng)?;
    let target_image = warp_image(&img, &transform)?;
    let mask = warped_box_mask(&hand, &transform, h, w)?;
    if mask.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyBox);
    }
    let spec = params.target.unwrap_or_else(|| GaussianTargetSpec::for_frame(h, w));
    let blurred = gaussian_blur(&mask, h, w, &spec);
    let gt_heatmap = sum_normalize(&Heatmap::raw(h, w, blurred)?)?;
    Ok(SynthSample {
        clip: span.clone(),
        target_image,
        gt_heatmap,
        transform: transform / transform[(2, 2)],
        provenance: Provenance {
            source_frame: source,
            hand_box: hand.as_array(),
            mask_rects: rects.iter().map(BoxF::as_array).collect(),
            seed: params.seed,
        },
    })
}

/// Mines clips and synthesizes up to `count` samples, one per
/// (clip, interaction frame) pair. Pairs are shuffled under the base seed when
/// more exist than requested; sample `i` uses seed `base ^ i`.
pub fn make_pretrain_dataset(
    video: &VideoClip,
    dets: &[HandDetection],
    params: &SynthParams,
    mining: &MiningParams,
    count: usize,
) -> Result<Vec<SynthSample>> {
    let clips = mine_clips(dets, video.len(), mining);
    if clips.is_empty() {
        return Err(Error::NoClips);
    }
    let boxes = interaction_boxes(dets, mining.threshold);
    let mut pairs: Vec<(usize, usize)> = clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| c.interaction_frames.iter().map(move |&f| (ci, f)))
        .collect();
    if count < pairs.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        pairs.truncate(count);
    }
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(ci, f))| {
            let span = ClipSpan {
                interaction_frames: vec![f],
                ..clips[ci].clone()
            };
            let p = SynthParams {
                seed: params.seed ^ i as u64,
                ..params.clone()
            };
            let mut s = synthesize_target(video, &span, &boxes, &p)?;
            s.clip = clips[ci].clone();
            Ok(s)
        })
        .collect()
}

/// One line of an emitted synthetic dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub clip_dir: PathBuf,
    pub target_image_file: PathBuf,
    pub gt_heatmap_file: PathBuf,
    pub transform: [f64; 9],
    pub provenance: Provenance,
}

/// Writes clips (once per span), target images, heatmaps and a
/// `manifest.jsonl` with paths relative to `out`.
pub fn write_synth_dataset(out: &Path, video: &VideoClip, samples: &[SynthSample], params: &SynthParams) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut written: BTreeMap<PathBuf, ()> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let frames = s.clip_frames(params.drop_source_frame);
        let clip_dir = if params.drop_source_frame {
            PathBuf::from(format!("clips/clip_{:05}_without_{:05}", s.clip.start_frame, s.provenance.source_frame))
        } else {
            PathBuf::from(format!("clips/clip_{:05}", s.clip.start_frame))
        };
        if written.insert(clip_dir.clone(), ()).is_none() {
            let clip = VideoClip::new(frames.iter().map(|&k| video.frames()[k].clone()).collect())?;
            clip.save_dir(&out.join(&clip_dir))?;
        }
        let image_file = PathBuf::from(format!("images/sample_{i:05}.png"));
        let heatmap_file = PathBuf::from(format!("heatmaps/sample_{i:05}.npy"));
        for dir in ["images", "heatmaps"] {
            fs::create_dir_all(out.join(dir)).map_err(|e| Error::io(out, e))?;
        }
        s.target_image.save_png(&out.join(&image_file))?;
        save_heatmap(&s.gt_heatmap, &out.join(&heatmap_file), params.target.as_ref())?;
        let t = &s.transform;
        let rec = SynthRecord {
            clip_dir,
            target_image_file: image_file,
            gt_heatmap_file: heatmap_file,
            transform: [
                t[(0, 0)],
                t[(0, 1)],
                t[(0, 2)],
                t[(1, 0)],
                t[(1, 1)],
                t[(1, 2)],
                t[(2, 0)],
                t[(2, 1)],
                t[(2, 2)],
            ],
            provenance: s.provenance.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(&manifest, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

pub fn load_synth_manifest(path: &Path) -> Result<Vec<SynthRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
