//! Procedural `(V, I, A, H)` corpus for desk-scale runs.
//!
//! Each sample is a scene of three colored shapes (square, disk, triangle) on
//! a flat background. In the clip, a skin-colored "hand" rectangle enters from
//! the bottom edge and comes to rest on one shape halfway through. The target
//! image is the hand-free scene under a random homography; the heatmap is the
//! Gaussian target of five points on the touched shape, mapped through the
//! same homography; the action is the touched shape's kind.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{save_manifest, Sample, SampleRecord};
use crate::error::{Error, Result};
use crate::heatmaps::{points_to_target, save_heatmap, AffordanceAnnotation, BoxF, GaussianTargetSpec, Point};
use crate::maskahand::{apply_homography, random_homography, save_detections, warp_image, HandDetection};
use crate::media::{Image, VideoClip};

pub const SHAPE_KINDS: usize = 3;
const SKIN: [f64; 3] = [232.0, 184.0, 152.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub clip_len: usize,
    pub seed: u64,
    pub distortion: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 16,
            image_size: 32,
            clip_len: 8,
            seed: 0,
            distortion: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; SHAPE_KINDS] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle];

    /// 1-based action label.
    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed") + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: Point,
    pub radius: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, p: Point) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let r = self.radius;
        match self.kind {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            // apex up, base at +r
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Scene layout and scripting details kept next to each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub index: usize,
    pub shapes: Vec<Shape>,
    pub touched: usize,
    /// Annotation points in clip coordinates, before warping.
    pub contact_points: Vec<Point>,
    pub transform: [f64; 9],
    pub hand_boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub sample: Sample,
    pub detections: Vec<HandDetection>,
    pub meta: SceneMeta,
}

impl CorpusSample {
    pub fn transform(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.meta.transform)
    }
}

fn paint(img: &mut Image, inside: impl Fn(Point) -> bool, color: [f64; 3]) {
    let (h, w) = img.dims();
    for y in 0..h {
        for x in 0..w {
            if inside([x as f64 + 0.5, y as f64 + 0.5]) {
                img.set_rgb(y, x, color);
            }
        }
    }
}

fn saturated_color(rng: &mut ChaCha8Rng, hue: f64) -> [f64; 3] {
    // hue in [0, 1): piecewise-linear RGB wheel at full saturation
    let h6 = hue * 6.0;
    let f = h6 - h6.floor();
    let (hi, lo) = (220.0, 30.0 + rng.random::<f64>() * 20.0);
    let mid_up = lo + (hi - lo) * f;
    let mid_dn = hi - (hi - lo) * f;
    match h6 as usize % 6 {
        0 => [hi, mid_up, lo],
        1 => [mid_dn, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_dn, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_dn],
    }
}

fn layout(rng: &mut ChaCha8Rng, size: f64) -> Vec<Shape> {
    let radius = size / 9.0;
    let margin = radius + 1.0;
    let hue0 = rng.random::<f64>();
    let mut kinds = ShapeKind::ALL;
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.random_range(0..=i));
    }
    let mut shapes: Vec<Shape> = Vec::new();
    for (i, kind) in kinds.into_iter().enumerate() {
        // rejection sampling for non-overlapping placement, upper part of the frame
        let center = loop {
            let c = [
                margin + rng.random::<f64>() * (size - 2.0 * margin),
                margin + rng.random::<f64>() * (size * 0.7 - margin),
            ];
            let clear = shapes.iter().all(|s| {
                let (dx, dy) = (s.center[0] - c[0], s.center[1] - c[1]);
                (dx * dx + dy * dy).sqrt() > 2.0 * radius + 2.0
            });
            if clear {
                break c;
            }
        };
        let hue = (hue0 + i as f64 / SHAPE_KINDS as f64).fract();
        shapes.push(Shape {
            kind,
            center,
            radius,
            color: saturated_color(rng, hue),
        });
    }
    shapes
}

fn render_scene(size: usize, background: [f64; 3], shapes: &[Shape]) -> Image {
    let mut img = Image::filled(size, size, background);
    for s in shapes {
        paint(&mut img, |p| s.contains(p), s.color);
    }
    img
}

fn hand_box_at(center: Point, hw: f64, hh: f64) -> BoxF {
    // hand rect hangs below its fingertip point
    BoxF::new(center[0] - hw / 2.0, center[1] - hh * 0.25, center[0] + hw / 2.0, center[1] + hh * 0.75)
}

fn make_sample(spec: &CorpusSpec, index: usize) -> Result<CorpusSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let sf = size as f64;
    let grey = 70.0 + rng.random::<f64>() * 40.0;
    let background = [grey, grey + 5.0, grey - 5.0];
    let shapes = layout(&mut rng, sf);
    let touched = rng.random_range(0..shapes.len());
    let target = shapes[touched];

    let contact_points: Vec<Point> = (0..5)
        .map(|_| {
            let j = target.radius * 0.5;
            [
                target.center[0] + (rng.random::<f64>() * 2.0 - 1.0) * j,
                target.center[1] + (rng.random::<f64>() * 2.0 - 1.0) * j,
            ]
        })
        .collect();

    let (hw, hh) = (sf / 5.0, sf / 4.0);
    let start = [hw / 2.0 + rng.random::<f64>() * (sf - hw), sf + hh * 0.25];
    let touch_from = spec.clip_len / 2;
    let scene = render_scene(size, background, &shapes);
    let mut frames = Vec::with_capacity(spec.clip_len);
    let mut detections = Vec::with_capacity(spec.clip_len);
    let mut hand_boxes = Vec::with_capacity(spec.clip_len);
    for f in 0..spec.clip_len {
        let a = if touch_from == 0 { 1.0 } else { (f as f64 / touch_from as f64).min(1.0) };
        let tip = [
            start[0] + (target.center[0] - start[0]) * a,
            start[1] + (target.center[1] - start[1]) * a,
        ];
        let hb = hand_box_at(tip, hw, hh);
        let mut frame = scene.clone();
        paint(&mut frame, |p| hb.contains(p), SKIN);
        frames.push(frame.quantized());
        let visible = hb.clip(size, size);
        hand_boxes.push(visible.as_array());
        if visible.area() > 0.0 {
            detections.push(HandDetection {
                frame: f,
                bbox: visible.as_array(),
                score: 0.995,
                interacting: f >= touch_from,
            });
        }
    }

    let h = random_homography(size, size, spec.distortion, &mut rng)?;
    let image = warp_image(&scene, &h)?.quantized();
    let points: Vec<Point> = contact_points
        .iter()
        .map(|&p| {
            let q = apply_homography(&h, p);
            [q[0].clamp(0.0, sf - 1e-9), q[1].clamp(0.0, sf - 1e-9)]
        })
        .collect();
    let label = target.kind.label();
    let ann = AffordanceAnnotation::new(points.clone(), Some(label));
    let heatmap = points_to_target(&ann, size, size, &GaussianTargetSpec::for_frame(size, size))?;
    let hn = h / h[(2, 2)];
    Ok(CorpusSample {
        sample: Sample {
            clip: VideoClip::new(frames)?,
            image,
            heatmap,
            action: Some(label),
            points: Some(points),
        },
        detections,
        meta: SceneMeta {
            index,
            shapes,
            touched,
            contact_points,
            transform: std::array::from_fn(|k| hn[(k / 3, k % 3)]),
            hand_boxes,
        },
    })
}

/// Renders the corpus in memory. Images are quantized exactly as they are
/// stored on disk.
pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusSample>> {
    if spec.image_size < 16 {
        return Err(Error::Config(format!("image size {} below 16", spec.image_size)));
    }
    if spec.clip_len == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    (0..spec.n_samples).map(|i| make_sample(spec, i)).collect()
}

/// Writes clips, images, heatmaps, annotations, detection sidecars, scene
/// metadata and `manifest.jsonl` under `out`; returns the manifest path.
pub fn write_corpus(out: &Path, samples: &[CorpusSample]) -> Result<PathBuf> {
    for dir in ["clips", "images", "heatmaps", "annotations", "detections", "scenes"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for cs in samples {
        let i = cs.meta.index;
        let s = &cs.sample;
        let stem = format!("sample_{i:05}");
        let rec = SampleRecord {
            video_ref: PathBuf::from(format!("clips/{stem}")),
            image_ref: PathBuf::from(format!("images/{stem}.png")),
            heatmap_ref: PathBuf::from(format!("heatmaps/{stem}.npy")),
            action: s.action,
            points: s.points.clone(),
        };
        s.clip.save_dir(&out.join(&rec.video_ref))?;
        s.image.save_png(&out.join(&rec.image_ref))?;
        let (h, w) = s.heatmap.dims();
        save_heatmap(&s.heatmap, &out.join(&rec.heatmap_ref), Some(&GaussianTargetSpec::for_frame(h, w)))?;
        AffordanceAnnotation::new(s.points.clone().unwrap_or_default(), s.action)
            .save(&out.join(format!("annotations/{stem}.json")))?;
        save_detections(&out.join(format!("detections/{stem}.jsonl")), &cs.detections)?;
        let meta_path = out.join(format!("scenes/{stem}.json"));
        let text = serde_json::to_string_pretty(&cs.meta).map_err(|e| Error::format(&meta_path, e))?;
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        records.push(rec);
    }
    let manifest = out.join("manifest.jsonl");
    save_manifest(&manifest, &records)?;
    Ok(manifest)
}

pub fn generate_synthetic_corpus(spec: &CorpusSpec, out: &Path) -> Result<PathBuf> {
    let samples = synthesize_corpus(spec)?;
    let manifest = write_corpus(out, &samples)?;
    let spec_path = out.join("corpus.json");
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::format(&spec_path, e))?;
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}
