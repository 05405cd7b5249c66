//! Sample manifests: one JSON record per line, paths relative to the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::{load_heatmap, Heatmap, HeatmapKind, Point};
use crate::maskahand::{load_synth_manifest, SynthSample};
use crate::media::{Image, VideoClip};

/// `(V, I, A, H)` on disk. `points` are the annotation points in image pixel
/// coordinates, used as AUC-J positives when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub video_ref: PathBuf,
    pub image_ref: PathBuf,
    pub heatmap_ref: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Point>>,
}

/// A loaded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub image: Image,
    pub heatmap: Heatmap,
    pub action: Option<usize>,
    pub points: Option<Vec<Point>>,
}

pub fn save_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_target(path: &Path) -> Result<Heatmap> {
    let h = load_heatmap(path)?;
    if h.kind() != HeatmapKind::SumNormalized {
        return Err(Error::format(path, "ground-truth heatmap is not sum-normalized"));
    }
    Ok(h)
}

/// Loads every record. Actions must be present on all records or on none.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let records = load_manifest(manifest)?;
    let with_action = records.iter().filter(|r| r.action.is_some()).count();
    if with_action != 0 && with_action != records.len() {
        return Err(Error::format(
            manifest,
            format!("{with_action} of {} records carry an action", records.len()),
        ));
    }
    let base = base_dir(manifest);
    records
        .iter()
        .map(|r| {
            let sample = Sample {
                clip: VideoClip::load_dir(&base.join(&r.video_ref))?,
                image: Image::load_png(&base.join(&r.image_ref))?,
                heatmap: load_target(&base.join(&r.heatmap_ref))?,
                action: r.action,
                points: r.points.clone(),
            };
            if sample.clip.is_empty() {
                return Err(Error::format(base.join(&r.video_ref), "clip directory has no frames"));
            }
            if sample.heatmap.dims() != sample.image.dims() {
                return Err(Error::format(base.join(&r.heatmap_ref), "heatmap and image sizes differ"));
            }
            Ok(sample)
        })
        .collect()
}

/// Loads a masked-hand synthetic dataset as action-free samples.
pub fn load_synth_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let base = base_dir(manifest);
    load_synth_manifest(manifest)?
        .iter()
        .map(|r| {
            Ok(Sample {
                clip: VideoClip::load_dir(&base.join(&r.clip_dir))?,
                image: Image::load_png(&base.join(&r.target_image_file))?,
                heatmap: load_target(&base.join(&r.gt_heatmap_file))?,
                action: None,
                points: None,
            })
        })
        .collect()
}

/// Largest action label, if the samples carry actions.
pub fn action_classes(samples: &[Sample]) -> Option<usize> {
    samples.iter().filter_map(|s| s.action).max()
}

/// A masked-hand sample as a training sample over `video`.
pub fn synth_to_sample(video: &VideoClip, s: &SynthSample, drop_source_frame: bool) -> Result<Sample> {
    let frames = s
        .clip_frames(drop_source_frame)
        .into_iter()
        .map(|f| {
            video
                .frames()
                .get(f)
                .cloned()
                .ok_or_else(|| Error::Shape(format!("frame {f} beyond a {}-frame video", video.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        clip: VideoClip::new(frames)?,
        image: s.target_image.quantized(),
        heatmap: s.gt_heatmap.clone(),
        action: None,
        points: None,
    })
}
