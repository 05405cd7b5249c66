//! Heatmap and annotation types, Gaussian target generation, and the two
//! normalizations used for training and evaluation: sum-normalization for
//! ground truth and joint softmax for predicted logits.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass tolerance for sum-normalized maps.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    SumNormalized,
    Logits,
    Raw,
}

/// Dense `(height, width)` map over the target image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: HeatmapKind,
}

impl Heatmap {
    /// Validating constructor. Sum-normalized maps must be nonnegative with
    /// unit mass; raw maps must be nonnegative; logits must be finite.
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: HeatmapKind) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} heatmap",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap"));
        }
        match kind {
            HeatmapKind::SumNormalized => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(Error::DegenerateHeatmap("negative value in distribution"));
                }
                let s: f64 = values.iter().sum();
                if (s - 1.0).abs() > SUM_TOLERANCE {
                    return Err(Error::DegenerateHeatmap("distribution does not sum to 1"));
                }
            }
            HeatmapKind::Raw => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(Error::DegenerateHeatmap("negative value in raw map"));
                }
            }
            HeatmapKind::Logits => {}
        }
        Ok(Self {
            height,
            width,
            values,
            kind,
        })
    }

    pub fn raw(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values, HeatmapKind::Raw)
    }

    pub fn logits(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values, HeatmapKind::Logits)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            values: vec![1.0 / n as f64; n],
            kind: HeatmapKind::SumNormalized,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(y, x)` of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Any map as a distribution: logits go through softmax, everything else
    /// through sum-normalization.
    pub fn to_distribution(&self) -> Result<Heatmap> {
        match self.kind {
            HeatmapKind::SumNormalized => Ok(self.clone()),
            HeatmapKind::Logits => softmax_normalize(self),
            HeatmapKind::Raw => sum_normalize(self),
        }
    }
}

/// Pixel coordinates in target-image space: `x` along width, `y` along height.
pub type Point = [f64; 2];

/// Annotated interaction points plus an optional 1-based action label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceAnnotation {
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<usize>,
}

impl AffordanceAnnotation {
    pub fn new(points: Vec<Point>, action: Option<usize>) -> Self {
        Self { points, action }
    }

    /// Checks every point against `[0, w) x [0, h)`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::NoPoints);
        }
        for (index, &[x, y]) in self.points.iter().enumerate() {
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
                return Err(Error::PointOutOfFrame {
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("annotation serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// How the blur treats pixels beyond the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// Mirror without repeating the edge pixel (`dcb|abcd|cba`).
    #[default]
    Reflect,
    /// Treat out-of-frame pixels as zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTargetSpec {
    pub kernel_size: usize,
    pub sigma: f64,
    #[serde(default)]
    pub border: Border,
}

/// Largest odd integer not above `sqrt(h*w)/3`, never below 1.
pub fn default_kernel_size(height: usize, width: usize) -> usize {
    let k = (((height * width) as f64).sqrt() / 3.0).floor() as usize;
    match k {
        0 => 1,
        k if k % 2 == 0 => k - 1,
        k => k,
    }
}

/// Conventional sigma for a given kernel size.
pub fn sigma_for_kernel(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

impl GaussianTargetSpec {
    pub fn with_kernel(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            sigma: sigma_for_kernel(kernel_size),
            border: Border::Reflect,
        }
    }

    /// Default target spec for a frame of the given size.
    pub fn for_frame(height: usize, width: usize) -> Self {
        Self::with_kernel(default_kernel_size(height, width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "gaussian kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("gaussian sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Normalized 1-D taps, length `kernel_size`.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as f64;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / two_s2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Reflect-101 index into `[0, n)`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn blur_axis(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, outer: usize, taps: &[f64], border: Border) {
    // `count` lines of `len` samples; sample j of line i at i*outer + j*stride
    let r = (taps.len() / 2) as isize;
    for line in 0..count {
        let base = line * outer;
        for j in 0..len {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let idx = j as isize + k as isize - r;
                let src_j = match border {
                    Border::Reflect => reflect_index(idx, len),
                    Border::Zero => {
                        if idx < 0 || idx >= len as isize {
                            continue;
                        }
                        idx as usize
                    }
                };
                acc += t * src[base + src_j * stride];
            }
            dst[base + j * stride] = acc;
        }
    }
}

/// Separable Gaussian blur of a row-major `(height, width)` map.
pub fn gaussian_blur(values: &[f64], height: usize, width: usize, spec: &GaussianTargetSpec) -> Vec<f64> {
    assert_eq!(values.len(), height * width);
    let taps = spec.taps();
    let mut tmp = vec![0.0; values.len()];
    // horizontal: `height` lines of `width` samples
    blur_axis(values, &mut tmp, width, 1, height, width, &taps, spec.border);
    let mut out = vec![0.0; values.len()];
    // vertical: `width` lines of `height` samples
    blur_axis(&tmp, &mut out, height, width, width, 1, &taps, spec.border);
    out
}

/// Nearest integer with ties going down.
pub fn round_half_down(v: f64) -> i64 {
    (v - 0.5).ceil() as i64
}

/// Pixel `(y, x)` a continuous point stamps into.
pub fn point_pixel(p: Point, height: usize, width: usize) -> (usize, usize) {
    let x = round_half_down(p[0]).clamp(0, width as i64 - 1) as usize;
    let y = round_half_down(p[1]).clamp(0, height as i64 - 1) as usize;
    (y, x)
}

/// Blur of the unit-impulse map of the annotation points, before normalization.
pub fn stamp_points(annotation: &AffordanceAnnotation, height: usize, width: usize, spec: &GaussianTargetSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    annotation.validate(height, width)?;
    let mut impulses = vec![0.0; height * width];
    for &p in &annotation.points {
        let (y, x) = point_pixel(p, height, width);
        impulses[y * width + x] += 1.0;
    }
    Ok(gaussian_blur(&impulses, height, width, spec))
}

/// Ground-truth heatmap from annotated points: blurred impulses, renormalized.
pub fn points_to_target(annotation: &AffordanceAnnotation, height: usize, width: usize, spec: &GaussianTargetSpec) -> Result<Heatmap> {
    let blurred = stamp_points(annotation, height, width, spec)?;
    sum_normalize(&Heatmap::raw(height, width, blurred)?)
}

pub fn sum_normalize(m: &Heatmap) -> Result<Heatmap> {
    if m.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateHeatmap("negative or non-finite mass"));
    }
    let total = m.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateHeatmap("all-zero map"));
    }
    Ok(Heatmap {
        height: m.height,
        width: m.width,
        values: m.values.iter().map(|v| v / total).collect(),
        kind: HeatmapKind::SumNormalized,
    })
}

/// Joint softmax over every cell, max-stabilized.
pub fn softmax_normalize(m: &Heatmap) -> Result<Heatmap> {
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut values = m.values.clone();
    afformer_autograd::softmax_in_place(&mut values);
    Ok(Heatmap {
        height: m.height,
        width: m.width,
        values,
        kind: HeatmapKind::SumNormalized,
    })
}

/// Axis-aligned box `[x0, x1) x [y0, y1)` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Point {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clip(&self, height: usize, width: usize) -> BoxF {
        BoxF {
            x0: self.x0.clamp(0.0, width as f64),
            y0: self.y0.clamp(0.0, height as f64),
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
        }
    }

    /// Whether a continuous point lies inside the half-open box.
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] < self.x1 && p[1] >= self.y0 && p[1] < self.y1
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x1, self.y1],
            [self.x0, self.y1],
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Binary mask of pixels whose centers fall inside the box.
pub fn box_mask(b: &BoxF, height: usize, width: usize) -> Vec<f64> {
    let mut m = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            if b.contains([x as f64 + 0.5, y as f64 + 0.5]) {
                m[y * width + x] = 1.0;
            }
        }
    }
    m
}

/// Ground truth for a box region: binary mask, blurred, sum-normalized.
pub fn box_to_mask_heatmap(b: &BoxF, height: usize, width: usize, spec: &GaussianTargetSpec) -> Result<Heatmap> {
    spec.validate()?;
    let clipped = b.clip(height, width);
    let mask = box_mask(&clipped, height, width);
    if clipped.area() <= 0.0 || mask.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyBox);
    }
    let blurred = gaussian_blur(&mask, height, width, spec);
    sum_normalize(&Heatmap::raw(height, width, blurred)?)
}

/// Sidecar header stored next to a heatmap array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapHeader {
    pub height: usize,
    pub width: usize,
    pub kind: HeatmapKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<GaussianTargetSpec>,
}

fn header_path(npy: &Path) -> std::path::PathBuf {
    npy.with_extension("json")
}

/// Writes `<path>` as a 2-D `.npy` array and `<path with .json>` as header.
pub fn save_heatmap(m: &Heatmap, path: &Path, spec: Option<&GaussianTargetSpec>) -> Result<()> {
    let arr = Array2::from_shape_vec((m.height, m.width), m.values.clone()).expect("heatmap shape");
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::format(path, e))?;
    let header = HeatmapHeader {
        height: m.height,
        width: m.width,
        kind: m.kind,
        spec: spec.copied(),
    };
    let hp = header_path(path);
    fs::write(&hp, serde_json::to_string_pretty(&header).expect("header serializes"))
        .map_err(|e| Error::io(&hp, e))
}

pub fn load_heatmap(path: &Path) -> Result<Heatmap> {
    let arr: Array2<f64> = ndarray_npy::read_npy(path).map_err(|e| Error::format(path, e))?;
    let hp = header_path(path);
    let kind = match fs::read_to_string(&hp) {
        Ok(text) => {
            let header: HeatmapHeader = serde_json::from_str(&text).map_err(|e| Error::format(&hp, e))?;
            if header.height != arr.nrows() || header.width != arr.ncols() {
                return Err(Error::format(&hp, "header shape disagrees with array"));
            }
            header.kind
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => HeatmapKind::Raw,
        Err(e) => return Err(Error::io(&hp, e)),
    };
    let (h, w) = arr.dim();
    let values = arr.as_standard_layout().iter().copied().collect();
    Heatmap::new(h, w, values, kind)
}
