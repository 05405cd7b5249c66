//! Shared multi-scale encoder for the target image and the video frames.
//!
//! A spatial trunk produces stride-`2^l` feature maps; per-level 1×1 input
//! projections bring them to a common width `C` and a top-down pass fuses
//! coarse levels into fine ones. Video frames go through the same trunk one by
//! one (as a batch), so the encoder does no temporal modeling of its own.

use std::collections::BTreeMap;
use std::sync::Arc;

use afformer_autograd::{Ctx, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{Image, VideoClip};
use crate::nn::Conv2d;

/// Parameter-name prefix of the spatial trunk (the "backbone" group).
pub const TRUNK_PREFIX: &str = "encoder.trunk";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkKind {
    /// Small strided convolution stack built by this crate.
    ReferenceConv,
    /// Caller-supplied trunk, see [`Encoder::with_trunks`].
    Pluggable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub levels: Vec<u32>,
    pub trunk: TrunkKind,
    /// Width of every reference-trunk stage.
    pub trunk_channels: usize,
    pub shared_backbone: bool,
    pub shared_input_proj_between_modalities: bool,
    pub per_level_input_proj: bool,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            levels: vec![2, 3, 4, 5],
            trunk: TrunkKind::ReferenceConv,
            trunk_channels: 32,
            shared_backbone: true,
            shared_input_proj_between_modalities: true,
            per_level_input_proj: true,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.trunk_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("encoder levels must be nonempty".into()));
        }
        if self.levels[0] < 1 {
            return Err(Error::Config("encoder levels start at stride 2^1".into()));
        }
        if self.levels.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config(format!(
                "encoder levels must be ascending and contiguous, got {:?}",
                self.levels
            )));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("pixel std must be positive".into()));
        }
        Ok(())
    }

    pub fn min_level(&self) -> u32 {
        self.levels[0]
    }

    pub fn max_level(&self) -> u32 {
        *self.levels.last().expect("validated nonempty")
    }
}

/// Spatial feature extractor. Returns maps at strides `2^1 ..= 2^max_level`,
/// each shaped `(N, out_channels, H / 2^l, W / 2^l)`.
pub trait Trunk: Send + Sync + std::fmt::Debug {
    fn forward(&self, ctx: &mut Ctx, pixels: Var, max_level: u32) -> Vec<Var>;
    fn out_channels(&self) -> usize;
}

/// Stride-2 3×3 convolutions with GELU, one per level.
#[derive(Debug, Clone)]
pub struct ReferenceConvTrunk {
    convs: Vec<Conv2d>,
    channels: usize,
}

impl ReferenceConvTrunk {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, max_level: u32, rng: &mut R) -> Self {
        let convs = (1..=max_level)
            .map(|l| {
                let cin = if l == 1 { Image::CHANNELS } else { channels };
                Conv2d::new(store, &format!("{prefix}.conv{l}"), cin, channels, 3, 2, 1, rng)
            })
            .collect();
        Self { convs, channels }
    }
}

impl Trunk for ReferenceConvTrunk {
    fn forward(&self, ctx: &mut Ctx, pixels: Var, max_level: u32) -> Vec<Var> {
        let mut x = pixels;
        let mut out = Vec::with_capacity(max_level as usize);
        for conv in &self.convs[..max_level as usize] {
            let y = conv.forward(ctx, x);
            x = ctx.gelu(y);
            out.push(x);
        }
        out
    }

    fn out_channels(&self) -> usize {
        self.channels
    }
}

#[derive(Debug, Clone)]
enum Projections {
    PerLevel(BTreeMap<u32, Conv2d>),
    Shared(Conv2d),
}

impl Projections {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, in_ch: usize, rng: &mut R) -> Self {
        if cfg.per_level_input_proj {
            Projections::PerLevel(
                cfg.levels
                    .iter()
                    .map(|&l| (l, Conv2d::new(store, &format!("{prefix}.l{l}"), in_ch, cfg.channels, 1, 1, 0, rng)))
                    .collect(),
            )
        } else {
            Projections::Shared(Conv2d::new(store, &format!("{prefix}.shared"), in_ch, cfg.channels, 1, 1, 0, rng))
        }
    }

    fn get(&self, level: u32) -> &Conv2d {
        match self {
            Projections::PerLevel(m) => &m[&level],
            Projections::Shared(c) => c,
        }
    }
}

/// Multi-scale features of one image (`frames == None`) or one clip.
///
/// Each level holds a `(N, C, h, w)` var with `N = 1` for an image and `N = t`
/// for a clip.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<u32, Var>,
    pub frames: Option<usize>,
    pub channels: usize,
    pub input_dims: (usize, usize),
}

impl FeaturePyramid {
    pub fn level(&self, l: u32) -> Result<Var> {
        self.levels
            .get(&l)
            .copied()
            .ok_or_else(|| Error::Shape(format!("feature pyramid has no level {l}")))
    }

    /// Spatial size of level `l`.
    pub fn dims(&self, l: u32) -> (usize, usize) {
        let s = 1usize << l;
        (self.input_dims.0.div_ceil(s), self.input_dims.1.div_ceil(s))
    }

    pub fn min_level(&self) -> Option<u32> {
        self.levels.keys().next().copied()
    }

    /// Level values in their documented shapes: `(C, h, w)` for an image,
    /// `(t, C, h, w)` for a clip.
    pub fn materialize(&self, ctx: &Ctx) -> BTreeMap<u32, Tensor> {
        self.levels
            .iter()
            .map(|(&l, &v)| {
                let t = ctx.value(v).clone();
                let t = match self.frames {
                    Some(_) => t,
                    None => {
                        let s = t.shape().to_vec();
                        t.reshape(&s[1..])
                    }
                };
                (l, t)
            })
            .collect()
    }
}

/// Nearest 2× upsampling of `(N, C, h, w)` maps.
pub(crate) fn upsample2x_nchw(ctx: &mut Ctx, x: Var) -> Var {
    let s = ctx.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                index.push((plane * h + y / 2) * w + xx / 2);
            }
        }
    }
    ctx.gather(x, Arc::from(index), &[n, c, oh, ow])
}

#[derive(Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    image_trunk: Box<dyn Trunk>,
    video_trunk: Option<Box<dyn Trunk>>,
    image_proj: Projections,
    video_proj: Option<Projections>,
}

impl Encoder {
    /// Builds the reference convolutional trunk(s) and registers every
    /// parameter under `encoder.*`.
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.trunk != TrunkKind::ReferenceConv {
            return Err(Error::Config("pluggable trunks are supplied through Encoder::with_trunks".into()));
        }
        let image_trunk: Box<dyn Trunk> =
            Box::new(ReferenceConvTrunk::new(store, TRUNK_PREFIX, cfg.trunk_channels, cfg.max_level(), rng));
        let video_trunk: Option<Box<dyn Trunk>> = if cfg.shared_backbone {
            None
        } else {
            Some(Box::new(ReferenceConvTrunk::new(
                store,
                &format!("{TRUNK_PREFIX}_video"),
                cfg.trunk_channels,
                cfg.max_level(),
                rng,
            )))
        };
        Self::assemble(cfg, image_trunk, video_trunk, store, rng)
    }

    /// Encoder around externally constructed trunks. Pass `video_trunk = None`
    /// to share the image trunk.
    pub fn with_trunks<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        image_trunk: Box<dyn Trunk>,
        video_trunk: Option<Box<dyn Trunk>>,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Self::assemble(cfg, image_trunk, video_trunk, store, rng)
    }

    fn assemble<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        image_trunk: Box<dyn Trunk>,
        video_trunk: Option<Box<dyn Trunk>>,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let in_ch = image_trunk.out_channels();
        if let Some(v) = &video_trunk {
            if v.out_channels() != in_ch {
                return Err(Error::Config("image and video trunks differ in width".into()));
            }
        }
        let image_proj = Projections::new(store, "encoder.proj", &cfg, in_ch, rng);
        let video_proj = if cfg.shared_input_proj_between_modalities {
            None
        } else {
            Some(Projections::new(store, "encoder.proj_video", &cfg, in_ch, rng))
        };
        Ok(Self {
            cfg,
            image_trunk,
            video_trunk,
            image_proj,
            video_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.cfg.max_level();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of {m} in both dimensions"
            )));
        }
        Ok(())
    }

    fn pixels(&self, ctx: &mut Ctx, frames: &[&Image]) -> Var {
        let (h, w) = frames[0].dims();
        let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
        for f in frames {
            for c in 0..3 {
                let (m, s) = (self.cfg.pixel_mean[c], self.cfg.pixel_std[c]);
                data.extend(f.data()[c * h * w..(c + 1) * h * w].iter().map(|v| (v / 255.0 - m) / s));
            }
        }
        ctx.constant(Tensor::new(&[frames.len(), 3, h, w], data))
    }

    fn pyramid(&self, ctx: &mut Ctx, pixels: Var, video: bool) -> BTreeMap<u32, Var> {
        let trunk = match (&self.video_trunk, video) {
            (Some(t), true) => t.as_ref(),
            _ => self.image_trunk.as_ref(),
        };
        let proj = match (&self.video_proj, video) {
            (Some(p), true) => p,
            _ => &self.image_proj,
        };
        let feats = trunk.forward(ctx, pixels, self.cfg.max_level());
        let mut out = BTreeMap::new();
        let mut coarser: Option<Var> = None;
        for &l in self.cfg.levels.iter().rev() {
            let lateral = proj.get(l).forward(ctx, feats[l as usize - 1]);
            let p = match coarser {
                Some(c) => {
                    let up = upsample2x_nchw(ctx, c);
                    ctx.add(lateral, up)
                }
                None => lateral,
            };
            out.insert(l, p);
            coarser = Some(p);
        }
        out
    }

    pub fn encode_image(&self, ctx: &mut Ctx, img: &Image) -> Result<FeaturePyramid> {
        let (h, w) = img.dims();
        self.check_dims(h, w)?;
        let px = self.pixels(ctx, &[img]);
        Ok(FeaturePyramid {
            levels: self.pyramid(ctx, px, false),
            frames: None,
            channels: self.cfg.channels,
            input_dims: (h, w),
        })
    }

    pub fn encode_video(&self, ctx: &mut Ctx, clip: &VideoClip) -> Result<FeaturePyramid> {
        let (h, w) = clip.dims().ok_or_else(|| Error::Shape("empty clip".into()))?;
        self.check_dims(h, w)?;
        let frames: Vec<&Image> = clip.frames().iter().collect();
        let px = self.pixels(ctx, &frames);
        Ok(FeaturePyramid {
            levels: self.pyramid(ctx, px, true),
            frames: Some(clip.len()),
            channels: self.cfg.channels,
            input_dims: (h, w),
        })
    }
}

/// Indices of `max_t` frames evenly spaced over `[0, t - 1]`, endpoints
/// included, ties rounded down.
pub fn uniform_sample_indices(t: usize, max_t: usize) -> Result<Vec<usize>> {
    if max_t < 1 {
        return Err(Error::Config("max_t must be at least 1".into()));
    }
    if t <= max_t {
        return Ok((0..t).collect());
    }
    if max_t == 1 {
        return Ok(vec![0]);
    }
    let d = max_t - 1;
    // nearest integer to i*(t-1)/d, ties down: floor((2q + d - 1) / 2d)
    Ok((0..max_t).map(|i| (2 * i * (t - 1) + d - 1) / (2 * d)).collect())
}

pub fn uniform_sample_frames(raw: &VideoClip, max_t: usize) -> Result<VideoClip> {
    if raw.is_empty() {
        return Err(Error::Shape("empty clip".into()));
    }
    let idx = uniform_sample_indices(raw.len(), max_t)?;
    VideoClip::new(idx.into_iter().map(|i| raw.frames()[i].clone()).collect())
}
