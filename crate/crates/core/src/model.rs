//! The full grounding model: encoder → decoder → heads over one parameter
//! store.

use afformer_autograd::{Ctx, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionProbe, Decoder, DecoderConfig, DecoderState};
use crate::encoder::{uniform_sample_frames, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{action_probabilities, ActionHead, HeadsConfig, HeatmapHead, PredictionVars};
use crate::heatmaps::Heatmap;
use crate::media::{Image, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub video_size: (usize, usize),
    pub max_frames: usize,
    /// Decode coarse-to-fine over every encoder level; otherwise a single
    /// stage at the video level.
    pub multi_scale: bool,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub heads: HeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: (256, 256),
            video_size: (256, 256),
            max_frames: 64,
            multi_scale: true,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            heads: HeadsConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and desk-scale runs: 32² inputs,
    /// 16 channels, 4 frames, levels {2, 3}.
    pub fn tiny() -> Self {
        let mut cfg = Self {
            image_size: (32, 32),
            video_size: (32, 32),
            max_frames: 4,
            ..Self::default()
        };
        cfg.encoder.channels = 16;
        cfg.encoder.trunk_channels = 16;
        cfg.encoder.levels = vec![2, 3];
        cfg.decoder.temporal.video_level = 3;
        cfg
    }

    pub fn decoder_levels(&self) -> Vec<u32> {
        if self.multi_scale {
            self.encoder.levels.clone()
        } else {
            vec![self.decoder.temporal.video_level]
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let v = self.decoder.temporal.video_level;
        if !self.encoder.levels.contains(&v) {
            return Err(Error::Config(format!(
                "video level {v} is not among encoder levels {:?}",
                self.encoder.levels
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        let m = 1usize << self.encoder.max_level();
        for (name, (h, w)) in [("image", self.image_size), ("video", self.video_size)] {
            if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
                return Err(Error::Config(format!("{name} size {h}x{w} must be a positive multiple of {m}")));
            }
        }
        Ok(())
    }

    /// Largest grid (height, width) any decoder stage attends over.
    fn grid_extent(&self) -> (usize, usize) {
        let l_min = self.decoder_levels()[0];
        let v = self.decoder.temporal.video_level;
        let img = (self.image_size.0 >> l_min, self.image_size.1 >> l_min);
        let vid = (self.video_size.0 >> v, self.video_size.1 >> v);
        (img.0.max(vid.0), img.1.max(vid.1))
    }
}

/// Inference output.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub heatmap: Heatmap,
    /// Action probabilities, when the model has an action head.
    pub action: Option<Vec<f64>>,
}

impl Prediction {
    /// Most likely 1-based action label.
    pub fn action_label(&self) -> Option<usize> {
        self.action.as_ref().map(|p| {
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = i;
                }
            }
            best + 1
        })
    }
}

#[derive(Debug)]
pub struct Afformer {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    heatmap_head: HeatmapHead,
    action_head: Option<ActionHead>,
}

impl Afformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut params, &mut rng)?;
        let levels = cfg.decoder_levels();
        let decoder = Decoder::new(
            cfg.decoder.clone(),
            cfg.encoder.channels,
            &levels,
            cfg.grid_extent(),
            &mut params,
            &mut rng,
        )?;
        let heatmap_head = HeatmapHead::new(&mut params, cfg.encoder.channels, levels[0], &mut rng);
        let action_head = match cfg.heads.action_classes {
            Some(c) => Some(ActionHead::new(&mut params, cfg.encoder.channels, c, cfg.heads.pool_grid, &mut rng)?),
            None => None,
        };
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            heatmap_head,
            action_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn has_action_head(&self) -> bool {
        self.action_head.is_some()
    }

    /// Replaces parameter values by name. Every name must exist with the same
    /// shape; parameters missing from `other` keep their values.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {name} not in model")))?;
            let dst = self.params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    /// Decoder state at the finest decode level.
    pub fn decode(&self, ctx: &mut Ctx, clip: &VideoClip, image: &Image, probe: Option<&mut AttentionProbe>) -> Result<DecoderState> {
        if clip.is_empty() {
            return Err(Error::Shape("empty clip".into()));
        }
        let sampled;
        let clip = if clip.len() > self.cfg.max_frames {
            sampled = uniform_sample_frames(clip, self.cfg.max_frames)?;
            &sampled
        } else {
            clip
        };
        let img = self.encoder.encode_image(ctx, image)?;
        let vid = self.encoder.encode_video(ctx, clip)?;
        if self.cfg.multi_scale {
            self.decoder.decode_multi(ctx, &img, &vid, probe)
        } else {
            let l = self.cfg.decoder.temporal.video_level;
            self.decoder.decode_single(ctx, l, img.level(l)?, vid.level(l)?, probe)
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, clip: &VideoClip, image: &Image, probe: Option<&mut AttentionProbe>) -> Result<PredictionVars> {
        let d = self.decode(ctx, clip, image, probe)?;
        let dims = image.dims();
        let heatmap = self.heatmap_head.forward(ctx, &d, dims)?;
        let action = match &self.action_head {
            Some(h) => Some(h.forward(ctx, &d)?),
            None => None,
        };
        Ok(PredictionVars { heatmap, dims, action })
    }

    pub fn predict(&self, clip: &VideoClip, image: &Image) -> Result<Prediction> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward(&mut ctx, clip, image, None)?;
        let (h, w) = out.dims;
        let logits = ctx.value(out.heatmap).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap logits"));
        }
        Ok(Prediction {
            heatmap: Heatmap::logits(h, w, logits)?,
            action: out.action.map(|a| action_probabilities(ctx.value(a).data())),
        })
    }
}
