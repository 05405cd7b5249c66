//! Fine-grained decoder: image tokens attend to themselves, then to
//! spatio-temporal video tokens, stage by stage from the coarsest pyramid level
//! to the finest.
//!
//! Each stage computes
//!
//! ```text
//! D  = flatten(E) + MSA(Q̂ + UP(D_prev))
//! D += MCA(LN(D), LN(video tokens))
//! D += MLP(LN(D))
//! ```
//!
//! where `Q̂ = Linear(LN(flatten(E)))` is a per-level input projection. Video
//! tokens for later stages come from a temporal pyramid of strided 3-D
//! convolutions, so finer (more expensive) image stages see fewer frames.

use std::sync::Arc;

use afformer_autograd::{Ctx, ParamId, ParamStore, Tape, Tensor, Var, GATHER_ZERO};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::heatmaps::round_half_down;
use crate::nn::{columns, fan_in_uniform, flatten_tokens, rows, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSchedule {
    /// `T, ⌈T/2⌉, ⌈T/4⌉, …`: one strided 3-D convolution per later stage.
    Halving,
    /// Every stage sees all `T` frames.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalPyramidConfig {
    pub video_level: u32,
    pub schedule: TemporalSchedule,
    pub c3d_kernel: usize,
    pub c3d_temporal_stride: usize,
}

impl Default for TemporalPyramidConfig {
    fn default() -> Self {
        Self {
            video_level: 3,
            schedule: TemporalSchedule::Halving,
            c3d_kernel: 3,
            c3d_temporal_stride: 2,
        }
    }
}

impl TemporalPyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c3d_kernel.is_multiple_of(2) || self.c3d_temporal_stride == 0 {
            return Err(Error::Config("c3d kernel must be odd and stride positive".into()));
        }
        Ok(())
    }

    /// Temporal length after one strided step, `⌊(T + 2p − k) / s⌋ + 1`.
    pub fn step_length(&self, t: usize) -> usize {
        let p = self.c3d_kernel / 2;
        (t + 2 * p - self.c3d_kernel) / self.c3d_temporal_stride + 1
    }

    /// Frame count seen by each of `stages` decode stages, coarsest first.
    pub fn lengths(&self, t: usize, stages: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(stages);
        let mut cur = t;
        for i in 0..stages {
            if i > 0 && self.schedule == TemporalSchedule::Halving {
                cur = self.step_length(cur);
            }
            out.push(cur);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// `None` uses `max(1, C / 64)`.
    pub heads: Option<usize>,
    pub mlp_ratio: usize,
    pub blocks_per_stage: usize,
    pub share_blocks: bool,
    pub relpos: bool,
    pub temporal: TemporalPyramidConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: None,
            mlp_ratio: 4,
            blocks_per_stage: 1,
            share_blocks: true,
            relpos: true,
            temporal: TemporalPyramidConfig::default(),
        }
    }
}

impl DecoderConfig {
    pub fn head_count(&self, channels: usize) -> usize {
        self.heads.unwrap_or((channels / 64).max(1))
    }
}

/// Flattened `(h·w, C)` decoding at one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub tokens: Var,
    pub level: u32,
    pub dims: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// One head's softmax weights, `(N_q, N_k)`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub stage: usize,
    pub block: usize,
    pub kind: AttentionKind,
    pub head: usize,
    pub weights: Tensor,
}

/// Collects attention weights during a forward pass when handed to the decoder.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbe {
    pub records: Vec<AttentionRecord>,
}

/// Multi-head attention maps.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.k"), channels, channels, rng),
            v: Linear::new(store, &format!("{name}.v"), channels, channels, rng),
            o: Linear::new(store, &format!("{name}.o"), channels, channels, rng),
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.q.out_dim / self.heads
    }
}

/// Relative-position offsets along one axis between a query grid of `nq`
/// cells and a key grid of `nk` cells, both measured in units of the finer of
/// the two grids. Entry `[iq * nk + ik]`.
pub fn axis_offsets(nq: usize, nk: usize) -> Vec<i64> {
    let s = nq.max(nk) as f64;
    let (fq, fk) = (s / nq as f64, s / nk as f64);
    let mut out = Vec::with_capacity(nq * nk);
    for iq in 0..nq {
        for ik in 0..nk {
            out.push(round_half_down(iq as f64 * fq - ik as f64 * fk));
        }
    }
    out
}

/// Gather indices turning per-query table projections into the `(N_q, N_k)`
/// relative-position bias.
#[derive(Debug, Clone)]
pub struct RelposIndex {
    h: Arc<[usize]>,
    w: Arc<[usize]>,
    nq: usize,
    nk: usize,
}

impl RelposIndex {
    /// `extent = (S_h, S_w)`: tables hold `2S − 1` rows for offsets
    /// `−(S−1) ..= S−1`.
    pub fn new(query_grid: (usize, usize), key_grid: (usize, usize, usize), extent: (usize, usize)) -> Result<Self> {
        let (hq, wq) = query_grid;
        let (tk, hk, wk) = key_grid;
        let (sh, sw) = extent;
        let dy = axis_offsets(hq, hk);
        let dx = axis_offsets(wq, wk);
        let (lh, lw) = (2 * sh - 1, 2 * sw - 1);
        let lookup = |d: i64, s: usize, axis: &str| -> Result<usize> {
            let i = d + s as i64 - 1;
            if i < 0 || i >= (2 * s - 1) as i64 {
                return Err(Error::Shape(format!(
                    "{axis} offset {d} outside relative-position table range ±{}",
                    s - 1
                )));
            }
            Ok(i as usize)
        };
        let nq = hq * wq;
        let nk = tk * hk * wk;
        let mut ih = Vec::with_capacity(nq * nk);
        let mut iw = Vec::with_capacity(nq * nk);
        for yq in 0..hq {
            for xq in 0..wq {
                let q = yq * wq + xq;
                for _ in 0..tk {
                    for yk in 0..hk {
                        for xk in 0..wk {
                            ih.push(q * lh + lookup(dy[yq * hk + yk], sh, "vertical")?);
                            iw.push(q * lw + lookup(dx[xq * wk + xk], sw, "horizontal")?);
                        }
                    }
                }
            }
        }
        Ok(Self {
            h: ih.into(),
            w: iw.into(),
            nq,
            nk,
        })
    }
}

/// `R = gather(q · r_hᵀ) + gather(q · r_wᵀ)` on the tape.
fn relpos_bias(ctx: &mut Tape, q: Var, rh: Var, rw: Var, index: &RelposIndex) -> Var {
    let ph = ctx.matmul_t(q, rh);
    let pw = ctx.matmul_t(q, rw);
    let bh = ctx.gather(ph, index.h.clone(), &[index.nq, index.nk]);
    let bw = ctx.gather(pw, index.w.clone(), &[index.nq, index.nk]);
    ctx.add(bh, bw)
}

/// Decomposed relative-position bias for query features `q: (h_q·w_q, d)`
/// against keys on a `(t_k, h_k, w_k)` grid. Tables are `(2S−1, d)`.
pub fn decomposed_relpos(
    query_grid: (usize, usize),
    key_grid: (usize, usize, usize),
    q: &Tensor,
    rh: &Tensor,
    rw: &Tensor,
) -> Result<Tensor> {
    let (nq, d) = q.dims2();
    if nq != query_grid.0 * query_grid.1 || rh.dims2().1 != d || rw.dims2().1 != d {
        return Err(Error::Shape("relative-position operand shapes disagree".into()));
    }
    let (lh, lw) = (rh.dims2().0, rw.dims2().0);
    if lh % 2 == 0 || lw % 2 == 0 {
        return Err(Error::Shape("relative-position tables need odd length".into()));
    }
    let index = RelposIndex::new(query_grid, key_grid, (lh.div_ceil(2), lw.div_ceil(2)))?;
    let mut tape = Tape::new();
    let (q, rh, rw) = (tape.constant(q.clone()), tape.constant(rh.clone()), tape.constant(rw.clone()));
    let r = relpos_bias(&mut tape, q, rh, rw, &index);
    Ok(tape.value(r).clone())
}

/// Relative-position tables and the gather plan for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct Relpos<'a> {
    pub rh: ParamId,
    pub rw: ParamId,
    pub index: &'a RelposIndex,
}

/// Multi-head scaled dot-product attention:
/// `Σ_h softmax(q_h k_hᵀ / √d + R_h) v_h W_o[h] + b_o`.
pub fn attend(
    ctx: &mut Ctx,
    p: &Attention,
    query: Var,
    keys: Var,
    values: Var,
    relpos: Option<Relpos<'_>>,
    mut record: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let (nq, c) = ctx.value(query).dims2();
    let (nk, ck) = ctx.value(keys).dims2();
    let (nv, cv) = ctx.value(values).dims2();
    if nk != nv {
        return Err(Error::Shape(format!("{nk} keys but {nv} values")));
    }
    if c != p.q.in_dim || ck != p.k.in_dim || cv != p.v.in_dim {
        return Err(Error::Shape(format!(
            "attention expects width {}, got query {c}, keys {ck}, values {cv}",
            p.q.in_dim
        )));
    }
    if let Some(r) = &relpos {
        if r.index.nq != nq || r.index.nk != nk {
            return Err(Error::Shape("relative-position plan does not match token counts".into()));
        }
    }
    let q = p.q.forward(ctx, query);
    let k = p.k.forward(ctx, keys);
    let v = p.v.forward(ctx, values);
    let wo = ctx.param(p.o.weight);
    let tables = relpos.map(|r| (ctx.param(r.rh), ctx.param(r.rw), r.index));
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..p.heads {
        let (qh, kh, vh, woh) = if p.heads == 1 {
            (q, k, v, wo)
        } else {
            (
                columns(ctx, q, h * d, d),
                columns(ctx, k, h * d, d),
                columns(ctx, v, h * d, d),
                rows(ctx, wo, h * d, d),
            )
        };
        let s = ctx.matmul_t(qh, kh);
        let mut s = ctx.scale(s, scale);
        if let Some((rh, rw, index)) = tables {
            let b = relpos_bias(ctx, qh, rh, rw, index);
            s = ctx.add(s, b);
        }
        let a = ctx.softmax_rows(s);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(ctx.value(a).clone());
        }
        let oh = ctx.matmul(a, vh);
        let y = ctx.matmul(oh, woh);
        out = Some(match out {
            Some(o) => ctx.add(o, y),
            None => y,
        });
    }
    let bo = ctx.param(p.o.bias);
    Ok(ctx.add_row(out.expect("at least one head"), bo))
}

/// Cross-attention of `query` tokens onto key/value tokens.
pub fn mca(ctx: &mut Ctx, p: &Attention, query: Var, keys: Var, values: Var, relpos: Option<Relpos<'_>>) -> Result<Var> {
    attend(ctx, p, query, keys, values, relpos, None)
}

/// Self-attention over a token sequence.
pub fn msa(ctx: &mut Ctx, p: &Attention, x: Var) -> Result<Var> {
    if !ctx.value(x).is_finite() {
        return Err(Error::NonFinite("self-attention input"));
    }
    attend(ctx, p, x, x, x, None, None)
}

/// Nearest 2× upsampling of a flattened `(h·w, C)` state to `target` dims.
pub fn up_nearest(ctx: &mut Ctx, d: &DecoderState, target: (usize, usize)) -> Result<Var> {
    let (h, w) = d.dims;
    if target != (2 * h, 2 * w) {
        return Err(Error::Shape(format!(
            "nearest upsampling needs exactly 2x: {h}x{w} -> {}x{}",
            target.0, target.1
        )));
    }
    let c = ctx.shape(d.tokens)[1];
    let (th, tw) = target;
    let mut index = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        for x in 0..tw {
            let src = (y / 2) * w + x / 2;
            index.extend((0..c).map(|ch| src * c + ch));
        }
    }
    Ok(ctx.gather(d.tokens, Arc::from(index), &[th * tw, c]))
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln_self: Option<LayerNorm>,
    msa: Attention,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    mca: Attention,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    rh: Option<ParamId>,
    rw: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct InputProj {
    ln: LayerNorm,
    lin: Linear,
}

/// One strided spatio-temporal convolution, stored as one 2-D kernel per
/// temporal tap.
#[derive(Debug, Clone)]
struct C3d {
    taps: Vec<ParamId>,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    channels: usize,
    levels: Vec<u32>,
    extent: (usize, usize),
    in_proj: Vec<(u32, InputProj)>,
    blocks: Vec<Block>,
    c3d: Vec<C3d>,
}

impl Decoder {
    /// `levels` are the image pyramid levels; `extent` is the largest grid
    /// (height, width) any stage will see, which sizes the relative-position
    /// tables.
    pub fn new<R: Rng + ?Sized>(
        cfg: DecoderConfig,
        channels: usize,
        levels: &[u32],
        extent: (usize, usize),
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.temporal.validate()?;
        let heads = cfg.head_count(channels);
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels do not split into {heads} heads")));
        }
        if cfg.blocks_per_stage == 0 || cfg.mlp_ratio == 0 {
            return Err(Error::Config("decoder needs at least one block and a positive MLP ratio".into()));
        }
        if levels.is_empty() {
            return Err(Error::Config("decoder needs at least one level".into()));
        }
        let head_dim = channels / heads;
        let in_proj = levels
            .iter()
            .map(|&l| {
                let name = format!("decoder.in_proj.l{l}");
                let p = InputProj {
                    ln: LayerNorm::new(store, &format!("{name}.ln"), channels),
                    lin: Linear::new(store, &format!("{name}.lin"), channels, channels, rng),
                };
                (l, p)
            })
            .collect();
        let stages = if cfg.share_blocks { 1 } else { levels.len() };
        let mut blocks = Vec::new();
        for s in 0..stages {
            for j in 0..cfg.blocks_per_stage {
                let name = format!("decoder.block{}", s * cfg.blocks_per_stage + j);
                let hidden = channels * cfg.mlp_ratio;
                let ln_self = (j > 0).then(|| LayerNorm::new(store, &format!("{name}.ln_self"), channels));
                let msa = Attention::new(store, &format!("{name}.msa"), channels, heads, rng);
                let ln_q = LayerNorm::new(store, &format!("{name}.ln_q"), channels);
                let ln_kv = LayerNorm::new(store, &format!("{name}.ln_kv"), channels);
                let mca = Attention::new(store, &format!("{name}.mca"), channels, heads, rng);
                let (rh, rw) = if cfg.relpos {
                    let mut table = |axis: &str, s: usize| {
                        let t = Tensor::new(
                            &[2 * s - 1, head_dim],
                            (0..(2 * s - 1) * head_dim).map(|_| rng.random_range(-0.02..0.02)).collect(),
                        );
                        store.register(format!("{name}.relpos.{axis}"), t)
                    };
                    (Some(table("rh", extent.0)), Some(table("rw", extent.1)))
                } else {
                    (None, None)
                };
                let ln_mlp = LayerNorm::new(store, &format!("{name}.ln_mlp"), channels);
                let fc1 = Linear::new(store, &format!("{name}.mlp.fc1"), channels, hidden, rng);
                let fc2 = Linear::new(store, &format!("{name}.mlp.fc2"), hidden, channels, rng);
                blocks.push(Block {
                    ln_self,
                    msa,
                    ln_q,
                    ln_kv,
                    mca,
                    ln_mlp,
                    fc1,
                    fc2,
                    rh,
                    rw,
                });
            }
        }
        let steps = match cfg.temporal.schedule {
            TemporalSchedule::Halving => levels.len() - 1,
            TemporalSchedule::Flat => 0,
        };
        let k = cfg.temporal.c3d_kernel;
        let c3d = (0..steps)
            .map(|i| {
                let name = format!("decoder.c3d{}", i + 1);
                let fan_in = channels * k * k * k;
                let taps = (0..k)
                    .map(|dt| {
                        store.register(
                            format!("{name}.t{dt}"),
                            fan_in_uniform(&[channels, channels, k, k], fan_in, rng),
                        )
                    })
                    .collect();
                let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[channels]));
                C3d { taps, bias }
            })
            .collect();
        Ok(Self {
            cfg,
            channels,
            levels: levels.to_vec(),
            extent,
            in_proj,
            blocks,
            c3d,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn heads(&self) -> usize {
        self.blocks[0].msa.heads
    }

    fn block(&self, stage: usize, j: usize) -> &Block {
        let s = if self.cfg.share_blocks { 0 } else { stage };
        &self.blocks[s * self.cfg.blocks_per_stage + j]
    }

    fn input_proj(&self, level: u32) -> Result<&InputProj> {
        self.in_proj
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Shape(format!("decoder has no input projection for level {level}")))
    }

    /// Temporal pyramid over `(T, C, h, w)` video features: one entry per
    /// decode stage, coarsest stage first.
    pub fn temporal_pyramid(&self, ctx: &mut Ctx, video: Var) -> Result<Vec<Var>> {
        let s = ctx.shape(video).to_vec();
        if s.len() != 4 || s[0] == 0 || s[1] != self.channels {
            return Err(Error::Shape(format!("video features {s:?} are not (T, {}, h, w)", self.channels)));
        }
        let stages = self.levels.len();
        let mut out = vec![video];
        for step in 1..stages {
            let prev = *out.last().expect("nonempty");
            let next = match self.cfg.temporal.schedule {
                TemporalSchedule::Flat => prev,
                TemporalSchedule::Halving => self.c3d_step(ctx, prev, &self.c3d[step - 1]),
            };
            out.push(next);
        }
        Ok(out)
    }

    fn c3d_step(&self, ctx: &mut Ctx, x: Var, conv: &C3d) -> Var {
        let (t, c, h, w) = ctx.value(x).dims4();
        let k = self.cfg.temporal.c3d_kernel;
        let p = k / 2;
        let stride = self.cfg.temporal.c3d_temporal_stride;
        let t_out = self.cfg.temporal.step_length(t);
        let plane = c * h * w;
        let mut acc: Option<Var> = None;
        for (dt, &tap) in conv.taps.iter().enumerate() {
            let mut index = Vec::with_capacity(t_out * plane);
            let mut any = false;
            for to in 0..t_out {
                let f = (stride * to + dt) as isize - p as isize;
                if f >= 0 && (f as usize) < t {
                    any = true;
                    index.extend(f as usize * plane..(f as usize + 1) * plane);
                } else {
                    index.extend(std::iter::repeat_n(GATHER_ZERO, plane));
                }
            }
            if !any {
                continue;
            }
            let frames = ctx.gather(x, Arc::from(index), &[t_out, c, h, w]);
            let wt = ctx.param(tap);
            let y = ctx.conv2d(frames, wt, None, 1, p);
            acc = Some(match acc {
                Some(a) => ctx.add(a, y),
                None => y,
            });
        }
        let y = acc.expect("centre tap always lands in range");
        let b = ctx.param(conv.bias);
        // bias is per channel: broadcast through a (C) -> (t,C,h,w) gather
        let index: Vec<usize> = (0..t_out).flat_map(|_| (0..c).flat_map(|ch| std::iter::repeat_n(ch, h * w))).collect();
        let bb = ctx.gather(b, Arc::from(index), &[t_out, c, h, w]);
        ctx.add(y, bb)
    }

    #[allow(clippy::too_many_arguments)]
    fn stage(
        &self,
        ctx: &mut Ctx,
        stage: usize,
        level: u32,
        image: Var,
        up: Option<&DecoderState>,
        video: Var,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<DecoderState> {
        let is = ctx.shape(image).to_vec();
        let vs = ctx.shape(video).to_vec();
        if is.len() != 4 || is[0] != 1 || is[1] != self.channels {
            return Err(Error::Shape(format!("image features {is:?} are not (1, {}, h, w)", self.channels)));
        }
        if vs.len() != 4 || vs[1] != self.channels {
            return Err(Error::Shape(format!("video features {vs:?} are not (T, {}, h, w)", self.channels)));
        }
        let dims = (is[2], is[3]);
        let key_grid = (vs[0], vs[2], vs[3]);
        let relpos_index = if self.cfg.relpos {
            Some(RelposIndex::new(dims, key_grid, self.extent)?)
        } else {
            None
        };
        let proj = *self.input_proj(level)?;
        let x = flatten_tokens(ctx, image);
        let qn = proj.ln.forward(ctx, x);
        let mut query = proj.lin.forward(ctx, qn);
        if let Some(prev) = up {
            let u = up_nearest(ctx, prev, dims)?;
            query = ctx.add(query, u);
        }
        let vid_tokens = flatten_tokens(ctx, video);
        let mut d = x;
        for j in 0..self.cfg.blocks_per_stage {
            let b = *self.block(stage, j);
            let q_in = match (j, b.ln_self) {
                (0, _) | (_, None) => query,
                (_, Some(ln)) => ln.forward(ctx, d),
            };
            let mut rec = probe.as_ref().map(|_| Vec::new());
            let sa = attend(ctx, &b.msa, q_in, q_in, q_in, None, rec.as_mut())?;
            d = ctx.add(d, sa);
            self.push_records(&mut probe, &mut rec, stage, j, AttentionKind::SelfAttention);

            let qn = b.ln_q.forward(ctx, d);
            let kv = b.ln_kv.forward(ctx, vid_tokens);
            let relpos = match (&relpos_index, b.rh, b.rw) {
                (Some(index), Some(rh), Some(rw)) => Some(Relpos { rh, rw, index }),
                _ => None,
            };
            let ca = attend(ctx, &b.mca, qn, kv, kv, relpos, rec.as_mut())?;
            d = ctx.add(d, ca);
            self.push_records(&mut probe, &mut rec, stage, j, AttentionKind::CrossAttention);

            let mn = b.ln_mlp.forward(ctx, d);
            let h1 = b.fc1.forward(ctx, mn);
            let h1 = ctx.gelu(h1);
            let h2 = b.fc2.forward(ctx, h1);
            d = ctx.add(d, h2);
        }
        Ok(DecoderState { tokens: d, level, dims })
    }

    fn push_records(
        &self,
        probe: &mut Option<&mut AttentionProbe>,
        rec: &mut Option<Vec<Tensor>>,
        stage: usize,
        block: usize,
        kind: AttentionKind,
    ) {
        if let (Some(p), Some(r)) = (probe.as_deref_mut(), rec.as_mut()) {
            for (head, weights) in r.drain(..).enumerate() {
                p.records.push(AttentionRecord {
                    stage,
                    block,
                    kind,
                    head,
                    weights,
                });
            }
        }
    }

    /// One stage without the upsampled-query term, on a `(1, C, h, w)` image
    /// level and `(T, C, h_v, w_v)` video features.
    pub fn decode_single(
        &self,
        ctx: &mut Ctx,
        level: u32,
        image: Var,
        video: Var,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<DecoderState> {
        self.stage(ctx, 0, level, image, None, video, probe)
    }

    /// Coarse-to-fine decoding over every decoder level; returns the state at
    /// the finest level.
    pub fn decode_multi(
        &self,
        ctx: &mut Ctx,
        image: &FeaturePyramid,
        video: &FeaturePyramid,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<DecoderState> {
        let vid = video.level(self.cfg.temporal.video_level).map_err(|_| {
            Error::Shape(format!("video pyramid is missing level {}", self.cfg.temporal.video_level))
        })?;
        let images = self
            .levels
            .iter()
            .map(|&l| {
                image
                    .level(l)
                    .map_err(|_| Error::Shape(format!("image pyramid is missing level {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = self.temporal_pyramid(ctx, vid)?;
        let mut state: Option<DecoderState> = None;
        for (stage, (&level, &img)) in self.levels.iter().zip(&images).rev().enumerate() {
            state = Some(self.stage(ctx, stage, level, img, state.as_ref(), steps[stage], probe.as_deref_mut())?);
        }
        Ok(state.expect("at least one level"))
    }
}
