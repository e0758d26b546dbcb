//! End-to-end composition: clip streaming through the memory compressor,
//! per-frame text compression, token adaptation and sequence assembly.

use serde::{Deserialize, Serialize};

use crate::config::{Branch, CompressorConfig, Layout, ModelConfig};
use crate::encoder::VideoFeature;
use crate::error::{Error, Result};
use crate::mem::{self, MemCacheState};
use crate::params::{AdapterParams, MemParams, ModelParams};
use crate::tensor::{ops, Graph, Real, Tensor, Var};
use crate::text::{self, TextPrompt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Mem,
    Perc,
}

/// Where a token of the assembled sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSource {
    pub frame: usize,
    pub kind: TokenKind,
}

/// Token order for `frames` frames.
pub fn sequence_order(frames: usize, branch: Branch, layout: Layout) -> Vec<TokenSource> {
    let src = |frame, kind| TokenSource { frame, kind };
    match branch {
        Branch::Mem => (0..frames).map(|f| src(f, TokenKind::Mem)).collect(),
        Branch::Txt => (0..frames).map(|f| src(f, TokenKind::Perc)).collect(),
        Branch::Full => match layout {
            Layout::Interleaved => (0..frames)
                .flat_map(|f| [src(f, TokenKind::Mem), src(f, TokenKind::Perc)])
                .collect(),
            Layout::Blocked => (0..frames)
                .map(|f| src(f, TokenKind::Mem))
                .chain((0..frames).map(|f| src(f, TokenKind::Perc)))
                .collect(),
        },
    }
}

/// Visual tokens handed to the downstream consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// (L, d_out).
    pub tokens: Tensor<T>,
    pub layout: Layout,
    pub provenance: Vec<TokenSource>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// The sequence in feature-file layout: (L, 1, d_out).
    pub fn to_feature(&self) -> Result<VideoFeature<T>> {
        let (l, d) = self.tokens.rows_cols();
        VideoFeature::new(self.tokens.reshape(&[l, 1, d])?)
    }
}

fn branch_of(a_m: bool, a_p: bool) -> Result<Branch> {
    match (a_m, a_p) {
        (true, true) => Ok(Branch::Full),
        (true, false) => Ok(Branch::Mem),
        (false, true) => Ok(Branch::Txt),
        (false, false) => Err(Error::Input("no token streams to assemble".into())),
    }
}

/// Graph version of [`assemble_sequence`].
pub fn assemble_vars<T: Real>(
    g: &mut Graph<T>,
    a_m: Option<Var>,
    a_p: Option<Var>,
    layout: Layout,
) -> Result<(Var, Vec<TokenSource>)> {
    let branch = branch_of(a_m.is_some(), a_p.is_some())?;
    let rows = |g: &Graph<T>, v: Option<Var>| v.map(|v| g.value(v).rows_cols().0);
    let (rm, rp) = (rows(g, a_m), rows(g, a_p));
    if let (Some(a), Some(b)) = (rm, rp) {
        if a != b {
            return Err(Error::shape(
                "assemble_sequence",
                format!("{a} memory tokens vs {b} perceived tokens"),
            ));
        }
    }
    let frames = rm.or(rp).unwrap_or(0);
    let order = sequence_order(frames, branch, layout);
    let seq = match (branch, layout, a_m, a_p) {
        (Branch::Mem, _, Some(m), _) => m,
        (Branch::Txt, _, _, Some(p)) => p,
        (Branch::Full, Layout::Blocked, Some(m), Some(p)) => g.concat_rows(&[m, p])?,
        (_, _, m, p) => {
            let mut parts = Vec::with_capacity(order.len());
            for s in &order {
                let src = match s.kind {
                    TokenKind::Mem => m,
                    TokenKind::Perc => p,
                }
                .expect("branch matches available streams");
                parts.push(g.slice_rows(src, s.frame, 1)?);
            }
            g.concat_rows(&parts)?
        }
    };
    Ok((seq, order))
}

/// Orders adapted tokens into the final sequence. Pass `None` for a branch
/// that is switched off.
pub fn assemble_sequence<T: Real>(
    a_m: Option<&Tensor<T>>,
    a_p: Option<&Tensor<T>>,
    layout: Layout,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let m = a_m.map(|t| g.constant(t.clone()));
    let p = a_p.map(|t| g.constant(t.clone()));
    let (seq, provenance) = assemble_vars(&mut g, m, p, layout)?;
    Ok(TokenSequence {
        tokens: g.value(seq).clone(),
        layout,
        provenance,
    })
}

fn as_rows<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = t.rows_cols();
    t.reshape(&[r, c])
}

/// A_m = F_m · proj_mem, A_p = F_p · proj_perc; inputs (T, 1, d) or (T, d).
pub fn project_tokens<T: Real>(
    f_m: &Tensor<T>,
    f_p: &Tensor<T>,
    adapter: &AdapterParams<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, p) = (as_rows(f_m)?, as_rows(f_p)?);
    if m.shape() != p.shape() {
        return Err(Error::shape(
            "project_tokens",
            format!("F_m {:?} vs F_p {:?}", f_m.shape(), f_p.shape()),
        ));
    }
    Ok((
        ops::matmul(&m, &adapter.proj_mem)?,
        ops::matmul(&p, &adapter.proj_perc)?,
    ))
}

/// Text-side input: a prompt, or query tokens already computed per frame
/// (used when the Q-Former is frozen).
#[derive(Clone, Copy, Debug)]
pub enum TextInput<'a, T> {
    Prompt(&'a TextPrompt),
    Queries(&'a [Tensor<T>]),
}

impl<'a, T> TextInput<'a, T> {
    fn frames(&self, start: usize, len: usize) -> Result<TextInput<'a, T>> {
        match *self {
            TextInput::Prompt(p) => Ok(TextInput::Prompt(p)),
            TextInput::Queries(q) => q
                .get(start..start + len)
                .map(TextInput::Queries)
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "{} precomputed frames, needed {}..{}",
                        q.len(),
                        start,
                        start + len
                    ))
                }),
        }
    }
}

/// Graph handles produced for one clip; all have one row per real frame.
#[derive(Clone, Debug)]
pub struct ClipForward {
    pub f_m: Option<Var>,
    pub f_p: Option<Var>,
    pub a_m: Option<Var>,
    pub a_p: Option<Var>,
    pub stage_shapes: Vec<Vec<usize>>,
}

fn padded_clip<T: Real>(clip: &Tensor<T>, clip_size: usize) -> Result<Tensor<T>> {
    let n = clip.shape()[0];
    if n == clip_size {
        return Ok(clip.clone());
    }
    let mut shape = clip.shape().to_vec();
    shape[0] = clip_size - n;
    ops::concat_rows(&[clip, &Tensor::zeros(&shape)])
}

fn check_clip<T: Real>(cfg: &ModelConfig, clip: &Tensor<T>) -> Result<usize> {
    let c = &cfg.compressor;
    match *clip.shape() {
        [n, p, d] if (1..=c.clip_size).contains(&n) && p == c.patches() && d == c.dim => Ok(n),
        _ => Err(Error::Input(format!(
            "clip {:?} must be (1..={}, {}, {})",
            clip.shape(),
            c.clip_size,
            c.patches(),
            c.dim
        ))),
    }
}

/// Perceived tokens and projections for a clip whose memory tokens are known.
fn finish_clip<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    clip: &Tensor<T>,
    f_m: Option<Var>,
    text: TextInput<'_, T>,
    stage_shapes: Vec<Vec<usize>>,
) -> Result<ClipForward> {
    let n = clip.shape()[0];
    let f_p = if cfg.branch.uses_text() {
        let queries = match text {
            TextInput::Prompt(prompt) => {
                let frames = g.constant(clip.clone());
                let txt = text::embed_prompt(g, &p.qformer, prompt)?;
                let (np, d) = (clip.shape()[1], clip.shape()[2]);
                let mut qs = Vec::with_capacity(n);
                for i in 0..n {
                    let frame = g.slice_rows(frames, i, 1)?;
                    let frame = g.reshape(frame, &[np, d])?;
                    qs.push(text::qformer_with_text(g, &p.qformer, frame, txt)?);
                }
                qs
            }
            TextInput::Queries(qs) => {
                if qs.len() != n {
                    return Err(Error::Contract(format!(
                        "{} precomputed query sets for {n} frames",
                        qs.len()
                    )));
                }
                qs.iter().map(|q| g.constant(q.clone())).collect()
            }
        };
        let key = if cfg.branch == Branch::Full { f_m } else { None };
        Some(text::perceive(g, p.fusion.as_ref(), &queries, key)?)
    } else {
        None
    };
    let a_m = f_m.map(|v| g.matmul(v, p.adapter.proj_mem)).transpose()?;
    let a_p = f_p.map(|v| g.matmul(v, p.adapter.proj_perc)).transpose()?;
    Ok(ClipForward {
        f_m,
        f_p,
        a_m,
        a_p,
        stage_shapes,
    })
}

/// One clip (up to T_c frames) through both branches. A short clip is
/// zero-padded for the memory compressor and its tokens trimmed back.
pub fn forward_clip<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    clip: &Tensor<T>,
    text: TextInput<'_, T>,
    state: &mut MemCacheState<T>,
) -> Result<ClipForward> {
    let n = check_clip(cfg, clip)?;
    let (f_m, stages) = if cfg.branch.uses_memory() {
        let x = g.constant(padded_clip(clip, cfg.compressor.clip_size)?);
        let out = mem::compress_clip(g, &p.mem, x, state, &cfg.compressor)?;
        let tokens = if n < cfg.compressor.clip_size {
            g.slice_rows(out.tokens, 0, n)?
        } else {
            out.tokens
        };
        (Some(tokens), out.stage_shapes)
    } else {
        (None, Vec::new())
    };
    finish_clip(g, cfg, p, clip, f_m, text, stages)
}

#[derive(Clone, Debug)]
pub struct VideoForward {
    /// (T, d) memory tokens.
    pub f_m: Option<Var>,
    /// (T, d) perceived tokens.
    pub f_p: Option<Var>,
    /// (L, d_out) assembled sequence.
    pub tokens: Var,
    pub provenance: Vec<TokenSource>,
}

pub fn num_clips(frames: usize, clip_size: usize) -> usize {
    frames.div_ceil(clip_size)
}

/// Whole video in one graph. With a non-detached cache, gradients flow
/// across clips.
pub fn forward_video<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    video: &Tensor<T>,
    text: TextInput<'_, T>,
    state: &mut MemCacheState<T>,
) -> Result<VideoForward> {
    let frames = video.shape().first().copied().unwrap_or(0);
    if frames == 0 {
        return Err(Error::Input("video has no frames".into()));
    }
    let tc = cfg.compressor.clip_size;
    let mut parts: [Vec<Var>; 4] = Default::default();
    for c in 0..num_clips(frames, tc) {
        let start = c * tc;
        let n = tc.min(frames - start);
        let clip = ops::slice_rows(video, start, n)?;
        let out = forward_clip(g, cfg, p, &clip, text.frames(start, n)?, state)?;
        for (dst, v) in parts.iter_mut().zip([out.f_m, out.f_p, out.a_m, out.a_p]) {
            dst.extend(v);
        }
    }
    let mut joined = Vec::with_capacity(4);
    for part in &parts {
        joined.push(if part.is_empty() {
            None
        } else {
            Some(g.concat_rows(part)?)
        });
    }
    let (tokens, provenance) = assemble_vars(g, joined[2], joined[3], cfg.layout)?;
    Ok(VideoForward {
        f_m: joined[0],
        f_p: joined[1],
        tokens,
        provenance,
    })
}

/// Concrete outputs for a whole video.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub sequence: TokenSequence<T>,
    /// (T, 1, d), absent in the text-only branch.
    pub f_m: Option<Tensor<T>>,
    /// (T, 1, d), absent in the memory-only branch.
    pub f_p: Option<Tensor<T>>,
    pub clips: usize,
    /// Per-block (T, H, W, d) shapes seen for the first clip.
    pub stage_shapes: Vec<Vec<usize>>,
}

/// Concrete outputs for one streamed clip.
#[derive(Clone, Debug)]
pub struct ClipOutput<T> {
    pub f_m: Option<Tensor<T>>,
    pub f_p: Option<Tensor<T>>,
    pub a_m: Option<Tensor<T>>,
    pub a_p: Option<Tensor<T>>,
    pub stage_shapes: Vec<Vec<usize>>,
}

/// A compressor together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VidCompress<T> {
    config: ModelConfig,
    params: ModelParams<Tensor<T>>,
}

impl<T: Real> VidCompress<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Pairs a config with existing weights, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let named = params
            .named("")
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let params = ModelParams::from_named(&config, named)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<Tensor<T>> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams<Tensor<T>>) {
        (self.config, self.params)
    }

    pub fn prompt(&self, text: &str) -> Result<TextPrompt> {
        TextPrompt::from_text(text, &self.config.text)
    }

    pub fn fresh_state(&self) -> MemCacheState<T> {
        MemCacheState::for_config(&self.config.compressor)
    }

    /// Puts every weight on `g`; names for which `trainable` holds become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> ModelParams<Var> {
        self.params.map("", |name, t| {
            if trainable(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Q-Former outputs for every frame of `video` (T, N, d).
    pub fn frame_queries(&self, video: &Tensor<T>, prompt: &TextPrompt) -> Result<Vec<Tensor<T>>> {
        let &[t, n, d] = video.shape() else {
            return Err(Error::Input(format!("video {:?} must be (T, N, d)", video.shape())));
        };
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let mut g = Graph::new();
            let qp = self.params.qformer.map("qformer", |_, t| g.constant(t.clone()));
            let frame = g.constant(ops::slice_rows(video, i, 1)?.reshape(&[n, d])?);
            let q = text::qformer_lite(&mut g, &qp, frame, prompt)?;
            out.push(g.value(q).clone());
        }
        Ok(out)
    }

    pub fn session(&self, prompt: TextPrompt) -> StreamSession<'_, T> {
        StreamSession {
            model: self,
            prompt,
            state: self.fresh_state(),
        }
    }

    fn collect(
        &self,
        frames: usize,
        outputs: Vec<ClipOutput<T>>,
    ) -> Result<PipelineOutput<T>> {
        let clips = outputs.len();
        let stage_shapes = outputs.first().map(|o| o.stage_shapes.clone()).unwrap_or_default();
        let join = |pick: fn(&ClipOutput<T>) -> Option<&Tensor<T>>| -> Result<Option<Tensor<T>>> {
            let parts: Vec<&Tensor<T>> = outputs.iter().filter_map(pick).collect();
            if parts.is_empty() {
                Ok(None)
            } else {
                ops::concat_rows(&parts).map(Some)
            }
        };
        let f_m = join(|o| o.f_m.as_ref())?;
        let f_p = join(|o| o.f_p.as_ref())?;
        let a_m = join(|o| o.a_m.as_ref())?;
        let a_p = join(|o| o.a_p.as_ref())?;
        let sequence = assemble_sequence(a_m.as_ref(), a_p.as_ref(), self.config.layout)?;
        let d = self.config.dim();
        let to_3d = |t: Option<Tensor<T>>| t.map(|t| t.reshape(&[frames, 1, d])).transpose();
        Ok(PipelineOutput {
            sequence,
            f_m: to_3d(f_m)?,
            f_p: to_3d(f_p)?,
            clips,
            stage_shapes,
        })
    }

    /// Streams the video clip by clip from a fresh cache.
    pub fn run_video_streaming(
        &self,
        video: &VideoFeature<T>,
        prompt: &TextPrompt,
    ) -> Result<PipelineOutput<T>> {
        let tc = self.config.compressor.clip_size;
        let frames = video.frames();
        let mut session = self.session(prompt.clone());
        let mut outputs = Vec::with_capacity(num_clips(frames, tc));
        for c in 0..num_clips(frames, tc) {
            let n = tc.min(frames - c * tc);
            outputs.push(session.push_clip(&video.frames_slice(c * tc, n)?)?);
        }
        self.collect(frames, outputs)
    }

    /// Cache-free recomputation: every clip is recomputed from the raw clips
    /// of its receptive field by explicit concatenation, block by block.
    pub fn windowed_oracle(
        &self,
        video: &VideoFeature<T>,
        prompt: &TextPrompt,
    ) -> Result<PipelineOutput<T>> {
        let cfg = &self.config;
        let tc = cfg.compressor.clip_size;
        let frames = video.frames();
        let mut outputs = Vec::with_capacity(num_clips(frames, tc));
        for t in 0..num_clips(frames, tc) {
            let n = tc.min(frames - t * tc);
            let clip = video.frames_slice(t * tc, n)?;
            check_clip(cfg, &clip)?;
            let mut g = Graph::new();
            let p = self.bind(&mut g, |_| false);
            let (f_m, stages) = if cfg.branch.uses_memory() {
                let (tokens, stages) = oracle_clip_tokens(&mut g, &cfg.compressor, &p.mem, video, t)?;
                (Some(tokens), stages)
            } else {
                (None, Vec::new())
            };
            let out = finish_clip(&mut g, cfg, &p, &clip, f_m, TextInput::Prompt(prompt), stages)?;
            outputs.push(read_clip(&g, &out));
        }
        self.collect(frames, outputs)
    }
}

fn read_clip<T: Real>(g: &Graph<T>, out: &ClipForward) -> ClipOutput<T> {
    let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
    ClipOutput {
        f_m: get(out.f_m),
        f_p: get(out.f_p),
        a_m: get(out.a_m),
        a_p: get(out.a_p),
        stage_shapes: out.stage_shapes.clone(),
    }
}

/// Clips whose raw input can reach clip `t`'s memory tokens:
/// `t − num_blocks·M ..= t`.
pub fn receptive_field(t: usize, cfg: &CompressorConfig) -> std::ops::RangeInclusive<usize> {
    t.saturating_sub(cfg.num_blocks * cfg.memory_size)..=t
}

fn oracle_clip_tokens<T: Real>(
    g: &mut Graph<T>,
    cfg: &CompressorConfig,
    p: &MemParams<Var>,
    video: &VideoFeature<T>,
    t: usize,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let (tc, m, nb, d) = (cfg.clip_size, cfg.memory_size, cfg.num_blocks, cfg.dim);
    let frames = video.frames();
    let window = receptive_field(t, cfg);
    let w0 = *window.start();
    let mut xs = Vec::with_capacity(t - w0 + 1);
    for s in window {
        let n = tc.min(frames - s * tc);
        let clip = padded_clip(&video.frames_slice(s * tc, n)?, tc)?;
        if clip.shape()[1] != cfg.patches() {
            return Err(Error::Input(format!(
                "{} patches cannot be arranged as the configured {0}x{0} grid",
                cfg.grid
            )));
        }
        let x = g.constant(clip);
        xs.push(g.reshape(x, &[tc, cfg.grid, cfg.grid, d])?);
    }
    let mut stages = vec![g.value(xs[t - w0]).shape().to_vec()];
    for (b, bp) in p.blocks.iter().enumerate() {
        // block b needs K/V from clips kv_from..=t and outputs for out_from..=t
        let kv_from = t.saturating_sub((nb - b) * m);
        let out_from = t.saturating_sub((nb - 1 - b) * m);
        let mut pooled = Vec::with_capacity(t - kv_from + 1);
        for s in kv_from..=t {
            pooled.push(mem::block_head(g, bp, xs[s - w0], cfg.pool())?);
        }
        for s in out_from..=t {
            let lo = s.saturating_sub(m).max(kv_from);
            let own = &pooled[s - kv_from];
            let (k_bar, v_bar) = if lo == s {
                (own.k, own.v)
            } else {
                let ks: Vec<Var> = (lo..=s).map(|j| pooled[j - kv_from].k).collect();
                let vs: Vec<Var> = (lo..=s).map(|j| pooled[j - kv_from].v).collect();
                (g.concat_rows(&ks)?, g.concat_rows(&vs)?)
            };
            xs[s - w0] = mem::block_tail(g, bp, own, k_bar, v_bar, cfg.num_heads)?;
        }
        stages.push(g.value(xs[t - w0]).shape().to_vec());
    }
    let tokens = g.reshape(xs[t - w0], &[tc, d])?;
    let n = tc.min(frames - t * tc);
    let tokens = if n < tc { g.slice_rows(tokens, 0, n)? } else { tokens };
    Ok((tokens, stages))
}

/// Incremental inference over one video; owns the memory cache.
pub struct StreamSession<'m, T: Real> {
    model: &'m VidCompress<T>,
    prompt: TextPrompt,
    state: MemCacheState<T>,
}

impl<T: Real> StreamSession<'_, T> {
    /// Compresses the next clip (1..=T_c frames). Only the final clip of a
    /// video may be short.
    pub fn push_clip(&mut self, clip: &Tensor<T>) -> Result<ClipOutput<T>> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, |_| false);
        let out = forward_clip(
            &mut g,
            &self.model.config,
            &p,
            clip,
            TextInput::Prompt(&self.prompt),
            &mut self.state,
        )?;
        Ok(read_clip(&g, &out))
    }

    pub fn state(&self) -> &MemCacheState<T> {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }
}
