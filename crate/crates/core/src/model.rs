//! The full generator: a block-causal temporal transformer over
//! `[prompt, motion, BOV, S_1 .. S_{F-1}]`, scaling-and-shift indicator
//! features, a masked spatial encoder/decoder producing one condition per
//! token, and the per-token diffusion head.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{build_block_causal_mask, BlockLayout, KvCache};
use crate::block::{NormPlacement, Stack};
use crate::codec::Codec;
use crate::data::{NULL_PROMPT, PROMPT_VOCAB};
use crate::diffusion::{diffusion_loss, sample_tokens, DenoiseMlp, SamplerConfig, LOSS_DRAWS};
use crate::embed::{
    patchify, sincos_1d, sincos_2d, unpatchify, BovEmbeddings, MotionEmbedding, PatchEmbed, PromptEmbedding,
};
use crate::error::{contract_err, shape_err};
use crate::nn::{Init, LayerNorm};
use crate::scale_shift::{normalize, ScaleShift};
use crate::schedule::{sample_train_mask, MaskPlan, NoiseSchedule, ScheduleKind};
use crate::tensor::rng::{self, Rng};
use crate::{Float, Graph, NovaError, ParamId, ParamStore, Result, Tensor, Var};

/// Causal frame-by-frame prediction, or one joint masked pass over all
/// frames without temporal autoregression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    #[default]
    Causal,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovaConfig {
    /// Pixel canvas.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride_t: usize,
    pub stride_s: usize,
    /// Patch stride on the latent grid.
    pub patch: usize,
    /// Latent frames per training clip.
    pub frames: usize,
    pub d: usize,
    pub heads: usize,
    pub temporal_depth: usize,
    pub spatial_enc_depth: usize,
    pub spatial_dec_depth: usize,
    pub norm_placement: NormPlacement,
    pub scale_shift_rank: usize,
    pub head_width: usize,
    pub head_blocks: usize,
    #[serde(rename = "train_T")]
    pub train_t: usize,
    pub noise_schedule: ScheduleKind,
    pub infer_steps: usize,
    /// Set steps per frame; clamped to the token count.
    pub ar_steps: usize,
    pub cfg_scale: f64,
    /// Also replace the motion token when the prompt is dropped.
    pub cfg_drop_motion: bool,
    pub prompt_dropout: f64,
    pub prompt_vocab: usize,
    pub motion_buckets: usize,
    pub motion_width: f64,
    pub temporal_mode: TemporalMode,
    /// Clamp on the implied clean token during sampling.
    pub x0_clip: Option<f64>,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for NovaConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            stride_t: 2,
            stride_s: 4,
            patch: 1,
            frames: 5,
            d: 128,
            heads: 8,
            temporal_depth: 2,
            spatial_enc_depth: 2,
            spatial_dec_depth: 2,
            norm_placement: NormPlacement::default(),
            scale_shift_rank: 24,
            head_width: 256,
            head_blocks: 3,
            train_t: 1000,
            noise_schedule: ScheduleKind::Cosine,
            infer_steps: 100,
            ar_steps: 128,
            cfg_scale: 7.0,
            cfg_drop_motion: false,
            prompt_dropout: 0.1,
            prompt_vocab: PROMPT_VOCAB,
            motion_buckets: 8,
            motion_width: 0.35,
            temporal_mode: TemporalMode::Causal,
            x0_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl NovaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NovaError::Config(msg));
        let cell = self.stride_s * self.patch;
        if cell == 0 || self.height % cell != 0 || self.width % cell != 0 {
            return bad(format!("{}×{} canvas not divisible by stride_s·patch = {cell}", self.height, self.width));
        }
        if self.stride_t == 0 || self.frames == 0 || self.channels == 0 {
            return bad("stride_t, frames and channels must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 || self.d % 4 != 0 {
            return bad(format!("width {} must be divisible by 4 and by {} heads", self.d, self.heads));
        }
        if self.temporal_depth == 0 || self.spatial_enc_depth == 0 || self.spatial_dec_depth == 0 {
            return bad("every stack needs depth ≥ 1".into());
        }
        if self.scale_shift_rank == 0 || self.scale_shift_rank > self.d {
            return bad(format!("scale_shift_rank must lie in 1..={}", self.d));
        }
        if self.head_width == 0 || self.head_width % 2 != 0 {
            return bad("head_width must be even and positive".into());
        }
        if self.infer_steps == 0 || self.infer_steps > self.train_t {
            return bad(format!("infer_steps must lie in 1..={}", self.train_t));
        }
        if self.ar_steps == 0 {
            return bad("ar_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad("prompt_dropout must lie in [0, 1]".into());
        }
        if self.prompt_vocab < 2 || self.motion_buckets == 0 || !(self.motion_width > 0.0) {
            return bad("prompt_vocab ≥ 2, motion_buckets ≥ 1 and motion_width > 0 required".into());
        }
        if let Some(c) = self.x0_clip {
            if !(c > 0.0) {
                return bad("x0_clip must be positive".into());
            }
        }
        Ok(())
    }

    /// Latent token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let cell = self.stride_s * self.patch;
        (self.height / cell, self.width / cell)
    }

    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn latent_channels(&self) -> usize {
        self.channels * self.stride_t * self.stride_s * self.stride_s
    }

    /// Channels of one token.
    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.patch * self.patch
    }

    pub fn pixel_frames(&self) -> usize {
        self.frames * self.stride_t
    }

    pub fn null_prompt(&self) -> usize {
        if self.prompt_vocab == PROMPT_VOCAB {
            NULL_PROMPT
        } else {
            self.prompt_vocab - 1
        }
    }

    pub fn codec(&self) -> Codec {
        Codec {
            stride_t: self.stride_t,
            stride_s: self.stride_s,
        }
    }
}

/// Per-call generation settings.
#[derive(Debug, Clone)]
pub struct GenOptions {
    pub prompt: usize,
    pub motion: f64,
    pub frames: usize,
    pub ar_steps: usize,
    pub cfg_scale: f64,
    pub infer_steps: usize,
    pub seed: u64,
    /// Decode frame by frame with a key/value cache instead of re-running
    /// the temporal stack over the whole prefix for every frame.
    pub use_cache: bool,
    pub mode: TemporalMode,
}

impl GenOptions {
    pub fn from_config(cfg: &NovaConfig, prompt: usize, motion: f64, seed: u64) -> Self {
        Self {
            prompt,
            motion,
            frames: cfg.frames,
            ar_steps: cfg.ar_steps,
            cfg_scale: cfg.cfg_scale,
            infer_steps: cfg.infer_steps,
            seed,
            use_cache: true,
            mode: cfg.temporal_mode,
        }
    }
}

/// Wall time split between the temporal stack and spatial decoding
/// (spatial stacks plus diffusion sampling).
#[derive(Debug, Clone, Copy, Default)]
pub struct Timings {
    pub temporal: Duration,
    pub spatial: Duration,
}

/// Generated latent tokens `[F × M × c]` in model units (`2·latent − 1`).
#[derive(Debug, Clone)]
pub struct Generated<T> {
    pub tokens: Tensor<T>,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct Nova {
    pub cfg: NovaConfig,
    pub patch: PatchEmbed,
    pub prompt: PromptEmbedding,
    pub motion: MotionEmbedding,
    pub bov: BovEmbeddings,
    pub temporal: Stack,
    pub scale_shift: ScaleShift,
    pub encoder: Stack,
    pub enc_norm: LayerNorm,
    pub decoder: Stack,
    pub dec_norm: LayerNorm,
    pub mask_token: ParamId,
    pub head: DenoiseMlp,
    pub schedule: NoiseSchedule,
}

impl Nova {
    pub fn new<T: Float>(cfg: NovaConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(cfg.seed);
        let (d, m, heads, pl) = (cfg.d, cfg.tokens(), cfg.heads, cfg.norm_placement);
        let r = &mut r;
        let model = Self {
            patch: PatchEmbed::new(&mut store, "patch_embed", cfg.latent_channels(), cfg.patch, d, r),
            prompt: PromptEmbedding::new(&mut store, "prompt_embed", cfg.prompt_vocab, cfg.null_prompt(), d, r),
            motion: MotionEmbedding::new(&mut store, "motion_embed", cfg.motion_buckets, cfg.motion_width, d, r),
            bov: BovEmbeddings::new(&mut store, "bov", m, d, r),
            temporal: Stack::new(&mut store, "temporal", cfg.temporal_depth, d, heads, pl, r),
            scale_shift: ScaleShift::new(&mut store, "scale_shift", d, cfg.scale_shift_rank, r)?,
            encoder: Stack::new(&mut store, "spatial_enc", cfg.spatial_enc_depth, d, heads, pl, r),
            enc_norm: LayerNorm::new(&mut store, "spatial_enc.norm", d),
            decoder: Stack::new(&mut store, "spatial_dec", cfg.spatial_dec_depth, d, heads, pl, r),
            dec_norm: LayerNorm::new(&mut store, "spatial_dec.norm", d),
            mask_token: store.add("mask_token", Init::Normal(0.02).tensor(&[1, d], r)),
            head: DenoiseMlp::new(&mut store, "head", cfg.token_dim(), d, cfg.head_width, cfg.head_blocks, r),
            schedule: NoiseSchedule::new(cfg.noise_schedule, cfg.train_t)?,
            cfg,
        };
        Ok((model, store))
    }

    /// Rebuilds the module layout for `cfg` and checks `store` against it.
    pub fn with_params<T: Float>(cfg: NovaConfig, store: &ParamStore<T>) -> Result<Self> {
        let (model, fresh) = Self::new::<T>(cfg)?;
        let named: Vec<(String, Tensor<T>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut check = fresh;
        check.load_from(&named)?;
        if check.iter().map(|(n, _)| n).ne(store.iter().map(|(n, _)| n)) {
            return Err(contract_err!("parameter order differs from the model layout"));
        }
        Ok(model)
    }

    // ---- data plumbing --------------------------------------------------

    /// Pixel video `[T × H × W × c]` in `[0, 1]` to tokens `[F × M × c_tok]`
    /// scaled to `[−1, 1]`.
    pub fn encode_video<T: Float>(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        let latent = self.cfg.codec().encode(video)?;
        let tokens = patchify(&latent, self.cfg.patch)?;
        Ok(tokens.map(|v| T::lit(2.0) * v - T::one()))
    }

    /// Inverse of [`Nova::encode_video`], clamped to `[0, 1]`.
    pub fn decode_tokens<T: Float>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let (gh, gw) = self.cfg.grid();
        let half = T::lit(0.5);
        let latent = unpatchify(&tokens.map(|v| (v + T::one()) * half), gh, gw, self.cfg.patch)?;
        let video = self.cfg.codec().decode(&latent, self.cfg.channels)?;
        Ok(video.map(|v| v.max(T::zero()).min(T::one())))
    }

    fn frame_tokens<T: Float>(tokens: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
        let [_, m, c] = *tokens.shape() else {
            return Err(shape_err!("tokens must be [F, M, c], got {:?}", tokens.shape()));
        };
        tokens.slice_rows(f, f + 1)?.into_reshape(&[m, c])
    }

    fn pos2d<T: Float>(&self) -> Result<Tensor<T>> {
        let (gh, gw) = self.cfg.grid();
        sincos_2d(gh, gw, self.cfg.d)
    }

    fn time_row<T: Float>(&self, g: &mut Graph<T>, t: usize) -> Result<Var> {
        let e = sincos_1d::<T>(t as f64, self.cfg.d)?;
        Ok(g.constant(e))
    }

    // ---- temporal stack -------------------------------------------------

    /// Prompt and motion tokens, `[2 × d]`.
    fn prefix<T: Float>(&self, g: &mut Graph<T>, prompt: usize, motion: f64) -> Result<Var> {
        let p = self.prompt.lookup(g, prompt)?;
        let m = if self.cfg.cfg_drop_motion && prompt == self.cfg.null_prompt() {
            g.constant(Tensor::zeros(&[1, self.cfg.d]))
        } else {
            self.motion.lookup(g, motion)?
        };
        g.concat(&[p, m])
    }

    fn bov_block<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        let b = self.bov.forward(g);
        let pos = g.constant(self.pos2d()?);
        let b = g.add(b, pos)?;
        let t = self.time_row(g, 0)?;
        g.add_row(b, t)
    }

    /// Embedded frame tokens `[M × d]` at frame-time `time`.
    fn frame_block<T: Float>(&self, g: &mut Graph<T>, tokens: &Tensor<T>, time: usize) -> Result<Var> {
        let x = g.constant(tokens.clone());
        let e = self.patch.forward(g, x)?;
        let pos = g.constant(self.pos2d()?);
        let e = g.add(e, pos)?;
        let t = self.time_row(g, time)?;
        g.add_row(e, t)
    }

    pub fn temporal_layout(&self, frames: usize) -> Result<BlockLayout> {
        BlockLayout::uniform(2, frames, self.cfg.tokens())
    }

    /// Temporal stack output over `[prompt, motion, BOV, S_1 ..]`, with the
    /// block layout of that sequence.
    pub fn temporal_sequence<T: Float>(
        &self,
        g: &mut Graph<T>,
        prompt: usize,
        motion: f64,
        frames: &[Tensor<T>],
    ) -> Result<(Var, BlockLayout)> {
        let m = self.cfg.tokens();
        let mut parts = vec![self.prefix(g, prompt, motion)?, self.bov_block(g)?];
        for (j, f) in frames.iter().enumerate() {
            if f.shape() != [m, self.cfg.token_dim()] {
                return Err(shape_err!("frame {} has shape {:?}", j + 1, f.shape()));
            }
            parts.push(self.frame_block(g, f, j + 1)?);
        }
        let x = g.concat(&parts)?;
        let layout = self.temporal_layout(frames.len() + 1)?;
        let mask = Arc::new(build_block_causal_mask(&layout));
        let out = self.temporal.forward(g, x, 1, Some(&mask))?;
        Ok((out, layout))
    }

    /// Temporal targets `h_1 .. h_F` (`F = frames.len() + 1`), each
    /// `[M × d]`: `h_f` is the output at the block preceding frame `f`.
    pub fn temporal_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        prompt: usize,
        motion: f64,
        frames: &[Tensor<T>],
    ) -> Result<Vec<Var>> {
        let m = self.cfg.tokens();
        let (out, layout) = self.temporal_sequence(g, prompt, motion, frames)?;
        (1..=frames.len() + 1)
            .map(|b| {
                let s = layout.block_start(b);
                g.slice_rows(out, s, s + m)
            })
            .collect()
    }

    /// Indicator features of 1-based frame `f`.
    pub fn indicator<T: Float>(&self, g: &mut Graph<T>, anchor: Var, h: Var, f: usize) -> Result<Var> {
        self.scale_shift.indicator(g, anchor, h, f)
    }

    // ---- spatial stacks -------------------------------------------------

    /// Conditions `z` for every row of `batch` sequences. `indicator` and
    /// `pos` are `[rows × d]`; `tokens` is `[rows × c]` and is only read
    /// where `visible` is set. Masked rows get the learned mask token
    /// before decoding.
    pub fn spatial_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        indicator: Var,
        pos: &Tensor<T>,
        tokens: &Tensor<T>,
        visible: &[bool],
        batch: usize,
    ) -> Result<Var> {
        let rows = visible.len();
        let d = self.cfg.d;
        if g.shape(indicator) != [rows, d] || pos.shape() != [rows, d] || tokens.shape() != [rows, self.cfg.token_dim()] {
            return Err(shape_err!(
                "spatial inputs: indicator {:?}, pos {:?}, tokens {:?} for {rows} rows",
                g.shape(indicator),
                pos.shape(),
                tokens.shape()
            ));
        }
        let one = |b: bool| if b { T::one() } else { T::zero() };
        let posv = g.constant(pos.clone());
        let mut x = g.add(indicator, posv)?;
        if visible.iter().any(|&v| v) {
            let tv = g.constant(tokens.clone());
            let emb = self.patch.forward(g, tv)?;
            let vis = g.constant(Tensor::from_fn(&[rows, d], |i| one(visible[i / d])));
            let emb = g.mul(emb, vis)?;
            x = g.add(x, emb)?;
        }
        let enc = self.encoder.forward(g, x, batch, None)?;
        let enc = self.enc_norm.forward(g, enc)?;
        let mut y = g.add(enc, posv)?;
        if visible.iter().any(|&v| !v) {
            let col = g.constant(Tensor::from_fn(&[rows, 1], |i| one(!visible[i])));
            let mt = g.p(self.mask_token);
            let mt = g.matmul(col, mt)?;
            y = g.add(y, mt)?;
        }
        let dec = self.decoder.forward(g, y, batch, None)?;
        self.dec_norm.forward(g, dec)
    }

    fn tiled_pos<T: Float>(&self, frames: usize, with_time: bool) -> Result<Tensor<T>> {
        let p = self.pos2d::<T>()?;
        let mut parts = Vec::with_capacity(frames);
        for f in 0..frames {
            let mut pf = p.clone();
            if with_time {
                let t = sincos_1d::<T>(f as f64, self.cfg.d)?;
                for r in 0..pf.rows() {
                    pf.row_mut(r).iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
                }
            }
            parts.push(pf);
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    // ---- training -------------------------------------------------------

    /// Diffusion loss of one clip of tokens `[F × M × c]` (teacher-forced),
    /// averaged over every masked token of every frame.
    pub fn video_loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        tokens: &Tensor<T>,
        prompt: usize,
        motion: f64,
        rng: &mut Rng,
    ) -> Result<Var> {
        let [f, m, c] = *tokens.shape() else {
            return Err(shape_err!("tokens must be [F, M, c], got {:?}", tokens.shape()));
        };
        if m != self.cfg.tokens() || c != self.cfg.token_dim() || f == 0 {
            return Err(shape_err!("clip {:?} does not match the model", tokens.shape()));
        }
        let prompt = if rng.random::<f64>() < self.cfg.prompt_dropout {
            self.cfg.null_prompt()
        } else {
            prompt
        };
        let flat = tokens.reshape(&[f * m, c])?;
        let (indicator, pos, visible, batch) = match self.cfg.temporal_mode {
            TemporalMode::Causal => {
                let frames: Vec<Tensor<T>> = (0..f - 1).map(|j| Self::frame_tokens(tokens, j)).collect::<Result<_>>()?;
                let hs = self.temporal_forward(g, prompt, motion, &frames)?;
                let ind: Vec<Var> = (0..f)
                    .map(|j| self.indicator(g, hs[0], hs[j], j + 1))
                    .collect::<Result<_>>()?;
                let ind = g.concat(&ind)?;
                let mut visible = vec![true; f * m];
                for j in 0..f {
                    for i in sample_train_mask(m, rng) {
                        visible[j * m + i] = false;
                    }
                }
                (ind, self.tiled_pos(f, false)?, visible, f)
            }
            TemporalMode::Joint => {
                let hs = self.temporal_forward(g, prompt, motion, &[])?;
                let n = normalize(g, hs[0])?;
                let ind = g.concat(&vec![n; f])?;
                let mut visible = vec![true; f * m];
                for i in sample_train_mask(f * m, rng) {
                    visible[i] = false;
                }
                (ind, self.tiled_pos(f, true)?, visible, 1)
            }
        };
        let z = self.spatial_forward(g, indicator, &pos, &flat, &visible, batch)?;
        let masked: Vec<usize> = (0..f * m).filter(|&i| !visible[i]).collect();
        let zm = g.gather_rows(z, &masked)?;
        let x0 = flat.gather_rows(&masked)?;
        diffusion_loss(g, &self.head, &x0, zm, &self.schedule, LOSS_DRAWS, rng)
    }

    // ---- generation -----------------------------------------------------

    fn sampler(&self, opts: &GenOptions) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            schedule: self.schedule.respace(opts.infer_steps)?,
            cfg_scale: opts.cfg_scale,
            clip: self.cfg.x0_clip,
        })
    }

    /// Temporal targets for conditional and (when guided) null prompts.
    fn open_sessions<T: Float>(&self, store: &ParamStore<T>, opts: &GenOptions) -> Result<Vec<TemporalSession<T>>> {
        let mut prompts = vec![opts.prompt];
        if opts.cfg_scale != 1.0 {
            prompts.push(self.cfg.null_prompt());
        }
        prompts
            .into_iter()
            .map(|p| TemporalSession::open(self, store, p, opts.motion, opts.use_cache))
            .collect()
    }

    /// Decodes one frame set by set from its indicator features (`[M × d]`
    /// per session: conditional first, then null).
    pub fn generate_frame<T: Float>(
        &self,
        store: &ParamStore<T>,
        indicators: &[Tensor<T>],
        ar_steps: usize,
        sampler: &SamplerConfig,
        rng: &mut Rng,
    ) -> Result<Tensor<T>> {
        let m = self.cfg.tokens();
        let pos = self.tiled_pos::<T>(1, false)?;
        self.decode_sets(store, indicators, &pos, 1, ar_steps.min(m), sampler, rng)
    }

    /// Set-by-set decoding of `rows = frames·M` tokens in one sequence per
    /// indicator set.
    #[allow(clippy::too_many_arguments)]
    fn decode_sets<T: Float>(
        &self,
        store: &ParamStore<T>,
        indicators: &[Tensor<T>],
        pos: &Tensor<T>,
        frames: usize,
        steps: usize,
        sampler: &SamplerConfig,
        rng: &mut Rng,
    ) -> Result<Tensor<T>> {
        let rows = frames * self.cfg.tokens();
        let c = self.cfg.token_dim();
        let plan = MaskPlan::new(rows, steps, rng)?;
        let mut tokens = Tensor::<T>::zeros(&[rows, c]);
        let mut visible = vec![false; rows];
        let nb = indicators.len();
        let ind_all = Tensor::concat_rows(&indicators.iter().collect::<Vec<_>>())?;
        let pos_all = Tensor::concat_rows(&vec![pos; nb])?;
        for set in plan.sets() {
            let mut g = Graph::inference(store);
            let ind = g.constant(ind_all.clone());
            let tok = Tensor::concat_rows(&vec![&tokens; nb])?;
            let vis: Vec<bool> = visible.iter().copied().cycle().take(nb * rows).collect();
            let z = self.spatial_forward(&mut g, ind, &pos_all, &tok, &vis, nb)?;
            let zt = g.value(z);
            let zc = zt.gather_rows(set)?;
            let zn = if nb > 1 {
                let idx: Vec<usize> = set.iter().map(|&i| rows + i).collect();
                Some(zt.gather_rows(&idx)?)
            } else {
                None
            };
            let new = sample_tokens(&self.head, store, &zc, zn.as_ref(), sampler, rng)?;
            for (k, &i) in set.iter().enumerate() {
                tokens.row_mut(i).copy_from_slice(new.row(k));
                visible[i] = true;
            }
        }
        Ok(tokens)
    }

    /// Text-to-video generation of `opts.frames` frames.
    pub fn generate_video<T: Float>(&self, store: &ParamStore<T>, opts: &GenOptions) -> Result<Generated<T>> {
        self.continue_video(store, &[], opts)
    }

    /// Generates `opts.frames` frames following the given context frames
    /// (each `[M × c]`), which count towards `opts.frames`.
    pub fn continue_video<T: Float>(
        &self,
        store: &ParamStore<T>,
        context: &[Tensor<T>],
        opts: &GenOptions,
    ) -> Result<Generated<T>> {
        if opts.frames == 0 || context.len() > opts.frames {
            return Err(contract_err!("{} frames requested after {} context frames", opts.frames, context.len()));
        }
        match opts.mode {
            TemporalMode::Causal => self.generate_causal(store, context, opts),
            TemporalMode::Joint if context.is_empty() => self.generate_joint(store, opts),
            TemporalMode::Joint => Err(contract_err!("joint mode cannot continue from context frames")),
        }
    }

    fn generate_causal<T: Float>(
        &self,
        store: &ParamStore<T>,
        context: &[Tensor<T>],
        opts: &GenOptions,
    ) -> Result<Generated<T>> {
        let (m, c) = (self.cfg.tokens(), self.cfg.token_dim());
        let sampler = self.sampler(opts)?;
        let mut rng = rng::seeded(opts.seed);
        let mut timings = Timings::default();

        let t0 = Instant::now();
        let mut sessions = self.open_sessions(store, opts)?;
        for frame in context {
            for s in &mut sessions {
                s.push_frame(self, store, frame)?;
            }
        }
        timings.temporal += t0.elapsed();

        let mut out: Vec<Tensor<T>> = context.to_vec();
        for f in context.len() + 1..=opts.frames {
            let t0 = Instant::now();
            let ind: Vec<Tensor<T>> = sessions
                .iter_mut()
                .map(|s| s.indicator(self, store, f))
                .collect::<Result<_>>()?;
            timings.temporal += t0.elapsed();

            let t0 = Instant::now();
            let frame = self.generate_frame(store, &ind, opts.ar_steps, &sampler, &mut rng)?;
            timings.spatial += t0.elapsed();

            if f < opts.frames {
                let t0 = Instant::now();
                for s in &mut sessions {
                    s.push_frame(self, store, &frame)?;
                }
                timings.temporal += t0.elapsed();
            }
            out.push(frame);
        }
        let tokens = Tensor::concat_rows(&out.iter().collect::<Vec<_>>())?.into_reshape(&[opts.frames, m, c])?;
        Ok(Generated { tokens, timings })
    }

    /// All frames decoded jointly: `K·F` set steps over `F·M` tokens, with
    /// the temporal stack only run over the conditioning prefix.
    fn generate_joint<T: Float>(&self, store: &ParamStore<T>, opts: &GenOptions) -> Result<Generated<T>> {
        let (m, c, f) = (self.cfg.tokens(), self.cfg.token_dim(), opts.frames);
        let sampler = self.sampler(opts)?;
        let mut rng = rng::seeded(opts.seed);
        let mut timings = Timings::default();

        let t0 = Instant::now();
        let sessions = self.open_sessions(store, &GenOptions { use_cache: false, ..opts.clone() })?;
        let ind: Vec<Tensor<T>> = sessions
            .iter()
            .map(|s| {
                let n = normalize_tensor_rows(&s.anchor)?;
                Tensor::concat_rows(&vec![&n; f])
            })
            .collect::<Result<_>>()?;
        timings.temporal += t0.elapsed();

        let t0 = Instant::now();
        let pos = self.tiled_pos::<T>(f, true)?;
        let steps = (opts.ar_steps.min(m) * f).min(f * m);
        let tokens = self.decode_sets(store, &ind, &pos, f, steps, &sampler, &mut rng)?;
        timings.spatial += t0.elapsed();
        Ok(Generated {
            tokens: tokens.into_reshape(&[f, m, c])?,
            timings,
        })
    }

    /// Extends a clip by `extra` frames. Each new frame sees the conditioning
    /// prefix, BOV and at most `F − 1` most recent frames, re-indexed from
    /// frame-time 1.
    pub fn extrapolate<T: Float>(
        &self,
        store: &ParamStore<T>,
        seed_tokens: &Tensor<T>,
        extra: usize,
        opts: &GenOptions,
    ) -> Result<Generated<T>> {
        let [n, m, c] = *seed_tokens.shape() else {
            return Err(shape_err!("seed tokens must be [F, M, c], got {:?}", seed_tokens.shape()));
        };
        if n == 0 {
            return Err(contract_err!("extrapolation needs at least one seed frame"));
        }
        let window = self.cfg.frames.max(1) - 1;
        let mut frames: Vec<Tensor<T>> = (0..n).map(|j| Self::frame_tokens(seed_tokens, j)).collect::<Result<_>>()?;
        let mut timings = Timings::default();
        for step in 0..extra {
            let ctx = &frames[frames.len() - window.min(frames.len())..];
            let o = GenOptions {
                frames: ctx.len() + 1,
                seed: opts.seed.wrapping_add(step as u64),
                mode: TemporalMode::Causal,
                ..opts.clone()
            };
            let g = self.continue_video(store, ctx, &o)?;
            timings.temporal += g.timings.temporal;
            timings.spatial += g.timings.spatial;
            frames.push(Self::frame_tokens(&g.tokens, ctx.len())?);
        }
        let tokens = Tensor::concat_rows(&frames.iter().collect::<Vec<_>>())?.into_reshape(&[n + extra, m, c])?;
        Ok(Generated { tokens, timings })
    }
}

fn normalize_tensor_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    crate::scale_shift::normalize_tensor(x)
}

/// Temporal state of one generation pass for one prompt: either a key/value
/// cache fed block by block, or the list of frames re-run in full.
pub struct TemporalSession<T> {
    prompt: usize,
    motion: f64,
    cache: Option<KvCache<T>>,
    frames: Vec<Tensor<T>>,
    /// Output at the BOV block.
    pub anchor: Tensor<T>,
    /// Temporal target for the next frame.
    pending: Tensor<T>,
}

impl<T: Float> TemporalSession<T> {
    pub fn open(model: &Nova, store: &ParamStore<T>, prompt: usize, motion: f64, use_cache: bool) -> Result<Self> {
        let mut g = Graph::inference(store);
        let (anchor, cache) = if use_cache {
            let mut cache = KvCache::new(model.temporal.depth(), model.cfg.d);
            let p = model.prefix(&mut g, prompt, motion)?;
            model.temporal.forward_cached(&mut g, p, &mut cache)?;
            let b = model.bov_block(&mut g)?;
            let h = model.temporal.forward_cached(&mut g, b, &mut cache)?;
            (g.value(h).clone(), Some(cache))
        } else {
            let hs = model.temporal_forward(&mut g, prompt, motion, &[])?;
            (g.value(hs[0]).clone(), None)
        };
        Ok(Self {
            prompt,
            motion,
            cache,
            frames: Vec::new(),
            pending: anchor.clone(),
            anchor,
        })
    }

    /// Appends frame `S_f` and computes the target for frame `f + 1`.
    pub fn push_frame(&mut self, model: &Nova, store: &ParamStore<T>, frame: &Tensor<T>) -> Result<()> {
        let mut g = Graph::inference(store);
        self.frames.push(frame.clone());
        self.pending = match &mut self.cache {
            Some(cache) => {
                let x = model.frame_block(&mut g, frame, self.frames.len())?;
                let h = model.temporal.forward_cached(&mut g, x, cache)?;
                g.value(h).clone()
            }
            None => {
                let hs = model.temporal_forward(&mut g, self.prompt, self.motion, &self.frames)?;
                g.value(*hs.last().unwrap()).clone()
            }
        };
        Ok(())
    }

    /// Indicator features for 1-based frame `f` from the pending target.
    pub fn indicator(&self, model: &Nova, store: &ParamStore<T>, f: usize) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let a = g.constant(self.anchor.clone());
        let h = g.constant(self.pending.clone());
        let s = model.indicator(&mut g, a, h, f)?;
        Ok(g.value(s).clone())
    }

    pub fn pending(&self) -> &Tensor<T> {
        &self.pending
    }
}

/// Parameters of `store` that received no gradient or an all-zero one.
pub fn silent_params<T: Float>(store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Vec<String> {
    store
        .ids()
        .filter(|id| match &grads[id.index()] {
            Some(g) => g.data().iter().all(|&v| v == T::zero()),
            None => true,
        })
        .map(|id| store.name(id).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rel_err, FD_STEP};

    pub(crate) fn tiny_config() -> NovaConfig {
        NovaConfig {
            height: 8,
            width: 8,
            channels: 1,
            stride_t: 1,
            stride_s: 4,
            patch: 1,
            frames: 3,
            d: 16,
            heads: 2,
            temporal_depth: 1,
            spatial_enc_depth: 1,
            spatial_dec_depth: 1,
            scale_shift_rank: 4,
            head_width: 8,
            head_blocks: 1,
            train_t: 50,
            infer_steps: 5,
            ar_steps: 2,
            cfg_scale: 3.0,
            prompt_vocab: 5,
            ..NovaConfig::default()
        }
    }

    #[test]
    fn default_config_dimensions() {
        let c = NovaConfig::default();
        c.validate().unwrap();
        assert_eq!((c.grid(), c.tokens(), c.token_dim(), c.pixel_frames()), ((8, 8), 64, 96, 10));
        assert_eq!(c.null_prompt(), NULL_PROMPT);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"train_T\":1000"));
        assert_eq!(serde_json::from_str::<NovaConfig>(&json).unwrap(), c);
        assert!(serde_json::from_str::<NovaConfig>(r#"{"depth": 3}"#).is_err());
        let partial: NovaConfig = serde_json::from_str(r#"{"d": 64, "norm_placement": "PreNorm"}"#).unwrap();
        assert_eq!((partial.d, partial.norm_placement), (64, NormPlacement::PreNorm));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            NovaConfig { height: 30, ..NovaConfig::default() },
            NovaConfig { d: 100, ..NovaConfig::default() },
            NovaConfig { scale_shift_rank: 129, ..NovaConfig::default() },
            NovaConfig { infer_steps: 2000, ..NovaConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(NovaError::Config(_))));
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let (model, _) = Nova::new::<f32>(NovaConfig::default()).unwrap();
        let v = Tensor::<f32>::uniform(&[10, 32, 32, 3], 0.0, 1.0, &mut rng::seeded(0));
        let t = model.encode_video(&v).unwrap();
        assert_eq!(t.shape(), &[5, 64, 96]);
        assert!(t.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(model.decode_tokens(&t).unwrap().max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn temporal_targets_have_frame_shape() {
        let (model, store) = Nova::new::<f64>(tiny_config()).unwrap();
        let mut g = Graph::inference(&store);
        let frames: Vec<Tensor<f64>> = (0..2).map(|s| Tensor::randn(&[4, 16], 1.0, &mut rng::seeded(s))).collect();
        let hs = model.temporal_forward(&mut g, 1, 0.5, &frames).unwrap();
        assert_eq!(hs.len(), 3);
        for h in hs {
            assert_eq!(g.value(h).shape(), &[4, 16]);
        }
    }

    #[test]
    fn loss_is_finite_and_positive_in_both_modes() {
        for mode in [TemporalMode::Causal, TemporalMode::Joint] {
            let (model, store) = Nova::new::<f32>(NovaConfig { temporal_mode: mode, ..tiny_config() }).unwrap();
            let tokens = Tensor::uniform(&[3, 4, 16], -1.0, 1.0, &mut rng::seeded(1));
            let mut g = Graph::train(&store);
            let l = model.video_loss(&mut g, &tokens, 2, 1.0, &mut rng::seeded(2)).unwrap();
            let v = g.value(l).item();
            assert!(v.is_finite() && v > 0.0, "{mode:?}: {v}");
        }
    }

    #[test]
    fn spatial_output_count_and_empty_mask() {
        let (model, store) = Nova::new::<f32>(tiny_config()).unwrap();
        let mut g = Graph::inference(&store);
        let ind = g.constant(Tensor::randn(&[4, 16], 1.0, &mut rng::seeded(0)));
        let pos = model.tiled_pos::<f32>(1, false).unwrap();
        let tokens = Tensor::randn(&[4, 16], 1.0, &mut rng::seeded(1));
        let z = model.spatial_forward(&mut g, ind, &pos, &tokens, &[true, false, true, false], 1).unwrap();
        assert_eq!(g.value(z).shape(), &[4, 16]);
        assert!(model.spatial_forward(&mut g, ind, &pos, &tokens, &[true; 3], 1).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let (model, store) = Nova::new::<f32>(tiny_config()).unwrap();
        let opts = GenOptions::from_config(&model.cfg, 1, 0.5, 7);
        let a = model.generate_video(&store, &opts).unwrap();
        let b = model.generate_video(&store, &opts).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.shape(), &[3, 4, 16]);
        let j = model
            .generate_video(&store, &GenOptions { mode: TemporalMode::Joint, ..opts.clone() })
            .unwrap();
        assert_eq!(j.tokens.shape(), &[3, 4, 16]);
        assert!(j.tokens.all_finite());
    }

    #[test]
    fn extrapolate_lengths() {
        let (model, store) = Nova::new::<f32>(tiny_config()).unwrap();
        let opts = GenOptions::from_config(&model.cfg, 1, 0.5, 3);
        let seed = Tensor::randn(&[2, 4, 16], 0.5, &mut rng::seeded(0));
        assert_eq!(model.extrapolate(&store, &seed, 0, &opts).unwrap().tokens, seed);
        let e = model.extrapolate(&store, &seed, 3, &opts).unwrap();
        assert_eq!(e.tokens.shape(), &[5, 4, 16]);
        assert_eq!(e.tokens.slice_rows(0, 2).unwrap(), seed);
    }

    /// Gives every parameter a small random value so no path is zeroed out.
    fn jitter<T: Float>(store: &mut ParamStore<T>, seed: u64) {
        let mut r = rng::seeded(seed);
        for t in store.tensors_mut() {
            let n = Tensor::<T>::randn(t.shape(), 0.1, &mut r);
            t.data_mut().iter_mut().zip(n.data()).for_each(|(a, &b)| *a += b);
        }
    }

    #[test]
    fn temporal_targets_are_block_causal() {
        let (model, mut store) = Nova::new::<f64>(tiny_config()).unwrap();
        jitter(&mut store, 3);
        let mut r = rng::seeded(4);
        let frames: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[4, 16], 1.0, &mut r)).collect();
        let run = |frames: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            let mut g = Graph::inference(&store);
            let hs = model.temporal_forward(&mut g, 1, 1.5, frames).unwrap();
            hs.iter().map(|&h| g.value(h).clone()).collect()
        };
        let base = run(&frames);
        for j in 0..4 {
            let mut p = frames.clone();
            p[j].data_mut()[5] += 1.0;
            let out = run(&p);
            // h_f sees frames S_1 .. S_{f-1}; frame index j is S_{j+1}
            for f in 0..=j {
                assert_eq!(out[f], base[f], "target {} moved when S_{} changed", f + 1, j + 1);
            }
            for f in j + 1..5 {
                assert!(out[f].max_abs_diff(&base[f]).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn cached_session_matches_full_recompute() {
        for (cfg, seeds) in [
            (tiny_config(), [0u64, 1, 2]),
            (NovaConfig { height: 16, width: 16, d: 32, heads: 4, temporal_depth: 2, ..tiny_config() }, [3, 4, 5]),
        ] {
            for seed in seeds {
                let (model, mut store) = Nova::new::<f32>(NovaConfig { seed, ..cfg.clone() }).unwrap();
                jitter(&mut store, seed);
                let (m, c) = (model.cfg.tokens(), model.cfg.token_dim());
                let mut cached = TemporalSession::open(&model, &store, 2, 0.7, true).unwrap();
                let mut full = TemporalSession::open(&model, &store, 2, 0.7, false).unwrap();
                assert!(cached.anchor.max_abs_diff(&full.anchor).unwrap() < 1e-4);
                let mut r = rng::seeded(seed + 10);
                for f in 1..=4 {
                    let frame = Tensor::uniform(&[m, c], -1.0, 1.0, &mut r);
                    cached.push_frame(&model, &store, &frame).unwrap();
                    full.push_frame(&model, &store, &frame).unwrap();
                    let diff = cached.pending().max_abs_diff(full.pending()).unwrap();
                    assert!(diff < 1e-4, "seed {seed} frame {f}: {diff}");
                    let a = cached.indicator(&model, &store, f + 1).unwrap();
                    let b = full.indicator(&model, &store, f + 1).unwrap();
                    assert!(a.max_abs_diff(&b).unwrap() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn cached_and_uncached_generation_agree() {
        let (model, mut store) = Nova::new::<f64>(tiny_config()).unwrap();
        jitter(&mut store, 9);
        let opts = GenOptions::from_config(&model.cfg, 1, 0.5, 11);
        let a = model.generate_video(&store, &opts).unwrap();
        let b = model.generate_video(&store, &GenOptions { use_cache: false, ..opts }).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() < 1e-6);
    }

    #[test]
    fn single_frame_clips() {
        let (model, store) = Nova::new::<f32>(NovaConfig { frames: 1, ..tiny_config() }).unwrap();
        let tokens = Tensor::uniform(&[1, 4, 16], -1.0, 1.0, &mut rng::seeded(0));
        let mut g = Graph::train(&store);
        let l = model.video_loss(&mut g, &tokens, 0, 1.0, &mut rng::seeded(1)).unwrap();
        assert!(g.value(l).item().is_finite());
        let out = model.generate_video(&store, &GenOptions::from_config(&model.cfg, 0, 1.0, 0)).unwrap();
        assert_eq!(out.tokens.shape(), &[1, 4, 16]);
    }

    #[test]
    fn context_frames_are_kept_verbatim() {
        let (model, store) = Nova::new::<f32>(tiny_config()).unwrap();
        let ctx = vec![Tensor::uniform(&[4, 16], -1.0, 1.0, &mut rng::seeded(0))];
        let out = model.continue_video(&store, &ctx, &GenOptions::from_config(&model.cfg, 0, 1.0, 0)).unwrap();
        assert_eq!(Nova::frame_tokens(&out.tokens, 0).unwrap(), ctx[0]);
        let joint = GenOptions { mode: TemporalMode::Joint, ..GenOptions::from_config(&model.cfg, 0, 1.0, 0) };
        assert!(model.continue_video(&store, &ctx, &joint).is_err());
    }

    /// Central differences of the whole composed loss, with masks, timesteps
    /// and noise fixed by reseeding, on a sample of entries per parameter.
    #[test]
    fn composed_loss_matches_finite_differences() {
        for mode in [TemporalMode::Causal, TemporalMode::Joint] {
            let (model, mut store) =
                Nova::new::<f64>(NovaConfig { temporal_mode: mode, prompt_dropout: 0.0, ..tiny_config() }).unwrap();
            jitter(&mut store, 21);
            let tokens = Tensor::uniform(&[3, 4, 16], -1.0, 1.0, &mut rng::seeded(22));
            let eval = |store: &ParamStore<f64>| -> f64 {
                let mut g = Graph::inference(store);
                let l = model.video_loss(&mut g, &tokens, 3, 0.9, &mut rng::seeded(23)).unwrap();
                g.value(l).item()
            };
            let mut g = Graph::train(&store);
            let l = model.video_loss(&mut g, &tokens, 3, 0.9, &mut rng::seeded(23)).unwrap();
            g.backward(l).unwrap();
            let grads = g.param_grads();
            let mut pick = rng::seeded(24);
            for id in store.ids() {
                let n = store.get(id).numel();
                let idx: Vec<usize> = (0..n.min(6)).map(|_| pick.random_range(0..n)).collect();
                let analytic: Vec<f64> = match &grads[id.index()] {
                    Some(gr) => idx.iter().map(|&i| gr.data()[i]).collect(),
                    None => vec![0.0; idx.len()],
                };
                let numeric: Vec<f64> = idx
                    .iter()
                    .map(|&i| {
                        let mut sp = store.clone();
                        sp.get_mut(id).data_mut()[i] += FD_STEP;
                        let up = eval(&sp);
                        sp.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
                        (up - eval(&sp)) / (2.0 * FD_STEP)
                    })
                    .collect();
                let err = rel_err(&analytic, &numeric);
                let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err < 1e-4 || scale < 1e-9, "{mode:?} {}: {err}", store.name(id));
            }
        }
    }
}
