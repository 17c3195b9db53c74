//! Positional and conditioning embeddings.
//!
//! Sine-cosine tables use a sin-half / cos-half layout: the first `d/2`
//! entries hold `sin(pos / 10000^(2i/d))`, the last `d/2` the matching cosines.

use crate::error::{contract_err, shape_err};
use crate::nn::{Init, Linear};
use crate::tensor::rng::Rng;
use crate::{Float, Graph, ParamId, ParamStore, Result, Tensor, Var};

const MAX_PERIOD: f64 = 10000.0;

/// 1-D sine-cosine embedding of a (possibly fractional) position.
pub fn sincos_1d<T: Float>(pos: f64, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(contract_err!("sincos_1d needs an even width, got {d}"));
    }
    let half = d / 2;
    let mut out = vec![T::zero(); d];
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(2.0 * i as f64) / d as f64);
        let a = pos * freq;
        out[i] = T::lit(a.sin());
        out[half + i] = T::lit(a.cos());
    }
    Tensor::new(&[d], out)
}

/// Table of 1-D embeddings for positions `0..n`, shape `[n × d]`.
pub fn sincos_table<T: Float>(n: usize, d: usize) -> Result<Tensor<T>> {
    let rows: Vec<Tensor<T>> = (0..n)
        .map(|p| sincos_1d::<T>(p as f64, d))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * d);
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(&[n, d], data)
}

/// 2-D embedding of an `h × w` grid in raster order, shape `[h·w × d]`:
/// row index in the first `d/2` channels, column index in the last `d/2`.
pub fn sincos_2d<T: Float>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(contract_err!("sincos_2d needs a width divisible by 4, got {d}"));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        let er = sincos_1d::<T>(r as f64, half)?;
        for c in 0..w {
            let ec = sincos_1d::<T>(c as f64, half)?;
            data.extend_from_slice(er.data());
            data.extend_from_slice(ec.data());
        }
    }
    Tensor::new(&[h * w, d], data)
}

/// Splits every latent frame `[T × H × W × c]` into non-overlapping `s × s`
/// patches, giving `[T × (H/s)(W/s) × s·s·c]`. Patch vectors are laid out
/// as (row-in-patch, column-in-patch, channel).
pub fn patchify<T: Float>(latent: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [t, h, w, c] = latent.shape() else {
        return Err(shape_err!("patchify expects [T, H, W, c], got {:?}", latent.shape()));
    };
    let (t, h, w, c) = (*t, *h, *w, *c);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err!("spatial size {h}×{w} not divisible by patch stride {s}"));
    }
    let (gh, gw) = (h / s, w / s);
    let pd = s * s * c;
    let src = latent.data();
    let mut out = vec![T::zero(); latent.numel()];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / s) * gw + x / s;
                let within = ((y % s) * s + x % s) * c;
                let dst = (f * gh * gw + tok) * pd + within;
                let s0 = ((f * h + y) * w + x) * c;
                out[dst..dst + c].copy_from_slice(&src[s0..s0 + c]);
            }
        }
    }
    Tensor::new(&[t, gh * gw, pd], out)
}

/// Inverse of [`patchify`] for a `gh × gw` token grid.
pub fn unpatchify<T: Float>(tokens: &Tensor<T>, gh: usize, gw: usize, s: usize) -> Result<Tensor<T>> {
    let [t, m, pd] = tokens.shape() else {
        return Err(shape_err!("unpatchify expects [T, M, p], got {:?}", tokens.shape()));
    };
    let (t, m, pd) = (*t, *m, *pd);
    if m != gh * gw || s == 0 || pd % (s * s) != 0 {
        return Err(shape_err!("{m} tokens of width {pd} do not tile {gh}×{gw} with stride {s}"));
    }
    let c = pd / (s * s);
    let (h, w) = (gh * s, gw * s);
    let src = tokens.data();
    let mut out = vec![T::zero(); tokens.numel()];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / s) * gw + x / s;
                let within = ((y % s) * s + x % s) * c;
                let s0 = (f * m + tok) * pd + within;
                let dst = ((f * h + y) * w + x) * c;
                out[dst..dst + c].copy_from_slice(&src[s0..s0 + c]);
            }
        }
    }
    Tensor::new(&[t, h, w, c], out)
}

/// Learnable projection of flattened latent patches to the model width.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_channels: usize,
        stride: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, name, latent_channels * stride * stride, d, Init::Xavier, rng),
            stride,
        }
    }

    /// Projects already-patchified tokens `[.. × s·s·c]` to `[.. × d]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        self.proj.forward(g, patches)
    }

    /// `[T × H × W × c]` latent to `[T × M × d]` tokens.
    pub fn embed_latent<T: Float>(&self, g: &mut Graph<T>, latent: &Tensor<T>) -> Result<Var> {
        let patches = g.constant(patchify(latent, self.stride)?);
        self.forward(g, patches)
    }
}

/// Learnable begin-of-video tokens, one per spatial patch of a frame.
#[derive(Debug, Clone)]
pub struct BovEmbeddings {
    pub table: ParamId,
    pub tokens: usize,
}

impl BovEmbeddings {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, tokens: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            table: store.add(name, Init::Normal(0.02).tensor(&[tokens, d], rng)),
            tokens,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>) -> Var {
        g.p(self.table)
    }
}

/// Embedding table over prompt ids; `null_id` is the unconditional prompt.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub table: ParamId,
    pub vocab: usize,
    pub null_id: usize,
}

impl PromptEmbedding {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        null_id: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(null_id < vocab, "null prompt id {null_id} outside vocabulary {vocab}");
        Self {
            table: store.add(name, Init::Normal(0.02).tensor(&[vocab, d], rng)),
            vocab,
            null_id,
        }
    }

    /// `[1 × d]` embedding of one prompt id.
    pub fn lookup<T: Float>(&self, g: &mut Graph<T>, id: usize) -> Result<Var> {
        if id >= self.vocab {
            return Err(contract_err!("prompt id {id} outside vocabulary of {}", self.vocab));
        }
        let t = g.p(self.table);
        g.gather_rows(t, &[id])
    }
}

/// Bucket of a nonnegative motion score: `clamp(floor(value / width), 0, q − 1)`.
pub fn motion_bucket(value: f64, q: usize, width: f64) -> Result<usize> {
    if !(value >= 0.0) {
        return Err(contract_err!("motion score must be nonnegative, got {value}"));
    }
    if q == 0 || !(width > 0.0) {
        return Err(contract_err!("motion buckets need q ≥ 1 and width > 0"));
    }
    let b = (value / width).floor();
    Ok(if b >= (q - 1) as f64 { q - 1 } else { b as usize })
}

/// Embedding table over quantized motion scores.
#[derive(Debug, Clone)]
pub struct MotionEmbedding {
    pub table: ParamId,
    pub buckets: usize,
    pub width: f64,
}

impl MotionEmbedding {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        buckets: usize,
        width: f64,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            table: store.add(name, Init::Normal(0.02).tensor(&[buckets, d], rng)),
            buckets,
            width,
        }
    }

    /// `[1 × d]` embedding of a motion score.
    pub fn lookup<T: Float>(&self, g: &mut Graph<T>, score: f64) -> Result<Var> {
        let b = motion_bucket(score, self.buckets, self.width)?;
        let t = g.p(self.table);
        g.gather_rows(t, &[b])
    }
}
