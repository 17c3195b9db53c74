//! Transformer blocks with selectable normalization placement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{KvCache, MultiHeadAttention};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::rng::Rng;
use crate::{Float, Graph, Mask, ParamStore, Result, Var};

/// Where the two per-sublayer normalizations sit relative to the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormPlacement {
    /// `x + f(norm(x))`
    PreNorm,
    /// `norm(x + f(x))`
    PostNormAfterRes,
    /// `x + norm(f(x))`
    #[default]
    PostNormBeforeRes,
}

impl NormPlacement {
    pub const ALL: [NormPlacement; 3] = [
        NormPlacement::PreNorm,
        NormPlacement::PostNormAfterRes,
        NormPlacement::PostNormBeforeRes,
    ];
}

const FF_EXPANSION: usize = 4;

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d * FF_EXPANSION, Init::Xavier, rng),
            down: Linear::new(store, &format!("{name}.down"), d * FF_EXPANSION, d, Init::Xavier, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
    pub placement: NormPlacement,
}

/// How the attention sublayer sees the sequence.
pub enum AttnMode<'a, T> {
    /// `batch` independent sequences of equal length with an optional shared mask.
    Full {
        batch: usize,
        mask: Option<&'a Arc<Mask>>,
    },
    /// One new block against a key/value cache.
    Cached { cache: &'a mut KvCache<T>, layer: usize },
}

impl TransformerBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        placement: NormPlacement,
        rng: &mut Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm1"), d),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm2"), d),
            placement,
        }
    }

    fn sublayer<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        norm: &LayerNorm,
        f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        match self.placement {
            NormPlacement::PreNorm => {
                let n = norm.forward(g, x)?;
                let y = f(g, n)?;
                g.add(x, y)
            }
            NormPlacement::PostNormAfterRes => {
                let y = f(g, x)?;
                let s = g.add(x, y)?;
                norm.forward(g, s)
            }
            NormPlacement::PostNormBeforeRes => {
                let y = f(g, x)?;
                let n = norm.forward(g, y)?;
                g.add(x, n)
            }
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var, mode: AttnMode<'_, T>) -> Result<Var> {
        let h = self.sublayer(g, x, &self.norm_attn, |g, x| match mode {
            AttnMode::Full { batch, mask } => self.attn.forward(g, x, batch, mask),
            AttnMode::Cached { cache, layer } => self.attn.forward_cached(g, x, cache, layer),
        })?;
        self.sublayer(g, h, &self.norm_ff, |g, x| self.ff.forward(g, x))
    }
}

/// A sequence of transformer blocks applied in order.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<TransformerBlock>,
}

impl Stack {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        placement: NormPlacement,
        rng: &mut Rng,
    ) -> Self {
        assert!(depth >= 1, "a stack needs at least one block");
        Self {
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), d, heads, placement, rng))
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        batch: usize,
        mask: Option<&Arc<Mask>>,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, AttnMode::Full { batch, mask })?;
        }
        Ok(x)
    }

    /// `max |h|` of the input and of every block output, for one sequence
    /// without masking.
    pub fn activation_profile<T: Float>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Vec<f64>> {
        let mut profile = vec![g.value(x).max_abs().to_f64().unwrap_or(f64::NAN)];
        for b in &self.blocks {
            x = b.forward(g, x, AttnMode::Full { batch: 1, mask: None })?;
            profile.push(g.value(x).max_abs().to_f64().unwrap_or(f64::NAN));
        }
        Ok(profile)
    }

    /// Runs one new block through every layer, appending to `cache`.
    pub fn forward_cached<T: Float>(&self, g: &mut Graph<T>, mut x: Var, cache: &mut KvCache<T>) -> Result<Var> {
        let n = g.shape(x)[0];
        for (layer, b) in self.blocks.iter().enumerate() {
            x = b.forward(g, x, AttnMode::Cached { cache: &mut *cache, layer })?;
        }
        cache.commit(n)?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;
    use crate::Tensor;

    fn zero_sublayers(store: &mut ParamStore<f64>, blk: &TransformerBlock) {
        for l in [&blk.attn.out, &blk.ff.down] {
            *store.get_mut(l.weight) = Tensor::zeros(store.get(l.weight).shape());
        }
    }

    fn run(store: &ParamStore<f64>, blk: &TransformerBlock, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let y = blk.forward(&mut g, xv, AttnMode::Full { batch: 1, mask: None }).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_sublayer_post_norm_before_res_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let blk = TransformerBlock::new(&mut store, "b", 8, 2, NormPlacement::PostNormBeforeRes, &mut r);
        zero_sublayers(&mut store, &blk);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        assert_eq!(run(&store, &blk, &x), x);
    }

    #[test]
    fn zero_sublayer_post_norm_after_res_normalizes() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1);
        let blk = TransformerBlock::new(&mut store, "b", 8, 2, NormPlacement::PostNormAfterRes, &mut r);
        zero_sublayers(&mut store, &blk);
        let x = Tensor::randn(&[5, 8], 3.0, &mut r);
        let y = run(&store, &blk, &x);
        assert!(y.max_abs_diff(&x).unwrap() > 0.1);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let n = g.layer_norm(xv, None, None, 1e-6).unwrap();
        let n = g.layer_norm(n, None, None, 1e-6).unwrap();
        assert!(y.max_abs_diff(g.value(n)).unwrap() < 1e-9);
    }

    #[test]
    fn depth_two_is_composition() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(2);
        let stack = Stack::new(&mut store, "s", 2, 8, 2, NormPlacement::PostNormBeforeRes, &mut r);
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let y = stack.forward(&mut g, xv, 1, None).unwrap();
        let once = run(&store, &stack.blocks[0], &x);
        let twice = run(&store, &stack.blocks[1], &once);
        assert_eq!(g.value(y), &twice);
    }

    #[test]
    fn placements_are_finite_and_distinct() {
        let mut outs = Vec::new();
        for p in NormPlacement::ALL {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng::seeded(3);
            let stack = Stack::new(&mut store, "s", 16, 16, 4, p, &mut r);
            let x = Tensor::uniform(&[6, 16], -10.0, 10.0, &mut r);
            let mut g = Graph::inference(&store);
            let xv = g.constant(x);
            let y = stack.forward(&mut g, xv, 1, None).unwrap();
            assert!(g.value(y).all_finite(), "{p:?}");
            outs.push(g.value(y).clone());
        }
        assert!(outs[0] != outs[1] && outs[1] != outs[2] && outs[0] != outs[2]);
    }
}
