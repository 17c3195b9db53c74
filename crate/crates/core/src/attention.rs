//! Multi-head attention, block-causal masks and the key/value cache used for
//! frame-by-frame decoding.

use std::sync::Arc;

use crate::error::{contract_err, shape_err};
use crate::nn::{Init, Linear};
use crate::tensor::rng::Rng;
use crate::{Float, Graph, Mask, ParamStore, Result, Tensor, Var};

/// Sequence layout for block-causal attention: a conditioning prefix
/// (block 0) followed by equally attended blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub prefix_len: usize,
    pub block_sizes: Vec<usize>,
}

impl BlockLayout {
    pub fn new(prefix_len: usize, block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.iter().any(|&b| b == 0) {
            return Err(contract_err!("block sizes must be positive: {block_sizes:?}"));
        }
        Ok(Self {
            prefix_len,
            block_sizes,
        })
    }

    /// Prefix of `prefix_len` tokens followed by `blocks` blocks of `size`.
    pub fn uniform(prefix_len: usize, blocks: usize, size: usize) -> Result<Self> {
        Self::new(prefix_len, vec![size; blocks])
    }

    pub fn total_len(&self) -> usize {
        self.prefix_len + self.block_sizes.iter().sum::<usize>()
    }

    /// Block id of every position; the prefix is block 0.
    pub fn block_ids(&self) -> Vec<usize> {
        let mut ids = vec![0; self.prefix_len];
        for (b, &n) in self.block_sizes.iter().enumerate() {
            ids.extend(std::iter::repeat_n(b + 1, n));
        }
        ids
    }

    /// Start offset of block `b` (1-based, 0 is the prefix).
    pub fn block_start(&self, b: usize) -> usize {
        if b == 0 {
            0
        } else {
            self.prefix_len + self.block_sizes[..b - 1].iter().sum::<usize>()
        }
    }
}

/// `(i, j)` is kept iff `block(j) ≤ block(i)`: every block sees the prefix,
/// all earlier blocks and itself (bidirectionally), never later blocks.
pub fn build_block_causal_mask(layout: &BlockLayout) -> Mask {
    let ids = layout.block_ids();
    let n = ids.len();
    Mask::from_fn(n, n, |i, j| ids[j] <= ids[i])
}

/// Renders a mask as rows of `#` (kept) and `.` (masked).
pub fn render_mask(mask: &Mask) -> String {
    let cols = mask.last_dim();
    let mut s = String::new();
    for row in mask.data().chunks(cols) {
        s.extend(row.iter().map(|&b| if b { '#' } else { '.' }));
        s.push('\n');
    }
    s
}

/// `softmax(q·kᵀ/√d_head, mask)·v` per head over `[L × heads·d_head]` inputs.
pub fn attend<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Arc<Mask>>,
) -> Result<Var> {
    g.attention(q, k, v, heads, 1, mask)
}

/// Append-only key/value store, one entry per attention layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    dim: usize,
    filled_len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(layers: usize, dim: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            dim,
            filled_len: 0,
        }
    }

    pub fn filled_len(&self) -> usize {
        self.filled_len
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    /// Marks a block of `len` tokens as appended in every layer.
    pub fn commit(&mut self, len: usize) -> Result<()> {
        let target = (self.filled_len + len) * self.dim;
        if self.keys.iter().chain(&self.values).any(|k| k.len() != target) {
            return Err(contract_err!(
                "kv-cache layers out of step after appending {len} tokens"
            ));
        }
        self.filled_len += len;
        Ok(())
    }

    fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.dim
    }
}

/// Attention of one new block against every cached position plus itself.
/// The block's keys and values are appended to `cache` for `layer`; call
/// [`KvCache::commit`] once every layer has seen the block.
pub fn attend_cached<T: Float>(
    g: &mut Graph<T>,
    q_new: Var,
    k_new: Var,
    v_new: Var,
    cache: &mut KvCache<T>,
    layer: usize,
    heads: usize,
) -> Result<Var> {
    if layer >= cache.layers() {
        return Err(contract_err!("layer {layer} outside cache of {}", cache.layers()));
    }
    if cache.layer_len(layer) != cache.filled_len {
        return Err(contract_err!(
            "cache layer {layer} holds {} tokens but {} are committed",
            cache.layer_len(layer),
            cache.filled_len
        ));
    }
    let d = cache.dim;
    for v in [q_new, k_new, v_new] {
        if g.shape(v).len() != 2 || g.shape(v)[1] != d {
            return Err(shape_err!("cached attention input {:?}, width {d}", g.shape(v)));
        }
    }
    let n_new = g.shape(k_new)[0];
    let total = cache.filled_len + n_new;
    let mut kd = cache.keys[layer].clone();
    kd.extend_from_slice(g.value(k_new).data());
    let mut vd = cache.values[layer].clone();
    vd.extend_from_slice(g.value(v_new).data());
    let k_all = g.constant(Tensor::new(&[total, d], kd)?);
    let v_all = g.constant(Tensor::new(&[total, d], vd)?);
    let out = g.attention(q_new, k_all, v_all, heads, 1, None)?;
    cache.keys[layer].extend_from_slice(g.value(k_new).data());
    cache.values[layer].extend_from_slice(g.value(v_new).data());
    Ok(out)
}

/// Multi-head self-attention with separate query/key/value/output maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, Init::Xavier, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, Init::Xavier, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, Init::Xavier, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, Init::Xavier, rng),
            heads,
        }
    }

    /// Self-attention over `batch` stacked sequences of equal length.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        mask: Option<&Arc<Mask>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, batch, mask)?;
        self.out.forward(g, a)
    }

    pub fn forward_cached<T: Float>(
        &self,
        g: &mut Graph<T>,
        x_new: Var,
        cache: &mut KvCache<T>,
        layer: usize,
    ) -> Result<Var> {
        let q = self.q.forward(g, x_new)?;
        let k = self.k.forward(g, x_new)?;
        let v = self.v.forward(g, x_new)?;
        let a = attend_cached(g, q, k, v, cache, layer, self.heads)?;
        self.out.forward(g, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;
    use crate::testutil::{grad_check, randn};

    #[test]
    fn block_causal_mask_example() {
        let layout = BlockLayout::new(1, vec![2, 2]).unwrap();
        let m = build_block_causal_mask(&layout);
        assert_eq!(m.shape(), &[5, 5]);
        let expect = "#....\n###..\n###..\n#####\n#####\n";
        assert_eq!(render_mask(&m), expect);
        // row in block 1 attends prefix and block 1
        assert!((0..5).all(|j| m.get(1, j) == (j < 3)));
        assert!((0..5).all(|j| m.get(4, j)));
    }

    #[test]
    fn single_block_is_bidirectional() {
        let m = build_block_causal_mask(&BlockLayout::new(0, vec![4]).unwrap());
        assert!(m.data().iter().all(|&b| b));
    }

    #[test]
    fn mask_is_block_lower_triangular_and_idempotent() {
        let layout = BlockLayout::new(3, vec![2, 4, 1, 3]).unwrap();
        let m = build_block_causal_mask(&layout);
        let ids = layout.block_ids();
        let n = layout.total_len();
        for i in 0..n {
            for j in 0..n {
                if m.get(i, j) {
                    for i2 in 0..n {
                        if ids[i2] > ids[i] {
                            assert!(m.get(i2, j));
                        }
                    }
                }
            }
        }
        assert_eq!(m, build_block_causal_mask(&layout));
        assert!(BlockLayout::new(1, vec![2, 0]).is_err());
    }

    #[test]
    fn attend_single_key_and_identical_keys() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let q = g.constant(randn(&[1, 4], 0));
        let k = g.constant(randn(&[1, 4], 1));
        let v = g.constant(randn(&[1, 4], 2));
        let o = attend(&mut g, q, k, v, 2, None).unwrap();
        assert!(g.value(o).max_abs_diff(g.value(v)).unwrap() < 1e-15);

        let q = g.constant(randn(&[3, 4], 3));
        let k = g.constant(Tensor::from_fn(&[3, 4], |i| (i % 4) as f64));
        let vt = randn(&[3, 4], 4);
        let v = g.constant(vt.clone());
        let mask = Arc::new(Mask::from_fn(3, 3, |i, j| j <= i));
        let o = attend(&mut g, q, k, v, 2, Some(&mask)).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mean = (0..=i).map(|j| vt.row(j)[c]).sum::<f64>() / (i + 1) as f64;
                assert!((g.value(o).row(i)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_grad_matches_finite_differences() {
        let layout = BlockLayout::new(1, vec![2, 2]).unwrap();
        let mask = Arc::new(build_block_causal_mask(&layout));
        for seed in 0..10 {
            let w = randn(&[5, 8], seed + 11);
            let err = grad_check(
                &[randn(&[5, 8], seed), randn(&[5, 8], seed + 1), randn(&[5, 8], seed + 2)],
                |tp, v| {
                    let o = tp.attention(v[0], v[1], v[2], 2, 1, Some(&mask))?;
                    let w = tp.constant(w.clone());
                    let z = tp.mul(o, w)?;
                    Ok(tp.sum(z))
                },
            );
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    fn cached_vs_full(seed: u64, blocks: &[usize]) -> f32 {
        let d = 16;
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::seeded(seed);
        let mha = MultiHeadAttention::new(&mut store, "attn", d, 4, &mut r);
        let layout = BlockLayout::new(0, blocks.to_vec()).unwrap();
        let n = layout.total_len();
        let x = Tensor::<f32>::randn(&[n, d], 1.0, &mut r);

        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let mask = Arc::new(build_block_causal_mask(&layout));
        let full = mha.forward(&mut g, xv, 1, Some(&mask)).unwrap();
        let full = g.value(full).clone();

        let mut cache = KvCache::new(1, d);
        let mut worst = 0.0f32;
        for b in 1..=blocks.len() {
            let start = layout.block_start(b);
            let end = start + blocks[b - 1];
            let mut g = Graph::inference(&store);
            let xb = g.constant(x.slice_rows(start, end).unwrap());
            let out = mha.forward_cached(&mut g, xb, &mut cache, 0).unwrap();
            cache.commit(end - start).unwrap();
            let refr = full.slice_rows(start, end).unwrap();
            worst = worst.max(g.value(out).max_abs_diff(&refr).unwrap());
        }
        assert_eq!(cache.filled_len(), n);
        worst
    }

    #[test]
    fn cached_decoding_equals_masked_full_pass() {
        for seed in 0..5 {
            let err = cached_vs_full(seed, &[4, 4, 4]);
            assert!(err < 1e-5, "seed {seed}: max |Δ| {err}");
        }
    }

    #[test]
    fn empty_cache_single_block_matches_uncached() {
        assert!(cached_vs_full(9, &[6]) < 1e-6);
    }

    #[test]
    fn cache_length_bookkeeping() {
        let mut cache = KvCache::<f32>::new(2, 4);
        let store = ParamStore::<f32>::new();
        for _ in 0..3 {
            let mut g = Graph::inference(&store);
            for layer in 0..2 {
                let x = g.constant(Tensor::ones(&[4, 4]));
                attend_cached(&mut g, x, x, x, &mut cache, layer, 2).unwrap();
            }
            cache.commit(4).unwrap();
        }
        assert_eq!(cache.filled_len(), 12);

        // a layer appended twice without commit is rejected
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::ones(&[4, 4]));
        attend_cached(&mut g, x, x, x, &mut cache, 0, 2).unwrap();
        assert!(attend_cached(&mut g, x, x, x, &mut cache, 0, 2).is_err());
        assert!(cache.commit(4).is_err());
    }

    #[test]
    fn perturbing_a_block_only_moves_later_rows() {
        let d = 8;
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(3);
        let mha = MultiHeadAttention::new(&mut store, "attn", d, 2, &mut r);
        let layout = BlockLayout::new(2, vec![3, 3, 3]).unwrap();
        let mask = Arc::new(build_block_causal_mask(&layout));
        let n = layout.total_len();
        let x = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let o = mha.forward(&mut g, xv, 1, Some(&mask)).unwrap();
            g.value(o).clone()
        };
        let base = run(&x);
        for b in 1..=3 {
            let mut xp = x.clone();
            let s = layout.block_start(b);
            for i in s..s + 3 {
                xp.row_mut(i)[0] += 1.0;
            }
            let out = run(&xp);
            for i in 0..n {
                let changed = out.row(i) != base.row(i);
                assert_eq!(changed, i >= s, "block {b}, row {i}");
            }
        }
    }
}
