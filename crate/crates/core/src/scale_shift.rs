//! Scaling-and-shift conditioning: a low-rank network maps the temporal
//! output for frame `f` to per-channel `(γ, β)`, which affine the normalized
//! anchor features into the indicator features of that frame.

use crate::error::{contract_err, shape_err};
use crate::nn::{Init, Linear};
use crate::tensor::rng::Rng;
use crate::{Float, Graph, ParamStore, Result, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

/// `γ = 1 + silu(h·down)·up[:, :d]`, `β = silu(h·down)·up[:, d:]`.
#[derive(Debug, Clone)]
pub struct ScaleShift {
    pub down: Linear,
    pub up: Linear,
    pub rank: usize,
    pub d: usize,
}

impl ScaleShift {
    /// `up` starts at zero so every frame begins at `(γ, β) = (1, 0)`.
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(contract_err!("scale-shift rank must lie in 1..={d}, got {rank}"));
        }
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), d, rank, Init::Xavier, rng),
            up: Linear::new(store, &format!("{name}.up"), rank, 2 * d, Init::Zeros, rng),
            rank,
            d,
        })
    }

    /// `(γ, β)`, each `[M × d]`.
    pub fn gamma_beta<T: Float>(&self, g: &mut Graph<T>, h: Var) -> Result<(Var, Var)> {
        let z = self.down.forward(g, h)?;
        let z = g.silu(z);
        let gb = self.up.forward(g, z)?;
        let dg = g.slice_cols(gb, 0, self.d)?;
        let gamma = g.affine(dg, 1.0, 1.0);
        let beta = g.slice_cols(gb, self.d, 2 * self.d)?;
        Ok((gamma, beta))
    }

    /// Indicator features for 1-based frame `f`. Frame 1 always gets the
    /// plain normalized anchor.
    pub fn indicator<T: Float>(&self, g: &mut Graph<T>, anchor: Var, h: Var, f: usize) -> Result<Var> {
        if f == 1 {
            return normalize(g, anchor);
        }
        let (gamma, beta) = self.gamma_beta(g, h)?;
        apply(g, anchor, gamma, beta)
    }
}

/// Per-token layer normalization without affine parameters.
pub fn normalize<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.layer_norm(x, None, None, NORM_EPS)
}

/// `γ ⊙ normalize(anchor) + β`.
pub fn apply<T: Float>(g: &mut Graph<T>, anchor: Var, gamma: Var, beta: Var) -> Result<Var> {
    let s = g.shape(anchor).to_vec();
    if g.shape(gamma) != s.as_slice() || g.shape(beta) != s.as_slice() {
        return Err(shape_err!(
            "scale-shift γ {:?} β {:?} for anchor {s:?}",
            g.shape(gamma),
            g.shape(beta)
        ));
    }
    let n = normalize(g, anchor)?;
    let scaled = g.mul(gamma, n)?;
    g.add(scaled, beta)
}

/// Plain-tensor normalization used where no graph is at hand.
pub fn normalize_tensor<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let store = ParamStore::<T>::new();
    let mut g = Graph::inference(&store);
    let v = g.constant(x.clone());
    let n = normalize(&mut g, v)?;
    Ok(g.value(n).clone())
}
