//! Parameterized building blocks shared by the model components.

use crate::tensor::rng::Rng;
use crate::{Float, Graph, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier,
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn tensor<T: Float>(self, shape: &[usize], rng: &mut Rng) -> Tensor<T> {
        match self {
            Init::Xavier => {
                let (fi, fo) = match shape {
                    [a, b] => (*a, *b),
                    [a] => (*a, *a),
                    _ => (shape.iter().product(), 1),
                };
                let a = (6.0 / (fi + fo) as f64).sqrt();
                Tensor::uniform(shape, -a, a, rng)
            }
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[d_in, d_out], rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn no_bias<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[d_in, d_out], rng));
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.linear(x, w, b)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
            eps: 1e-6,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.layer_norm(x, Some(gain), Some(bias), self.eps)
    }
}
