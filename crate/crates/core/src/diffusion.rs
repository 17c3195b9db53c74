//! Per-token diffusion head: the noise estimator, its training loss, the
//! ancestral sampler and classifier-free guidance.

use rand::Rng as _;

use crate::embed::sincos_1d;
use crate::error::{contract_err, shape_err};
use crate::nn::{Init, Linear};
use crate::schedule::{NoiseSchedule, Respaced};
use crate::tensor::rng::{self, Rng};
use crate::{Float, Graph, ParamStore, Result, Tensor, Var};

/// Noise draws per token in [`diffusion_loss`].
pub const LOSS_DRAWS: usize = 4;

const NORM_EPS: f64 = 1e-6;

/// Residual MLP block modulated by the condition: `x + gate ⊙ mlp(ln(x)·(1+scale) + shift)`.
#[derive(Debug, Clone)]
struct ResBlock {
    ada: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl ResBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, w: usize, rng: &mut Rng) -> Self {
        Self {
            ada: Linear::new(store, &format!("{name}.ada"), w, 3 * w, Init::Xavier, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), w, w, Init::Xavier, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), w, w, Init::Xavier, rng),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var, c_act: Var, w: usize) -> Result<Var> {
        let mods = self.ada.forward(g, c_act)?;
        let shift = g.slice_cols(mods, 0, w)?;
        let scale = g.slice_cols(mods, w, 2 * w)?;
        let gate = g.slice_cols(mods, 2 * w, 3 * w)?;
        let h = modulate(g, x, shift, scale)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, h)?;
        let h = g.mul(gate, h)?;
        g.add(x, h)
    }
}

fn modulate<T: Float>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, None, None, NORM_EPS)?;
    let s1 = g.affine(scale, 1.0, 1.0);
    let h = g.mul(n, s1)?;
    g.add(h, shift)
}

/// The noise estimator `ε_θ(x_t | t, z)` applied row-wise to a batch of tokens.
#[derive(Debug, Clone)]
pub struct DenoiseMlp {
    input: Linear,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    blocks: Vec<ResBlock>,
    final_ada: Linear,
    output: Linear,
    pub channels: usize,
    pub cond_dim: usize,
    pub width: usize,
}

impl DenoiseMlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_dim: usize,
        width: usize,
        blocks: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(width % 2 == 0, "head width must be even");
        Self {
            input: Linear::new(store, &format!("{name}.input"), channels, width, Init::Xavier, rng),
            time1: Linear::new(store, &format!("{name}.time1"), width, width, Init::Normal(0.02), rng),
            time2: Linear::new(store, &format!("{name}.time2"), width, width, Init::Normal(0.02), rng),
            cond: Linear::new(store, &format!("{name}.cond"), cond_dim, width, Init::Xavier, rng),
            blocks: (0..blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.block{i}"), width, rng))
                .collect(),
            final_ada: Linear::new(store, &format!("{name}.final_ada"), width, 2 * width, Init::Xavier, rng),
            output: Linear::new(store, &format!("{name}.output"), width, channels, Init::Zeros, rng),
            channels,
            cond_dim,
            width,
        }
    }

    /// Time embeddings for every row; the MLP runs once per distinct step.
    fn time_embed<T: Float>(&self, g: &mut Graph<T>, ts: &[usize]) -> Result<Var> {
        let mut uniq = ts.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let mut table = Vec::with_capacity(uniq.len() * self.width);
        for &t in &uniq {
            table.extend_from_slice(sincos_1d::<T>(t as f64, self.width)?.data());
        }
        let table = g.constant(Tensor::new(&[uniq.len(), self.width], table)?);
        let h = self.time1.forward(g, table)?;
        let h = g.silu(h);
        let h = self.time2.forward(g, h)?;
        let idx: Vec<usize> = ts.iter().map(|t| uniq.binary_search(t).unwrap()).collect();
        g.gather_rows(h, &idx)
    }

    /// `ε_θ` for `n` rows: `x_t` is `[n × c]`, `z` is `[n × cond_dim]`, one
    /// timestep per row.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x_t: Var, ts: &[usize], z: Var) -> Result<Var> {
        let n = ts.len();
        if g.shape(x_t) != [n, self.channels] || g.shape(z) != [n, self.cond_dim] {
            return Err(shape_err!(
                "head input {:?} / condition {:?} for {n} rows of {} channels",
                g.shape(x_t),
                g.shape(z),
                self.channels
            ));
        }
        let temb = self.time_embed(g, ts)?;
        let zc = self.cond.forward(g, z)?;
        let c = g.add(temb, zc)?;
        let c_act = g.silu(c);
        let mut x = self.input.forward(g, x_t)?;
        for b in &self.blocks {
            x = b.forward(g, x, c_act, self.width)?;
        }
        // no normalization here: the stream stays linear in `x_t`, which the
        // sampler's first steps rely on
        let mods = self.final_ada.forward(g, c_act)?;
        let shift = g.slice_cols(mods, 0, self.width)?;
        let scale = g.slice_cols(mods, self.width, 2 * self.width)?;
        let s1 = g.affine(scale, 1.0, 1.0);
        let h = g.mul(x, s1)?;
        let h = g.add(h, shift)?;
        self.output.forward(g, h)
    }

    /// Single-token prediction.
    pub fn eps_predict<T: Float>(
        &self,
        store: &ParamStore<T>,
        x_t: &Tensor<T>,
        t: usize,
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let x = g.constant(x_t.reshape(&[1, self.channels])?);
        let zv = g.constant(z.reshape(&[1, self.cond_dim])?);
        let e = self.forward(&mut g, x, &[t], zv)?;
        g.value(e).reshape(&[self.channels])
    }
}

/// `‖ε − ε_θ(x_t | t, z)‖²` averaged over rows, each row of `x0`
/// (constant `[n × c]`) and `z` (`[n × cond_dim]`) drawn [`LOSS_DRAWS`]
/// times with independent `t ~ U{1..T}` and `ε ~ N(0, I)`.
pub fn diffusion_loss<T: Float>(
    g: &mut Graph<T>,
    head: &DenoiseMlp,
    x0: &Tensor<T>,
    z: Var,
    sched: &NoiseSchedule,
    draws: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let [n, c] = x0.shape() else {
        return Err(shape_err!("loss targets must be [n, c], got {:?}", x0.shape()));
    };
    let (n, c) = (*n, *c);
    if n == 0 || draws == 0 {
        return Err(contract_err!("diffusion loss over {n} tokens × {draws} draws"));
    }
    let rows = n * draws;
    let idx: Vec<usize> = (0..rows).map(|i| i % n).collect();
    let x0r = x0.gather_rows(&idx)?;
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps)).collect();
    let eps = Tensor::<T>::randn(&[rows, c], 1.0, rng);
    let mut xt = Vec::with_capacity(rows * c);
    for (r, &t) in ts.iter().enumerate() {
        let a = T::lit(sched.alpha_bar[t].sqrt());
        let b = T::lit((1.0 - sched.alpha_bar[t]).sqrt());
        xt.extend(x0r.row(r).iter().zip(eps.row(r)).map(|(&x, &e)| a * x + b * e));
    }
    let xt = g.constant(Tensor::new(&[rows, c], xt)?);
    let epsv = g.constant(eps);
    let zr = g.gather_rows(z, &idx)?;
    let pred = head.forward(g, xt, &ts, zr)?;
    let diff = g.sub(pred, epsv)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// `ε_null + s·(ε_cond − ε_null)`; exact passthrough at `s = 1` and `s = 0`.
pub fn cfg_combine<T: Float>(cond: &Tensor<T>, null: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if s == 1.0 {
        return Ok(cond.clone());
    }
    if s == 0.0 {
        return Ok(null.clone());
    }
    if cond.shape() != null.shape() {
        return Err(shape_err!("guidance pair {:?} vs {:?}", cond.shape(), null.shape()));
    }
    let s = T::lit(s);
    let data = cond.data().iter().zip(null.data()).map(|(&c, &u)| u + s * (c - u)).collect();
    Tensor::new(cond.shape(), data)
}

/// Guided noise estimate for one timestep over `n` rows.
pub fn cfg_eps<T: Float>(
    head: &DenoiseMlp,
    store: &ParamStore<T>,
    x_t: &Tensor<T>,
    t: usize,
    z_cond: &Tensor<T>,
    z_null: &Tensor<T>,
    s: f64,
) -> Result<Tensor<T>> {
    let n = x_t.shape()[0];
    let mut g = Graph::inference(store);
    if s == 1.0 || s == 0.0 {
        let z = if s == 1.0 { z_cond } else { z_null };
        let x = g.constant(x_t.clone());
        let zv = g.constant(z.clone());
        let e = head.forward(&mut g, x, &vec![t; n], zv)?;
        return Ok(g.value(e).clone());
    }
    let x = g.constant(Tensor::concat_rows(&[x_t, x_t])?);
    let zv = g.constant(Tensor::concat_rows(&[z_cond, z_null])?);
    let e = head.forward(&mut g, x, &vec![t; 2 * n], zv)?;
    let e = g.value(e);
    cfg_combine(&e.slice_rows(0, n)?, &e.slice_rows(n, 2 * n)?, s)
}

/// Sampler settings.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: Respaced,
    pub cfg_scale: f64,
    /// Clamp on the implied `x0` at every step.
    pub clip: Option<f64>,
}

/// Ancestral sampling of `n` tokens from `N(0, I)` down to `x_0`, guided by
/// `z_null` when given. The last step adds no noise.
pub fn sample_tokens<T: Float>(
    head: &DenoiseMlp,
    store: &ParamStore<T>,
    z_cond: &Tensor<T>,
    z_null: Option<&Tensor<T>>,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let n = z_cond.shape()[0];
    let c = head.channels;
    let x = Tensor::<T>::randn(&[n, c], 1.0, rng);
    sample_from(head, store, x, z_cond, z_null, cfg, rng)
}

/// [`sample_tokens`] from a given starting point `x_T`.
pub fn sample_from<T: Float>(
    head: &DenoiseMlp,
    store: &ParamStore<T>,
    x_start: Tensor<T>,
    z_cond: &Tensor<T>,
    z_null: Option<&Tensor<T>>,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let sched = &cfg.schedule.schedule;
    let guide = |x: &Tensor<T>, t: usize| match z_null {
        Some(zn) => cfg_eps(head, store, x, t, z_cond, zn, cfg.cfg_scale),
        None => cfg_eps(head, store, x, t, z_cond, z_cond, 1.0),
    };
    let mut x: Vec<f64> = x_start.data().iter().map(|v| v.to_f64().unwrap()).collect();
    for i in (1..=sched.steps).rev() {
        let t = cfg.schedule.timesteps[i];
        let xt = Tensor::from_f64(x_start.shape(), &x)?;
        let eps = guide(&xt, t)?;
        let (a, ab) = (sched.alpha[i - 1], sched.alpha_bar[i]);
        let sig = sched.sigma[i - 1];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (xv, e) in x.iter_mut().zip(eps.data()) {
            let mut e = e.to_f64().unwrap();
            if let Some(lim) = cfg.clip {
                let x0 = ((*xv - sb * e) / sa).clamp(-lim, lim);
                e = (*xv - sa * x0) / sb;
            }
            let mean = (*xv - (1.0 - a) / sb * e) / a.sqrt();
            *xv = if i > 1 { mean + sig * rng::normal(rng) } else { mean };
        }
    }
    Tensor::from_f64(x_start.shape(), &x)
}
