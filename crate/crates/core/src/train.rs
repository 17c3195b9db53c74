//! AdamW, the batch-scaled learning rate, the training loop and checkpoint
//! persistence.
//!
//! Checkpoint layout: magic `NOVA`, version `u32`, config JSON (`u32`
//! length + bytes), tensor count `u32`, then one tensor record per
//! parameter in module order. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{motion_score, read_dataset, synth_video, SynthSpec};
use crate::io::{read_exact, read_record, read_u32, write_record};
use crate::model::{Nova, NovaConfig};
use crate::tensor::rng;
use crate::{Float, Graph, NovaError, ParamStore, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NOVA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Caps the worker pool used for per-clip gradients. Only the first call
/// in a process takes effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| NovaError::Config(format!("thread pool: {e}")))
}

/// Learning rate for a batch under the linear scaling rule.
pub fn lr_for(base_lr: f64, batch: usize) -> f64 {
    base_lr * batch.max(1) as f64 / 256.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_decay(store, 0.02)
    }

    pub fn with_decay(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient (they still decay). A non-finite gradient aborts
    /// before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NovaError::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(NovaError::Shape(format!(
                        "gradient {:?} for {} {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(NovaError::Numeric(format!(
                        "non-finite gradient for {} at step {}",
                        store.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = grads[k].as_ref().map(|g| g.data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i].to_f64().unwrap());
                let mi = b1 * m[i].to_f64().unwrap() + (1.0 - b1) * gi;
                let vi = b2 * v[i].to_f64().unwrap() + (1.0 - b2) * gi * gi;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = T::lit(w.to_f64().unwrap() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub log_every: usize,
    /// Synthetic clips generated when no data directory is given.
    pub videos: usize,
    /// Directory of `.nvt` videos with a `manifest.jsonl`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// Also write the checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch: 16,
            steps: 1000,
            weight_decay: 0.02,
            log_every: 10,
            videos: 500,
            data_dir: None,
            checkpoint: PathBuf::from("nova.ckpt"),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.log_every == 0 {
            return Err(NovaError::Config("batch and log_every must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NovaError::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        lr_for(self.base_lr, self.batch)
    }
}

/// Model and training settings as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: NovaConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// One training clip in token space.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub tokens: Tensor<T>,
    pub prompt: usize,
    pub motion: f64,
}

impl<T: Float> Sample<T> {
    /// Encodes a pixel video; the motion token comes from its measured score.
    pub fn from_video(model: &Nova, video: &Tensor<T>, prompt: usize) -> Result<Self> {
        Ok(Self {
            tokens: model.encode_video(video)?,
            prompt,
            motion: motion_score(video)?,
        })
    }

    /// The first `frames` latent frames.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        let f = self.tokens.shape()[0].min(frames);
        Ok(Self {
            tokens: self.tokens.slice_rows(0, f)?,
            ..self.clone()
        })
    }
}

/// `count` synthetic clips at the model's canvas, seeds `seed..seed+count`.
pub fn synth_samples<T: Float>(model: &Nova, count: usize, seed: u64) -> Result<Vec<Sample<T>>> {
    let c = &model.cfg;
    (0..count as u64)
        .map(|i| {
            let spec = SynthSpec::random(c.height, c.width, c.pixel_frames(), seed.wrapping_add(i));
            let v = synth_video::<T>(&spec)?;
            Sample::from_video(model, &v.video, v.prompt_id)
        })
        .collect()
}

/// Every clip of a dataset directory, truncated to the model's frame count.
pub fn load_samples<T: Float>(model: &Nova, dir: &Path) -> Result<Vec<Sample<T>>> {
    read_dataset::<T>(dir)?
        .into_iter()
        .map(|(e, v)| Sample::from_video(model, &v, e.prompt_id)?.truncated(model.cfg.frames))
        .collect()
}

/// Mean loss and summed-then-averaged gradients over a batch. Each clip
/// draws from its own stream keyed by `(seed, index)`, and gradients are
/// reduced in batch order, so the result does not depend on thread count.
pub fn batch_gradients<T: Float>(
    model: &Nova,
    store: &ParamStore<T>,
    batch: &[&Sample<T>],
    seed: u64,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let per: Vec<Result<(f64, Vec<Option<Tensor<T>>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(seed, i as u64);
            let mut g = Graph::train(store);
            let l = model.video_loss(&mut g, &s.tokens, s.prompt, s.motion, &mut r)?;
            let loss = g.value(l).item().to_f64().unwrap();
            g.backward(l)?;
            Ok((loss, g.param_grads()))
        })
        .collect();
    let inv = T::lit(1.0 / batch.len().max(1) as f64);
    let mut total = 0.0;
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; store.len()];
    for r in per {
        let (loss, grads) = r?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                match a {
                    Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
                    None => *a = Some(g),
                }
            }
        }
    }
    for t in acc.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((total / batch.len().max(1) as f64, acc))
}

/// One parsed `step=<i> loss=<f> lr=<f>` line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} loss={:.6} lr={:e}", self.step, self.loss, self.lr)
    }
}

impl std::str::FromStr for LogLine {
    type Err = NovaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NovaError::Format(format!("not a log line: {s}"));
        let mut fields = s.split_whitespace().map(|kv| kv.split_once('=').ok_or_else(bad));
        let mut next = |key: &str| -> Result<String> {
            let (k, v) = fields.next().ok_or_else(bad)??;
            if k != key {
                return Err(bad());
            }
            Ok(v.to_string())
        };
        let step = next("step")?.parse().map_err(|_| bad())?;
        let loss = next("loss")?.parse().map_err(|_| bad())?;
        let lr = next("lr")?.parse().map_err(|_| bad())?;
        Ok(Self { step, loss, lr })
    }
}

pub struct Trainer<T> {
    pub model: Nova,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Losses of every completed step.
    pub history: Vec<f64>,
}

impl<T: Float> Trainer<T> {
    pub fn new(model: Nova, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::with_decay(&store, cfg.weight_decay);
        Ok(Self {
            model,
            store,
            opt,
            cfg,
            history: Vec::new(),
        })
    }

    pub fn step(&mut self, batch: &[&Sample<T>]) -> Result<f64> {
        let seed = self.cfg.seed ^ (self.opt.step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, grads) = batch_gradients(&self.model, &self.store, batch, seed)?;
        if !loss.is_finite() {
            return Err(NovaError::Numeric(format!("loss is {loss} at step {}", self.opt.step + 1)));
        }
        self.opt.update(&mut self.store, &grads, self.cfg.lr())?;
        self.history.push(loss);
        Ok(loss)
    }

    /// Runs `cfg.steps` steps over `data`, drawing batches from a shuffled
    /// epoch order. `log` receives every `log_every`-th line.
    pub fn run(&mut self, data: &[Sample<T>], mut log: impl FnMut(&LogLine)) -> Result<()> {
        self.run_with(data, |_, line| {
            log(line);
            Ok(())
        })
    }

    /// As [`Trainer::run`]; the callback also sees the trainer, e.g. to
    /// write periodic checkpoints.
    pub fn run_with(
        &mut self,
        data: &[Sample<T>],
        mut on_log: impl FnMut(&Self, &LogLine) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(NovaError::Contract("training needs at least one clip".into()));
        }
        let mut order_rng = rng::stream(self.cfg.seed, u64::MAX);
        let mut order = Vec::new();
        for _ in 0..self.cfg.steps {
            let mut batch = Vec::with_capacity(self.cfg.batch);
            while batch.len() < self.cfg.batch {
                if order.is_empty() {
                    order = rng::permutation(data.len(), &mut order_rng);
                    order.reverse();
                }
                batch.push(&data[order.pop().unwrap()]);
            }
            let loss = self.step(&batch)?;
            let step = self.opt.step as usize;
            if step % self.cfg.log_every == 0 || step == 1 {
                let line = LogLine {
                    step,
                    loss,
                    lr: self.cfg.lr(),
                };
                on_log(self, &line)?;
            }
        }
        Ok(())
    }
}

// ---- checkpoints --------------------------------------------------------

pub fn write_checkpoint<T: Float>(w: &mut impl Write, store: &ParamStore<T>, cfg: &NovaConfig) -> Result<()> {
    let json = serde_json::to_vec(cfg)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_record(w, name, t)?;
    }
    Ok(())
}

/// Reads a checkpoint and checks every tensor against the layout of the
/// stored config.
pub fn read_checkpoint<T: Float>(r: &mut impl Read) -> Result<(Nova, ParamStore<T>)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NovaError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NovaError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    read_exact(r, &mut json)?;
    let cfg: NovaConfig = serde_json::from_slice(&json)?;
    let count = read_u32(r)? as usize;
    let (model, mut store) = Nova::new::<T>(cfg)?;
    if count != store.len() {
        return Err(NovaError::Shape(format!("checkpoint has {count} tensors, model expects {}", store.len())));
    }
    let named: Vec<(String, Tensor<T>)> = (0..count).map(|_| read_record(r)).collect::<Result<_>>()?;
    for ((name, _), (expect, _)) in named.iter().zip(store.iter()) {
        if name != expect {
            return Err(NovaError::Format(format!("tensor {name} found where {expect} was expected")));
        }
    }
    store.load_from(&named)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NovaError::Format("trailing bytes after checkpoint".into()));
    }
    Ok((model, store))
}

pub fn save_checkpoint<T: Float>(path: &Path, store: &ParamStore<T>, cfg: &NovaConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store, cfg)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(Nova, ParamStore<T>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Stage-2 initialization: a fresh model for `cfg` with every parameter
/// copied from a stage-1 store. Only the frame count may differ.
pub fn init_from_stage1<T: Float>(cfg: NovaConfig, stage1: &ParamStore<T>) -> Result<(Nova, ParamStore<T>)> {
    let (model, mut store) = Nova::new::<T>(cfg)?;
    let named: Vec<(String, Tensor<T>)> = stage1.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    store.load_from(&named)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[1], &[v]).unwrap());
        s
    }

    #[test]
    fn adamw_examples() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::with_decay(&s, 0.0);
        opt.update(&mut s, &[Some(Tensor::from_f64(&[1], &[1.0]).unwrap())], 0.1).unwrap();
        assert!((s.get(s.id("p").unwrap()).item() - 0.9).abs() < 1e-6);

        let mut s = scalar_store(1.0);
        let mut opt = AdamW::with_decay(&s, 0.0);
        for _ in 0..3 {
            opt.update(&mut s, &[Some(Tensor::zeros(&[1]))], 0.1).unwrap();
        }
        assert_eq!(s.get(s.id("p").unwrap()).item(), 1.0);

        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(&s);
        for _ in 0..5 {
            opt.update(&mut s, &[None], 0.1).unwrap();
        }
        let expect = 2.0 * (1.0f64 - 0.1 * 0.02).powi(5);
        assert!((s.get(s.id("p").unwrap()).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_nan_without_touching_params() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s);
        let err = opt.update(&mut s, &[Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())], 0.1);
        assert!(matches!(err, Err(NovaError::Numeric(_))));
        assert_eq!((s.get(s.id("p").unwrap()).item(), opt.step), (1.0, 0));
    }

    #[test]
    fn lr_rule() {
        assert_eq!(lr_for(1e-4, 256), 1e-4);
        assert_eq!(lr_for(1e-4, 512), 2e-4);
        assert_eq!(lr_for(1e-4, 1), 1e-4 / 256.0);
    }

    #[test]
    fn log_lines_round_trip() {
        let l = LogLine {
            step: 12,
            loss: 0.25,
            lr: 6.25e-6,
        };
        let s = l.to_string();
        assert!(s.starts_with("step=12 loss=0.250000 lr="));
        assert_eq!(s.parse::<LogLine>().unwrap(), l);
        assert!("loss=1 step=2 lr=3".parse::<LogLine>().is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"model": {"d": 64}, "train": {"steps": 3}}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"model": {"dim": 64}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"batch": 0}}"#).is_err());
    }
}
