//! Patch-based L1 training: schedule, sampling, augmentation, Adam,
//! checkpoints and the resumable training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tape};
use crate::blocks::io::{
    check_preamble, decode_weight_records, encode_weights, put_tensor, put_u32, put_u64, seal, unseal, Reader,
};
use crate::blocks::{mprnet_forward, ModelConfig, WeightStore};
use crate::degrade::{degrade, list_pngs, upscale_bicubic, DegradationSpec};
use crate::error::{Error, LoadError, Result};
use crate::imaging::{load_image, Image};
use crate::metrics::y_metrics;
use crate::rng::Xoshiro256StarStar;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// LR patch side.
    pub patch_lr: usize,
    /// Patches per step.
    pub batch: usize,
    pub lr0: f64,
    /// Steps between learning-rate halvings.
    pub halve_every: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_lr: 64,
            batch: 16,
            lr0: 1e-3,
            halve_every: 2_000,
            total_steps: 2_000,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch_lr == 0 || self.halve_every == 0 {
            return Err(Error::Config(format!(
                "batch ({}), patch_lr ({}) and halve_every ({}) must be positive",
                self.batch, self.patch_lr, self.halve_every
            )));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        Ok(())
    }
}

/// A model configuration with optional training settings, as stored in
/// config files (`{"width": .., ..., "train": {...}}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let rc: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `lr0 * 0.5^floor(step / halve_every)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.halve_every).min(i32::MAX as u64) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub name: String,
    pub lr: Image,
    pub hr: Image,
}

/// Images usable for patch sampling, plus the names excluded as too small.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub pairs: Vec<TrainPair>,
    pub skipped: Vec<String>,
}

impl TrainSet {
    /// Keep pairs whose LR extents fit a `patch_lr` patch and whose HR is
    /// exactly `scale` times the LR.
    pub fn new(pairs: Vec<TrainPair>, scale: usize, patch_lr: usize) -> Self {
        let mut set = TrainSet::default();
        for p in pairs {
            let fits = p.lr.height() >= patch_lr
                && p.lr.width() >= patch_lr
                && p.hr.height() == scale * p.lr.height()
                && p.hr.width() == scale * p.lr.width();
            if fits {
                set.pairs.push(p);
            } else {
                set.skipped.push(p.name);
            }
        }
        set
    }

    /// Build pairs from HR images with the BI model.
    pub fn from_hr(images: Vec<(String, Image)>, scale: usize, patch_lr: usize) -> Result<Self> {
        let spec = DegradationSpec::bi(scale);
        let pairs = images
            .into_iter()
            .map(|(name, hr)| {
                let hr = crate::imaging::crop_to_multiple(&hr, scale)?;
                let lr = degrade(&hr, &spec)?.quantize();
                Ok(TrainPair { name, lr, hr })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSet::new(pairs, scale, patch_lr))
    }

    /// Load `dir/HR/*.png` with LR partners from `dir/X{scale}/` when that
    /// directory exists, otherwise degrade the HR images with BI.
    pub fn load(dir: &Path, scale: usize, patch_lr: usize) -> Result<Self> {
        let hr_dir = dir.join("HR");
        let lr_dir = dir.join(format!("X{scale}"));
        let hr_files = list_pngs(&hr_dir)?;
        if hr_files.is_empty() {
            return Err(Error::Data(format!("no PNG files in {}", hr_dir.display())));
        }
        let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
        if lr_dir.is_dir() {
            let mut pairs = Vec::new();
            let mut missing = Vec::new();
            for f in &hr_files {
                let lr_path = lr_dir.join(f.file_name().unwrap());
                if !lr_path.exists() {
                    missing.push(name(f));
                    continue;
                }
                let lr = load_image(&lr_path)?;
                let hr = load_image(f)?;
                let hr = if hr.height() != scale * lr.height() || hr.width() != scale * lr.width() {
                    crate::imaging::crop_to_multiple(&hr, scale)?
                } else {
                    hr
                };
                pairs.push(TrainPair { name: name(f), lr, hr });
            }
            let mut set = TrainSet::new(pairs, scale, patch_lr);
            set.skipped.extend(missing);
            Ok(set)
        } else {
            let images = hr_files
                .iter()
                .map(|f| Ok((name(f), load_image(f)?)))
                .collect::<Result<Vec<_>>>()?;
            Self::from_hr(images, scale, patch_lr)
        }
    }
}

/// Uniformly random LR patch and the HR patch at exactly `scale` times its
/// coordinates.
pub fn sample_patch_pair<R: Rng>(
    pair: &TrainPair,
    scale: usize,
    patch_lr: usize,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let (h, w) = (pair.lr.height(), pair.lr.width());
    if h < patch_lr || w < patch_lr {
        return Err(Error::Data(format!(
            "{}: {h}x{w} LR image is smaller than the {patch_lr}px patch",
            pair.name
        )));
    }
    let y = rng.random_range(0..=h - patch_lr);
    let x = rng.random_range(0..=w - patch_lr);
    let lr = pair.lr.crop(y, x, patch_lr, patch_lr)?;
    let hr = pair.hr.crop(scale * y, scale * x, scale * patch_lr, scale * patch_lr)?;
    Ok((lr, hr))
}

/// One coin for a horizontal flip, one for a 90-degree rotation, applied
/// to both patches.
pub fn augment_pair<R: Rng>(lr: Image, hr: Image, rng: &mut R) -> (Image, Image) {
    let flip: bool = rng.random();
    let rot: bool = rng.random();
    let (mut lr, mut hr) = (lr, hr);
    if flip {
        lr = lr.flip_h();
        hr = hr.flip_h();
    }
    if rot {
        lr = lr.rot90();
        hr = hr.rot90();
    }
    (lr, hr)
}

/// Parameter update rule. Implementations must leave every parameter
/// untouched when they return an error.
pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut WeightStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()>;
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: WeightStore<T>,
    pub v: WeightStore<T>,
}

impl<T: Real> Adam<T> {
    /// Zeroed moment buffers mirroring `params`.
    pub fn new(params: &WeightStore<T>) -> Self {
        let zeros = |_: ()| {
            let mut s = WeightStore::new();
            for (k, t) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut WeightStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        adam_step(params, grads, self, lr)
    }
}

/// One Adam update. All gradients are checked before anything changes; a
/// non-finite gradient aborts the step and names the tensor.
pub fn adam_step<T: Real>(
    params: &mut WeightStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut Adam<T>,
    lr: f64,
) -> Result<()> {
    for (path, p) in params.iter() {
        let g = grads
            .get(path)
            .ok_or_else(|| Error::Usage(format!("no gradient for parameter `{path}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{path}` is {} but the parameter is {}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(path.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - state.beta1), T::from_f64(1.0 - state.beta2));
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(state.eps));
    for (path, p) in params.iter_mut() {
        let g = grads[path].data();
        let m = state.m.get_mut(path).expect("moment buffers mirror params").data_mut();
        let v = state.v.get_mut(path).expect("moment buffers mirror params").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Forward a batch on a fresh tape and return the mean L1 loss with the
/// gradient of every parameter.
pub fn loss_and_grads<T: Real>(
    store: &WeightStore<T>,
    cfg: &ModelConfig,
    input: Tensor<T>,
    target: Tensor<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let x = tape.input(input);
    let y = tape.input(target);
    let out = mprnet_forward(&tape, &params, cfg, &x, None)?;
    let loss = tape.l1_loss(out, y)?;
    let value = tape.value(loss).item().to_f64();
    let grads = tape.backward(loss)?;
    let map = params
        .into_iter()
        .map(|(k, v)| {
            let g = grads.get(v).expect("parameters require gradients").clone();
            (k, g)
        })
        .collect();
    Ok((value, map))
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub store: WeightStore<f32>,
    pub adam: Adam<f32>,
    /// Completed training steps.
    pub step: u64,
    pub rng: Xoshiro256StarStar,
}

/// A weight file, then `u64` Adam step count, `u32` moment-tensor count and
/// `m.<path>` / `v.<path>` tensor records, then the trailer: `u64` training
/// step, `u32` RNG state length and the state bytes; CRC32 of all of it.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = encode_weights(&ck.store, &ck.cfg);
    put_u64(&mut buf, ck.adam.t);
    put_u32(&mut buf, (ck.adam.m.len() + ck.adam.v.len()) as u32);
    for (prefix, s) in [("m", &ck.adam.m), ("v", &ck.adam.v)] {
        for (path, t) in s.iter() {
            put_tensor(&mut buf, &format!("{prefix}.{path}"), t);
        }
    }
    put_u64(&mut buf, ck.step);
    let state = ck.rng.to_bytes();
    put_u32(&mut buf, state.len() as u32);
    buf.extend_from_slice(&state);
    seal(&mut buf);
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, LoadError> {
    check_preamble(bytes)?;
    let body = unseal(bytes)?;
    let (store, cfg, n) = decode_weight_records(body)?;
    let mut r = Reader::new(&body[n..]);
    let crc = r.u32()?;
    if crc != crc32fast::hash(&body[..n]) {
        return Err(LoadError::Corrupt("weight section checksum mismatch".into()));
    }

    let t = r.u64()?;
    let count = r.u32()? as usize;
    let weights = WeightStore::<f32>::expected_layout(&cfg);
    let mut layout = BTreeMap::new();
    for (k, d) in &weights {
        layout.insert(format!("m.{k}"), *d);
        layout.insert(format!("v.{k}"), *d);
    }
    if count != layout.len() {
        return Err(LoadError::Corrupt(format!(
            "optimizer section has {count} tensors, expected {}",
            layout.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let (mut m, mut v) = (WeightStore::new(), WeightStore::new());
    for _ in 0..count {
        let (path, tensor) = r.checked_tensor(&layout, &mut seen)?;
        let (which, name) = path.split_at(2);
        if which == "m." {
            m.insert(name, tensor);
        } else {
            v.insert(name, tensor);
        }
    }

    let step = r.u64()?;
    let len = r.u32()? as usize;
    let rng = Xoshiro256StarStar::from_state_bytes(r.bytes(len)?)
        .ok_or_else(|| LoadError::Corrupt("invalid RNG state".into()))?;
    if r.remaining() != 0 {
        return Err(LoadError::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    let mut adam = Adam::new(&store);
    adam.t = t;
    adam.m = m;
    adam.v = v;
    Ok(Checkpoint {
        cfg,
        store,
        adam,
        step,
        rng,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Checkpoint file name for `step`.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.mprc")
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".mprc"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Training state: model, optimizer and the sampling RNG stream.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub train: TrainConfig,
    pub store: WeightStore<f32>,
    pub adam: Adam<f32>,
    pub rng: Xoshiro256StarStar,
    /// Completed steps.
    pub step: u64,
    /// `(step, loss)` for every step run by this trainer.
    pub losses: Vec<(u64, f64)>,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, train: TrainConfig, store: WeightStore<f32>) -> Result<Self> {
        cfg.validate()?;
        train.validate()?;
        crate::blocks::io::check_layout(&store, &cfg)?;
        Ok(Trainer {
            adam: Adam::new(&store),
            rng: Xoshiro256StarStar::seed_from_u64(train.seed),
            cfg,
            train,
            store,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn resume(ck: Checkpoint, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        Ok(Trainer {
            cfg: ck.cfg,
            train,
            store: ck.store,
            adam: ck.adam,
            rng: ck.rng,
            step: ck.step,
            losses: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    /// Draw and augment one batch.
    pub fn sample_batch(&mut self, set: &TrainSet) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if set.pairs.is_empty() {
            return Err(Error::Data("no training image is large enough for a patch".into()));
        }
        let (s, p) = (self.cfg.scale, self.train.patch_lr);
        let mut lrs = Vec::with_capacity(self.train.batch);
        let mut hrs = Vec::with_capacity(self.train.batch);
        for _ in 0..self.train.batch {
            let pair = &set.pairs[self.rng.random_range(0..set.pairs.len())];
            let (lr, hr) = sample_patch_pair(pair, s, p, &mut self.rng)?;
            let (lr, hr) = augment_pair(lr, hr, &mut self.rng);
            lrs.push(lr);
            hrs.push(hr);
        }
        Ok((Image::batch_to_tensor(&lrs)?, Image::batch_to_tensor(&hrs)?))
    }

    /// One optimization step; returns the batch loss before the update.
    pub fn step_once(&mut self, set: &TrainSet) -> Result<f64> {
        let (x, y) = self.sample_batch(set)?;
        let (loss, grads) = loss_and_grads(&self.store, &self.cfg, x, y)?;
        let lr = lr_at(self.step, &self.train);
        adam_step(&mut self.store, &grads, &mut self.adam, lr)?;
        self.step += 1;
        self.losses.push((self.step, loss));
        Ok(loss)
    }

    /// Train until `train.total_steps`, writing periodic checkpoints, the
    /// final weights (`weights.mprw`) and `loss.csv` into `out` when given.
    pub fn run(&mut self, set: &TrainSet, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.step < self.train.total_steps {
            self.step_once(set)?;
            if let Some(dir) = out {
                let every = self.train.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.train.total_steps {
                    save_checkpoint(&self.checkpoint(), &dir.join(checkpoint_name(self.step)))?;
                    append_losses(&dir.join("loss.csv"), &self.losses)?;
                    self.losses.clear();
                }
            }
        }
        if let Some(dir) = out {
            crate::blocks::io::save_weights(&self.store, &self.cfg, dir.join("weights.mprw"))?;
        }
        Ok(())
    }
}

/// Merge `new` rows into the loss CSV at `path`: rows at or beyond the first
/// new step (left over from an interrupted run) are replaced.
fn append_losses(path: &Path, new: &[(u64, f64)]) -> Result<()> {
    let first = new.first().map_or(u64::MAX, |r| r.0);
    let mut rows: Vec<(u64, f64)> = read_loss_csv(path)?.into_iter().filter(|r| r.0 < first).collect();
    rows.extend_from_slice(new);
    std::fs::write(path, loss_csv(&rows)).map_err(|e| Error::io(path, e))
}

/// `step,loss` CSV.
pub fn loss_csv(rows: &[(u64, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in rows {
        s += &format!("{step},{loss:e}\n");
    }
    s
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Data(format!("{}: malformed row `{l}`", path.display())))?;
            let step = a.parse().map_err(|_| Error::Data(format!("bad step `{a}`")))?;
            let loss = b.parse().map_err(|_| Error::Data(format!("bad loss `{b}`")))?;
            Ok((step, loss))
        })
        .collect()
}

/// Train from scratch, or from the latest checkpoint in `out` if one exists.
pub fn fit(
    cfg: &ModelConfig,
    train: &TrainConfig,
    init: WeightStore<f32>,
    set: &TrainSet,
    out: Option<&Path>,
) -> Result<Trainer> {
    let resume = match out {
        Some(dir) => latest_checkpoint(dir)?,
        None => None,
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            if &ck.cfg != cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different model config",
                    p.display()
                )));
            }
            Trainer::resume(ck, train.clone())?
        }
        None => Trainer::new(cfg.clone(), train.clone(), init)?,
    };
    trainer.run(set, out)?;
    Ok(trainer)
}

/// Run the network on one image; the result is clamped to `[0, 1]`.
pub fn super_resolve(store: &WeightStore<f32>, cfg: &ModelConfig, img: &Image) -> Result<Image> {
    let g = crate::autograd::Eager;
    let params = store.bind(&g);
    let out = mprnet_forward(&g, &params, cfg, &img.to_tensor(), None)?;
    Ok(Image::from_tensor(&out, 0)?.clamp01())
}

/// Mean Y-channel PSNR of the network and of bicubic upsampling over the
/// training images, both quantized to 8 bits, shaving `scale` pixels.
pub fn training_set_psnr(store: &WeightStore<f32>, cfg: &ModelConfig, set: &TrainSet) -> Result<(f64, f64)> {
    let (mut net, mut bic) = (0.0, 0.0);
    for p in &set.pairs {
        let sr = super_resolve(store, cfg, &p.lr)?.quantize();
        let up = upscale_bicubic(&p.lr, cfg.scale)?.quantize();
        net += y_metrics(&sr, &p.hr, cfg.scale)?.0;
        bic += y_metrics(&up, &p.hr, cfg.scale)?.0;
    }
    let n = set.pairs.len().max(1) as f64;
    Ok((net / n, bic / n))
}

/// One forward/backward pass of `cfg` on seeded random data. Returns the
/// tensors whose gradient is identically zero or non-finite (empty when
/// gradients reach every learnable tensor).
pub fn gradient_flow(cfg: &ModelConfig, seed: u64, h: usize, w: usize) -> Result<Vec<String>> {
    let store = crate::blocks::build_model(cfg, seed)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0xA5A5);
    let s = cfg.scale;
    let mut noise = |c, h, w| Tensor::from_fn(crate::tensor::Shape::new(2, c, h, w), |_, _, _, _| rng.random::<f32>());
    let x = noise(3, h, w);
    let y = noise(3, s * h, s * w);
    let (_, grads) = loss_and_grads(&store, cfg, x, y)?;
    Ok(grads
        .into_iter()
        .filter(|(_, g)| !g.all_finite() || g.max_abs() == 0.0)
        .map(|(k, _)| k)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::build_model;
    use crate::tensor::Shape;

    #[test]
    fn schedule_halves() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(c.halve_every - 1, &c), 1e-3);
        assert_eq!(lr_at(c.halve_every, &c), 5e-4);
        assert_eq!(lr_at(2 * c.halve_every + 1, &c), 2.5e-4);
    }

    fn one_param(v: Vec<f64>) -> WeightStore<f64> {
        let mut s = WeightStore::new();
        s.insert("p", Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v).unwrap());
        s
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut p = one_param(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let zero: BTreeMap<_, _> = [("p".to_string(), Tensor::zeros(Shape::new(1, 3, 1, 1)))].into();
        adam_step(&mut p, &zero, &mut adam, 1e-3).unwrap();
        assert_eq!(p, before);
        let g: BTreeMap<_, _> = [("p".to_string(), Tensor::full(Shape::new(1, 3, 1, 1), 0.7))].into();
        adam_step(&mut p, &g, &mut adam, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = one_param(vec![0.0, 0.0]);
        let mut adam = Adam::new(&p);
        let g: BTreeMap<_, _> = [(
            "p".to_string(),
            Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, -0.02]).unwrap(),
        )]
        .into();
        adam_step(&mut p, &g, &mut adam, 1e-3).unwrap();
        let d = p.get("p").unwrap().data();
        assert!((d[0] + 1e-3).abs() < 1e-9);
        assert!((d[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = one_param(vec![1.0]);
        p.insert("q", Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let g: BTreeMap<_, _> = [
            ("p".to_string(), Tensor::full(Shape::new(1, 1, 1, 1), 1.0)),
            ("q".to_string(), Tensor::full(Shape::new(1, 1, 1, 1), f64::NAN)),
        ]
        .into();
        match adam_step(&mut p, &g, &mut adam, 1e-3) {
            Err(Error::NonFinite(path)) => assert_eq!(path, "q"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(adam.t, 0);
    }

    fn toy_set() -> TrainSet {
        let hr =
            |k: usize| Image::from_fn(24, 24, 3, move |y, x, c| (((y / 3 + x / 4 + c + k) % 4) as f64) / 3.0).unwrap();
        TrainSet::from_hr((0..2).map(|k| (format!("{k}.png"), hr(k))).collect(), 2, 8).unwrap()
    }

    #[test]
    fn patches_correspond_and_repeat() {
        let set = toy_set();
        let mut a = Xoshiro256StarStar::seed_from_u64(4);
        let mut b = Xoshiro256StarStar::seed_from_u64(4);
        for _ in 0..10 {
            let (l1, h1) = sample_patch_pair(&set.pairs[0], 2, 8, &mut a).unwrap();
            let (l2, h2) = sample_patch_pair(&set.pairs[0], 2, 8, &mut b).unwrap();
            assert_eq!((l1.height(), h1.height()), (8, 16));
            assert_eq!((&l1, &h1), (&l2, &h2));
        }
    }

    #[test]
    fn undersized_images_are_skipped() {
        let small = Image::filled(10, 10, 3, 0.5).unwrap();
        let set = TrainSet::from_hr(vec![("s.png".into(), small)], 2, 8).unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.skipped, vec!["s.png".to_string()]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::tiny(8, 1, 1, 2);
        let tc = TrainConfig {
            patch_lr: 8,
            batch: 2,
            total_steps: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(cfg.clone(), tc, build_model(&cfg, 1).unwrap()).unwrap();
        let set = toy_set();
        t.step_once(&set).unwrap();
        let ck = t.checkpoint();
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
        let mut broken = bytes.clone();
        broken.truncate(bytes.len() - 3);
        assert!(decode_checkpoint(&broken).is_err());
    }

    #[test]
    fn run_config_accepts_plain_model_json() {
        let rc = RunConfig::from_json(r#"{"width":8,"n_rcb":1,"n_arb":1,"scale":2}"#).unwrap();
        assert_eq!(rc.train, TrainConfig::default());
        let rc = RunConfig::from_json(r#"{"width":8,"n_rcb":1,"n_arb":1,"scale":2,"train":{"batch":4}}"#).unwrap();
        assert_eq!(rc.train.batch, 4);
        assert_eq!(rc.train.patch_lr, 64);
    }
}
