//! Loss, scheduled sampling, Adam, learning-rate decay, early stopping and
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Scaler, Window};
use crate::decoder::Feed;
use crate::error::{Error, Result};
use crate::model::{stack, StSeq2Seq};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Masked mean absolute error. `mask` holds 1 for valid entries and 0
/// elsewhere; without a mask every entry counts.
pub fn mae_loss(tape: &mut Tape, prediction: Var, target: Var, mask: Option<&Tensor>) -> Result<Var> {
    let (ps, ts) = (tape.value(prediction).shape().to_vec(), tape.value(target).shape().to_vec());
    if ps != ts {
        return Err(Error::dim("mae_loss", format!("prediction {ps:?} vs target {ts:?}")));
    }
    let diff = tape.sub(prediction, target)?;
    let abs = tape.abs(diff);
    let (abs, count) = match mask {
        Some(m) => {
            if m.shape() != ps.as_slice() {
                return Err(Error::dim("mae_loss", format!("mask {:?} vs values {ps:?}", m.shape())));
            }
            let count = m.data().iter().filter(|&&v| v != 0.0).count();
            let mv = tape.constant(m.clone());
            (tape.mul(abs, mv)?, count)
        }
        None => (abs, ps.iter().product()),
    };
    if count == 0 {
        return Err(Error::Degenerate("every loss entry is masked".into()));
    }
    let total = tape.sum(abs);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Inverse-sigmoid decay of the ground-truth feeding probability.
pub fn sampling_probability(iteration: u64, tau: f64) -> f64 {
    tau / (tau + (iteration as f64 / tau).exp())
}

/// Adam first and second moments, aligned with a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} parameters, {} gradients, {} moments", store.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, ((name, p), g)) in store.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::dim("adam_step", format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, p) in store.values_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// How the decoder is fed during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeedPolicy {
    /// ε follows [`sampling_probability`] of the global iteration.
    Scheduled,
    /// Constant ε.
    Fixed(f64),
    TeacherForcing,
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub feed: FeedPolicy,
    /// Caps the optimizer steps per epoch; `None` sweeps every window.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            lr_decay: 0.5,
            decay_every: 10,
            max_epochs: 100,
            patience: 10,
            tau: 3000.0,
            seed: 0,
            batch_size: 32,
            clip_norm: Some(5.0),
            feed: FeedPolicy::Scheduled,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr > 0.0, "lr must be positive"),
            (self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must be in (0, 1]"),
            (self.decay_every >= 1, "decay_every must be at least 1"),
            (self.tau >= 1.0, "tau must be at least 1"),
            (self.patience >= 1, "patience must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.clip_norm.map_or(true, |c| c > 0.0), "clip_norm must be positive"),
            (
                !matches!(self.feed, FeedPolicy::Fixed(e) if !(0.0..=1.0).contains(&e)),
                "fixed epsilon must be in [0, 1]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// A normalised training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub start: usize,
    /// `[P, N, C]`
    pub x: Tensor,
    /// `[Q, N, output_dim]`
    pub y: Tensor,
    /// 1 where the raw target is observed.
    pub mask: Tensor,
}

pub fn prepare_samples(windows: &[Window], scaler: &Scaler, output_dim: usize) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|w| {
            let x = scaler.apply(&w.x)?;
            let y = scaler.apply(&w.y)?.slice(2, 0, output_dim)?;
            let observed = w.y.slice(2, 0, 1)?.map(|v| if v == 0.0 { 0.0 } else { 1.0 });
            let mask = Tensor::concat(&vec![&observed; output_dim], 2)?;
            Ok(Sample { start: w.start, x, y, mask })
        })
        .collect()
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one validation loss; returns `(improved, stop)`.
    pub fn update(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// ε at the end of the epoch.
    pub epsilon: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_loss", "epsilon"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.epsilon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub stopped_early: bool,
}

/// Drives optimisation of one model.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &StSeq2Seq, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = epoch_rng(config.seed, 0);
        Ok(Trainer { adam: AdamState::new(model.params()), rng, iteration: 0, epoch: 0, config })
    }

    /// Continues from a checkpoint taken by [`Trainer::checkpoint`].
    pub fn resume(model: &mut StSeq2Seq, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        model.params_mut().load_from(&ckpt.params)?;
        let mut t = Trainer::new(model, config)?;
        if let Some(m) = &ckpt.moments {
            t.adam = m.clone();
        }
        t.iteration = ckpt.iteration;
        t.epoch = ckpt.epoch;
        t.rng = epoch_rng(t.config.seed, t.epoch);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at_epoch(self.epoch)
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Ground-truth probability for the current iteration.
    pub fn epsilon(&self) -> f64 {
        match self.config.feed {
            FeedPolicy::Scheduled => sampling_probability(self.iteration, self.config.tau),
            FeedPolicy::Fixed(e) => e,
            FeedPolicy::TeacherForcing => 1.0,
            FeedPolicy::Free => 0.0,
        }
    }

    /// Batch loss and per-parameter gradients without updating anything.
    pub fn loss_and_grads(&mut self, model: &StSeq2Seq, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let x = stack(&batch.iter().map(|s| &s.x).collect::<Vec<_>>())?;
        let y = stack(&batch.iter().map(|s| &s.y).collect::<Vec<_>>())?;
        let mask = stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let params = model.params().bind(&mut tape);
        let eps = self.epsilon();
        let mut feed = match self.config.feed {
            FeedPolicy::Free => Feed::Free,
            FeedPolicy::TeacherForcing => Feed::TeacherForcing,
            _ => Feed::Scheduled { epsilon: eps, rng: &mut self.rng },
        };
        let pass = model.forward(&mut tape, &params, &x, &mut feed, Some(&y))?;
        let target = tape.constant(y);
        let loss = mae_loss(&mut tape, pass.prediction, target, Some(&mask))?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, params.collect_grads(&grads, model.params())))
    }

    /// One optimizer step; returns the batch loss before the update.
    /// `batch_index` only labels errors.
    pub fn step(&mut self, model: &mut StSeq2Seq, batch: &[&Sample], batch_index: usize) -> Result<f64> {
        let (loss, mut grads) = self.loss_and_grads(model, batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.epoch, batch: batch_index, value: loss });
        }
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = self.lr();
        adam_step(model.params_mut(), &grads, &mut self.adam, lr)?;
        self.iteration += 1;
        Ok(loss)
    }

    /// One pass over `train` in shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut StSeq2Seq, train: &[Sample]) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        if let Some(cap) = self.config.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            total += self.step(model, &batch, b)?;
        }
        Ok(total / batches.len() as f64)
    }

    /// Trains with early stopping; the model ends up holding the best
    /// validation parameters.
    pub fn fit(&mut self, model: &mut StSeq2Seq, train: &[Sample], val: &[Sample]) -> Result<FitReport> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be nonempty".into()));
        }
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut history = Vec::new();
        let mut best = self.checkpoint(model, f64::INFINITY);
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            let lr = self.lr();
            let train_loss = self.train_epoch(model, train)?;
            let val_loss = validation_loss(model, val)?;
            history.push(EpochRecord { epoch: self.epoch, lr, train_loss, val_loss, epsilon: self.epsilon() });
            self.epoch += 1;
            self.rng = epoch_rng(self.config.seed, self.epoch);
            let (improved, stop) = stopper.update(val_loss);
            if improved {
                best = self.checkpoint(model, val_loss);
            }
            if stop {
                stopped_early = true;
                break;
            }
        }
        model.params_mut().load_from(&best.params)?;
        Ok(FitReport { history, best, stopped_early })
    }

    pub fn checkpoint(&self, model: &StSeq2Seq, best_val: f64) -> Checkpoint {
        Checkpoint {
            params: model.params().clone(),
            moments: Some(self.adam.clone()),
            epoch: self.epoch,
            best_val,
            iteration: self.iteration,
            extras: IndexMap::new(),
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Windows per inference batch.
pub const EVAL_CHUNK: usize = 64;

/// Free-running masked MAE (normalised space) averaged over valid entries
/// of all samples.
pub fn validation_loss(model: &StSeq2Seq, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = stack(&chunk.iter().map(|s| &s.x).collect::<Vec<_>>())?;
        let y = model.predict_batch(&x)?.y;
        let truth = chunk.iter().flat_map(|s| s.y.data());
        let mask = chunk.iter().flat_map(|s| s.mask.data());
        for ((p, t), m) in y.data().iter().zip(truth).zip(mask) {
            total += m * (p - t).abs();
            count += m;
        }
    }
    if count == 0.0 {
        return Err(Error::Degenerate("validation set has no observed targets".into()));
    }
    Ok(total / count)
}

const MAGIC: &[u8; 4] = b"STSQ";
pub const CHECKPOINT_VERSION: u16 = 1;
const M_PREFIX: &str = "__adam_m__/";
const V_PREFIX: &str = "__adam_v__/";
const META_PREFIX: &str = "__meta__/";

/// Saved training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub moments: Option<AdamState>,
    pub epoch: usize,
    pub best_val: f64,
    pub iteration: u64,
    /// Additional named tensors (scaler statistics, ...).
    pub extras: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(params: ParamStore) -> Self {
        Checkpoint { params, moments: None, epoch: 0, best_val: f64::INFINITY, iteration: 0, extras: IndexMap::new() }
    }

    pub fn with_scaler(mut self, scaler: &Scaler) -> Self {
        self.extras.insert("scaler_mean".into(), Tensor::vector(scaler.mean()));
        self.extras.insert("scaler_std".into(), Tensor::vector(scaler.std()));
        self
    }

    pub fn scaler(&self) -> Option<Result<Scaler>> {
        let mean = self.extras.get("scaler_mean")?;
        let std = self.extras.get("scaler_std")?;
        Some(Scaler::from_stats(mean.data().to_vec(), std.data().to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(m) = &self.moments {
            for (i, (name, _)) in self.params.iter().enumerate() {
                entries.push((format!("{M_PREFIX}{name}"), &m.m[i]));
                entries.push((format!("{V_PREFIX}{name}"), &m.v[i]));
            }
        }
        let meta = [
            ("epoch", Tensor::scalar(self.epoch as f64)),
            ("best_val", Tensor::scalar(self.best_val)),
            ("iteration", Tensor::scalar(self.iteration as f64)),
            ("adam_t", Tensor::scalar(self.moments.as_ref().map_or(-1.0, |m| m.t as f64))),
        ];
        for (name, t) in &meta {
            entries.push((format!("{META_PREFIX}{name}"), t));
        }
        for (name, t) in &self.extras {
            entries.push((format!("{META_PREFIX}{name}"), t));
        }

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        let file = File::open(path).map_err(|e| bad(format!("cannot open: {e}")))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated header".into()))?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r).map_err(|_| bad("truncated header".into()))?;
        let mut params = ParamStore::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut meta = IndexMap::new();
        for i in 0..count {
            let (name, t) = read_entry(&mut r).map_err(|e| bad(format!("entry {i}: {e}")))?;
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                v.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(META_PREFIX) {
                meta.insert(n.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let mut scalar = |key: &str| -> Result<f64> {
            meta.shift_remove(key).map(|t| t.data()[0]).ok_or_else(|| bad(format!("missing {key}")))
        };
        let epoch = scalar("epoch")? as usize;
        let best_val = scalar("best_val")?;
        let iteration = scalar("iteration")? as u64;
        let adam_t = scalar("adam_t")?;
        let moments = if adam_t >= 0.0 {
            let mut ms = Vec::with_capacity(params.len());
            let mut vs = Vec::with_capacity(params.len());
            for (name, _) in params.iter() {
                ms.push(m.shift_remove(name).ok_or_else(|| bad(format!("missing first moment of {name}")))?);
                vs.push(v.shift_remove(name).ok_or_else(|| bad(format!("missing second moment of {name}")))?);
            }
            Some(AdamState { m: ms, v: vs, t: adam_t as u64 })
        } else {
            None
        };
        Ok(Checkpoint { params, moments, epoch, best_val, iteration, extras: meta })
    }
}

fn read_array<const K: usize>(r: &mut impl Read) -> std::io::Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_entry(r: &mut impl Read) -> std::result::Result<(String, Tensor), String> {
    let io = |e: std::io::Error| format!("truncated ({e})");
    let len = read_u32(r).map_err(io)? as usize;
    if len > 1 << 16 {
        return Err(format!("implausible name length {len}"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(io)?;
    let name = String::from_utf8(name).map_err(|_| "name is not UTF-8".to_string())?;
    let rank = read_u32(r).map_err(io)? as usize;
    if rank > 8 {
        return Err(format!("{name}: implausible rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r).map_err(io)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f64::from_le_bytes(read_array(r).map_err(io)?));
    }
    let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
    Ok((name, t))
}
