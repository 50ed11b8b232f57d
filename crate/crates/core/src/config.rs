//! Run configuration: defaults, `key = value` files and the echo written
//! next to every run's artifacts.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Regime, SplitRatios};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_HORIZONS;
use crate::graph::DEFAULT_KAPPA;
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

pub const ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `model.ckpt` inside `out_dir`.
    pub checkpoint: Option<PathBuf>,
    pub time_of_day: bool,
    pub train_ratio: f64,
    pub val_ratio: f64,
    /// Gaussian kernel width; `None` uses the mean edge distance.
    pub sigma: Option<f64>,
    pub kappa: f64,
    pub window: usize,
    pub horizon: usize,
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub diffusion_steps: usize,
    pub temporal_kernel: usize,
    pub variant: Variant,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub patience: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub max_batches: Option<usize>,
    pub seed: u64,
    pub horizons: Vec<usize>,
    pub synth_regime: Regime,
    pub synth_nodes: usize,
    pub synth_steps: usize,
    /// Last observed step of the window used by `forecast`.
    pub forecast_at: Option<String>,
    /// Last observed steps of the windows exported by `export-pam`.
    pub pam_at: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        let t = TrainConfig::default();
        let split = SplitRatios::default();
        RunConfig {
            series: None,
            adjacency: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            time_of_day: false,
            train_ratio: split.train,
            val_ratio: split.val,
            sigma: None,
            kappa: DEFAULT_KAPPA,
            window: m.window,
            horizon: m.horizon,
            layers: m.layers,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            diffusion_steps: m.max_diffusion_step,
            temporal_kernel: m.temporal_kernel,
            variant: m.variant,
            lr: t.lr,
            lr_decay: t.lr_decay,
            decay_every: t.decay_every,
            epochs: t.max_epochs,
            patience: t.patience,
            tau: t.tau,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            max_batches: t.max_batches_per_epoch,
            seed: t.seed,
            horizons: DEFAULT_HORIZONS.to_vec(),
            synth_regime: Regime::Diurnal,
            synth_nodes: 16,
            synth_steps: 4000,
            forecast_at: None,
            pam_at: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Empty values unset optional keys.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "series" => self.series = parse_opt(key, v)?,
            "adjacency" => self.adjacency = parse_opt(key, v)?,
            "out_dir" => self.out_dir = parse(key, v)?,
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "time_of_day" => self.time_of_day = parse(key, v)?,
            "train_ratio" => self.train_ratio = parse(key, v)?,
            "val_ratio" => self.val_ratio = parse(key, v)?,
            "sigma" => self.sigma = parse_opt(key, v)?,
            "kappa" => self.kappa = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "temporal_kernel" => self.temporal_kernel = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "decay_every" => self.decay_every = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse_opt(key, v)?,
            "max_batches" => self.max_batches = parse_opt(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "horizons" => self.horizons = parse_list(key, v)?,
            "synth_regime" => self.synth_regime = v.parse()?,
            "synth_nodes" => self.synth_nodes = parse(key, v)?,
            "synth_steps" => self.synth_steps = parse(key, v)?,
            "forecast_at" => self.forecast_at = parse_opt(key, v)?,
            "pam_at" => {
                self.pam_at = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.display().to_string(), line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("series", show_path(&self.series)),
            ("adjacency", show_path(&self.adjacency)),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("time_of_day", self.time_of_day.to_string()),
            ("train_ratio", self.train_ratio.to_string()),
            ("val_ratio", self.val_ratio.to_string()),
            ("sigma", show_opt(&self.sigma)),
            ("kappa", self.kappa.to_string()),
            ("window", self.window.to_string()),
            ("horizon", self.horizon.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("temporal_kernel", self.temporal_kernel.to_string()),
            ("variant", self.variant.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("tau", self.tau.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip_norm", show_opt(&self.clip_norm)),
            ("max_batches", show_opt(&self.max_batches)),
            ("seed", self.seed.to_string()),
            ("horizons", self.horizons.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ("synth_regime", self.synth_regime.to_string()),
            ("synth_nodes", self.synth_nodes.to_string()),
            ("synth_steps", self.synth_steps.to_string()),
            ("forecast_at", show_opt(&self.forecast_at)),
            ("pam_at", self.pam_at.join(",")),
        ]
    }

    /// The text form read back by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Writes [`ECHO_FILE`] into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train_ratio, val: self.val_ratio, test: 1.0 - self.train_ratio - self.val_ratio }
    }

    pub fn model_config(&self, n_nodes: usize, input_dim: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            input_dim,
            output_dim: 1,
            window: self.window,
            horizon: self.horizon,
            layers: self.layers,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            max_diffusion_step: self.diffusion_steps,
            temporal_kernel: self.temporal_kernel,
            pam_channel: 0,
            variant: self.variant,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            max_epochs: self.epochs,
            patience: self.patience,
            tau: self.tau,
            seed: self.seed,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            max_batches_per_epoch: self.max_batches,
            ..TrainConfig::default()
        }
    }
}
