//! Command-line front end shared by the `stseq2seq` binary and the
//! examples.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{chronological_split, load_series_csv, parse_timestamp, synth_generate, LoadOptions, SeriesTable};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, HistoricalAverage, ModelForecaster};
use crate::experiment::PreparedData;
use crate::graph::{build_graph_from_distances, read_edges_csv, write_matrix_csv, TrafficGraph};
use crate::model::StSeq2Seq;
use crate::tensor::Tensor;
use crate::training::{write_history_csv, Checkpoint, Trainer};

#[derive(Parser, Debug)]
#[command(name = "stseq2seq", version, about = "Spatiotemporal graph sequence-to-sequence traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file with one `key = value` per line; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for parameter init, batch shuffling, scheduled sampling and
    /// synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory receiving all artifacts, including the effective config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Model variant: full, identity, geo-only, self-adpt, no-dec, no-attn,
    /// gru-baseline, or a spatial and a decoder ablation joined by `+`
    /// (e.g. geo-only+no-attn).
    #[arg(long, global = true)]
    pub variant: Option<String>,

    /// Comma-separated horizons in steps to report, e.g. 3,6,12.
    #[arg(long, global = true, value_name = "LIST")]
    pub horizons: Option<String>,

    /// Series CSV with header `timestamp,node_0,...`.
    #[arg(long, global = true, value_name = "FILE")]
    pub series: Option<PathBuf>,

    /// Adjacency CSV with header `from,to,distance`.
    #[arg(long, global = true, value_name = "FILE")]
    pub adjacency: Option<PathBuf>,

    /// Checkpoint path (default: <out-dir>/model.ckpt).
    #[arg(long, global = true, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,

    /// Any other config key, e.g. `--set hidden=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Train on the series and save the best-validation checkpoint and the
    /// loss history.
    Train,
    /// Score a checkpoint (and the historical average) on the test segment.
    Evaluate,
    /// Predict the Q steps following a timestamp.
    Forecast {
        /// Last observed timestamp of the input window.
        #[arg(long)]
        at: Option<String>,
    },
    /// Write pattern-aware adjacency and attention matrices for chosen
    /// windows, plus the static adjacency and transition matrices.
    ExportPam {
        /// Last observed timestamp of a window; repeatable. Defaults to the
        /// end of the series.
        #[arg(long)]
        at: Vec<String>,
    },
    /// Write a synthetic series and its road graph.
    GenSynth {
        /// diurnal, chain-lag or twin-pattern.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::Usage(format!("config file {} does not exist", path.display())));
                }
                RunConfig::from_file(path)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("variant", self.variant.clone()),
            ("horizons", self.horizons.clone()),
            ("series", self.series.as_ref().map(|p| p.display().to_string())),
            ("adjacency", self.adjacency.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        match &self.command {
            Command::Forecast { at: Some(at) } => cfg.forecast_at = Some(at.clone()),
            Command::ExportPam { at } if !at.is_empty() => cfg.pam_at = at.clone(),
            Command::GenSynth { regime, nodes, steps } => {
                if let Some(r) = regime {
                    cfg.set("synth_regime", r)?;
                }
                cfg.synth_nodes = nodes.unwrap_or(cfg.synth_nodes);
                cfg.synth_steps = steps.unwrap_or(cfg.synth_steps);
            }
            _ => {}
        }
        Ok(cfg)
    }
}

/// Runs one command; returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.resolve()?;
    // usage errors (unknown variant, bad horizons) surface before any work
    if cfg.horizons.is_empty() || cfg.horizons.contains(&0) {
        return Err(Error::Usage("horizons must be positive step counts".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let out = match &cli.command {
        Command::Train => train(&cfg)?,
        Command::Evaluate => evaluate_cmd(&cfg)?,
        Command::Forecast { .. } => forecast(&cfg)?,
        Command::ExportPam { .. } => export_pam(&cfg)?,
        Command::GenSynth { .. } => gen_synth(&cfg)?,
    };
    cfg.echo()?;
    Ok(out)
}

fn existing(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| Error::Usage(format!("{key} is not set (use --{key} or `{key} = ...`)")))?;
    if !p.exists() {
        return Err(Error::Usage(format!("{key} file {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(SeriesTable, TrafficGraph)> {
    let series = existing(&cfg.series, "series")?;
    let adjacency = existing(&cfg.adjacency, "adjacency")?;
    let table = load_series_csv(&series, LoadOptions { time_of_day: cfg.time_of_day })?;
    let edges = read_edges_csv(&adjacency)?;
    let graph = build_graph_from_distances(&edges, table.n_nodes(), cfg.sigma, cfg.kappa)?;
    Ok((table, graph))
}

/// Rebuilds the configured model and loads the checkpoint into it.
pub fn load_model(cfg: &RunConfig, table: &SeriesTable, graph: &TrafficGraph) -> Result<(StSeq2Seq, Checkpoint)> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist; run `train` first", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    let mut model = StSeq2Seq::new(cfg.model_config(table.n_nodes(), table.channels()), graph, cfg.seed)?;
    model.params_mut().load_from(&ckpt.params).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        msg: format!("does not match variant {} with hidden {}: {e}", cfg.variant, cfg.hidden),
    })?;
    Ok((model, ckpt))
}

fn train(cfg: &RunConfig) -> Result<String> {
    let (table, graph) = load_dataset(cfg)?;
    let data = PreparedData::new(&table, cfg.split_ratios(), cfg.window, cfg.horizon, 1)?;
    let mut model = StSeq2Seq::new(cfg.model_config(table.n_nodes(), table.channels()), &graph, cfg.seed)?;
    let mut trainer = Trainer::new(&model, cfg.train_config())?;
    let fit = trainer.fit(&mut model, &data.train, &data.val)?;
    let ckpt_path = cfg.checkpoint_path();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fit.best.clone().with_scaler(&data.scaler).save(&ckpt_path)?;
    let history_path = cfg.out_dir.join("history.csv");
    write_history_csv(&history_path, &fit.history)?;

    let mut out = String::new();
    for r in &fit.history {
        writeln!(out, "epoch {:>3}  lr {:.6}  train {:.5}  val {:.5}", r.epoch, r.lr, r.train_loss, r.val_loss).unwrap();
    }
    writeln!(
        out,
        "best validation loss {:.5}{}; checkpoint {}, history {}",
        fit.best.best_val,
        if fit.stopped_early { " (stopped early)" } else { "" },
        ckpt_path.display(),
        history_path.display()
    )
    .unwrap();
    Ok(out)
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<String> {
    let (table, graph) = load_dataset(cfg)?;
    let (model, ckpt) = load_model(cfg, &table, &graph)?;
    let scaler = ckpt
        .scaler()
        .ok_or_else(|| Error::Checkpoint { path: cfg.checkpoint_path(), msg: "no scaler statistics stored".into() })??;
    let split = chronological_split(&table, cfg.split_ratios(), cfg.window, cfg.horizon)?;

    let forecaster = ModelForecaster::new(&model, &scaler);
    let report = evaluate(&forecaster, &split.test, &cfg.horizons)?;
    report.write_csv(&cfg.out_dir.join("report.csv"))?;
    let mut text = report.to_text();
    let rows = forecaster.row_stats();
    writeln!(text, "row-sum audit: {} rows, {} violations, max deviation {:.3e}", rows.rows, rows.violations, rows.max_deviation)
        .unwrap();

    match evaluate(&HistoricalAverage::new(&table), &split.test, &cfg.horizons) {
        Ok(ha) => {
            ha.write_csv(&cfg.out_dir.join("report_ha.csv"))?;
            text.push('\n');
            text.push_str(&ha.to_text());
        }
        Err(Error::Degenerate(msg)) => writeln!(text, "HA skipped: {msg}").unwrap(),
        Err(e) => return Err(e),
    }
    fs::write(cfg.out_dir.join("report.txt"), &text)?;
    Ok(text)
}

/// Input window `[P, N, C]` whose last step is `at`.
fn window_ending_at(table: &SeriesTable, at: &str, p: usize) -> Result<(usize, Tensor)> {
    let ts = parse_timestamp(at).ok_or_else(|| Error::Usage(format!("cannot parse timestamp {at:?}")))?;
    let t = table.index_of(ts).ok_or_else(|| Error::Input(format!("timestamp {at} is not in the series")))?;
    if t + 1 < p {
        return Err(Error::InsufficientData { needed: p, have: t + 1 });
    }
    Ok((t, table.values().slice(0, t + 1 - p, p)?))
}

fn forecast(cfg: &RunConfig) -> Result<String> {
    let (table, graph) = load_dataset(cfg)?;
    let (model, ckpt) = load_model(cfg, &table, &graph)?;
    let scaler = ckpt
        .scaler()
        .ok_or_else(|| Error::Checkpoint { path: cfg.checkpoint_path(), msg: "no scaler statistics stored".into() })??;
    let last = table.timestamps().last().ok_or_else(|| Error::Input("empty series".into()))?;
    let at = cfg.forecast_at.clone().unwrap_or_else(|| last.format(crate::data::TIMESTAMP_FORMAT).to_string());
    let (t, x) = window_ending_at(&table, &at, cfg.window)?;
    let pred = model.predict(&scaler.apply(&x)?)?;
    let y = scaler.invert(&pred.y.slice(2, 0, 1)?)?;
    let step = table.interval().ok_or_else(|| Error::Input("series needs two rows to know its interval".into()))?;
    let start = table.timestamps()[t];

    let path = cfg.out_dir.join("forecast.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..table.n_nodes()).map(|i| format!("node_{i}")));
    w.write_record(&header)?;
    let n = table.n_nodes();
    for q in 0..cfg.horizon {
        let ts = start + step * (q as i32 + 1);
        let mut row = vec![ts.format(crate::data::TIMESTAMP_FORMAT).to_string()];
        row.extend(y.data()[q * n..(q + 1) * n].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(format!("{}-step forecast after {at} written to {}\n", cfg.horizon, path.display()))
}

fn export_pam(cfg: &RunConfig) -> Result<String> {
    let (table, graph) = load_dataset(cfg)?;
    let (model, ckpt) = load_model(cfg, &table, &graph)?;
    let scaler = ckpt
        .scaler()
        .ok_or_else(|| Error::Checkpoint { path: cfg.checkpoint_path(), msg: "no scaler statistics stored".into() })??;
    let dir = &cfg.out_dir;
    let mut out = String::new();
    for (name, m) in [("adjacency", graph.adjacency()), ("m_forward", graph.m_forward()), ("m_backward", graph.m_backward())] {
        let path = dir.join(format!("{name}.csv"));
        write_matrix_csv(&path, m)?;
        writeln!(out, "wrote {}", path.display()).unwrap();
    }

    let stamps = if cfg.pam_at.is_empty() {
        let last = table.timestamps().last().ok_or_else(|| Error::Input("empty series".into()))?;
        vec![last.format(crate::data::TIMESTAMP_FORMAT).to_string()]
    } else {
        cfg.pam_at.clone()
    };
    let mut index = csv::Writer::from_path(dir.join("windows.csv"))?;
    index.write_record(["index", "timestamp"])?;
    for (k, at) in stamps.iter().enumerate() {
        let (_, x) = window_ending_at(&table, at, cfg.window)?;
        let pred = model.predict(&scaler.apply(&x)?)?;
        index.write_record([k.to_string(), at.clone()])?;
        if let Some(a) = &pred.adjacency {
            let path = dir.join(format!("pam_{k:03}.csv"));
            write_matrix_csv(&path, a)?;
            writeln!(out, "wrote {}", path.display()).unwrap();
        }
        if let Some(att) = &pred.attention {
            let path = dir.join(format!("attention_{k:03}.csv"));
            write_matrix_csv(&path, &att.alpha)?;
            writeln!(out, "wrote {}", path.display()).unwrap();
        }
    }
    index.flush()?;
    if model.pattern_embedder().is_none() {
        writeln!(out, "variant {} has no pattern-aware adjacency; only static matrices written", cfg.variant).unwrap();
    }
    Ok(out)
}

fn gen_synth(cfg: &RunConfig) -> Result<String> {
    let ds = synth_generate(cfg.synth_nodes, cfg.synth_steps, cfg.seed, cfg.synth_regime)?;
    ds.write(&cfg.out_dir)?;
    Ok(format!(
        "{} series with {} nodes x {} steps written to {}\n",
        cfg.synth_regime,
        cfg.synth_nodes,
        cfg.synth_steps,
        Path::new(&cfg.out_dir).display()
    ))
}
