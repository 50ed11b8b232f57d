//! Series ingestion, normalisation, windowing, splitting and synthetic
//! traffic generation.
//!
//! Series are stored as `[T, N, C]` tensors. Channel 0 is the traffic
//! variable; a value of exactly `0` there marks a missing observation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{build_graph_from_distances, write_edges_csv, Edge, TrafficGraph, DEFAULT_KAPPA};
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Regularly sampled multi-node series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<NaiveDateTime>,
    values: Tensor,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != timestamps.len() {
            return Err(Error::dim(
                "series_table",
                format!("{} timestamps for values {:?}", timestamps.len(), values.shape()),
            ));
        }
        if let Some((i, _)) = timestamps.windows(2).enumerate().find(|(_, w)| w[1] <= w[0]) {
            return Err(Error::Input(format!("timestamps not strictly increasing at row {}", i + 1)));
        }
        if timestamps.len() > 2 {
            let step = timestamps[1] - timestamps[0];
            if let Some((i, _)) = timestamps.windows(2).enumerate().find(|(_, w)| w[1] - w[0] != step) {
                return Err(Error::Input(format!("inconsistent sampling interval at row {}", i + 1)));
            }
        }
        Ok(SeriesTable { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    /// `[T, N, C]`
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn interval(&self) -> Option<Duration> {
        (self.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn value(&self, t: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n_nodes(), self.channels());
        self.values.data()[(t * n + node) * c + channel]
    }

    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        self.timestamps.binary_search(&ts).ok()
    }

    pub fn slice_time(&self, range: Range<usize>) -> Result<SeriesTable> {
        let values = self.values.slice(0, range.start, range.len())?;
        Ok(SeriesTable { timestamps: self.timestamps[range].to_vec(), values })
    }

    /// Appends minutes-since-midnight / 1440 as an extra channel.
    pub fn with_time_of_day(&self) -> SeriesTable {
        let (t, n) = (self.len(), self.n_nodes());
        let tod: Vec<f64> = self
            .timestamps
            .iter()
            .flat_map(|ts| std::iter::repeat(time_of_day(ts)).take(n))
            .collect();
        let tod = Tensor::from_parts(vec![t, n, 1], tod);
        let values = Tensor::concat(&[&self.values, &tod], 2).expect("matching leading extents");
        SeriesTable { timestamps: self.timestamps.clone(), values }
    }

    /// Writes the primary channel as `timestamp,node_0,...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.n_nodes()).map(|i| format!("node_{i}")).collect();
        writeln!(w, "timestamp,{}", header.join(","))?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            write!(w, "{}", ts.format(TIMESTAMP_FORMAT))?;
            for node in 0..self.n_nodes() {
                write!(w, ",{}", self.value(t, node, 0))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn time_of_day(ts: &NaiveDateTime) -> f64 {
    (ts.hour() * 60 + ts.minute()) as f64 / 1440.0
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    pub time_of_day: bool,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .ok()
}

/// Reads `timestamp,node_0,...,node_{N-1}`.
pub fn load_series_csv(path: &Path, options: LoadOptions) -> Result<SeriesTable> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let parse_err = |line: usize, msg: String| Error::Parse { path: shown.clone(), line, msg };
    if headers.len() < 2 || &headers[0] != "timestamp" {
        return Err(parse_err(1, "expected header timestamp,node_0,...".into()));
    }
    let n = headers.len() - 1;
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != n + 1 {
            return Err(parse_err(line, format!("expected {} fields, got {}", n + 1, record.len())));
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", &record[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(parse_err(line, format!("timestamp {ts} does not increase")));
            }
            if timestamps.len() >= 2 && ts - prev != timestamps[1] - timestamps[0] {
                return Err(parse_err(line, format!("interval at {ts} differs from the first interval")));
            }
        }
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("bad value {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let t = timestamps.len();
    let table = SeriesTable::new(timestamps, Tensor::new([t, n, 1], values)?)?;
    Ok(if options.time_of_day { table.with_time_of_day() } else { table })
}

/// Paired history/target sample; `start` is the table index of the first
/// history step.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    /// `[P, N, C]`
    pub x: Tensor,
    /// `[Q, N, C]`
    pub y: Tensor,
}

impl Window {
    /// Table index of horizon step `h` (1-based).
    pub fn target_index(&self, h: usize) -> usize {
        self.start + self.x.shape()[0] + h - 1
    }
}

/// Stride-1 windows over the whole table.
pub fn make_windows(table: &SeriesTable, history: usize, horizon: usize) -> Result<Vec<Window>> {
    windows_in(table, 0..table.len(), history, horizon)
}

fn windows_in(table: &SeriesTable, range: Range<usize>, history: usize, horizon: usize) -> Result<Vec<Window>> {
    let span = history + horizon;
    if range.len() < span {
        return Err(Error::InsufficientData { needed: span, have: range.len() });
    }
    let v = table.values();
    (range.start..=range.end - span)
        .map(|s| {
            Ok(Window { start: s, x: v.slice(0, s, history)?, y: v.slice(0, s + history, horizon)? })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, val: 0.1, test: 0.2 }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    /// Time-index ranges of the three segments.
    pub ranges: [Range<usize>; 3],
}

/// Cuts the time axis into contiguous train/val/test segments first and
/// windows each segment separately, so no window crosses a boundary.
pub fn chronological_split(table: &SeriesTable, ratios: SplitRatios, history: usize, horizon: usize) -> Result<Split> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(*r >= 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {train}/{val}/{test} must be nonnegative and sum to 1")));
    }
    let t = table.len();
    let train_end = (t as f64 * train).round() as usize;
    let val_end = ((t as f64 * (train + val)).round() as usize).clamp(train_end, t);
    let ranges = [0..train_end, train_end..val_end, val_end..t];
    let names = ["train", "validation", "test"];
    let mut parts = Vec::with_capacity(3);
    for (range, name) in ranges.iter().zip(names) {
        let w = windows_in(table, range.clone(), history, horizon).map_err(|_| {
            Error::Config(format!(
                "{name} split has {} steps, fewer than history + horizon = {}",
                range.len(),
                history + horizon
            ))
        })?;
        parts.push(w);
    }
    let test_w = parts.pop().unwrap();
    let val_w = parts.pop().unwrap();
    let train_w = parts.pop().unwrap();
    Ok(Split { train: train_w, val: val_w, test: test_w, ranges })
}

/// Per-channel z-score normaliser. Missing primary-channel entries are
/// ignored when fitting and map to 0 (the mean) when applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
    fit_range: Range<usize>,
}

impl Scaler {
    /// Fits on the rows of `table` inside `range` only.
    pub fn fit(table: &SeriesTable, range: Range<usize>) -> Result<Self> {
        let c = table.channels();
        let n = table.n_nodes();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = vec![0usize; c];
        for t in range.clone() {
            for node in 0..n {
                if table.value(t, node, 0) == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let v = table.value(t, node, ch);
                    sum[ch] += v;
                    sq[ch] += v * v;
                    count[ch] += 1;
                }
            }
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            if count[ch] == 0 {
                return Err(Error::Degenerate(format!("channel {ch} has no observed values to fit")));
            }
            mean[ch] = sum[ch] / count[ch] as f64;
            std[ch] = (sq[ch] / count[ch] as f64 - mean[ch] * mean[ch]).max(0.0).sqrt();
            if !(std[ch] > 1e-12) {
                return Err(Error::Degenerate(format!("channel {ch} is constant over the fit range")));
            }
        }
        Ok(Scaler { mean, std, fit_range: range })
    }

    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("scaler needs one positive std per channel".into()));
        }
        Ok(Scaler { mean, std, fit_range: 0..0 })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn fit_range(&self) -> Range<usize> {
        self.fit_range.clone()
    }

    /// Normalises a `[.., C]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().unwrap();
        if c != self.mean.len() {
            return Err(Error::dim("scaler", format!("{c} channels, scaler fitted on {}", self.mean.len())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let missing = row[0] == 0.0;
            for (ch, v) in row.iter_mut().enumerate() {
                *v = if missing && ch == 0 { 0.0 } else { (*v - self.mean[ch]) / self.std[ch] };
            }
        }
        Ok(out)
    }

    /// De-normalises a tensor whose last axis holds the leading channels.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.shape().last().unwrap();
        if c > self.mean.len() {
            return Err(Error::dim("scaler", format!("{c} channels, scaler fitted on {}", self.mean.len())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[ch] + self.mean[ch];
            }
        }
        Ok(out)
    }
}

/// Synthetic traffic regimes with planted structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Daily speed curve with rush-hour dips, per-node offsets and
    /// autocorrelated noise.
    Diurnal,
    /// A single source series propagates down a chain, one step per hop.
    ChainLag,
    /// The two ends of a chain carry the same series, one delayed.
    TwinPattern,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diurnal" => Ok(Regime::Diurnal),
            "chain-lag" => Ok(Regime::ChainLag),
            "twin-pattern" => Ok(Regime::TwinPattern),
            other => Err(Error::Usage(format!("unknown regime {other:?}"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Diurnal => "diurnal",
            Regime::ChainLag => "chain-lag",
            Regime::TwinPattern => "twin-pattern",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub interval_minutes: i64,
    /// Delay of the second twin behind the first.
    pub twin_lag: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { interval_minutes: 5, twin_lag: 6 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub table: SeriesTable,
    pub edges: Vec<Edge>,
    pub graph: TrafficGraph,
    /// `(leader, follower)` in the twin-pattern regime.
    pub twins: Option<(usize, usize)>,
}

impl SynthDataset {
    /// Writes `series.csv` and `adjacency.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.table.write_csv(&dir.join("series.csv"))?;
        write_edges_csv(&dir.join("adjacency.csv"), &self.edges)
    }
}

pub fn synth_generate(n_nodes: usize, steps: usize, seed: u64, regime: Regime) -> Result<SynthDataset> {
    synth_generate_with(n_nodes, steps, seed, regime, SynthOptions::default())
}

pub fn synth_generate_with(
    n_nodes: usize,
    steps: usize,
    seed: u64,
    regime: Regime,
    options: SynthOptions,
) -> Result<SynthDataset> {
    if n_nodes < 2 {
        return Err(Error::Input("synthetic data needs at least two nodes".into()));
    }
    if steps == 0 {
        return Err(Error::Input("synthetic data needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let step = Duration::minutes(options.interval_minutes);
    let timestamps: Vec<NaiveDateTime> = (0..steps).map(|t| start + step * t as i32).collect();
    let tods: Vec<f64> = timestamps.iter().map(time_of_day).collect();

    let mut values = vec![0.0; steps * n_nodes];
    // directed road: traffic flows from node i to node i + 1
    let chain: Vec<Edge> = (0..n_nodes - 1).map(|i| Edge { from: i, to: i + 1, distance: 1.0 }).collect();
    let mut twins = None;

    match regime {
        Regime::Diurnal => {
            for node in 0..n_nodes {
                let offset = rng.gen_range(-5.0..5.0);
                let depth = rng.gen_range(0.7..1.3);
                let phase = rng.gen_range(-0.02..0.02);
                let noise = ar1(&mut rng, steps, 0.9, 0.4);
                for t in 0..steps {
                    values[t * n_nodes + node] = clamp_speed(day_curve(tods[t] + phase, depth) + offset + noise[t]);
                }
            }
        }
        Regime::ChainLag => {
            let source = volatile_series(&mut rng, steps + n_nodes, &tods_extended(&tods, n_nodes), 0.95, 2.5);
            let jitter = Normal::new(0.0, 0.3).unwrap();
            for node in 0..n_nodes {
                for t in 0..steps {
                    // node i at time t repeats the source at t - i
                    let v = source[t + n_nodes - node] + jitter.sample(&mut rng);
                    values[t * n_nodes + node] = clamp_speed(v);
                }
            }
        }
        Regime::TwinPattern => {
            let lag = options.twin_lag;
            let follower = n_nodes - 1;
            for node in 0..follower {
                let series = if node == 0 {
                    volatile_series(&mut rng, steps + lag, &tods_extended(&tods, lag), 0.95, 3.0)
                } else {
                    let offset = rng.gen_range(-5.0..5.0);
                    let noise = ar1(&mut rng, steps + lag, 0.8, 0.5);
                    let ext = tods_extended(&tods, lag);
                    (0..steps + lag).map(|t| day_curve(ext[t], 1.0) + offset + noise[t]).collect()
                };
                for t in 0..steps {
                    values[t * n_nodes + node] = clamp_speed(series[t + lag]);
                }
                if node == 0 {
                    for t in 0..steps {
                        values[t * n_nodes + follower] = clamp_speed(series[t]);
                    }
                }
            }
            twins = Some((0, follower));
        }
    }

    let table = SeriesTable::new(timestamps, Tensor::new([steps, n_nodes, 1], values)?)?;
    let graph = build_graph_from_distances(&chain, n_nodes, None, DEFAULT_KAPPA)?;
    Ok(SynthDataset { table, edges: chain, graph, twins })
}

/// Time-of-day values for `extra` steps before the first timestamp
/// followed by the given ones.
fn tods_extended(tods: &[f64], extra: usize) -> Vec<f64> {
    let step = if tods.len() > 1 { (tods[1] - tods[0]).rem_euclid(1.0) } else { 5.0 / 1440.0 };
    (0..extra)
        .map(|i| (tods[0] - step * (extra - i) as f64).rem_euclid(1.0))
        .chain(tods.iter().copied())
        .collect()
}

/// Free-flow speed with a sinusoidal daily swing and morning/evening dips.
fn day_curve(tod: f64, depth: f64) -> f64 {
    let tod = tod.rem_euclid(1.0);
    let swing = 4.0 * (2.0 * std::f64::consts::PI * (tod - 0.25)).sin();
    let dip = |centre: f64, width: f64, size: f64| size * (-((tod - centre) / width).powi(2)).exp();
    60.0 + swing - depth * (dip(8.0 / 24.0, 0.05, 18.0) + dip(17.5 / 24.0, 0.06, 22.0))
}

/// Day curve plus a strongly autocorrelated component with large shocks.
fn volatile_series(rng: &mut ChaCha8Rng, len: usize, tods: &[f64], phi: f64, sigma: f64) -> Vec<f64> {
    let noise = ar1(rng, len, phi, sigma);
    (0..len).map(|t| day_curve(tods[t], 0.6) + noise[t]).collect()
}

fn ar1(rng: &mut ChaCha8Rng, len: usize, phi: f64, sigma: f64) -> Vec<f64> {
    let shock = Normal::new(0.0, sigma).unwrap();
    let mut out = Vec::with_capacity(len);
    let mut state = 0.0;
    for _ in 0..len {
        state = phi * state + shock.sample(rng);
        out.push(state);
    }
    out
}

/// Keeps generated speeds strictly positive so they never hit the
/// missing-value sentinel.
fn clamp_speed(v: f64) -> f64 {
    v.clamp(1.0, 90.0)
}
