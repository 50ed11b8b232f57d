//! Masked error metrics, the historical-average baseline and per-horizon
//! forecast reports.

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{Datelike, Timelike};

use crate::data::{Scaler, SeriesTable, Window};
use crate::error::{Error, Result};
use crate::model::{stack, StSeq2Seq};
use crate::training::EVAL_CHUNK;
use crate::tensor::Tensor;

pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];

/// MAE, RMSE and MAPE (as a fraction) over the valid entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
}

/// Running sums behind [`Metrics`]. Entries are valid when the mask is
/// nonzero; MAPE further skips zero targets.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    n: usize,
    n_ape: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, y: &Tensor, y_hat: &Tensor, mask: Option<&Tensor>) -> Result<()> {
        if y.shape() != y_hat.shape() || mask.is_some_and(|m| m.shape() != y.shape()) {
            return Err(Error::dim(
                "metrics",
                format!("y {:?}, prediction {:?}, mask {:?}", y.shape(), y_hat.shape(), mask.map(Tensor::shape)),
            ));
        }
        for (i, (&t, &p)) in y.data().iter().zip(y_hat.data()).enumerate() {
            if mask.is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let e = p - t;
            self.abs += e.abs();
            self.sq += e * e;
            self.n += 1;
            if t != 0.0 {
                self.ape += (e / t).abs();
                self.n_ape += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 || self.n_ape == 0 {
            return Err(Error::Degenerate("no valid entries to score".into()));
        }
        let n = self.n as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: self.ape / self.n_ape as f64,
            count: self.n,
        })
    }
}

pub fn metrics(y: &Tensor, y_hat: &Tensor, mask: Option<&Tensor>) -> Result<Metrics> {
    let mut acc = MetricAccumulator::default();
    acc.add(y, y_hat, mask)?;
    acc.finish()
}

/// 1 where the value is observed (nonzero), 0 at the missing sentinel.
pub fn observed_mask(y: &Tensor) -> Tensor {
    y.map(|v| if v == 0.0 { 0.0 } else { 1.0 })
}

type SeasonKey = (u32, u32);

/// Seasonal mean over all earlier observations with the same weekday and
/// time of day.
#[derive(Clone, Debug)]
pub struct HistoricalAverage<'a> {
    table: &'a SeriesTable,
    seasons: HashMap<SeasonKey, Vec<usize>>,
}

impl<'a> HistoricalAverage<'a> {
    pub fn new(table: &'a SeriesTable) -> Self {
        let mut seasons: HashMap<SeasonKey, Vec<usize>> = HashMap::new();
        for (t, ts) in table.timestamps().iter().enumerate() {
            seasons.entry(season_key(ts)).or_default().push(t);
        }
        HistoricalAverage { table, seasons }
    }

    /// `[N]` prediction for table row `t` using only rows before it.
    pub fn predict_at(&self, t: usize) -> Result<Vec<f64>> {
        let ts = self.table.timestamps().get(t).ok_or_else(|| Error::Input(format!("time index {t} out of range")))?;
        let rows = &self.seasons[&season_key(ts)];
        let prior = &rows[..rows.partition_point(|&r| r < t)];
        (0..self.table.n_nodes())
            .map(|node| {
                let (sum, n) = prior
                    .iter()
                    .map(|&r| self.table.value(r, node, 0))
                    .filter(|&v| v != 0.0)
                    .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                if n == 0 {
                    Err(Error::Degenerate(format!("no earlier same-season observation for node {node} at {ts}")))
                } else {
                    Ok(sum / n as f64)
                }
            })
            .collect()
    }
}

fn season_key(ts: &chrono::NaiveDateTime) -> SeasonKey {
    (ts.weekday().num_days_from_monday(), ts.hour() * 60 + ts.minute())
}

/// `[len, N]` historical-average predictions for the given table rows.
pub fn historical_average(table: &SeriesTable, query: &[usize]) -> Result<Tensor> {
    let ha = HistoricalAverage::new(table);
    let mut data = Vec::with_capacity(query.len() * table.n_nodes());
    for &t in query {
        data.extend(ha.predict_at(t)?);
    }
    Tensor::new([query.len(), table.n_nodes()], data)
}

/// Produces raw-scale `[Q, N, 1]` forecasts of the primary channel.
pub trait Forecaster {
    fn name(&self) -> String;
    fn forecast(&self, window: &Window) -> Result<Tensor>;

    fn forecast_batch(&self, windows: &[&Window]) -> Result<Vec<Tensor>> {
        windows.iter().map(|w| self.forecast(w)).collect()
    }
}

impl Forecaster for HistoricalAverage<'_> {
    fn name(&self) -> String {
        "HA".into()
    }

    fn forecast(&self, window: &Window) -> Result<Tensor> {
        let (q, n) = (window.y.shape()[0], window.y.shape()[1]);
        let mut data = Vec::with_capacity(q * n);
        for h in 1..=q {
            data.extend(self.predict_at(window.target_index(h))?);
        }
        Tensor::new([q, n, 1], data)
    }
}

/// Largest deviation of a row sum from 1 seen so far, with row counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RowSumStats {
    pub rows: usize,
    pub violations: usize,
    pub max_deviation: f64,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl RowSumStats {
    pub fn record(&mut self, matrix: &Tensor) {
        let width = *matrix.shape().last().unwrap();
        for row in matrix.data().chunks(width) {
            let dev = (row.iter().sum::<f64>() - 1.0).abs();
            self.rows += 1;
            if !(dev <= ROW_SUM_TOLERANCE) {
                self.violations += 1;
            }
            self.max_deviation = self.max_deviation.max(dev);
        }
    }
}

/// Free-running model forecasts, de-normalised. Also audits the rows of
/// every pattern-aware adjacency and attention matrix it produces.
pub struct ModelForecaster<'a> {
    model: &'a StSeq2Seq,
    scaler: &'a Scaler,
    rows: Cell<RowSumStats>,
}

impl<'a> ModelForecaster<'a> {
    pub fn new(model: &'a StSeq2Seq, scaler: &'a Scaler) -> Self {
        ModelForecaster { model, scaler, rows: Cell::new(RowSumStats::default()) }
    }

    pub fn row_stats(&self) -> RowSumStats {
        self.rows.get()
    }
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> String {
        self.model.config().variant.to_string()
    }

    fn forecast(&self, window: &Window) -> Result<Tensor> {
        Ok(self.forecast_batch(&[window])?.remove(0))
    }

    fn forecast_batch(&self, windows: &[&Window]) -> Result<Vec<Tensor>> {
        let xs: Vec<Tensor> = windows.iter().map(|w| self.scaler.apply(&w.x)).collect::<Result<_>>()?;
        let p = self.model.predict_batch(&stack(&xs.iter().collect::<Vec<_>>())?)?;
        let mut stats = self.rows.get();
        if let Some(a) = &p.adjacency {
            stats.record(a);
        }
        if let Some(att) = &p.attention {
            stats.record(&att.alpha);
        }
        self.rows.set(stats);
        let y = self.scaler.invert(&p.y.slice(3, 0, 1)?)?;
        let per = y.shape()[1..].to_vec();
        (0..windows.len()).map(|i| y.slice(0, i, 1)?.reshape(per.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub forecaster: String,
    pub rows: Vec<HorizonMetrics>,
    pub runtime: Duration,
}

impl ForecastReport {
    pub fn get(&self, horizon: usize) -> Option<&Metrics> {
        self.rows.iter().find(|r| r.horizon == horizon).map(|r| &r.metrics)
    }

    /// Aligned columns, MAPE in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "forecaster: {}", self.forecaster);
        let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>9} {:>9}", "horizon", "mae", "rmse", "mape", "count");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:>8} {:>10.4} {:>10.4} {:>8.2}% {:>9}",
                r.horizon,
                m.mae,
                m.rmse,
                m.mape * 100.0,
                m.count
            );
        }
        let _ = writeln!(s, "runtime: {:.3}s", self.runtime.as_secs_f64());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["horizon", "mae", "rmse", "mape", "count"])?;
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.horizon.to_string(),
                m.mae.to_string(),
                m.rmse.to_string(),
                m.mape.to_string(),
                m.count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores `forecaster` at each horizon. Every horizon is scored on the
/// same set of target time steps: those reachable at every requested
/// horizon from the given windows.
pub fn evaluate(forecaster: &dyn Forecaster, windows: &[Window], horizons: &[usize]) -> Result<ForecastReport> {
    let began = Instant::now();
    let q = windows.first().ok_or_else(|| Error::Degenerate("no windows to evaluate".into()))?.y.shape()[0];
    if horizons.is_empty() {
        return Err(Error::Config("no horizons requested".into()));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > q) {
        return Err(Error::Config(format!("horizon {h} outside 1..={q}")));
    }
    let mut common: Option<BTreeSet<usize>> = None;
    for &h in horizons {
        let targets: BTreeSet<usize> = windows.iter().map(|w| w.target_index(h)).collect();
        common = Some(match common {
            None => targets,
            Some(c) => c.intersection(&targets).copied().collect(),
        });
    }
    let common = common.unwrap();

    let mut acc = vec![MetricAccumulator::default(); horizons.len()];
    let used: Vec<&Window> = windows
        .iter()
        .filter(|w| horizons.iter().any(|&h| common.contains(&w.target_index(h))))
        .collect();
    for chunk in used.chunks(EVAL_CHUNK) {
        let preds = forecaster.forecast_batch(chunk)?;
        for (w, pred) in chunk.iter().zip(preds) {
            for (k, &h) in horizons.iter().enumerate() {
                if !common.contains(&w.target_index(h)) {
                    continue;
                }
                let y = w.y.slice(0, h - 1, 1)?.slice(2, 0, 1)?;
                let p = pred.slice(0, h - 1, 1)?;
                acc[k].add(&y, &p, Some(&observed_mask(&y)))?;
            }
        }
    }
    let rows = horizons
        .iter()
        .zip(&acc)
        .map(|(&horizon, a)| Ok(HorizonMetrics { horizon, metrics: a.finish()? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastReport { forecaster: forecaster.name(), rows, runtime: began.elapsed() })
}
