//! End-to-end glue: split a table, fit a scaler, train a variant and score
//! it on the test segment.

use crate::data::{chronological_split, Scaler, SeriesTable, Split, SplitRatios};
use crate::error::Result;
use crate::evaluation::{evaluate, ForecastReport, ModelForecaster, RowSumStats};
use crate::graph::TrafficGraph;
use crate::model::{ModelConfig, StSeq2Seq};
use crate::training::{prepare_samples, FitReport, Sample, TrainConfig, Trainer};

/// Windows and normalised samples for one table.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: Split,
    pub scaler: Scaler,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl PreparedData {
    /// The scaler is fitted on the training segment only.
    pub fn new(table: &SeriesTable, ratios: SplitRatios, window: usize, horizon: usize, output_dim: usize) -> Result<Self> {
        let split = chronological_split(table, ratios, window, horizon)?;
        let scaler = Scaler::fit(table, split.ranges[0].clone())?;
        let train = prepare_samples(&split.train, &scaler, output_dim)?;
        let val = prepare_samples(&split.val, &scaler, output_dim)?;
        Ok(PreparedData { split, scaler, train, val })
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub model: StSeq2Seq,
    pub fit: FitReport,
    pub report: ForecastReport,
    pub row_sums: RowSumStats,
}

pub fn train_and_evaluate(
    data: &PreparedData,
    graph: &TrafficGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    horizons: &[usize],
) -> Result<Outcome> {
    let mut model = StSeq2Seq::new(model_config, graph, train_config.seed)?;
    let mut trainer = Trainer::new(&model, train_config)?;
    let fit = trainer.fit(&mut model, &data.train, &data.val)?;
    let forecaster = ModelForecaster::new(&model, &data.scaler);
    let report = evaluate(&forecaster, &data.split.test, horizons)?;
    let row_sums = forecaster.row_stats();
    Ok(Outcome { model, fit, report, row_sums })
}
