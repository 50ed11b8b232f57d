//! Trains a small model on twin-pattern data and compares it with the
//! historical average.

use stseq2seq::data::{synth_generate, Regime, SplitRatios};
use stseq2seq::evaluation::{evaluate, HistoricalAverage};
use stseq2seq::experiment::{train_and_evaluate, PreparedData};
use stseq2seq::training::TrainConfig;
use stseq2seq::ModelConfig;

fn main() -> stseq2seq::Result<()> {
    let ds = synth_generate(10, 3000, 1, Regime::TwinPattern)?;
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 12, 12, 1)?;

    let mut model = ModelConfig::new(10);
    model.hidden = 16;
    model.embed_dim = 16;
    let train = TrainConfig { max_epochs: 4, max_batches_per_epoch: Some(40), tau: 100.0, ..TrainConfig::default() };

    let out = train_and_evaluate(&data, &ds.graph, model, train, &[3, 6, 12])?;
    for e in &out.fit.history {
        println!("epoch {:>2}  lr {:.4}  train {:.4}  val {:.4}  eps {:.3}", e.epoch, e.lr, e.train_loss, e.val_loss, e.epsilon);
    }
    println!("\n{}", out.report.to_text());

    let ha = evaluate(&HistoricalAverage::new(&ds.table), &data.split.test, &[3, 6, 12])?;
    println!("{}", ha.to_text());
    Ok(())
}
