//! Look-back attention weights (decode step x encoder step) for a few test
//! windows of a trained model.

use stseq2seq::data::{synth_generate, Regime, SplitRatios};
use stseq2seq::experiment::{train_and_evaluate, PreparedData};
use stseq2seq::training::TrainConfig;
use stseq2seq::ModelConfig;

fn main() -> stseq2seq::Result<()> {
    let ds = synth_generate(8, 3000, 0, Regime::Diurnal)?;
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 12, 12, 1)?;
    let mut config = ModelConfig::new(8);
    config.hidden = 8;
    config.embed_dim = 8;
    let tc = TrainConfig { max_epochs: 3, max_batches_per_epoch: Some(40), tau: 100.0, ..TrainConfig::default() };
    let out = train_and_evaluate(&data, &ds.graph, config, tc, &[12])?;

    for w in [0, data.split.test.len() / 2] {
        let window = &data.split.test[w];
        let p = out.model.predict(&data.scaler.apply(&window.x)?)?;
        let alpha = p.attention.expect("attention decoder").alpha;
        println!("window ending {}", ds.table.timestamps()[window.start + 11]);
        for q in [0, 5, 11] {
            let row: Vec<String> = (0..12).map(|j| format!("{:.2}", alpha.at(&[q, j]))).collect();
            println!("  step {:>2}: {}", q + 1, row.join(" "));
        }
    }
    Ok(())
}
