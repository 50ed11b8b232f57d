//! Pattern-aware adjacency of a trained model on twin-pattern data. The
//! twins sit at opposite ends of the road chain, yet should weight each
//! other more than most nodes do.

use stseq2seq::data::{synth_generate, Regime, SplitRatios};
use stseq2seq::experiment::{train_and_evaluate, PreparedData};
use stseq2seq::graph::write_matrix_csv;
use stseq2seq::training::TrainConfig;
use stseq2seq::ModelConfig;

fn main() -> stseq2seq::Result<()> {
    let ds = synth_generate(8, 3000, 0, Regime::TwinPattern)?;
    let (a, b) = ds.twins.expect("twin regime plants a pair");
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 12, 12, 1)?;
    let mut config = ModelConfig::new(8);
    config.hidden = 16;
    config.embed_dim = 16;
    let tc = TrainConfig { max_epochs: 3, max_batches_per_epoch: Some(40), tau: 100.0, ..TrainConfig::default() };
    let out = train_and_evaluate(&data, &ds.graph, config, tc, &[12])?;

    let x = data.scaler.apply(&data.split.test[0].x)?;
    let pam = out.model.predict(&x)?.adjacency.expect("full variant builds a PAM");
    for i in 0..8 {
        let row: Vec<String> = (0..8).map(|j| format!("{:.3}", pam.at(&[i, j]))).collect();
        println!("{i}: {}", row.join(" "));
    }
    let rank = |i: usize, j: usize| (0..8).filter(|&k| k != i && pam.at(&[i, k]) > pam.at(&[i, j])).count();
    println!("node {b} ranks {} among node {a}'s neighbours by PAM weight", rank(a, b) + 1);

    let path = std::env::temp_dir().join("pam_example.csv");
    write_matrix_csv(&path, &pam)?;
    println!("wrote {}", path.display());
    Ok(())
}
