//! Saves a trained model with its scaler and shows that the reloaded copy
//! scores identically.

use stseq2seq::data::{synth_generate, Regime, SplitRatios};
use stseq2seq::evaluation::{evaluate, ModelForecaster};
use stseq2seq::experiment::PreparedData;
use stseq2seq::training::{Checkpoint, TrainConfig, Trainer};
use stseq2seq::{ModelConfig, StSeq2Seq};

fn main() -> stseq2seq::Result<()> {
    let ds = synth_generate(6, 2500, 0, Regime::ChainLag)?;
    let data = PreparedData::new(&ds.table, SplitRatios::default(), 12, 12, 1)?;
    let mut config = ModelConfig::new(6);
    config.hidden = 8;
    config.embed_dim = 8;

    let mut model = StSeq2Seq::new(config.clone(), &ds.graph, 0)?;
    let tc = TrainConfig { max_epochs: 2, max_batches_per_epoch: Some(10), ..TrainConfig::default() };
    let fit = Trainer::new(&model, tc)?.fit(&mut model, &data.train, &data.val)?;

    let path = std::env::temp_dir().join("stseq2seq-example.ckpt");
    fit.best.clone().with_scaler(&data.scaler).save(&path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let ckpt = Checkpoint::load(&path)?;
    let mut restored = StSeq2Seq::new(config, &ds.graph, 123)?;
    restored.params_mut().load_from(&ckpt.params)?;
    let scaler = ckpt.scaler().expect("scaler saved")?;

    let a = evaluate(&ModelForecaster::new(&model, &data.scaler), &data.split.test, &[3, 12])?;
    let b = evaluate(&ModelForecaster::new(&restored, &scaler), &data.split.test, &[3, 12])?;
    println!("{}", a.to_text());
    println!("reloaded metrics identical: {}", a.rows == b.rows);
    std::fs::remove_file(&path)?;
    Ok(())
}
