use std::time::Instant;

use stseq2seq::data::{synth_generate, Regime, SplitRatios};
use stseq2seq::experiment::{train_and_evaluate, PreparedData};
use stseq2seq::training::TrainConfig;
use stseq2seq::{ModelConfig, Variant};

fn main() -> stseq2seq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let regime: Regime = args.first().map(String::as_str).unwrap_or("chain-lag").parse()?;
    let variants: Vec<Variant> = args
        .get(1)
        .map(String::as_str)
        .unwrap_or("identity,geo-only")
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let batches: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(20);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);
    let tau: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(3000.0);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let tod = args.get(8).is_some_and(|s| s == "tod");
    let decay_every: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(10);

    for seed in 0..seeds {
        let ds = synth_generate(16, 4000, seed, regime)?;
        let table = if tod { ds.table.with_time_of_day() } else { ds.table.clone() };
        let data = PreparedData::new(&table, SplitRatios::default(), 12, 12, 1)?;
        for &variant in &variants {
            let mut mc = ModelConfig::new(16);
            mc.hidden = hidden;
            mc.embed_dim = hidden;
            mc.variant = variant;
            mc.input_dim = table.channels();
            let tc = TrainConfig {
                seed,
                max_epochs: epochs,
                max_batches_per_epoch: Some(batches),
                tau,
                lr,
                decay_every,
                ..TrainConfig::default()
            };
            let began = Instant::now();
            let out = train_and_evaluate(&data, &ds.graph, mc, tc, &[3, 6, 12])?;
            let maes: Vec<String> = out.report.rows.iter().map(|r| format!("{:.4}", r.metrics.mae)).collect();
            let mean = out.report.rows.iter().map(|r| r.metrics.mae).sum::<f64>() / 3.0;
            println!(
                "{regime} seed {seed} {variant:<10} mae[3/6/12] {} mean {mean:.4} val {:.4} ({:.1}s)",
                maes.join(" "),
                out.fit.best.best_val,
                began.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
