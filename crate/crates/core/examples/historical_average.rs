//! The historical-average baseline: same-weekday, same-time mean over all
//! earlier observations. Its error does not depend on the horizon.

use stseq2seq::data::{chronological_split, synth_generate, Regime, SplitRatios};
use stseq2seq::evaluation::{evaluate, HistoricalAverage};

fn main() -> stseq2seq::Result<()> {
    let ds = synth_generate(6, 4 * 2016, 2, Regime::Diurnal)?;
    let split = chronological_split(&ds.table, SplitRatios::default(), 12, 12)?;
    let ha = HistoricalAverage::new(&ds.table);

    let t = split.test[0].target_index(1);
    let truth: Vec<f64> = (0..6).map(|n| ds.table.value(t, n, 0)).collect();
    println!("at {}: truth {:.1?}", ds.table.timestamps()[t], truth);
    println!("{:>24}  HA    {:.1?}", "", ha.predict_at(t)?);

    let report = evaluate(&ha, &split.test, &[1, 3, 6, 12])?;
    println!("\n{}", report.to_text());
    Ok(())
}
