//! Writes the three synthetic regimes as series/adjacency CSV pairs.
//!
//! cargo run --example gen_synth -- [out_dir]

use std::path::PathBuf;

use stseq2seq::data::{synth_generate, Regime};

fn main() -> stseq2seq::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "synth".into()).into();
    for regime in [Regime::Diurnal, Regime::ChainLag, Regime::TwinPattern] {
        let ds = synth_generate(8, 2016, 0, regime)?;
        let dir = out.join(regime.to_string());
        ds.write(&dir)?;
        print!("{regime}: {} nodes x {} steps, {} edges -> {}", ds.table.n_nodes(), ds.table.len(), ds.edges.len(), dir.display());
        match ds.twins {
            Some((a, b)) => println!(" (twins {a} and {b})"),
            None => println!(),
        }
    }
    Ok(())
}
