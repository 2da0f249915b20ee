//! Build a small instructed-video dataset and print its composition.
//!
//!     cargo run --example generate_dataset -- [OUT_DIR]

use std::collections::BTreeMap;

use tvp::synthdata::{generate_dataset, write_dataset, DatasetConfig};

fn main() -> tvp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/demo_dataset".into());
    let cfg = DatasetConfig { count: 120, seed: 7, ..Default::default() };
    let ds = generate_dataset(&cfg)?;
    write_dataset(std::path::Path::new(&out), &ds, &cfg)?;

    let mut verbs: BTreeMap<&str, usize> = BTreeMap::new();
    for clip in &ds.train {
        *verbs.entry(clip.program.verb.key()).or_default() += 1;
    }
    println!("train clips: {}", ds.train.len());
    println!("val clips:   {}", ds.val.len());
    println!("verb histogram (train): {verbs:?}");
    println!("held-out combos (val only):");
    for (v, c, s) in &ds.held_out {
        println!("  {} / {} / {}", v.key(), c.word(), s.word());
    }
    println!("example instruction: {:?}", ds.train[0].instruction);
    println!("wrote dataset to {out}");
    Ok(())
}
