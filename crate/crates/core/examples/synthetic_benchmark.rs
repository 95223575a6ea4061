//! Generates the default synthetic benchmark and writes it to a directory.
//!
//! cargo run --example synthetic_benchmark -- /tmp/synth

use std::path::PathBuf;

use spil::synthgen::{export, generate, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    let spec = SynthSpec::default();
    let ds = generate(&spec)?;
    export(&ds, &out)?;
    let planted = ds.images.iter().filter(|im| im.gt_box.is_some()).count();
    println!(
        "{} queries, {} images ({} with a planted instance) -> {}",
        ds.queries.len(),
        ds.images.len(),
        planted,
        out.display()
    );
    Ok(())
}
