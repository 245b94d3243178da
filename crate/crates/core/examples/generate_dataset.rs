//! Writes a small multi-connector dataset (PGM images, JSONL labels).
//!
//! ```bash
//! cargo run --release --example generate_dataset -- out/data [samples_per_connector]
//! ```

use std::path::PathBuf;

use siamese_servo::sampler::{generate_dataset, load_dataset, pair_stream, DatasetManifest};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/data".into()));
    let n = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let manifest = DatasetManifest::multi_connector(&["A1", "B2", "C3"], n, 42);
    generate_dataset(&manifest, &dir)?;

    let ds = load_dataset(&dir)?;
    for c in &ds.connectors {
        println!("{}: {} samples ({} train)", c.id, c.samples.len(), c.splits.train.len());
    }
    let samples = ds.connectors[0].subset(&ds.connectors[0].splits.train);
    for pair in pair_stream(&samples, 3, 1)? {
        println!("pair ({}, {}) label {}", pair.index_a, pair.index_b, serde_json::to_string(&pair.label)?);
    }
    println!("written to {}", dir.display());
    Ok(())
}
