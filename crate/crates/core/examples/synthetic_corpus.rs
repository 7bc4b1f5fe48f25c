//! Generate a synthetic corpus from known parameters and write it in both
//! corpus formats, together with the truth manifest.
//!
//!     cargo run --release -p genhai --example synthetic_corpus -- /tmp/synth

use std::path::PathBuf;

use genhai::data::synthetic::{generate_synthetic, SyntheticSpec};
use genhai::data::{write_corpus, CorpusFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic-out".into()));
    std::fs::create_dir_all(&out)?;

    let spec = SyntheticSpec::default_spec(2_000, 7);
    let corpus = generate_synthetic(&spec)?;
    write_corpus(&out.join("corpus.jsonl"), &corpus.records, CorpusFormat::Jsonl)?;
    write_corpus(&out.join("corpus.csv"), &corpus.records, CorpusFormat::Csv)?;
    std::fs::write(out.join("truth.json"), serde_json::to_string_pretty(&corpus.manifest)?)?;

    let tests: usize = corpus.records.iter().map(|r| r.events.len()).sum();
    let positive = corpus.records.iter().filter(|r| r.events.iter().any(|e| e.result)).count();
    println!("records        {}", corpus.records.len());
    println!("tests          {tests}");
    println!("mean length    {:.3}", tests as f64 / corpus.records.len() as f64);
    println!("any positive   {:.3}", positive as f64 / corpus.records.len() as f64);
    println!("written to     {}", out.display());
    Ok(())
}
