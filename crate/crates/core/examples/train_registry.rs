//! Fit all thirteen sub-programs on a synthetic corpus, save the model
//! artifact, load it back and compare a few posterior means to the truth.
//!
//!     cargo run --release -p genhai --example train_registry

use genhai::data::artifact::{load_model, save_model, Provenance};
use genhai::data::synthetic::{canonicalize, generate_synthetic, SyntheticSpec};
use genhai::data::{extract_training_tables, split};
use genhai::patient_model::SubProgramId;
use genhai::svi::{fit_all, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec::recovery(5_000, 11);
    let corpus = generate_synthetic(&spec)?;
    let (train, _) = split(&corpus.records, 0.8, 1);
    let tables = extract_training_tables(&train);

    let config = TrainConfig {
        steps: 1500,
        seed: 3,
        ..TrainConfig::default()
    };
    let (registry, traces) = fit_all(&tables, &config, 2)?;
    for t in &traces {
        println!("{:<14} final ELBO {:>12.2}", t.subprogram.name(), t.final_smoothed());
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.json");
    let artifact = save_model(&registry, Provenance { seed: Some(config.seed), ..Default::default() }, &path)?;
    let loaded = load_model(&path)?;
    assert!(registry.iter().zip(loaded.iter()).all(|(a, b)| a == b));
    println!("artifact {} bytes, hash {}", std::fs::metadata(&path)?.len(), &artifact.provenance_hash[..16]);

    for id in [SubProgramId::R1, SubProgramId::Cont, SubProgramId::DelayPos] {
        let fit = canonicalize(id, loaded.get(id).posterior.mean());
        let truth = canonicalize(id, spec.theta(id));
        let worst = fit.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{:<14} largest |fit - truth| {worst:.3}", id.name());
    }
    Ok(())
}
