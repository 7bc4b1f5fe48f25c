//! Held-out evaluation: per-sub-program NLL and perplexity, classifier
//! metrics and calibration for the later-test result model. Compares the
//! true-parameter registry with one fitted on a training split.
//!
//!     cargo run --release -p genhai --example evaluate_holdout

use genhai::data::synthetic::{generate_synthetic, SyntheticSpec};
use genhai::data::{extract_training_tables, split};
use genhai::eval::{evaluate, Predictive, DEFAULT_BINS, DEFAULT_THRESHOLD};
use genhai::svi::{fit_all, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec::default_spec(6_000, 5);
    let corpus = generate_synthetic(&spec)?;
    let (train, test) = split(&corpus.records, 0.8, 2);
    let held_out = extract_training_tables(&test);

    let config = TrainConfig {
        steps: 1500,
        ..TrainConfig::default()
    };
    let (fitted, _) = fit_all(&extract_training_tables(&train), &config, 2)?;
    let truth = spec.registry()?;

    for (label, registry) in [("fitted", &fitted), ("truth", &truth)] {
        let report = evaluate(registry, &held_out, DEFAULT_THRESHOLD, DEFAULT_BINS, Predictive::default())?;
        println!("== {label}\n{}", report.to_text());
    }
    Ok(())
}
