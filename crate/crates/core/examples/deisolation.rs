//! Q4: for a previously MRSA-positive patient whose last test was negative,
//! the probability the next test is a negative NARE with nothing positive
//! afterwards. The rejection estimator over whole stays gives the same
//! answer for the first-test case.
//!
//!     cargo run --release -p genhai --example deisolation

use genhai::data::synthetic::SyntheticSpec;
use genhai::patient_model::{AdmissionFeatures, TestTimeFeatures};
use genhai::queries::{DeisolationPredicate, QueryEngine, QuerySpec, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = SyntheticSpec::default_spec(0, 0).registry()?;
    let engine = QueryEngine::new(&registry, 2)?;
    let alpha = AdmissionFeatures {
        age_years: 64.0,
        mrsa_positive_past_90d: true,
        ..Default::default()
    };
    let spec = QuerySpec::deisolation(alpha.clone(), TestTimeFeatures::default(), 0.0).with_runs(5_000, 20, 12);
    for p in engine.sweep(&spec, SweepAxis::TauP, &[0.0, 1.0, 2.0, 3.0, 5.0, 7.0])? {
        println!("days since negative test {:>3}: {:.4}", p.value, p.result.estimate);
    }

    let mut all_neg = spec.clone();
    all_neg.predicate = DeisolationPredicate::AllNegative;
    println!("all-negative variant at tau 0: {:.4}", engine.estimate(&all_neg)?.estimate);
    Ok(())
}
