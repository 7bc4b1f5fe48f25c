//! Q2: risk of a positive test within X more days after a negative first
//! test, swept over X with common random numbers. Prints CSV.
//!
//!     cargo run --release -p genhai --example extended_stay_sweep

use genhai::data::synthetic::SyntheticSpec;
use genhai::patient_model::{AdmissionFeatures, TestTimeFeatures};
use genhai::queries::{QueryEngine, QuerySpec, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = SyntheticSpec::default_spec(0, 0).registry()?;
    let engine = QueryEngine::new(&registry, 2)?;
    let alpha = AdmissionFeatures {
        age_years: 72.0,
        from_healthcare_facility: true,
        ..Default::default()
    };
    let spec = QuerySpec::extended_stay(alpha, TestTimeFeatures::new(4, 0, false), false, 1.0, 1.0).with_runs(5_000, 20, 9);
    let grid: Vec<f64> = (1..=20).map(f64::from).collect();
    println!("extra_days,estimate,band_lo,band_hi");
    for p in engine.sweep(&spec, SweepAxis::TauM, &grid)? {
        println!("{},{:.4},{:.4},{:.4}", p.value, p.result.estimate, p.result.posterior_band.lo, p.result.posterior_band.hi);
    }
    Ok(())
}
