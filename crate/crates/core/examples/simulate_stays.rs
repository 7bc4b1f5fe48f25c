//! Draw whole hospital stays from a registry with the full simulator and
//! print a few of them along with summary counts.
//!
//!     cargo run --release -p genhai --example simulate_stays

use genhai::data::synthetic::SyntheticSpec;
use genhai::patient_model::{AdmissionFeatures, AdmissionType};
use genhai::rng::SimRng;
use genhai::simulators::{SimLimits, Simulator, ParamMode, Termination};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = SyntheticSpec::default_spec(0, 0).registry()?;
    let alpha = AdmissionFeatures {
        gender: true,
        age_years: 78.0,
        admission_type: AdmissionType::Emergency,
        from_healthcare_facility: true,
        diabetes: true,
        ..Default::default()
    };
    let root = SimRng::new(2024);
    let mut sim = Simulator::new(&registry, ParamMode::Hierarchical, SimLimits::default());

    let n = 20_000;
    let (mut positive, mut tests, mut capped) = (0, 0, 0);
    for j in 0..n {
        let seq = sim.full(&mut root.split(j), &alpha)?;
        if j < 3 {
            println!("stay {j}:");
            for e in &seq.events {
                println!(
                    "  +{:>6.2}d  {:<7} {}  ab={} icu={} dia={}",
                    e.delay_before,
                    e.test_type.as_str(),
                    if e.result { "pos" } else { "neg" },
                    e.beta.ab_days_30,
                    e.beta.icu_days_7,
                    u8::from(e.beta.dialysis_7d)
                );
            }
        }
        positive += usize::from(seq.any_positive());
        tests += seq.events.len();
        capped += usize::from(seq.terminated_by == Termination::Cap);
    }
    println!("{n} stays: P(any positive) {:.4}, mean tests {:.3}, capped {capped}", positive as f64 / n as f64, tests as f64 / n as f64);
    Ok(())
}
