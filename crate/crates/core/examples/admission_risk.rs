//! Q1: probability that a patient tests positive at some point during the
//! stay, for two otherwise identical patients differing in admission source.
//!
//!     cargo run --release -p genhai --example admission_risk

use genhai::data::synthetic::SyntheticSpec;
use genhai::patient_model::{AdmissionFeatures, AdmissionType};
use genhai::queries::{QueryEngine, QuerySpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = SyntheticSpec::default_spec(0, 0).registry()?;
    let engine = QueryEngine::new(&registry, 2)?;
    for hcf in [false, true] {
        let alpha = AdmissionFeatures {
            age_years: 66.0,
            admission_type: AdmissionType::Emergency,
            from_healthcare_facility: hcf,
            hospitalized_past_90d: true,
            ..Default::default()
        };
        let spec = QuerySpec::admission_risk(alpha).with_runs(20_000, 50, 1);
        let r = engine.estimate(&spec)?;
        println!(
            "from HCF {}: risk {:.4} ± {:.4}  (90% band {:.4}..{:.4})",
            u8::from(hcf),
            r.estimate,
            r.mc_stderr,
            r.posterior_band.lo,
            r.posterior_band.hi
        );
    }
    Ok(())
}
