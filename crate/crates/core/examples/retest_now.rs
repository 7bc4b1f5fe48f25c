//! Q3: probability that a NARE taken now, τ days after the last test, comes
//! back positive. Checked against the closed form on a rigged registry, then
//! run on the synthetic model over a grid of τ.
//!
//!     cargo run --release -p genhai --example retest_now

use genhai::data::synthetic::SyntheticSpec;
use genhai::distributions::logistic;
use genhai::patient_model::{AdmissionFeatures, SubProgramId, TestTimeFeatures};
use genhai::queries::{QueryEngine, QuerySpec, SweepAxis};
use genhai::rigged::RiggedRegistry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let alpha = AdmissionFeatures {
        age_years: 58.0,
        ..Default::default()
    };
    let beta = TestTimeFeatures::new(2, 0, false);

    let rigged = RiggedRegistry::new()
        .intercept(SubProgramId::RI, -1.0)
        .weight(SubProgramId::RI, "result_prev", 1.5)
        .weight(SubProgramId::RI, "ln1p_delay_prev", 0.4)
        .build();
    let engine = QueryEngine::new(&rigged, 2)?;
    let tau = 3.0;
    let r = engine.estimate(&QuerySpec::retest_now(alpha.clone(), beta, true, tau).with_runs(50_000, 10, 4))?;
    let exact = logistic(-1.0 + 1.5 + 0.4 * (1.0f64 + tau).ln());
    println!("rigged: estimate {:.4} ± {:.4}, closed form {exact:.4}", r.estimate, r.mc_stderr);

    let registry = SyntheticSpec::default_spec(0, 0).registry()?;
    let engine = QueryEngine::new(&registry, 2)?;
    let spec = QuerySpec::retest_now(alpha, beta, true, 0.0).with_runs(5_000, 20, 4);
    let grid = [0.0, 1.0, 2.0, 4.0, 7.0, 14.0];
    for p in engine.sweep(&spec, SweepAxis::TauP, &grid)? {
        println!("tau {:>5}: {:.4}", p.value, p.result.estimate);
    }
    Ok(())
}
