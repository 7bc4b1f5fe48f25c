//! Full and conditional sequence simulators.
//!
//! Test type is a bit where 1 means NARE; a culture test is always recorded
//! as positive. Delay models are conditioned on the admission features and
//! the β of the test that was just completed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bit;
use crate::patient_model::{
    encode_into, AdmissionFeatures, FeatureError, PartialBeta, StepContext, SubProgramId, TestTimeFeatures,
};
use crate::rng::SimRng;
use crate::subprograms::{Outcome, Registry, SubProgramError, ThetaBundle};

pub const DEFAULT_MAX_EVENTS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    SubProgram(#[from] SubProgramError),
    #[error("{subprogram} produced {outcome}, which the simulator cannot use")]
    Outcome { subprogram: &'static str, outcome: String },
    #[error("invalid simulator input {field}: {reason}")]
    Input { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestType {
    Culture,
    Nare,
}

impl TestType {
    pub fn from_bit(b: bool) -> Self {
        if b {
            TestType::Nare
        } else {
            TestType::Culture
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TestType::Culture => "culture",
            TestType::Nare => "nare",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "culture" | "0" => Some(TestType::Culture),
            "nare" | "1" => Some(TestType::Nare),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestEvent {
    pub test_type: TestType,
    #[serde(with = "bit")]
    pub result: bool,
    /// Days since the previous test; 0 for the first test of a record.
    pub delay_before: f64,
    pub beta: TestTimeFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ContZero,
    Horizon,
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSequence {
    pub alpha: AdmissionFeatures,
    pub events: Vec<TestEvent>,
    pub terminated_by: Termination,
}

impl SimulatedSequence {
    pub fn any_positive(&self) -> bool {
        self.events.iter().any(|e| e.result)
    }

    pub fn total_delay(&self) -> f64 {
        self.events.iter().map(|e| e.delay_before).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimLimits {
    pub max_events: usize,
}

impl Default for SimLimits {
    fn default() -> Self {
        Self {
            max_events: DEFAULT_MAX_EVENTS,
        }
    }
}

/// Where sub-program parameters come from during a simulation.
#[derive(Debug, Clone, Copy)]
pub enum ParamMode<'a> {
    /// A fresh posterior draw for every sub-program call.
    Hierarchical,
    /// One fixed parameter vector per sub-program.
    Fixed(&'a ThetaBundle),
}

/// Runs the simulators against one registry, reusing scratch buffers.
pub struct Simulator<'a> {
    registry: &'a Registry,
    bundle: Option<&'a ThetaBundle>,
    limits: SimLimits,
    x: Vec<f64>,
    theta: Vec<f64>,
}

fn check_tau(field: &'static str, v: f64, strict: bool) -> Result<(), SimError> {
    let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
    if ok {
        Ok(())
    } else {
        Err(SimError::Input {
            field,
            reason: format!("{v} must be {}", if strict { "> 0" } else { ">= 0" }),
        })
    }
}

impl<'a> Simulator<'a> {
    pub fn new(registry: &'a Registry, mode: ParamMode<'a>, limits: SimLimits) -> Self {
        Self {
            registry,
            bundle: match mode {
                ParamMode::Hierarchical => None,
                ParamMode::Fixed(b) => Some(b),
            },
            limits,
            x: Vec::with_capacity(32),
            theta: Vec::with_capacity(64),
        }
    }

    pub fn set_mode(&mut self, mode: ParamMode<'a>) {
        self.bundle = match mode {
            ParamMode::Hierarchical => None,
            ParamMode::Fixed(b) => Some(b),
        };
    }

    fn prepare(&mut self, rng: &mut SimRng, id: SubProgramId, ctx: &StepContext<'_>) -> Result<(), SimError> {
        self.x.clear();
        encode_into(id, ctx, &mut self.x)?;
        if self.bundle.is_none() {
            self.registry.get(id).draw_theta_into(rng, &mut self.theta);
        }
        Ok(())
    }

    fn theta(&self, id: SubProgramId) -> &[f64] {
        match self.bundle {
            Some(b) => b.get(id),
            None => &self.theta,
        }
    }

    fn outcome(&mut self, rng: &mut SimRng, id: SubProgramId, ctx: &StepContext<'_>) -> Result<Outcome, SimError> {
        self.prepare(rng, id, ctx)?;
        Ok(self.registry.get(id).predictive_sample(rng, &self.x, Some(self.theta(id)))?)
    }

    fn bit(&mut self, rng: &mut SimRng, id: SubProgramId, ctx: &StepContext<'_>) -> Result<bool, SimError> {
        match self.outcome(rng, id, ctx)? {
            Outcome::Bit(b) => Ok(b),
            other => Err(SimError::Outcome {
                subprogram: id.name(),
                outcome: other.to_string(),
            }),
        }
    }

    fn count(&mut self, rng: &mut SimRng, id: SubProgramId, ctx: &StepContext<'_>) -> Result<u32, SimError> {
        match self.outcome(rng, id, ctx)? {
            Outcome::Count(c) => Ok(c),
            other => Err(SimError::Outcome {
                subprogram: id.name(),
                outcome: other.to_string(),
            }),
        }
    }

    /// Delay after a test with result `r` and features `beta`, optionally
    /// conditioned on being at least `lower`.
    fn delay(
        &mut self,
        rng: &mut SimRng,
        alpha: &AdmissionFeatures,
        beta: TestTimeFeatures,
        r: bool,
        lower: Option<f64>,
    ) -> Result<f64, SimError> {
        let id = if r { SubProgramId::DelayPos } else { SubProgramId::DelayNeg };
        let mut ctx = StepContext::first(alpha);
        ctx.beta = PartialBeta::complete(beta);
        self.prepare(rng, id, &ctx)?;
        let program = self.registry.get(id);
        let d = match lower {
            Some(lo) => program.predictive_sample_truncated(rng, &self.x, Some(self.theta(id)), lo)?,
            None => match program.predictive_sample(rng, &self.x, Some(self.theta(id)))? {
                Outcome::Positive(d) => d,
                other => {
                    return Err(SimError::Outcome {
                        subprogram: id.name(),
                        outcome: other.to_string(),
                    })
                }
            },
        };
        // exp() can underflow for extreme parameters; delays stay positive.
        Ok(d.max(f64::MIN_POSITIVE))
    }

    fn cont(&mut self, rng: &mut SimRng, alpha: &AdmissionFeatures, beta: TestTimeFeatures, r: bool) -> Result<bool, SimError> {
        let mut ctx = StepContext::first(alpha);
        ctx.beta = PartialBeta::complete(beta);
        ctx.result = Some(r);
        self.bit(rng, SubProgramId::Cont, &ctx)
    }

    /// The β chain ab → icu → dialysis under `ctx`.
    fn beta_chain(&mut self, rng: &mut SimRng, ctx: &mut StepContext<'_>, first: bool) -> Result<TestTimeFeatures, SimError> {
        use SubProgramId::*;
        let (ab, icu, dia) = if first {
            (Beta1Ab, Beta1Icu, Beta1Dia)
        } else {
            (BetaIAb, BetaIIcu, BetaIDia)
        };
        ctx.beta = PartialBeta::default();
        ctx.beta.ab = Some(self.count(rng, ab, ctx)?);
        ctx.beta.icu = Some(self.count(rng, icu, ctx)?);
        ctx.beta.dia = Some(self.bit(rng, dia, ctx)?);
        Ok(ctx.beta.finish().expect("chain complete"))
    }

    /// One test: β chain, test type, result. `forced_nare` skips the
    /// test-type model.
    fn test_step(
        &mut self,
        rng: &mut SimRng,
        alpha: &AdmissionFeatures,
        prev: Option<(TestTimeFeatures, bool, f64)>,
        forced_nare: bool,
    ) -> Result<TestEvent, SimError> {
        let (mut ctx, first) = match prev {
            None => (StepContext::first(alpha), true),
            Some((b, r, d)) => (StepContext::after(alpha, b, r, d), false),
        };
        let beta = self.beta_chain(rng, &mut ctx, first)?;
        let (t_id, r_id) = if first {
            (SubProgramId::T1, SubProgramId::R1)
        } else {
            (SubProgramId::TI, SubProgramId::RI)
        };
        let test_type = if forced_nare {
            TestType::Nare
        } else {
            TestType::from_bit(self.bit(rng, t_id, &ctx)?)
        };
        let result = match test_type {
            TestType::Nare => self.bit(rng, r_id, &ctx)?,
            TestType::Culture => true,
        };
        Ok(TestEvent {
            test_type,
            result,
            delay_before: prev.map_or(0.0, |p| p.2),
            beta,
        })
    }

    /// Continue an Algorithm-1 style loop from the last event of `events`.
    fn run_loop(&mut self, rng: &mut SimRng, alpha: &AdmissionFeatures, events: &mut Vec<TestEvent>) -> Result<Termination, SimError> {
        loop {
            let last = *events.last().expect("loop starts after one event");
            if !self.cont(rng, alpha, last.beta, last.result)? {
                return Ok(Termination::ContZero);
            }
            if events.len() >= self.limits.max_events {
                return Ok(Termination::Cap);
            }
            let d = self.delay(rng, alpha, last.beta, last.result, None)?;
            let ev = self.test_step(rng, alpha, Some((last.beta, last.result, d)), false)?;
            events.push(ev);
        }
    }

    /// Generate a whole hospitalization from admission features.
    pub fn full(&mut self, rng: &mut SimRng, alpha: &AdmissionFeatures) -> Result<SimulatedSequence, SimError> {
        alpha.validate()?;
        let mut events = vec![self.test_step(rng, alpha, None, false)?];
        let terminated_by = self.run_loop(rng, alpha, &mut events)?;
        Ok(SimulatedSequence {
            alpha: alpha.clone(),
            events,
            terminated_by,
        })
    }

    /// Continue a stay whose last test (features `beta1`, result `r1`) was
    /// `tau_p` days ago and which lasts `tau_m` more days. Returned events
    /// exclude the known test.
    pub fn partial_a(
        &mut self,
        rng: &mut SimRng,
        alpha: &AdmissionFeatures,
        beta1: TestTimeFeatures,
        r1: bool,
        tau_p: f64,
        tau_m: f64,
    ) -> Result<SimulatedSequence, SimError> {
        alpha.validate()?;
        beta1.validate()?;
        check_tau("tau_p", tau_p, false)?;
        check_tau("tau_m", tau_m, true)?;
        let done = |events, terminated_by| SimulatedSequence {
            alpha: alpha.clone(),
            events,
            terminated_by,
        };
        if !self.cont(rng, alpha, beta1, r1)? {
            return Ok(done(vec![], Termination::ContZero));
        }
        let d1 = self.delay(rng, alpha, beta1, r1, Some(tau_p))?;
        if d1 > tau_p + tau_m {
            return Ok(done(vec![], Termination::Horizon));
        }
        let mut remaining = tau_p + tau_m - d1;
        let mut events = Vec::new();
        let mut prev = (beta1, r1, d1);
        loop {
            let ev = self.test_step(rng, alpha, Some(prev), false)?;
            events.push(ev);
            if !self.cont(rng, alpha, ev.beta, ev.result)? {
                return Ok(done(events, Termination::ContZero));
            }
            let d = self.delay(rng, alpha, ev.beta, ev.result, None)?;
            remaining -= d;
            if remaining < 0.0 {
                return Ok(done(events, Termination::Horizon));
            }
            if events.len() >= self.limits.max_events {
                return Ok(done(events, Termination::Cap));
            }
            prev = (ev.beta, ev.result, d);
        }
    }

    /// The next test if it were taken `tau_p` days after the known one:
    /// the delay is set, not sampled, and the test is a NARE.
    pub fn partial_b(
        &mut self,
        rng: &mut SimRng,
        alpha: &AdmissionFeatures,
        beta1: TestTimeFeatures,
        r1: bool,
        tau_p: f64,
    ) -> Result<TestEvent, SimError> {
        alpha.validate()?;
        beta1.validate()?;
        check_tau("tau_p", tau_p, false)?;
        self.test_step(rng, alpha, Some((beta1, r1, tau_p)), true)
    }

    /// Continue after a negative test taken `tau_p` days ago, assuming at
    /// least one more test. No horizon applies.
    pub fn partial_c(
        &mut self,
        rng: &mut SimRng,
        alpha: &AdmissionFeatures,
        beta1: TestTimeFeatures,
        tau_p: f64,
    ) -> Result<SimulatedSequence, SimError> {
        alpha.validate()?;
        beta1.validate()?;
        check_tau("tau_p", tau_p, false)?;
        let d1 = self.delay(rng, alpha, beta1, false, Some(tau_p))?;
        let mut events = vec![self.test_step(rng, alpha, Some((beta1, false, d1)), false)?];
        let terminated_by = self.run_loop(rng, alpha, &mut events)?;
        Ok(SimulatedSequence {
            alpha: alpha.clone(),
            events,
            terminated_by,
        })
    }
}

pub fn simulate_full(
    rng: &mut SimRng,
    registry: &Registry,
    alpha: &AdmissionFeatures,
    limits: SimLimits,
) -> Result<SimulatedSequence, SimError> {
    Simulator::new(registry, ParamMode::Hierarchical, limits).full(rng, alpha)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_partial_a(
    rng: &mut SimRng,
    registry: &Registry,
    alpha: &AdmissionFeatures,
    beta1: TestTimeFeatures,
    r1: bool,
    tau_p: f64,
    tau_m: f64,
    limits: SimLimits,
) -> Result<SimulatedSequence, SimError> {
    Simulator::new(registry, ParamMode::Hierarchical, limits).partial_a(rng, alpha, beta1, r1, tau_p, tau_m)
}

pub fn simulate_partial_b(
    rng: &mut SimRng,
    registry: &Registry,
    alpha: &AdmissionFeatures,
    beta1: TestTimeFeatures,
    r1: bool,
    tau_p: f64,
) -> Result<TestEvent, SimError> {
    Simulator::new(registry, ParamMode::Hierarchical, SimLimits::default()).partial_b(rng, alpha, beta1, r1, tau_p)
}

pub fn simulate_partial_c(
    rng: &mut SimRng,
    registry: &Registry,
    alpha: &AdmissionFeatures,
    beta1: TestTimeFeatures,
    tau_p: f64,
    limits: SimLimits,
) -> Result<SimulatedSequence, SimError> {
    Simulator::new(registry, ParamMode::Hierarchical, limits).partial_c(rng, alpha, beta1, tau_p)
}
