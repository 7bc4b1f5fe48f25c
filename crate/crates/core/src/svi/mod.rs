//! Stochastic variational inference for one sub-program.
//!
//! The variational posterior is `N(m, L Lᵀ)` over the unconstrained
//! parameters, with the diagonal of `L` kept positive by a softplus. Each step
//! draws `ε ~ N(0, I)`, sets `θ = m + Lε` and ascends
//!
//! ```text
//! ELBO(θ) = (N/|B|) Σ_{b∈B} log p(y_b | x_b, θ) + log p(θ) − log q(θ)
//! ```
//!
//! Per-datum log-likelihood gradients come from [`tape`], taken with respect
//! to the datum's linear predictors and log-scale coordinates and then chained
//! back to `θ` through the input vector.

pub mod tape;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TrainingTable, TrainingTables};
use crate::distributions::{logistic, DistError, GaussianChol, HALF_LN_2PI};
use crate::patient_model::SubProgramId;
use crate::rng::SimRng;
use crate::scalar::{softplus_f64, Scalar};
use crate::subprograms::{
    loglik_locals, FittedSubProgram, LocalMap, ParamLayout, Posterior, Prior, Registry, SubProgramError, SubProgramSpec,
};
use tape::Tape;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite steps tolerated before training fails.
pub const MAX_CONSECUTIVE_ABORTS: usize = 10;
pub const SMOOTHING_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum SviError {
    #[error("{0}: empty training table")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    SubProgram(#[from] SubProgramError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("{subprogram}: non-finite ELBO term at row {row}, slice {slice}")]
    NonFinite {
        subprogram: &'static str,
        row: usize,
        slice: String,
    },
    #[error("{subprogram}: training failed after {consecutive} consecutive non-finite steps (last: {last})")]
    TrainingFailed {
        subprogram: &'static str,
        consecutive: usize,
        last: String,
        trace: Box<TrainTrace>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("posterior dimension {got} does not match layout dimension {expected}")]
    PosteriorDim { expected: usize, got: usize },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl SviError {
    /// The sub-program a failure belongs to, when known.
    pub fn subprogram(&self) -> Option<&'static str> {
        match self {
            SviError::EmptyDataset(s) => Some(s),
            SviError::NonFinite { subprogram, .. } | SviError::TrainingFailed { subprogram, .. } => Some(subprogram),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mc_particles: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the schedule interpolates geometrically. 1 keeps it constant.
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub chol_init_scale: f64,
    pub grad_clip: Option<f64>,
    pub diagonal_only: bool,
    /// Pair every draw with its negation.
    pub antithetic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 512,
            mc_particles: 1,
            learning_rate: 0.02,
            lr_final_fraction: 0.05,
            seed: 0,
            chol_init_scale: 0.1,
            grad_clip: None,
            diagonal_only: false,
            antithetic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SviError> {
        let bad = |m: &str| Err(SviError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mc_particles == 0 {
            return bad("mc_particles must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr_final_fraction must be in (0, 1]");
        }
        if !(self.chol_init_scale > 0.0) || !self.chol_init_scale.is_finite() {
            return bad("chol_init_scale must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.lr_final_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * self.lr_final_fraction.powf(frac)
    }
}

/// One line of the training trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// `None` for steps aborted on a non-finite estimate.
    pub elbo: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub subprogram: SubProgramId,
    pub records: Vec<TraceRecord>,
    pub aborted_steps: usize,
    /// Not written to trace files, which must be reproducible.
    pub wall_time_secs: f64,
}

impl TrainTrace {
    /// Trailing-window mean of the ELBO, skipping aborted steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.records.len());
        let mut buf: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
        let mut sum = 0.0;
        for r in &self.records {
            if let Some(e) = r.elbo {
                buf.push_back(e);
                sum += e;
                if buf.len() > window {
                    sum -= buf.pop_front().unwrap_or(0.0);
                }
            }
            out.push(if buf.is_empty() { f64::NAN } else { sum / buf.len() as f64 });
        }
        out
    }

    /// Mean ELBO over the first and last windows.
    pub fn window_means(&self, window: usize) -> (f64, f64) {
        let elbos: Vec<f64> = self.records.iter().filter_map(|r| r.elbo).collect();
        let w = window.min(elbos.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&elbos[..w.min(elbos.len())]), mean(&elbos[elbos.len().saturating_sub(w)..]))
    }

    pub fn final_smoothed(&self) -> f64 {
        self.window_means(SMOOTHING_WINDOW).1
    }

    /// One JSON object per step: `{"step":..,"elbo":..,"grad_norm":..}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A mini-batch drawn from one table.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub table: &'a TrainingTable,
    pub rows: &'a [usize],
}

impl Batch<'_> {
    pub fn scale(&self) -> f64 {
        self.table.len() as f64 / self.rows.len() as f64
    }
}

/// An ELBO estimate with gradients towards the mean and the Cholesky factor
/// (row-major `D×D`, zero above the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGrad {
    pub value: f64,
    pub grad_mean: Vec<f64>,
    pub grad_chol: Vec<f64>,
}

/// Reusable buffers for the per-datum gradient.
struct Workspace {
    tape: Tape,
    locals: Vec<f64>,
    local_grad: Vec<f64>,
    grad: Vec<f64>,
    theta: Vec<f64>,
}

impl Workspace {
    fn new(map: &LocalMap, dim: usize) -> Self {
        Self {
            tape: Tape::with_capacity(512),
            locals: vec![0.0; map.len()],
            local_grad: vec![0.0; map.len()],
            grad: vec![0.0; dim],
            theta: vec![0.0; dim],
        }
    }
}

fn local_slice_name(layout: &ParamLayout, map: &LocalMap, j: usize) -> String {
    let index = if j < map.linear.len() {
        map.linear[j].c_index
    } else {
        map.direct[j - map.linear.len()]
    };
    layout
        .slices
        .iter()
        .find(|s| (s.start..s.start + s.len).contains(&index))
        .map(|s| s.name.clone())
        .unwrap_or_default()
}

/// `scale · Σ_rows log p(y|x,θ)`, adding its gradient into `ws.grad`.
fn data_term(spec: &SubProgramSpec, map: &LocalMap, batch: &Batch<'_>, scale: f64, ws: &mut Workspace) -> Result<f64, SviError> {
    let mut total = 0.0;
    for &row in batch.rows {
        let x = batch.table.x(row);
        let y = batch.table.y(row);
        map.eval(&ws.theta, x, &mut ws.locals);
        let value = {
            let t = &ws.tape;
            let vars: Vec<_> = ws.locals.iter().map(|&v| t.var(v)).collect();
            let out = loglik_locals(spec, y, &vars);
            let adj = t.gradient(out);
            // Inputs were recorded first on a cleared tape.
            ws.local_grad.copy_from_slice(&adj[..vars.len()]);
            out.value()
        };
        ws.tape.clear();
        let bad = if !value.is_finite() {
            Some(ws.local_grad.iter().position(|g| !g.is_finite()).unwrap_or(0))
        } else {
            ws.local_grad.iter().position(|g| !g.is_finite())
        };
        if let Some(j) = bad {
            return Err(SviError::NonFinite {
                subprogram: spec.name.name(),
                row,
                slice: local_slice_name(&spec.layout(), map, j),
            });
        }
        total += value;
        map.chain(&ws.local_grad, x, scale, &mut ws.grad);
    }
    Ok(scale * total)
}

/// ELBO and gradients at fixed standard-normal draws `eps` (one vector per
/// particle); the estimate averages over particles.
pub fn elbo_at_eps(
    batch: &Batch<'_>,
    posterior: &GaussianChol,
    spec: &SubProgramSpec,
    prior: &Prior,
    eps: &[Vec<f64>],
) -> Result<ElboGrad, SviError> {
    let layout = spec.layout();
    let d = layout.total_dim;
    if posterior.dim() != d {
        return Err(SviError::PosteriorDim {
            expected: d,
            got: posterior.dim(),
        });
    }
    if prior.stds.len() != d {
        return Err(SviError::Config(format!("prior has {} stds for {d} parameters", prior.stds.len())));
    }
    if batch.rows.is_empty() {
        return Err(SviError::EmptyDataset(spec.name.name()));
    }
    if batch.table.dim != spec.input_dim {
        return Err(SubProgramError::Dimension {
            subprogram: spec.name.name(),
            expected: spec.input_dim,
            got: batch.table.dim,
        }
        .into());
    }
    let map = LocalMap::new(spec.family, spec.input_dim);
    let mut ws = Workspace::new(&map, d);
    let chol = posterior.chol();
    let scale = batch.scale();
    let particles = eps.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad_mean = vec![0.0; d];
    let mut grad_chol = vec![0.0; d * d];
    for e in eps {
        if e.len() != d {
            return Err(DistError::DimensionMismatch { expected: d, got: e.len() }.into());
        }
        ws.theta.copy_from_slice(&posterior.transform(e)?);
        ws.grad.iter_mut().for_each(|g| *g = 0.0);
        let data = data_term(spec, &map, batch, scale, &mut ws)?;
        prior.add_grad(&ws.theta, &mut ws.grad);
        let log_prior = prior.logpdf(&ws.theta);
        // −log q(θ) at θ = m + Lε.
        let entropy = d as f64 * HALF_LN_2PI
            + (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>()
            + 0.5 * e.iter().map(|v| v * v).sum::<f64>();
        value += data + log_prior + entropy;
        for i in 0..d {
            grad_mean[i] += ws.grad[i];
            for j in 0..=i {
                grad_chol[i * d + j] += ws.grad[i] * e[j];
            }
        }
    }
    value /= particles;
    grad_mean.iter_mut().for_each(|g| *g /= particles);
    grad_chol.iter_mut().for_each(|g| *g /= particles);
    for i in 0..d {
        grad_chol[i * d + i] += 1.0 / chol[i * d + i];
    }
    Ok(ElboGrad {
        value,
        grad_mean,
        grad_chol,
    })
}

/// Draw `particles` noise vectors and estimate the ELBO.
pub fn elbo_estimate(
    rng: &mut SimRng,
    batch: &Batch<'_>,
    posterior: &GaussianChol,
    spec: &SubProgramSpec,
    prior: &Prior,
    particles: usize,
) -> Result<ElboGrad, SviError> {
    let d = posterior.dim();
    let eps: Vec<Vec<f64>> = (0..particles.max(1))
        .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();
    elbo_at_eps(batch, posterior, spec, prior, &eps)
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Optimizer state: mean, raw diagonal, and strictly-lower entries of `L`
/// divided by their row's diagonal.
struct VariationalState {
    d: usize,
    diagonal_only: bool,
    params: Vec<f64>,
}

impl VariationalState {
    fn new(d: usize, scale: f64, diagonal_only: bool) -> Self {
        let n_off = if diagonal_only { 0 } else { d * (d - 1) / 2 };
        let mut params = vec![0.0; 2 * d + n_off];
        let rho = inv_softplus(scale);
        params[d..2 * d].iter_mut().for_each(|r| *r = rho);
        Self { d, diagonal_only, params }
    }

    fn posterior(&self) -> Result<GaussianChol, DistError> {
        let d = self.d;
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = softplus_f64(self.params[d + i]);
        }
        if !self.diagonal_only {
            let mut k = 2 * d;
            for i in 1..d {
                let li = chol[i * d + i];
                for j in 0..i {
                    chol[i * d + j] = li * self.params[k];
                    k += 1;
                }
            }
        }
        GaussianChol::new(self.params[..d].to_vec(), chol)
    }

    fn param_grad(&self, g: &ElboGrad) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.params.len()];
        out[..d].copy_from_slice(&g.grad_mean);
        let mut k = 2 * d;
        for i in 0..d {
            let rho = self.params[d + i];
            let mut gl = g.grad_chol[i * d + i];
            if !self.diagonal_only {
                let li = softplus_f64(rho);
                for j in 0..i {
                    gl += g.grad_chol[i * d + j] * self.params[k];
                    out[k] = g.grad_chol[i * d + j] * li;
                    k += 1;
                }
            }
            out[d + i] = gl * logistic(rho);
        }
        out
    }
}

fn sample_rows(rng: &mut SimRng, n: usize, batch: usize, out: &mut Vec<usize>) {
    out.clear();
    if n <= batch {
        out.extend(0..n);
    } else {
        out.extend((0..batch).map(|_| rng.below(n)));
    }
}

/// Fit one sub-program's variational posterior.
pub fn fit(
    table: &TrainingTable,
    spec: &SubProgramSpec,
    prior: &Prior,
    config: &TrainConfig,
) -> Result<(FittedSubProgram, TrainTrace), SviError> {
    config.validate()?;
    if table.is_empty() {
        return Err(SviError::EmptyDataset(spec.name.name()));
    }
    table.validate(spec)?;
    let started = Instant::now();
    let d = spec.layout().total_dim;
    let mut rng = SimRng::new(config.seed);
    let mut state = VariationalState::new(d, config.chol_init_scale, config.diagonal_only);
    let mut m = vec![0.0; state.params.len()];
    let mut v = vec![0.0; state.params.len()];
    let mut trace = TrainTrace {
        subprogram: spec.name,
        records: Vec::with_capacity(config.steps),
        aborted_steps: 0,
        wall_time_secs: 0.0,
    };
    let mut rows = Vec::with_capacity(config.batch_size);
    let mut consecutive = 0;
    let mut t = 0i32;
    for step in 0..config.steps {
        let posterior = state.posterior()?;
        sample_rows(&mut rng, table.len(), config.batch_size, &mut rows);
        let batch = Batch { table, rows: &rows };
        let mut eps: Vec<Vec<f64>> = (0..config.mc_particles)
            .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
            .collect();
        if config.antithetic {
            let neg: Vec<Vec<f64>> = eps.iter().map(|e| e.iter().map(|x| -x).collect()).collect();
            eps.extend(neg);
        }
        let est = match elbo_at_eps(&batch, &posterior, spec, prior, &eps) {
            Ok(est) if est.value.is_finite() => est,
            outcome => {
                let last = match outcome {
                    Err(e @ SviError::NonFinite { .. }) => e.to_string(),
                    Err(e) => return Err(e),
                    Ok(est) => format!("ELBO evaluated to {}", est.value),
                };
                consecutive += 1;
                trace.aborted_steps += 1;
                trace.records.push(TraceRecord {
                    step,
                    elbo: None,
                    grad_norm: None,
                });
                if consecutive > MAX_CONSECUTIVE_ABORTS {
                    trace.wall_time_secs = started.elapsed().as_secs_f64();
                    return Err(SviError::TrainingFailed {
                        subprogram: spec.name.name(),
                        consecutive,
                        last,
                        trace: Box::new(trace),
                    });
                }
                continue;
            }
        };
        consecutive = 0;
        let mut g = state.param_grad(&est);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        trace.records.push(TraceRecord {
            step,
            elbo: Some(est.value),
            grad_norm: Some(norm),
        });
        if let Some(clip) = config.grad_clip {
            if norm > clip {
                g.iter_mut().for_each(|x| *x *= clip / norm);
            }
        }
        t += 1;
        let lr = config.lr_at(step);
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            state.params[i] += lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
        for i in 0..d {
            let diag = softplus_f64(state.params[d + i]);
            assert!(diag > 0.0, "{}: cholesky diagonal {i} collapsed", spec.name);
        }
    }
    trace.wall_time_secs = started.elapsed().as_secs_f64();
    let fitted = FittedSubProgram::new(spec.clone(), Posterior::Gaussian(state.posterior()?))?;
    Ok((fitted, trace))
}

/// Seed used for one sub-program inside [`fit_all`].
pub fn subprogram_seed(seed: u64, id: SubProgramId) -> u64 {
    SimRng::new(seed).split(id.index() as u64).seed()
}

/// Fit the listed sub-programs in parallel on `workers` threads. Results
/// depend only on the tables and config, not on scheduling.
pub fn fit_selected(
    tables: &TrainingTables,
    ids: &[SubProgramId],
    config: &TrainConfig,
    workers: usize,
) -> Result<Vec<(FittedSubProgram, TrainTrace)>, SviError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SviError::Pool(e.to_string()))?;
    pool.install(|| {
        ids.par_iter()
            .map(|&id| {
                let spec = SubProgramSpec::for_id(id);
                let prior = Prior::standard(spec.layout().total_dim);
                let cfg = TrainConfig {
                    seed: subprogram_seed(config.seed, id),
                    ..config.clone()
                };
                fit(tables.get(id), &spec, &prior, &cfg)
            })
            .collect()
    })
}

/// Fit all thirteen sub-programs and assemble the registry.
pub fn fit_all(tables: &TrainingTables, config: &TrainConfig, workers: usize) -> Result<(Registry, Vec<TrainTrace>), SviError> {
    let fitted = fit_selected(tables, &SubProgramId::ALL, config, workers)?;
    let (programs, traces): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok((Registry::new(programs)?, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::CensorBound;
    use crate::subprograms::{Family, FixedConstants, Outcome};

    fn bern_spec(k: usize) -> SubProgramSpec {
        SubProgramSpec::custom(SubProgramId::RI, Family::BernoulliGlm, k, FixedConstants::default()).unwrap()
    }

    fn fixture() -> TrainingTable {
        let mut t = TrainingTable::with_dim(SubProgramId::RI, 2);
        for (i, y) in [true, false, true, true, false].into_iter().enumerate() {
            t.push(&[i as f64 * 0.3 - 0.5, (i as f64).sin()], Outcome::Bit(y));
        }
        t
    }

    fn rand_chol(rng: &mut SimRng, d: usize) -> GaussianChol {
        let mean = (0..d).map(|_| 0.3 * rng.standard_normal()).collect();
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                chol[i * d + j] = 0.05 * rng.standard_normal();
            }
            chol[i * d + i] = 0.1 + 0.2 * rng.uniform();
        }
        GaussianChol::new(mean, chol).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let table = fixture();
        let spec = bern_spec(2);
        let prior = Prior::standard(3);
        let rows: Vec<usize> = (0..5).collect();
        let batch = Batch { table: &table, rows: &rows };
        let mut rng = SimRng::new(4);
        let q = rand_chol(&mut rng, 3);
        let eps = vec![(0..3).map(|_| rng.standard_normal()).collect::<Vec<_>>()];
        let g = elbo_at_eps(&batch, &q, &spec, &prior, &eps).unwrap();
        let h = 1e-5;
        let f = |mean: Vec<f64>, chol: Vec<f64>| {
            let q = GaussianChol::new(mean, chol).unwrap();
            elbo_at_eps(&batch, &q, &spec, &prior, &eps).unwrap().value
        };
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            let (mut a, mut b) = (q.mean().to_vec(), q.mean().to_vec());
            a[i] += h;
            b[i] -= h;
            let fd = (f(a, q.chol().to_vec()) - f(b, q.chol().to_vec())) / (2.0 * h);
            worst = worst.max((fd - g.grad_mean[i]).abs() / fd.abs().max(g.grad_mean[i].abs()).max(1.0));
            for j in 0..=i {
                let (mut a, mut b) = (q.chol().to_vec(), q.chol().to_vec());
                a[i * 3 + j] += h;
                b[i * 3 + j] -= h;
                let fd = (f(q.mean().to_vec(), a) - f(q.mean().to_vec(), b)) / (2.0 * h);
                let an = g.grad_chol[i * 3 + j];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn degenerate_posterior_limit() {
        let table = fixture();
        let spec = bern_spec(2);
        let rows: Vec<usize> = (0..5).collect();
        let batch = Batch { table: &table, rows: &rows };
        let theta = vec![0.0; 3];
        let q = GaussianChol::isotropic(theta.clone(), 1e-6).unwrap();
        // Prior equal to the posterior: log p(θ) − log q(θ) vanishes.
        let prior = Prior { stds: vec![1e-6; 3] };
        let g = elbo_estimate(&mut SimRng::new(8), &batch, &q, &spec, &prior, 1).unwrap();
        let f = FittedSubProgram::point_mass(spec.clone(), theta.clone()).unwrap();
        let loglik: f64 = table.rows().map(|(x, y)| f.loglik_theta(y, x, &theta).unwrap()).sum();
        assert!((g.value - loglik).abs() < 1e-3, "{} vs {loglik}", g.value);
    }

    #[test]
    fn estimates_are_deterministic() {
        let table = fixture();
        let spec = bern_spec(2);
        let prior = Prior::standard(3);
        let rows: Vec<usize> = (0..5).collect();
        let batch = Batch { table: &table, rows: &rows };
        let q = GaussianChol::isotropic(vec![0.0; 3], 0.5).unwrap();
        let a = elbo_estimate(&mut SimRng::new(1), &batch, &q, &spec, &prior, 2).unwrap();
        let b = elbo_estimate(&mut SimRng::new(1), &batch, &q, &spec, &prior, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_information_intercept() {
        let spec = bern_spec(0);
        let mut table = TrainingTable::with_dim(SubProgramId::RI, 0);
        for i in 0..2000 {
            table.push(&[], Outcome::Bit(i % 2 == 0));
        }
        let config = TrainConfig {
            steps: 1500,
            batch_size: 256,
            seed: 3,
            ..Default::default()
        };
        let (fitted, trace) = fit(&table, &spec, &Prior::standard(1), &config).unwrap();
        assert!(fitted.posterior.mean()[0].abs() < 0.05, "{:?}", fitted.posterior.mean());
        assert_eq!(trace.records.len(), 1500);
        let (first, last) = trace.window_means(100);
        assert!(last >= first);
    }

    #[test]
    fn fit_is_reproducible_and_rejects_empty() {
        let spec = bern_spec(2);
        let config = TrainConfig {
            steps: 50,
            seed: 11,
            ..Default::default()
        };
        let a = fit(&fixture(), &spec, &Prior::standard(3), &config).unwrap();
        let b = fit(&fixture(), &spec, &Prior::standard(3), &config).unwrap();
        assert_eq!(a.0, b.0);
        let empty = TrainingTable::with_dim(SubProgramId::RI, 2);
        assert!(matches!(
            fit(&empty, &spec, &Prior::standard(3), &config),
            Err(SviError::EmptyDataset("D_r_i"))
        ));
    }

    #[test]
    fn non_finite_rows_fail_with_trace() {
        let spec = SubProgramSpec::custom(
            SubProgramId::Beta1Icu,
            Family::CensoredNegBinomGlm,
            1,
            FixedConstants {
                censor_bound: Some(CensorBound::ICU_DAYS),
                mixture_mus: None,
            },
        )
        .unwrap();
        let mut table = TrainingTable::with_dim(SubProgramId::Beta1Icu, 1);
        table.push(&[f64::NAN], Outcome::Count(2));
        let err = fit(&table, &spec, &Prior::standard(3), &TrainConfig::default()).unwrap_err();
        match err {
            SviError::TrainingFailed { consecutive, trace, .. } => {
                assert_eq!(consecutive, MAX_CONSECUTIVE_ABORTS + 1);
                assert_eq!(trace.aborted_steps, consecutive);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn trace_file_has_no_wall_time() {
        let trace = TrainTrace {
            subprogram: SubProgramId::Cont,
            records: vec![TraceRecord {
                step: 0,
                elbo: Some(-1.5),
                grad_norm: Some(2.0),
            }],
            aborted_steps: 0,
            wall_time_secs: 3.0,
        };
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"step\":0,\"elbo\":-1.5,\"grad_norm\":2.0}\n");
    }
}
