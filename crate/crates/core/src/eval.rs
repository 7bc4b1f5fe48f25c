//! Held-out metrics: per-table NLL and perplexity, classifier scores for the
//! later-test result model, and reliability bins.
//!
//! Posterior draws are shared across the rows of a table: table `t` uses
//! `S` draws from stream `split(seed, t)`, and each row's predictive
//! log-likelihood is the log-mean-exp over those draws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TrainingTable, TrainingTables};
use crate::patient_model::SubProgramId;
use crate::rng::SimRng;
use crate::scalar::log_sum_exp_f64;
use crate::subprograms::{FittedSubProgram, Outcome, Registry, SubProgramError, DEFAULT_PREDICTIVE_DRAWS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BINS: usize = 10;
const MAX_CURVE_POINTS: usize = 201;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    SubProgram(#[from] SubProgramError),
    #[error("{0}")]
    Input(String),
}

/// How per-row likelihoods integrate over the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Predictive {
    /// Log-mean-exp over this many shared posterior draws.
    Draws { draws: usize, seed: u64 },
    /// Plug in the posterior mean.
    Mean,
}

impl Default for Predictive {
    fn default() -> Self {
        Predictive::Draws {
            draws: DEFAULT_PREDICTIVE_DRAWS,
            seed: 0,
        }
    }
}

impl Predictive {
    fn thetas(&self, program: &FittedSubProgram) -> Vec<Vec<f64>> {
        match *self {
            Predictive::Mean => vec![program.posterior.mean().to_vec()],
            Predictive::Draws { draws, seed } => {
                let mut rng = SimRng::new(seed).split(program.id().index() as u64);
                (0..draws.max(1)).map(|_| program.draw_theta(&mut rng)).collect()
            }
        }
    }
}

fn row_loglik(program: &FittedSubProgram, thetas: &[Vec<f64>], x: &[f64], y: Outcome) -> Result<f64, SubProgramError> {
    if thetas.len() == 1 {
        return program.loglik_theta(y, x, &thetas[0]);
    }
    let terms = thetas
        .iter()
        .map(|t| program.loglik_theta(y, x, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(log_sum_exp_f64(&terms) - (thetas.len() as f64).ln())
}

/// Exact perplexity of a mean negative log-likelihood.
pub fn perplexity(nll: f64) -> f64 {
    nll.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub subprogram: SubProgramId,
    pub n_rows: usize,
    /// Absent for an empty table.
    pub nll: Option<f64>,
    pub perplexity: Option<f64>,
}

impl GenRow {
    pub fn new(subprogram: SubProgramId, n_rows: usize, nll: Option<f64>) -> Self {
        let ppl = nll.map(perplexity);
        if let (Some(n), Some(p)) = (nll, ppl) {
            assert!((p - n.exp()).abs() <= 1e-9 * p.abs().max(1.0), "perplexity identity");
        }
        Self {
            subprogram,
            n_rows,
            nll,
            perplexity: ppl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    pub rows: Vec<GenRow>,
}

impl GenMetrics {
    pub fn get(&self, id: SubProgramId) -> &GenRow {
        self.rows.iter().find(|r| r.subprogram == id).expect("all sub-programs present")
    }
}

/// Mean negative predictive log-likelihood of one table.
pub fn table_nll(program: &FittedSubProgram, table: &TrainingTable, mode: Predictive) -> Result<Option<f64>, EvalError> {
    if table.is_empty() {
        return Ok(None);
    }
    let thetas = mode.thetas(program);
    let lls = (0..table.len())
        .into_par_iter()
        .map(|i| row_loglik(program, &thetas, table.x(i), table.y(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(-lls.iter().sum::<f64>() / lls.len() as f64))
}

pub fn eval_gen(registry: &Registry, tables: &TrainingTables, mode: Predictive) -> Result<GenMetrics, EvalError> {
    let rows = SubProgramId::ALL
        .iter()
        .map(|&id| {
            let table = tables.get(id);
            Ok(GenRow::new(id, table.len(), table_nll(registry.get(id), table, mode)?))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(GenMetrics { rows })
}

/// Posterior-mean predicted probability for every row of a Bernoulli table.
pub fn bernoulli_scores(program: &FittedSubProgram, table: &TrainingTable, mode: Predictive) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    let thetas = mode.thetas(program);
    let scores = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let x = table.x(i);
            let mut s = 0.0;
            for t in &thetas {
                s += program.bernoulli_prob(x, t)?;
            }
            Ok(s / thetas.len() as f64)
        })
        .collect::<Result<Vec<_>, SubProgramError>>()?;
    let labels = table
        .ys()
        .iter()
        .map(|y| match y {
            Outcome::Bit(b) => Ok(*b),
            other => Err(EvalError::Input(format!("{}: non-binary outcome {other}", table.id))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scores, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfMetrics {
    pub n: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// (false positive rate, true positive rate), thinned.
    pub roc: Vec<(f64, f64)>,
    /// (recall, precision), thinned.
    pub pr: Vec<(f64, f64)>,
}

/// Threshold metrics: a score at or above `threshold` predicts positive.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, r#fn: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.r#fn += 1,
        }
    }
    c
}

/// Mann-Whitney AUROC with tied scores sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Operating points at each distinct score, highest first:
/// (tp, fp) after admitting every row scoring at least that value.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Average precision: step-wise precision-recall integral.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count() as f64;
    if n_pos == 0.0 || n_pos == labels.len() as f64 {
        return None;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in operating_points(scores, labels) {
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= MAX_CURVE_POINTS {
        return points;
    }
    let last = points.len() - 1;
    (0..MAX_CURVE_POINTS)
        .map(|k| points[k * last / (MAX_CURVE_POINTS - 1)])
        .collect()
}

pub fn curves(scores: &[f64], labels: &[bool]) -> Curves {
    let n_pos = labels.iter().filter(|&&y| y).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let ops = operating_points(scores, labels);
    let mut roc = vec![(0.0, 0.0)];
    roc.extend(ops.iter().map(|&(tp, fp)| (fp as f64 / n_neg.max(1.0), tp as f64 / n_pos.max(1.0))));
    let pr = ops
        .iter()
        .map(|&(tp, fp)| (tp as f64 / n_pos.max(1.0), tp as f64 / (tp + fp) as f64))
        .collect();
    Curves {
        roc: thin(roc),
        pr: thin(pr),
    }
}

pub fn clf_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> ClfMetrics {
    let c = confusion(scores, labels, threshold);
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.r#fn);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let auroc = auroc(scores, labels);
    let diagnostic = auroc
        .is_none()
        .then(|| "single-class evaluation set: AUROC and AUPRC are undefined".to_string());
    ClfMetrics {
        n: scores.len(),
        threshold,
        confusion: c,
        accuracy: if scores.is_empty() { 0.0 } else { (c.tp + c.tn) as f64 / scores.len() as f64 },
        precision,
        recall,
        f1,
        auroc,
        auprc: auprc(scores, labels),
        diagnostic,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfReport {
    pub subprogram: SubProgramId,
    pub metrics: ClfMetrics,
    pub curves: Curves,
}

pub fn eval_clf(registry: &Registry, tables: &TrainingTables, threshold: f64, mode: Predictive) -> Result<ClfReport, EvalError> {
    let id = SubProgramId::RI;
    let (scores, labels) = bernoulli_scores(registry.get(id), tables.get(id), mode)?;
    Ok(ClfReport {
        subprogram: id,
        metrics: clf_metrics(&scores, &labels, threshold),
        curves: curves(&scores, &labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean_predicted: Option<f64>,
    pub empirical_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: u64,
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Equal-width reliability bins on [0, 1]; a score of exactly 1 falls in
/// the last bin.
pub fn calibration(scores: &[f64], labels: &[bool], bins: usize) -> CalibrationReport {
    let bins = bins.max(1);
    let mut count = vec![0u64; bins];
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0u64; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        sum_p[b] += s;
        sum_y[b] += u64::from(y);
    }
    let n: u64 = count.iter().sum();
    let mut ece = 0.0;
    let out = (0..bins)
        .map(|b| {
            let (mp, er) = if count[b] > 0 {
                let c = count[b] as f64;
                let (mp, er) = (sum_p[b] / c, sum_y[b] as f64 / c);
                ece += c / n as f64 * (mp - er).abs();
                (Some(mp), Some(er))
            } else {
                (None, None)
            };
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_predicted: mp,
                empirical_rate: er,
            }
        })
        .collect();
    CalibrationReport { n, bins: out, ece }
}

pub fn eval_calibration(registry: &Registry, tables: &TrainingTables, bins: usize, mode: Predictive) -> Result<CalibrationReport, EvalError> {
    let id = SubProgramId::RI;
    if tables.get(id).is_empty() {
        return Err(EvalError::Input(format!("{id} table is empty")));
    }
    let (scores, labels) = bernoulli_scores(registry.get(id), tables.get(id), mode)?;
    Ok(calibration(&scores, &labels, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub predictive: Predictive,
    pub generative: GenMetrics,
    pub classifier: Option<ClfReport>,
    pub calibration: Option<CalibrationReport>,
}

pub fn evaluate(registry: &Registry, tables: &TrainingTables, threshold: f64, bins: usize, mode: Predictive) -> Result<EvalReport, EvalError> {
    let generative = eval_gen(registry, tables, mode)?;
    let has_ri = !tables.get(SubProgramId::RI).is_empty();
    let classifier = has_ri.then(|| eval_clf(registry, tables, threshold, mode)).transpose()?;
    let calibration = has_ri.then(|| eval_calibration(registry, tables, bins, mode)).transpose()?;
    Ok(EvalReport {
        note: "per-test evaluation on held-out records; classifier and calibration use D_r_i rows".into(),
        predictive: mode,
        generative,
        classifier,
        calibration,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn opt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n\n", self.note);
        s.push_str(&format!("{:<14} {:>8} {:>10} {:>10}\n", "sub-program", "rows", "NLL", "perplexity"));
        for r in &self.generative.rows {
            s.push_str(&format!(
                "{:<14} {:>8} {:>10} {:>10}\n",
                r.subprogram.name(),
                r.n_rows,
                opt(r.nll),
                opt(r.perplexity)
            ));
        }
        if let Some(c) = &self.classifier {
            let m = &c.metrics;
            s.push_str(&format!(
                "\n{:<14} {:>8} {:>9} {:>6} {:>6} {:>6} {:>6}\n",
                "model", "accuracy", "precision", "recall", "f1", "auroc", "auprc"
            ));
            s.push_str(&format!(
                "{:<14} {:>8} {:>9} {:>6} {:>6} {:>6} {:>6}\n",
                c.subprogram.name(),
                format!("{:.3}", m.accuracy),
                opt3(m.precision),
                opt3(m.recall),
                opt3(m.f1),
                opt3(m.auroc),
                opt3(m.auprc),
            ));
            if let Some(d) = &m.diagnostic {
                s.push_str(&format!("note: {d}\n"));
            }
        }
        if let Some(cal) = &self.calibration {
            s.push_str(&format!("\ncalibration: ECE {:.4} over {} rows\n", cal.ece, cal.n));
            for b in &cal.bins {
                s.push_str(&format!(
                    "  [{:.1}, {:.1}) n={:<7} pred={} obs={}\n",
                    b.lo,
                    b.hi,
                    b.count,
                    opt(b.mean_predicted),
                    opt(b.empirical_rate)
                ));
            }
        }
        s
    }
}
