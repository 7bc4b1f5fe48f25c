//! The `genhai` command line: `synth`, `train`, `eval`, `query` and `serve`.
//!
//! Every subcommand is a plain function over a parsed [`CliConfig`], so the
//! pipeline can be driven in-process as well as from the binary.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O error, 3 numeric or
//! training failure.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use genhai::data::artifact::{load_artifact, save_model, Provenance};
use genhai::data::synthetic::{generate_synthetic, SyntheticSpec};
use genhai::data::{extract_training_tables, ingest, split, write_corpus, CorpusFormat};
use genhai::eval::{evaluate, Predictive};
use genhai::patient_model::SubProgramId;
use genhai::queries::{QueryEngine, QueryError, QuerySpec, SweepAxis};
use genhai::subprograms::{FittedSubProgram, Registry, SubProgramSpec};
use genhai::svi::{fit_selected, SviError, TrainConfig};
use genhai_service::api::{ApiQueryResponse, ApiSweepResponse, ModelRef};
use genhai_service::{AppState, LoadedModel};

pub use config::{Config, Format, Preset};

pub const WORKERS_ENV: &str = "GENHAI_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

impl From<SviError> for CliError {
    fn from(e: SviError) -> Self {
        match (&e, e.subprogram()) {
            (SviError::Config(_), _) => CliError::Usage(e.to_string()),
            (_, Some(name)) => CliError::Numeric(format!("training {name} failed: {e}")),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<QueryError> for CliError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Field { .. } | QueryError::KindMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "genhai", version, about = "Generative model of MRSA test sequences")]
pub struct CliConfig {
    /// TOML config; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its truth manifest.
    Synth(SynthArgs),
    /// Fit sub-programs on a corpus and save a model artifact.
    Train(TrainArgs),
    /// Score a model on a held-out corpus.
    Eval(EvalArgs),
    /// Run one query or a sweep against a model.
    Query(QueryArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for model.json, traces/ and heldout.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Train only this sub-program; repeatable. The rest come from
    /// `--artifact`, or sit at their prior mean without one.
    #[arg(long = "subprogram", value_name = "NAME")]
    pub subprograms: Vec<String>,
    /// Base model for sub-programs that are not retrained.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Held-out corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for eval.json and eval.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Plug in posterior means instead of averaging over draws.
    #[arg(long)]
    pub posterior_mean: bool,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Query document (JSON); any field may be overridden by flags.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub kind: Option<String>,
    /// `tau_m=START:STOP:STEP` or `tau_p=V1,V2,...`
    #[arg(long)]
    pub sweep: Option<String>,
    /// Sequences per query.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<std::net::IpAddr>,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match CliConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: CliConfig) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, &cfg).map(|_| ()),
        Command::Train(a) => cmd_train(&a, &cfg).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, &cfg).map(|_| ()),
        Command::Query(a) => cmd_query(&a, &cfg),
        Command::Serve(a) => cmd_serve(&a, &cfg),
    }
}

fn workers(flag: Option<usize>, cfg: &Config) -> Result<usize, CliError> {
    let n = flag
        .or(cfg.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Usage("workers must be positive".into()));
    }
    Ok(n)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_at(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    fs::write(path, text).map_err(io_at(path))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Paths written by `synth`.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: PathBuf,
    pub truth: PathBuf,
}

pub fn cmd_synth(a: &SynthArgs, cfg: &Config) -> Result<SynthOutput, CliError> {
    let n = a.n.unwrap_or(cfg.synth.n);
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let mut spec = match a.preset.unwrap_or(cfg.synth.preset) {
        Preset::Default => SyntheticSpec::default_spec(n, seed),
        Preset::Recovery => SyntheticSpec::recovery(n, seed),
    };
    if let Some(m) = cfg.synth.max_events {
        spec.max_events = m;
    }
    let corpus = generate_synthetic(&spec).map_err(|e| CliError::Numeric(e.to_string()))?;
    create_dir(&a.out)?;
    let (name, format) = match a.format.unwrap_or(cfg.synth.format) {
        Format::Jsonl => ("corpus.jsonl", CorpusFormat::Jsonl),
        Format::Csv => ("corpus.csv", CorpusFormat::Csv),
    };
    let out = SynthOutput {
        corpus: a.out.join(name),
        truth: a.out.join("truth.json"),
    };
    write_corpus(&out.corpus, &corpus.records, format).map_err(data)?;
    write_json(&out.truth, &corpus.manifest)?;
    eprintln!("wrote {} records to {}", corpus.records.len(), out.corpus.display());
    Ok(out)
}

/// One line of the training summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub subprogram: SubProgramId,
    pub steps: usize,
    pub final_elbo: f64,
    pub aborted_steps: usize,
}

fn parse_ids(names: &[String]) -> Result<Vec<SubProgramId>, CliError> {
    if names.is_empty() {
        return Ok(SubProgramId::ALL.to_vec());
    }
    let mut ids = Vec::new();
    for n in names {
        let id = SubProgramId::from_name(n).map_err(|e| CliError::Usage(e.to_string()))?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

pub fn cmd_train(a: &TrainArgs, cfg: &Config) -> Result<Vec<TrainSummary>, CliError> {
    let workers = workers(a.workers, cfg)?;
    let mut tc: TrainConfig = cfg.train.svi.clone();
    if let Some(s) = a.seed.or(cfg.seed) {
        tc.seed = s;
    }
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        tc.learning_rate = lr;
    }
    tc.validate()?;
    let ratio = a.split_ratio.unwrap_or(cfg.train.split_ratio);
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::Usage(format!("split ratio {ratio} must lie in (0, 1]")));
    }
    let ids = parse_ids(&a.subprograms)?;
    let base = a
        .artifact
        .as_deref()
        .map(|p| load_artifact(p).and_then(|art| art.to_registry()))
        .transpose()
        .map_err(data)?;

    let report = ingest(&a.corpus, CorpusFormat::from_path(&a.corpus)).map_err(data)?;
    for r in &report.rejects {
        eprintln!("reject line {} ({}): {} {}", r.line, r.record_id, r.code.as_str(), r.detail);
    }
    if report.records.is_empty() {
        return Err(CliError::Data(format!("{}: no valid records", a.corpus.display())));
    }
    let (train, heldout) = split(&report.records, ratio, tc.seed);
    let tables = extract_training_tables(&train);
    let fitted = fit_selected(&tables, &ids, &tc, workers)?;

    let programs = SubProgramId::ALL
        .iter()
        .map(|&id| match fitted.iter().find(|(p, _)| p.id() == id) {
            Some((p, _)) => Ok(p.clone()),
            None => match &base {
                Some(reg) => Ok(reg.get(id).clone()),
                None => {
                    let spec = SubProgramSpec::for_id(id);
                    let dim = spec.layout().total_dim;
                    FittedSubProgram::point_mass(spec, vec![0.0; dim])
                }
            },
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let registry = Registry::new(programs).map_err(|e| CliError::Numeric(e.to_string()))?;

    create_dir(&a.out)?;
    let provenance = Provenance {
        corpus_sha256: Some(sha256_file(&a.corpus)?),
        seed: Some(tc.seed),
        workers: Some(workers),
        train_config: Some(serde_json::to_value(&tc).map_err(data)?),
        trained: ids.clone(),
    };
    save_model(&registry, provenance, &a.out.join("model.json")).map_err(data)?;

    let trace_dir = a.out.join("traces");
    create_dir(&trace_dir)?;
    let mut summary = Vec::new();
    for (p, trace) in &fitted {
        let path = trace_dir.join(format!("{}.jsonl", p.id().name()));
        let file = fs::File::create(&path).map_err(io_at(&path))?;
        trace.write_jsonl(std::io::BufWriter::new(file)).map_err(io_at(&path))?;
        summary.push(TrainSummary {
            subprogram: p.id(),
            steps: trace.records.len(),
            final_elbo: trace.final_smoothed(),
            aborted_steps: trace.aborted_steps,
        });
    }
    let held_path = a.out.join("heldout.jsonl");
    write_corpus(&held_path, &heldout, CorpusFormat::Jsonl).map_err(data)?;

    let mut out = std::io::stdout().lock();
    for s in &summary {
        let _ = writeln!(out, "{:<14} final ELBO {:>14.4}", s.subprogram.name(), s.final_elbo);
    }
    Ok(summary)
}

pub fn cmd_eval(a: &EvalArgs, cfg: &Config) -> Result<genhai::eval::EvalReport, CliError> {
    let workers = workers(a.workers, cfg)?;
    let registry = load_artifact(&a.artifact)
        .and_then(|art| art.to_registry())
        .map_err(data)?;
    let report = ingest(&a.corpus, CorpusFormat::from_path(&a.corpus)).map_err(data)?;
    for r in &report.rejects {
        eprintln!("reject line {} ({}): {} {}", r.line, r.record_id, r.code.as_str(), r.detail);
    }
    let tables = extract_training_tables(&report.records);
    let mode = if a.posterior_mean { Predictive::Mean } else { cfg.eval.predictive };
    let threshold = a.threshold.unwrap_or(cfg.eval.threshold);
    let bins = a.bins.unwrap_or(cfg.eval.bins);
    if bins == 0 || !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage("bins must be positive and threshold in [0, 1]".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let eval = pool
        .install(|| evaluate(&registry, &tables, threshold, bins, mode))
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    create_dir(&a.out)?;
    write_json(&a.out.join("eval.json"), &eval)?;
    let text = eval.to_text();
    fs::write(a.out.join("eval.txt"), &text).map_err(io_at(&a.out))?;
    print!("{text}");
    Ok(eval)
}

/// Parse `tau_m=1:20:1` (inclusive range) or `tau_p=0,1,2`.
pub fn parse_sweep(s: &str) -> Result<(SweepAxis, Vec<f64>), CliError> {
    let bad = |m: String| CliError::Usage(format!("--sweep {s:?}: {m}"));
    let (axis, rest) = s.split_once('=').ok_or_else(|| bad("expected AXIS=GRID".into()))?;
    let axis = match axis.trim() {
        "tau_m" => SweepAxis::TauM,
        "tau_p" => SweepAxis::TauP,
        other => return Err(bad(format!("unknown axis {other}"))),
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}")));
    let parts: Vec<&str> = rest.split(':').collect();
    let grid = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
                return Err(bad("need START <= STOP and STEP > 0".into()));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            if n > genhai::queries::MAX_SWEEP_POINTS {
                return Err(bad(format!("more than {} points", genhai::queries::MAX_SWEEP_POINTS)));
            }
            (0..n).map(|i| start + i as f64 * step).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected START:STOP:STEP or a comma list".into())),
    };
    Ok((axis, grid))
}

/// Build the query from the input file, config defaults and flags.
/// Returns the spec and whether the seed had to be assigned.
pub fn resolve_query(a: &QueryArgs, cfg: &Config) -> Result<(QuerySpec, bool), CliError> {
    let text = fs::read_to_string(&a.input).map_err(io_at(&a.input))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.input.display())))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CliError::Data(format!("{}: expected a JSON object", a.input.display())))?;
    if let Some(n) = cfg.query.n_sequences {
        obj.entry("n_sequences").or_insert(n.into());
    }
    if let Some(n) = cfg.query.n_posterior_draws {
        obj.entry("n_posterior_draws").or_insert(n.into());
    }
    if let Some(k) = &a.kind {
        obj.insert("kind".into(), k.clone().into());
    }
    if let Some(n) = a.n {
        obj.insert("n_sequences".into(), n.into());
    }
    if let Some(s) = a.seed {
        obj.insert("seed".into(), s.into());
    }
    let mut assigned = false;
    if obj.get("seed").is_none_or(|s| s.is_null()) {
        assigned = true;
        obj.insert("seed".into(), cfg.seed.unwrap_or(0).into());
    }
    let spec: QuerySpec = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("{}: {e}", a.input.display())))?;
    spec.validate()?;
    Ok((spec, assigned))
}

/// The response body, byte-identical to what the service returns for the
/// same resolved query.
pub fn query_body(a: &QueryArgs, cfg: &Config) -> Result<Vec<u8>, CliError> {
    let workers = workers(a.workers, cfg)?;
    let artifact = load_artifact(&a.artifact).map_err(data)?;
    let registry = artifact.to_registry().map_err(data)?;
    let (spec, seed_assigned) = resolve_query(a, cfg)?;
    let engine = QueryEngine::new(&registry, workers)?;
    let model = ModelRef::of(&artifact);
    let body = match &a.sweep {
        None => serde_json::to_vec(&ApiQueryResponse {
            result: engine.estimate(&spec)?,
            seed: spec.seed,
            seed_assigned,
            inputs: spec,
            model,
        }),
        Some(s) => {
            let (axis, grid) = parse_sweep(s)?;
            genhai::queries::validate_sweep(&spec, axis, &grid)?;
            serde_json::to_vec(&ApiSweepResponse {
                axis,
                points: engine.sweep(&spec, axis, &grid)?,
                seed: spec.seed,
                seed_assigned,
                inputs: spec,
                model,
            })
        }
    };
    body.map_err(data)
}

pub fn cmd_query(a: &QueryArgs, cfg: &Config) -> Result<(), CliError> {
    let mut body = query_body(a, cfg)?;
    body.push(b'\n');
    match &a.out {
        Some(path) => fs::write(path, &body).map_err(io_at(path)),
        None => std::io::stdout().lock().write_all(&body).map_err(data),
    }
}

pub fn cmd_serve(a: &ServeArgs, cfg: &Config) -> Result<(), CliError> {
    let workers = workers(a.workers, cfg)?;
    let model = LoadedModel::load(&a.artifact).map_err(data)?;
    let state = AppState::new(Some(model), workers).map_err(data)?;
    let addr = SocketAddr::new(a.bind.unwrap_or(cfg.serve.bind), a.port.unwrap_or(cfg.serve.port));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(data)?;
    rt.block_on(async move {
        let listener = genhai_service::bind(addr).await.map_err(data)?;
        let local = listener.local_addr().map_err(data)?;
        eprintln!("listening on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            eprintln!("shutting down");
        };
        genhai_service::serve(listener, state, shutdown).await.map_err(data)
    })
}
