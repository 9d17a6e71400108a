//! `micg` command line. Each subcommand runs one pipeline stage from files
//! to files and prints a one-line JSON summary on stdout; diagnostics go to
//! stderr.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime error,
//! 3 missing upstream artifact.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{AppConfig, CONFIG_ENV};
use crate::evo;
use crate::fitness::MlpSpec;
use crate::hierarchy::{self, HierarchyConfig, IndexReport, IndicatorVector};
use crate::inference::{self, BeliefState, LikertElicitation};
use crate::phenotyping::{self, AdjustedMatrix};
use crate::pipeline::{self, PipelineError};
use crate::service::{self, state::ServiceState, Service};
use crate::sim;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "micg", version, about = "Multidimensional index of child growth")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Io {
    /// Input files, in the order the command documents.
    #[arg(long = "in", value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportStage {
    Reports,
    Beliefs,
    Params,
    History,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the configuration and hierarchy (`--in` may name a hierarchy JSON).
    ValidateConfig(Io),
    /// Synthetic cohort into the `--out` directory.
    Simulate(Io),
    /// `--in` elicitations (.csv or .json) → `--out` beliefs JSON.
    ElicitPrior(Io),
    /// `--in` beliefs, then zero or more observation JSONL files → `--out` beliefs.
    UpdatePosterior(Io),
    /// `--in` timed responses JSONL → `--out` adjusted matrix CSV.
    AdjustResponses(Io),
    /// `--in` beliefs, then responses JSONL or adjusted CSV → `--out` directory.
    TrainFitness(Io),
    /// `--in` beliefs, then observation JSONL files → `--out` reports JSON.
    ComputeIndex {
        #[command(flatten)]
        io: Io,
        /// Report timestamp; defaults to the latest `observed_at`.
        #[arg(long)]
        as_of: Option<DateTime<Utc>>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// `--in` reports JSON or a service data directory → `--out` file.
    ExportReport {
        #[command(flatten)]
        io: Io,
        #[arg(long, value_enum, default_value = "reports")]
        stage: ExportStage,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    Precondition(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Precondition(_) => EXIT_PRECONDITION,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::Precondition(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Fitness(_) | PipelineError::Evo(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn open_input(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Precondition(format!("missing input {}", path.display())),
        _ => runtime(format!("{}: {e}", path.display())),
    })
}

fn read_input(path: &Path) -> CliResult<String> {
    std::io::read_to_string(open_input(path)?).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn input(io: &Io, i: usize, what: &str) -> CliResult<PathBuf> {
    io.inputs.get(i).cloned().ok_or_else(|| invalid(format!("--in {what} is required")))
}

fn out(io: &Io) -> CliResult<&Path> {
    io.out.as_deref().ok_or_else(|| invalid("--out is required"))
}

fn create(path: &Path) -> CliResult<std::io::BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    Ok(std::io::BufWriter::new(File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?))
}

/// Pretty JSON with a trailing newline; the common format of every JSON output.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(runtime)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(runtime)
}

pub fn read_observations_jsonl(path: &Path) -> CliResult<Vec<IndicatorVector>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open_input(path)?).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| invalid(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn write_observations_jsonl(path: &Path, obs: &[IndicatorVector]) -> CliResult<()> {
    let mut w = create(path)?;
    for x in obs {
        serde_json::to_writer(&mut w, x).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn read_beliefs(path: &Path) -> CliResult<BeliefState> {
    BeliefState::from_json(&read_input(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_elicitations(path: &Path) -> CliResult<Vec<LikertElicitation>> {
    let f = open_input(path)?;
    let r = if path.extension().is_some_and(|e| e == "json") {
        inference::read_elicitations_json(f)
    } else {
        inference::read_elicitations_csv(f)
    };
    r.map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_adjusted(path: &Path, cfg: &AppConfig) -> CliResult<AdjustedMatrix> {
    let f = open_input(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        phenotyping::read_adjusted_csv(f).map_err(|e| invalid(format!("{}: {e}", path.display())))
    } else {
        let responses = phenotyping::read_responses_jsonl(BufReader::new(f)).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        phenotyping::adjust_batch(&responses, &cfg.certainty).map_err(invalid)
    }
}

fn check_observations(obs: &[IndicatorVector], h: &HierarchyConfig, cfg: &AppConfig) -> CliResult<()> {
    obs.iter().try_for_each(|x| x.check(h, cfg.missing_policy)).map_err(invalid)
}

fn load(cli: &Cli) -> CliResult<(AppConfig, HierarchyConfig)> {
    let mut cfg = AppConfig::load(cli.config.as_deref()).map_err(|e| match e {
        crate::config::ConfigError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::Precondition(e.to_string())
        }
        _ => invalid(e),
    })?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let h = cfg.load_hierarchy().map_err(invalid)?;
    Ok((cfg, h))
}

fn validate_config(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, mut h) = load(cli)?;
    if let Some(p) = io.inputs.first() {
        h = HierarchyConfig::from_json(&read_input(p)?).map_err(invalid)?;
    }
    let mut problems: Vec<String> = hierarchy::validate_hierarchy(&h).iter().map(|v| v.to_string()).collect();
    let checks: [(&str, Result<(), String>); 4] = [
        ("certainty", cfg.certainty.validate().map_err(|e| e.to_string())),
        ("ga", cfg.ga.validate().map_err(|e| e.to_string())),
        ("simulation", cfg.simulation.validate().map_err(|e| e.to_string())),
        ("network", MlpSpec::new(h.indicators.len(), cfg.network.hidden_layers.clone()).validate().map_err(|e| e.to_string())),
    ];
    for (name, r) in checks {
        if let Err(e) = r {
            problems.push(format!("{name}: {e}"));
        }
    }
    if !(cfg.prior.alpha_prior.is_finite() && cfg.prior.alpha_prior > 0.0) {
        problems.push(format!("prior: alpha_prior must be positive, got {}", cfg.prior.alpha_prior));
    }
    if !(cfg.likelihood.tau_sq.is_finite() && cfg.likelihood.tau_sq > 0.0) {
        problems.push(format!("likelihood: tau_sq must be positive, got {}", cfg.likelihood.tau_sq));
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invalid: {p}");
        }
        return Err(CliError::Validation(format!("{} problem(s): {}", problems.len(), problems.join("; "))));
    }
    Ok(json!({
        "hierarchy": h.version,
        "indicators": h.indicators.len(),
        "constructs": h.constructs.len(),
        "broad_dimensions": h.broad_dimensions.len(),
        "overarching": h.overarching.len(),
    }))
}

fn simulate(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let dir = out(io)?;
    let b = sim::generate(&cfg.simulation, &h).map_err(invalid)?;
    write_json(&dir.join("truth.json"), &b.truth)?;
    let mut w = create(&dir.join("elicitations.csv"))?;
    inference::write_elicitations_csv(&mut w, &b.elicitations).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    write_observations_jsonl(&dir.join("observations.jsonl"), &b.indicator_vectors)?;
    let mut w = create(&dir.join("responses.jsonl"))?;
    phenotyping::write_responses_jsonl(&mut w, &b.timed_responses).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    Ok(json!({
        "seed": cfg.simulation.seed,
        "children": b.indicator_vectors.len(),
        "respondents": cfg.simulation.n_respondents,
        "elicitations": b.elicitations.len(),
        "responses": b.timed_responses.len(),
        "out": dir,
    }))
}

fn elicit_prior(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let el = read_elicitations(&input(io, 0, "elicitations")?)?;
    let prior = inference::elicit_prior(&el, &h.indicator_ids(), &cfg.prior).map_err(invalid)?;
    let state = BeliefState::from_prior(prior);
    let path = out(io)?;
    write_json(path, &state)?;
    Ok(json!({ "elicitations": el.len(), "indicators": state.beliefs.len(), "out": path }))
}

fn update_posterior(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let prior = read_beliefs(&input(io, 0, "beliefs")?)?;
    let mut obs = Vec::new();
    for p in &io.inputs[1..] {
        obs.extend(read_observations_jsonl(p)?);
    }
    check_observations(&obs, &h, &cfg)?;
    let (post, diags) = pipeline::update_posterior(&prior, &obs)?;
    let path = out(io)?;
    write_json(path, &post)?;
    let max = |f: fn(&inference::PosteriorDiagnostic) -> f64| diags.iter().map(f).fold(0.0, f64::max);
    Ok(json!({
        "observations": obs.len(),
        "wave": post.wave,
        "unchanged": post == prior,
        "max_mean_divergence": max(|d| d.mean_divergence),
        "max_variance_divergence": max(|d| d.variance_divergence),
        "out": path,
    }))
}

fn adjust_responses(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, _) = load(cli)?;
    let p = input(io, 0, "responses")?;
    let responses = phenotyping::read_responses_jsonl(BufReader::new(open_input(&p)?)).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    let m = phenotyping::adjust_batch(&responses, &cfg.certainty).map_err(invalid)?;
    let path = out(io)?;
    let mut w = create(path)?;
    phenotyping::write_adjusted_csv(&mut w, &m).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    Ok(json!({
        "responses": responses.len(),
        "respondents": m.n_rows(),
        "indicators": m.n_cols(),
        "observed_cells": m.observed_count(),
        "out": path,
    }))
}

fn train_fitness(cli: &Cli, io: &Io) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let beliefs = read_beliefs(&input(io, 0, "beliefs")?)?;
    let adjusted = read_adjusted(&input(io, 1, "responses")?, &cfg)?;
    let t = pipeline::train_fitness(&beliefs, &adjusted, &h, &cfg)?;
    let dir = out(io)?;
    write_json(&dir.join("params.json"), &t.result.best)?;
    let mut w = create(&dir.join("history.csv"))?;
    evo::write_history_csv(&mut w, &t.result.history).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    let mut v = serde_json::to_value(&t.summary).map_err(runtime)?;
    v["out"] = json!(dir);
    Ok(v)
}

fn compute_index(cli: &Cli, io: &Io, as_of: Option<DateTime<Utc>>) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let beliefs = read_beliefs(&input(io, 0, "beliefs")?)?;
    if io.inputs.len() < 2 {
        return Err(invalid("--in observations is required after --in beliefs"));
    }
    let mut obs = Vec::new();
    for p in &io.inputs[1..] {
        obs.extend(read_observations_jsonl(p)?);
    }
    check_observations(&obs, &h, &cfg)?;
    let at = as_of
        .or_else(|| obs.iter().map(|x| x.observed_at).max())
        .ok_or_else(|| invalid("no observations and no --as-of"))?;
    let reports = pipeline::compute_index(&beliefs, &obs, &h, &cfg, at)?;
    let path = out(io)?;
    write_json(path, &reports)?;
    let mean = reports.iter().map(|r| r.overall).sum::<f64>() / reports.len().max(1) as f64;
    Ok(json!({ "children": reports.len(), "computed_at": at, "mean_overall": mean, "out": path }))
}

fn export_report(cli: &Cli, io: &Io, stage: ExportStage) -> CliResult<Value> {
    let (cfg, h) = load(cli)?;
    let src = input(io, 0, "reports JSON or data directory")?;
    let path = out(io)?;
    let state = if src.is_dir() {
        let log = src.join(service::EVENTS_FILE);
        if !log.exists() {
            return Err(CliError::Precondition(format!("missing event log {}", log.display())));
        }
        let (_, records) = service::events::EventStore::open(&log).map_err(runtime)?;
        Some(ServiceState::replay(&records))
    } else {
        None
    };
    let missing = |what: &str| CliError::Precondition(format!("{} has no {what} yet", src.display()));
    let count = match (stage, &state) {
        (ExportStage::Reports, _) => {
            let reports: Vec<IndexReport> = match &state {
                Some(st) => st.reports.values().cloned().collect(),
                None => serde_json::from_str(&read_input(&src)?).map_err(|e| invalid(format!("{}: {e}", src.display())))?,
            };
            let mut w = create(path)?;
            hierarchy::write_reports_csv(&mut w, &h, &reports).map_err(runtime)?;
            w.flush().map_err(runtime)?;
            reports.len()
        }
        (_, None) => return Err(invalid("--stage other than reports needs a data directory as --in")),
        (ExportStage::Beliefs, Some(st)) => {
            let b = st.beliefs.as_ref().ok_or_else(|| missing("beliefs"))?;
            write_json(path, b)?;
            b.beliefs.len()
        }
        (ExportStage::Params, Some(st)) => {
            write_json(path, st.network.as_ref().ok_or_else(|| missing("network"))?)?;
            1
        }
        (ExportStage::History, Some(st)) => {
            if st.history.is_empty() {
                return Err(missing("training history"));
            }
            let mut w = create(path)?;
            writeln!(w, "generation,best_fitness,mean_fitness").map_err(runtime)?;
            for r in &st.history {
                writeln!(w, "{},{},{}", r.generation, r.best_fitness, r.mean_fitness).map_err(runtime)?;
            }
            w.flush().map_err(runtime)?;
            st.history.len()
        }
    };
    let _ = cfg;
    Ok(json!({ "stage": format!("{stage:?}").to_lowercase(), "rows": count, "out": path }))
}

fn serve(cli: &Cli, bind: Option<String>, data_dir: Option<PathBuf>) -> CliResult<Value> {
    let (mut cfg, _) = load(cli)?;
    if let Some(b) = bind {
        cfg.server.bind = b;
    }
    if let Some(d) = data_dir {
        cfg.server.data_dir = d;
    }
    let svc = Arc::new(Service::open(cfg, service::system_clock()).map_err(runtime)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    let data_dir = svc.data_dir().to_path_buf();
    rt.block_on(service::http::serve(svc, |addr| {
        println!("{}", json!({ "command": "serve", "status": "listening", "listening": addr.to_string(), "data_dir": data_dir }));
        let _ = std::io::stdout().flush();
    }))
    .map_err(runtime)?;
    Ok(json!({ "stopped": true }))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::ValidateConfig(_) => "validate-config",
        Command::Simulate(_) => "simulate",
        Command::ElicitPrior(_) => "elicit-prior",
        Command::UpdatePosterior(_) => "update-posterior",
        Command::AdjustResponses(_) => "adjust-responses",
        Command::TrainFitness(_) => "train-fitness",
        Command::ComputeIndex { .. } => "compute-index",
        Command::Serve { .. } => "serve",
        Command::ExportReport { .. } => "export-report",
    }
}

pub fn execute(cli: Cli) -> CliResult<Value> {
    match &cli.command {
        Command::ValidateConfig(io) => validate_config(&cli, io),
        Command::Simulate(io) => simulate(&cli, io),
        Command::ElicitPrior(io) => elicit_prior(&cli, io),
        Command::UpdatePosterior(io) => update_posterior(&cli, io),
        Command::AdjustResponses(io) => adjust_responses(&cli, io),
        Command::TrainFitness(io) => train_fitness(&cli, io),
        Command::ComputeIndex { io, as_of } => compute_index(&cli, io, *as_of),
        Command::Serve { bind, data_dir } => serve(&cli, bind.clone(), data_dir.clone()),
        Command::ExportReport { io, stage } => export_report(&cli, io, *stage),
    }
}

/// Parses `args`, runs the command, prints the summary line and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let name = command_name(&cli.command);
    match execute(cli) {
        Ok(mut v) => {
            let mut line = json!({ "command": name, "status": "ok" });
            if let (Some(l), Some(extra)) = (line.as_object_mut(), v.as_object_mut()) {
                l.append(extra);
            }
            println!("{line}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("micg {name}: {}", e.message());
            println!("{}", json!({ "command": name, "status": "error", "exit_code": e.exit_code(), "error": e.message() }));
            e.exit_code()
        }
    }
}
