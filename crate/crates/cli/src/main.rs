//! `codeq`: generate data and streaming scenarios, replay them against
//! quantizers, and measure per-insert disk cost.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data errors.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use codeq::stream::run::{build_method, run_scenario_with, write_io_csv, write_recall_csv, Method, Truth};
use codeq::stream::vecs::{read_vectors, write_fvecs, Vectors};
use codeq::stream::{construct_stream, drifting_mixture, io_cost_experiment, median, MixtureConfig, Scenario};

use config::{parse_list, Settings};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

impl From<codeq::Error> for CliError {
    fn from(e: codeq::Error) -> Self {
        match e {
            codeq::Error::Config(m) => CliError::Config(m),
            codeq::Error::Data(m) => CliError::Data(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "codeq", version, about = "Streaming quantizer experiments")]
struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic drifting Gaussian mixture as fvecs.
    GenData(#[command(flatten)] Settings),
    /// Build a streaming scenario over a vector file.
    GenStream(#[command(flatten)] Settings),
    /// Replay a scenario and report recall per iteration as CSV.
    BenchRecall(#[command(flatten)] Settings),
    /// Measure vectors read from disk by a single insert as CSV.
    BenchIo(#[command(flatten)] Settings),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::GenStream(_) => "gen-stream",
            Command::BenchRecall(_) => "bench-recall",
            Command::BenchIo(_) => "bench-io",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let name = cli.command.name();
    match cli.command {
        Command::GenData(s) => gen_data(&s.over(file)),
        Command::GenStream(s) => gen_stream(&s.over(file)),
        Command::BenchRecall(s) => bench_recall(&s.over(file), name),
        Command::BenchIo(s) => bench_io(&s.over(file), name),
    }
}

fn out_path(s: &Settings) -> Result<&Path, CliError> {
    s.out.as_deref().ok_or_else(|| CliError::Config("--out is required".into()))
}

/// Opens `--out`, or stdout when it is absent.
fn output(s: &Settings) -> Result<Box<dyn Write>, CliError> {
    Ok(match &s.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_vectors(s: &Settings) -> Result<Vectors<f32>, CliError> {
    let path = s.input()?;
    Ok(read_vectors(path, None)?)
}

/// The settings a command ran with, as JSON for output headers.
fn provenance(s: &Settings, command: &str) -> String {
    let mut json = serde_json::to_value(s).unwrap_or_default();
    if let Some(map) = json.as_object_mut() {
        map.retain(|_, v| !v.is_null());
    }
    format!("codeq {} {command} {json}", env!("CARGO_PKG_VERSION"))
}

fn gen_data(s: &Settings) -> Result<(), CliError> {
    let mut cfg = MixtureConfig::new(s.n.unwrap_or(20_000), s.dim.unwrap_or(96), s.clusters.unwrap_or(10), s.seed());
    if let Some(d) = s.drift {
        cfg.drift = d;
    }
    let (data, _) = drifting_mixture(&cfg)?;
    let out = out_path(s)?;
    write_fvecs(out, &data)?;
    // fvecs has no room for metadata, so the settings go alongside.
    let mut side = out.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(&side, serde_json::to_string_pretty(&cfg).map_err(io::Error::from)?)?;
    eprintln!("wrote {} vectors of dimension {} to {}", data.len(), data.dim, out.display());
    Ok(())
}

fn gen_stream(s: &Settings) -> Result<(), CliError> {
    let data = load_vectors(s)?;
    let params = s.stream_params(data.len());
    let mut scenario = construct_stream(&data, &params)?;
    scenario.source = Some(provenance(s, "gen-stream"));
    scenario.save(out_path(s)?)?;
    eprintln!("wrote {} iterations", scenario.iterations());
    Ok(())
}

fn load_or_build_scenario(s: &Settings, data: &Vectors<f32>) -> Result<Scenario, CliError> {
    let scenario = match &s.scenario {
        Some(p) => Scenario::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => construct_stream(data, &s.stream_params(data.len()))?,
    };
    if scenario.rows != data.len() {
        return Err(CliError::Data(format!(
            "scenario refers to {} vectors, {} has {}",
            scenario.rows,
            s.input()?.display(),
            data.len()
        )));
    }
    Ok(scenario)
}

fn bench_recall(s: &Settings, command: &str) -> Result<(), CliError> {
    let methods = s.methods()?;
    let cfg = s.method_config()?;
    let (k, k_prime) = (s.k.unwrap_or(10), s.kprime.unwrap_or(50));
    if k == 0 || k_prime < k {
        return Err(CliError::Config(format!("need 0 < k <= k', got k = {k}, k' = {k_prime}")));
    }
    let data = load_vectors(s)?;
    let scenario = load_or_build_scenario(s, &data)?;
    let truth = Truth::compute(&data, &scenario, k)?;

    let mut runs = methods.clone();
    if s.normalize_rebuild && !runs.contains(&Method::RebuildPq) {
        runs.push(Method::RebuildPq);
    }
    let mut reports = Vec::new();
    for &m in &runs {
        let mut q = build_method(m, &cfg, &data, &scenario.steps[0].inserts)?;
        let report = run_scenario_with(q.as_mut(), &data, &scenario, &truth, k_prime)?;
        let r = report.recall_at_k();
        eprintln!("{m}: median recall-{k}@{k} over the last half {:.4}", median(&r[r.len() / 2..]));
        reports.push((m, report));
    }
    let reference = reports.iter().find(|(m, _)| *m == Method::RebuildPq).map(|(_, r)| r.clone());
    let shown: Vec<_> = reports.into_iter().filter(|(m, _)| methods.contains(m)).map(|(_, r)| r).collect();

    let mut out = output(s)?;
    writeln!(out, "# {}", provenance(s, command))?;
    if s.normalize_rebuild {
        writeln!(out, "# recall columns are ratios to rebuildpq")?;
    }
    write_recall_csv(&mut out, &shown, if s.normalize_rebuild { reference.as_ref() } else { None })?;
    out.flush()?;
    Ok(())
}

fn bench_io(s: &Settings, command: &str) -> Result<(), CliError> {
    let data = load_vectors(s)?;
    let trials = s.trials.unwrap_or(10);
    let sizes = match &s.sizes {
        Some(list) => parse_list(list, "--sizes")?,
        // Powers of ten from 1000 while the file can supply the trial inserts.
        None => std::iter::successors(Some(1000usize), |n| Some(n * 10))
            .take_while(|&n| n + trials <= data.len())
            .collect(),
    };
    if sizes.is_empty() {
        return Err(CliError::Data(format!("{} vectors are too few for any dataset size", data.len())));
    }
    let bits = s.bits_list(&[4, 6])?;
    let rows = io_cost_experiment(&data, &sizes, &bits, s.blocks.unwrap_or(8), trials, s.seed())?;
    let mut out = output(s)?;
    writeln!(out, "# {}", provenance(s, command))?;
    write_io_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}
