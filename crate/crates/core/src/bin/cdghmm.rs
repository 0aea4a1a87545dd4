use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cdghmm::em::{decode, fit, FitConfig, InitMethod};
use cdghmm::io::{configure_threads, load_panel, read_json, write_decoded, write_json, write_panel, write_study_csv, DropoutMode, FitFile};
use cdghmm::simulate::{generate, run_study, SimSpec, Study, StudyOptions};
use cdghmm::types::{Mechanism, ModelStructure};
use cdghmm::Error;

#[derive(Parser)]
#[command(name = "cdghmm", version, about = "Cholesky-decomposed Gaussian hidden Markov models for panel data")]
struct Cli {
    /// Worker threads (falls back to CDGHMM_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Bic,
    Icl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Kmeans,
    Random,
}

#[derive(clap::Args)]
struct EstimationArgs {
    #[arg(long, default_value = "mar")]
    mechanism: Mechanism,
    #[arg(long, default_value = "auto")]
    dropout: DropoutMode,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "kmeans")]
    init: Init,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a panel from a JSON spec
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating parameters and true states
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit one family member
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelStructure,
        #[arg(long)]
        states: usize,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locally decode a panel with a saved fit
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study
    Study {
        #[arg(long)]
        name: Study,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit all eight members and rank them
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        states: usize,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long, value_enum, default_value = "bic")]
        criterion: Criterion,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let report = ErrorReport {
        error: kind,
        message,
        exit_code: code,
    };
    eprintln!("{}", serde_json::to_string(&report).unwrap_or_default());
    ExitCode::from(code)
}

fn config(structure: ModelStructure, states: usize, est: &EstimationArgs, dropout: bool) -> FitConfig {
    let mut cfg = FitConfig::new(structure, states);
    cfg.mechanism = est.mechanism;
    cfg.dropout = dropout;
    cfg.n_starts = est.starts;
    cfg.seed = est.seed;
    cfg.rel_tol = est.tol;
    cfg.max_iter = est.max_iter;
    cfg.init = match est.init {
        Init::Kmeans => InitMethod::KMeans,
        Init::Random => InitMethod::Random,
    };
    cfg
}

#[derive(Serialize)]
struct TruthFile {
    params: cdghmm::types::HmmParams,
    /// `[subject][time]`, 1-based; `m + 1` marks dropout.
    states: Vec<Vec<usize>>,
    diagnostics: Vec<String>,
}

#[derive(Serialize)]
struct Ranked {
    rank: usize,
    model: String,
    loglik: f64,
    bic: f64,
    icl: f64,
    rho: usize,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct SelectReport {
    criterion: &'static str,
    states: usize,
    mechanism: Mechanism,
    best: Option<String>,
    models: Vec<Ranked>,
    failures: Vec<String>,
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate { spec, out, truth } => {
            let spec: SimSpec = read_json(&spec)?;
            let sim = generate(&spec).map_err(|e| match e {
                Error::InvalidInput(msg) => Error::Data(format!("spec: {msg}")),
                other => other,
            })?;
            write_panel(&out, &sim.data)?;
            if let Some(path) = truth {
                let nt = sim.data.n_times;
                let states = sim.states.chunks(nt).map(|c| c.iter().map(|s| s + 1).collect()).collect();
                write_json(
                    &path,
                    &TruthFile {
                        params: sim.truth,
                        states,
                        diagnostics: sim.diagnostics,
                    },
                )?;
            }
        }
        Command::Fit { data, model, states, est, out } => {
            let ds = load_panel(&data, est.dropout)?;
            let cfg = config(model, states, &est, est.dropout != DropoutMode::Off && ds.has_dropout());
            let res = fit(&ds, &cfg)?;
            write_json(&out, &FitFile::from_result(&res, &ds, est.dropout))?;
        }
        Command::Decode { data, fit, out } => {
            let file: FitFile = read_json(&fit)?;
            let params = file.to_params()?;
            let mode = if file.dropout { file.dropout_mode } else { DropoutMode::Off };
            let ds = load_panel(&data, mode)?;
            if ds.p != file.p {
                return Err(Error::Data(format!("fit has {} variables, data has {}", file.p, ds.p)));
            }
            let (labels, post) = decode(&ds, &params)?;
            write_decoded(&out, &ds, &labels, &post)?;
        }
        Command::Study { name, replicates, seed, starts, out } => {
            let opts = StudyOptions {
                n_starts: starts,
                ..StudyOptions::default()
            };
            let rows = run_study(name, replicates, seed, &opts)?;
            write_study_csv(&out, &rows)?;
        }
        Command::Select { data, states, est, criterion, out } => {
            let ds = load_panel(&data, est.dropout)?;
            let dropout = est.dropout != DropoutMode::Off && ds.has_dropout();
            let mut ranked = Vec::new();
            let mut failures = Vec::new();
            for s in ModelStructure::ALL {
                match fit(&ds, &config(s, states, &est, dropout)) {
                    Ok(r) => ranked.push(Ranked {
                        rank: 0,
                        model: s.code().into(),
                        loglik: r.loglik,
                        bic: r.bic,
                        icl: r.icl,
                        rho: r.rho,
                        iterations: r.iterations,
                        converged: r.converged,
                    }),
                    Err(e) => failures.push(format!("{s}: {e}")),
                }
            }
            let key = |r: &Ranked| match criterion {
                Criterion::Bic => r.bic,
                Criterion::Icl => r.icl,
            };
            ranked.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap_or(std::cmp::Ordering::Equal));
            for (k, r) in ranked.iter_mut().enumerate() {
                r.rank = k + 1;
            }
            if ranked.is_empty() {
                return Err(Error::AllStartsFailed {
                    starts: failures.len(),
                    first: failures.first().cloned().unwrap_or_default(),
                });
            }
            let report = SelectReport {
                criterion: match criterion {
                    Criterion::Bic => "bic",
                    Criterion::Icl => "icl",
                },
                states,
                mechanism: est.mechanism,
                best: ranked.first().map(|r| r.model.clone()),
                models: ranked,
                failures,
            };
            write_json(&out, &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim().to_string(), 1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_numeric() => fail("numeric", e.to_string(), 3),
        Err(e @ Error::InvalidInput(_)) => fail("usage", e.to_string(), 1),
        Err(e) => fail("data", e.to_string(), 2),
    }
}
