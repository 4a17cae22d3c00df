//! `factor-mle`: fit, score, verify and simulate static factor models.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 EM did not converge (the
//! result is still written), 3 a model failed verification.

mod fit_result;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use factor_mle::em::{self, EMConfig, Init};
use factor_mle::identify::{self, DEFAULT_VERIFY_TOLERANCE};
use factor_mle::montecarlo::{self, RateConfig};
use factor_mle::{inference, scores, Dataset, FactorError, IdentificationTag, ScoreMethod};

use fit_result::{FitResult, Warning};

/// Environment variable holding the worker thread count for simulations.
const THREADS_ENV: &str = "FACTOR_MLE_THREADS";

const EXIT_INPUT: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_VERIFY_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "factor-mle", version, about = "Maximum-likelihood factor models fitted by EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a factor model to a CSV panel (rows = time, columns = variables).
    Fit {
        data: PathBuf,
        #[arg(short = 'r', long)]
        factors: usize,
        /// Identification condition, 1-5.
        #[arg(long, default_value = "3", value_parser = parse_tag)]
        ic: IdentificationTag,
        #[arg(long, default_value_t = EMConfig::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = EMConfig::default().max_iter)]
        max_iter: usize,
        /// Start EM from random loadings drawn with this seed instead of PCA.
        #[arg(long)]
        seed: Option<u64>,
        /// Attach plug-in standard errors.
        #[arg(long)]
        se: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Compute factor scores for a panel under a fitted model; writes a T×r CSV.
    Scores {
        data: PathBuf,
        model: PathBuf,
        #[arg(long, default_value = "gls", value_parser = parse_method)]
        method: ScoreMethod,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check a fitted model against the constraints of an identification condition.
    Verify {
        model: PathBuf,
        /// Condition to check; defaults to the one recorded in the model.
        #[arg(long, value_parser = parse_tag)]
        ic: Option<IdentificationTag>,
        #[arg(long, default_value_t = DEFAULT_VERIFY_TOLERANCE)]
        tol: f64,
    },
    /// Run the Monte Carlo harness.
    Simulate {
        #[arg(long, value_enum, default_value_t = Mode::Table2)]
        mode: Mode,
        /// Comma-separated NxT cells, e.g. `10x50,50x50`.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<Grid>,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory; results go to stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Canonical-correlation accuracy table, MLE against principal components.
    Table2,
    /// Loading-error rates in N and T and the projection/GLS score gap.
    Rates,
}

#[derive(Debug, Clone)]
struct Grid(Vec<(usize, usize)>);

fn parse_tag(s: &str) -> Result<IdentificationTag, String> {
    s.parse().map_err(|e: FactorError| e.to_string())
}

fn parse_method(s: &str) -> Result<ScoreMethod, String> {
    s.parse().map_err(|e: FactorError| e.to_string())
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    s.split(',')
        .map(|cell| {
            let (n, t) = cell.trim().split_once(['x', 'X']).ok_or_else(|| format!("cell {cell:?} is not NxT"))?;
            let n = n.trim().parse().map_err(|_| format!("bad N in {cell:?}"))?;
            let t = t.trim().parse().map_err(|_| format!("bad T in {cell:?}"))?;
            Ok((n, t))
        })
        .collect::<Result<Vec<_>, String>>()
        .map(Grid)
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] FactorError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("invalid {THREADS_ENV}: {0}")]
    Threads(String),
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| CliError::File { path: path.to_path_buf(), source }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| CliError::File { path: "<stdout>".into(), source }),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = value.trim().parse().map_err(|_| CliError::Threads(value.clone()))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| CliError::Threads(e.to_string()))
}

fn cmd_fit(
    data: &Path,
    factors: usize,
    ic: IdentificationTag,
    cfg: EMConfig,
    se: bool,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    let d = Dataset::from_csv_path(data)?;
    let est = em::fit(&d, factors, &cfg)?.to_tag(ic)?;
    let mut warnings: Vec<Warning> = est.trace.warnings.iter().map(Warning::from).collect();
    let standard_errors = if se {
        match inference::standard_errors(&est) {
            Ok(s) => Some(s),
            Err(e @ FactorError::UnsupportedTag { .. }) => {
                warnings.push(Warning::new("standard_errors_unavailable", e.to_string()));
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let result = FitResult::from_estimate(&est, standard_errors, warnings);
    write_output(out, &result.to_json())?;
    if !result.converged {
        eprintln!("warning: EM did not converge in {} iterations", result.iterations);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_scores(data: &Path, model: &Path, method: ScoreMethod, out: Option<&Path>) -> Result<u8, CliError> {
    let d = Dataset::from_csv_path(data)?;
    let params = FitResult::from_json(&read_to_string(model)?)?.params()?;
    let f = scores::scores(&d, &params, method)?.values;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| FactorError::Csv { line: 0, message: e.to_string() };
    w.write_record((1..=f.ncols()).map(|k| format!("factor_{k}"))).map_err(csv_err)?;
    for row in f.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    write_output(out, &String::from_utf8(bytes).expect("csv output is utf-8"))?;
    Ok(0)
}

fn cmd_verify(model: &Path, ic: Option<IdentificationTag>, tol: f64) -> Result<u8, CliError> {
    let result = FitResult::from_json(&read_to_string(model)?)?;
    let tag = ic.unwrap_or(result.ic);
    let report = identify::verify(&result.unchecked_params()?, tag, tol);
    for c in &report.checks {
        println!("{} {tag} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if report.passed() { 0 } else { EXIT_VERIFY_FAILED })
}

fn cmd_simulate(mode: Mode, grid: Option<Grid>, reps: usize, seed: u64, out: Option<&Path>) -> Result<u8, CliError> {
    if reps == 0 {
        return Err(FactorError::InvalidInput("--reps must be at least 1".into()).into());
    }
    configure_threads()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })?;
    }
    let start = Instant::now();
    match mode {
        Mode::Table2 => {
            let grid = grid.map_or_else(|| montecarlo::DEFAULT_GRID.to_vec(), |g| g.0);
            let report = montecarlo::run_table2(&grid, reps, seed)?;
            let mut json = report.to_json();
            json.push('\n');
            match out {
                Some(dir) => {
                    write_output(Some(&dir.join("table2.csv")), &report.to_csv()?)?;
                    write_output(Some(&dir.join("table2.json")), &json)?;
                }
                None => write_output(None, &report.to_csv()?)?,
            }
        }
        Mode::Rates => {
            let mut cfg = RateConfig { reps, seed, ..RateConfig::default() };
            if let Some(g) = grid {
                cfg.two_term_grid = g.0;
            }
            let report = montecarlo::run_rate_check(&cfg)?;
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            write_output(out.map(|dir| dir.join("rates.json")).as_deref(), &json)?;
        }
    }
    eprintln!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Fit { data, factors, ic, tol, max_iter, seed, se, out } => {
            let mut cfg = EMConfig { tol, max_iter, ..EMConfig::default() };
            if let Some(s) = seed {
                cfg.init = Init::Random(s);
            }
            cmd_fit(&data, factors, ic, cfg, se, out.as_deref())
        }
        Command::Scores { data, model, method, out } => cmd_scores(&data, &model, method, out.as_deref()),
        Command::Verify { model, ic, tol } => cmd_verify(&model, ic, tol),
        Command::Simulate { mode, grid, reps, seed, out } => cmd_simulate(mode, grid, reps, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("10x50, 150X30").unwrap().0, vec![(10, 50), (150, 30)]);
        assert!(parse_grid("10-50").is_err());
        assert!(parse_grid("10x").is_err());
    }

    #[test]
    fn tag_parsing() {
        assert_eq!(parse_tag("2").unwrap(), IdentificationTag::Ic2);
        assert_eq!(parse_tag("IC5").unwrap(), IdentificationTag::Ic5);
        assert!(parse_tag("6").is_err());
    }
}
