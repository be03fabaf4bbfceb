use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use sparse_t1::error::Error;
use sparse_t1::experiments::{
    run_consequences, run_grid_mc, run_lemma_suite, run_t1_verify, ConsequencesReport, ExperimentConfig, GridMcReport,
    LemmaReport, Report, VerifyReport,
};

#[derive(Parser)]
#[command(name = "t1", version, about = "Sparse bound experiments for Calderón-Zygmund operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random pairs against the universal and stopping-tree sparse forms.
    Verify(Common),
    /// Bad-cube frequency and bad energy over random shifts.
    GridMc {
        #[command(flatten)]
        common: Common,
        /// Use the zero shift in every sample.
        #[arg(long)]
        zero_shift: bool,
    },
    /// Lebesgue, maximal-function and weighted consequences.
    Consequences(Common),
    /// Lemma-level properties with measured constants.
    Lemmas(Common),
    /// Summarize report files; with --out, write plot data and gnuplot scripts.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long)]
    level: Option<u32>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated run thresholds.
    #[arg(long, value_delimiter = ',')]
    r: Vec<u32>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated exponents.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// `one` or `power:<a>`.
    #[arg(long)]
    weight: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timings: bool,
}

impl Common {
    fn config(&self, default_level: u32, default_trials: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            d: self.d,
            level: self.level.unwrap_or(default_level),
            trials: self.trials.unwrap_or(default_trials),
            seed: self.seed,
            cache_dir: std::env::var_os("T1_CACHE_DIR").map(PathBuf::from),
            ..Default::default()
        };
        c.kernel = match (&self.kernel, self.d) {
            (Some(k), _) => k.clone(),
            (None, 2) => "riesz2d".into(),
            (None, _) => "hilbert".into(),
        };
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        if !self.r.is_empty() {
            c.r = self.r.clone();
        }
        if !self.p.is_empty() {
            c.p = self.p.clone();
        }
        if let Some(w) = &self.weight {
            c.weight = w.clone();
        }
        c
    }
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Parse(_) | Error::InvalidGoodness(_) | Error::InvalidGeometry(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

macro_rules! dispatch {
    ($d:expr, $f:ident, $($args:expr),*) => {
        match $d {
            1 => $f::<1>($($args),*),
            2 => $f::<2>($($args),*),
            d => Err(Error::InvalidArgument(format!("dimension {d} not supported"))),
        }
    };
}

fn verify_csv(r: &VerifyReport) -> String {
    let mut s = String::from("trial,b_t,lambda_universal,lambda_stopping,ratio,ratio_stopping,certificates_passed\n");
    for t in &r.trials {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            t.trial, t.b_t, t.lambda_universal, t.lambda_stopping, t.ratio, t.ratio_stopping, t.certificates_passed
        );
    }
    s
}

fn consequences_csv(r: &ConsequencesReport) -> String {
    let mut s = String::from("p,p_dual,max_ratio,characteristic,max_weighted_ratio\n");
    for (a, w) in r.lp.iter().zip(&r.weights) {
        let _ = writeln!(s, "{},{},{},{},{}", a.p, a.p_dual, a.max_ratio, w.characteristic, w.max_weighted_ratio);
    }
    s
}

fn lemmas_csv(r: &LemmaReport) -> String {
    let mut s = String::from("property,passed,measured,bound\n");
    for p in &r.properties {
        let _ = writeln!(s, "{},{},{},{}", p.name, p.passed, p.measured, p.bound);
    }
    s
}

fn emit<T: serde::Serialize>(
    mut report: Report<T>,
    common: &Common,
    csv: impl Fn(&T) -> String,
) -> Result<bool, Failure> {
    if common.no_timings {
        report.timings_ms.clear();
    }
    let text = match common.format {
        Format::Json => serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.to_string()))? + "\n",
        Format::Csv => csv(&report.result),
    };
    match &common.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(report.passed)
}

/// Prints one line per report; writes plot data for reports that have any.
fn summarize(files: &[PathBuf], out: Option<&Path>) -> Result<bool, Failure> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Run(e.to_string()))?;
    }
    let mut all = true;
    for path in files {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let kind = v["kind"].as_str().unwrap_or("unknown");
        let passed = v["passed"].as_bool().unwrap_or(false);
        all &= passed;
        println!(
            "{} {kind} {} {}",
            if passed { "PASS" } else { "FAIL" },
            v["config_hash"].as_str().unwrap_or("-"),
            path.display()
        );
        let Some(dir) = out else { continue };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(kind);
        let (data, script) = match kind {
            "grid-mc" => {
                let r: GridMcReport =
                    serde_json::from_value(v["result"].clone()).map_err(|e| Failure::Config(e.to_string()))?;
                (
                    r.to_csv(),
                    format!(
                        "set datafile separator ','\nset logscale y 2\nset xlabel 'r'\nplot '{stem}.csv' every ::1 using 2:3 with linespoints title 'bad frequency', '' every ::1 using 2:4 with linespoints title 'bad energy'\n"
                    ),
                )
            }
            "verify" => {
                let r: VerifyReport =
                    serde_json::from_value(v["result"].clone()).map_err(|e| Failure::Config(e.to_string()))?;
                (
                    verify_csv(&r),
                    format!(
                        "set datafile separator ','\nset xlabel 'trial'\nplot '{stem}.csv' every ::1 using 1:5 with points title 'universal ratio', '' every ::1 using 1:6 with points title 'stopping ratio'\n"
                    ),
                )
            }
            _ => continue,
        };
        let write = |name: String, body: &str| {
            std::fs::write(dir.join(name), body).map_err(|e| Failure::Run(e.to_string()))
        };
        write(format!("{stem}.csv"), &data)?;
        write(format!("{stem}.gp"), &script)?;
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Verify(c) => {
            let config = c.config(10, 100);
            let report = dispatch!(config.d, run_t1_verify, &config)?;
            if let Some(t) = report.result.failing_trial {
                eprintln!("certificate failure in trial {t} (seed {}, stream {t})", config.seed);
            }
            emit(report, &c, verify_csv)
        }
        Command::GridMc { common, zero_shift } => {
            let config = common.config(10, 500);
            let report = dispatch!(config.d, run_grid_mc, &config, zero_shift)?;
            emit(report, &common, GridMcReport::to_csv)
        }
        Command::Consequences(c) => {
            let config = c.config(10, 100);
            let report = dispatch!(config.d, run_consequences, &config)?;
            emit(report, &c, consequences_csv)
        }
        Command::Lemmas(c) => {
            let config = c.config(8, 100);
            let report = dispatch!(config.d, run_lemma_suite, &config)?;
            for p in &report.result.properties {
                eprintln!("{} {}: {} (bound {})", if p.passed { "PASS" } else { "FAIL" }, p.name, p.measured, p.bound);
            }
            emit(report, &c, lemmas_csv)
        }
        Command::Report { files, out } => summarize(&files, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
