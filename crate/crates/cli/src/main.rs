mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{FitMethod, RunConfig, WarmStart};
use crate::run::CliError;

#[derive(Debug, Parser)]
#[command(name = "glmm", version, about = "Generalised linear mixed models: design statistics, fitting and c-optimal designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Expand a block design to CSV.
    Gen,
    /// Simulate an outcome from the model.
    Simulate,
    /// Standard errors and power of the fixed effects.
    Power,
    /// Fit the model to an outcome column.
    Fit,
    /// Search for a c-optimal design.
    Design,
    /// Round weights to integer counts.
    Apportion,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Simulate => "simulate",
            Command::Power => "power",
            Command::Fit => "fit",
            Command::Design => "design",
            Command::Apportion => "apportion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Comma-separated values given as one argument.
#[derive(Debug, Clone)]
struct List<T>(Vec<T>);

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<List<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<T>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<T>, String>>()
        .map(List)
}

fn parse_derive(s: &str) -> Result<(String, String), String> {
    let (name, expr) = s.split_once('=').ok_or_else(|| format!("expected NAME=EXPR, got `{s}`"))?;
    Ok((name.trim().to_string(), expr.trim().to_string()))
}

#[derive(Debug, Clone, Args)]
struct Overrides {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the JSON output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    formula: Option<String>,
    /// CSV data with a header row.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Block design, for example `~(cl(10)*t(5))>i(10)`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    nelder: Option<String>,
    /// Derived 0/1 column, `NAME=EXPR` such as `int=t>=cl`. Repeatable.
    #[arg(long, global = true, value_parser = parse_derive)]
    derive: Vec<(String, String)>,
    #[arg(long, global = true)]
    family: Option<String>,
    #[arg(long, global = true)]
    link: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_list::<f64>)]
    beta: Option<List<f64>>,
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_list::<f64>)]
    theta: Option<List<f64>>,
    #[arg(long, global = true)]
    phi: Option<f64>,
    #[arg(long, global = true)]
    offset: Option<String>,
    #[arg(long, global = true)]
    attenuate: bool,
    /// Outcome column for `fit`, output column for `simulate`.
    #[arg(long, global = true)]
    outcome: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    method: Option<FitMethodArg>,
    #[arg(long = "la-variant", global = true, value_enum)]
    la_variant: Option<LaVariantArg>,
    #[arg(long = "warm-start", global = true, value_enum)]
    warm_start: Option<WarmStartArg>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    /// Post-warmup draws per MCML iteration.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    warmup: Option<usize>,
    #[arg(long, global = true)]
    simlik: bool,
    #[arg(long, global = true, value_enum)]
    se: Option<SeArg>,
    /// Design size in conditions (`design`) or total count (`apportion`).
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Algorithm chain, for example `3,1`.
    #[arg(long, global = true, value_parser = parse_list::<usize>)]
    algo: Option<List<usize>>,
    #[arg(long = "c-vector", global = true, allow_hyphen_values = true, value_parser = parse_list::<f64>)]
    c_vector: Option<List<f64>>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    /// Column holding the experimental condition of each row.
    #[arg(long, global = true)]
    conditions: Option<String>,
    #[arg(long = "rm-cols", global = true, value_parser = parse_list::<usize>)]
    rm_cols: Option<List<usize>>,
    #[arg(long, global = true, value_parser = parse_list::<f64>)]
    weights: Option<List<f64>>,
    /// Worker threads; defaults to GLMM_THREADS, then to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory receiving X, Z, D and Sigma in Matrix Market format.
    #[arg(long = "emit-matrices", global = true)]
    emit_matrices: Option<PathBuf>,
    /// Include the compiled covariance programs in the output.
    #[arg(long = "dump-programs", global = true)]
    dump_programs: bool,
    /// Include the final random-effect draws in `fit` output.
    #[arg(long = "emit-re", global = true)]
    emit_re: bool,
    /// Output format of `gen`.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Also write the simulated data set as CSV.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitMethodArg {
    Mcnr,
    Mcem,
    La,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LaVariantArg {
    Scoring,
    Dfo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WarmStartArg {
    La,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SeArg {
    Information,
    Hessian,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
            ($src:expr => some $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = Some(v);
                }
            };
        }
        set!(self.formula => some cfg.formula);
        set!(self.data => some cfg.data);
        set!(self.nelder => some cfg.nelder);
        for (k, v) in &self.derive {
            cfg.derive.insert(k.clone(), v.clone());
        }
        set!(self.family => cfg.family);
        set!(self.link => some cfg.link);
        set!(self.beta.as_ref().map(|l| l.0.clone()) => some cfg.beta);
        set!(self.theta.as_ref().map(|l| l.0.clone()) => some cfg.theta);
        set!(self.phi => some cfg.phi);
        set!(self.offset => some cfg.offset);
        cfg.attenuate |= self.attenuate;
        set!(self.outcome => cfg.outcome);
        set!(self.seed => cfg.seed);
        set!(self.alpha => cfg.alpha);
        if let Some(m) = self.method {
            cfg.fit.method = match m {
                FitMethodArg::Mcnr => FitMethod::Mcnr,
                FitMethodArg::Mcem => FitMethod::Mcem,
                FitMethodArg::La => FitMethod::La,
            };
        }
        if let Some(v) = self.la_variant {
            cfg.fit.la_variant = match v {
                LaVariantArg::Scoring => glmm::laplace::LaVariant::Scoring,
                LaVariantArg::Dfo => glmm::laplace::LaVariant::Dfo,
            };
        }
        if let Some(w) = self.warm_start {
            cfg.fit.warm_start = match w {
                WarmStartArg::La => Some(WarmStart::La),
                WarmStartArg::None => None,
            };
        }
        set!(self.tol => cfg.fit.tol);
        set!(self.max_iter => cfg.fit.max_iter);
        set!(self.samples => cfg.fit.samples);
        set!(self.warmup => cfg.fit.warmup);
        cfg.fit.simlik |= self.simlik;
        if let Some(s) = self.se {
            cfg.fit.se = match s {
                SeArg::Information => glmm::mcml::SeMethod::Information,
                SeArg::Hessian => glmm::mcml::SeMethod::Hessian,
            };
        }
        if let Some(m) = self.m {
            cfg.design.m = Some(m);
            cfg.apportion.m = m;
        }
        if let Some(a) = &self.algo {
            cfg.design.algo = a.0.iter().map(|&v| v.min(255) as u8).collect();
        }
        set!(self.c_vector.as_ref().map(|l| l.0.clone()) => some cfg.design.c);
        set!(self.restarts => cfg.design.restarts);
        set!(self.conditions => some cfg.design.conditions);
        set!(self.rm_cols.as_ref().map(|l| l.0.clone()) => cfg.design.rm_cols);
        if let Some(w) = &self.weights {
            cfg.design.weights = Some(w.0.clone());
            cfg.apportion.weights = w.0.clone();
        }
    }
}

fn load_config(opts: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    opts.apply(&mut cfg);
    Ok(cfg)
}

fn configure_threads(opts: &Overrides) -> Result<(), CliError> {
    let n = match opts.threads {
        Some(n) => Some(n),
        None => match std::env::var("GLMM_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| CliError::Config(format!("GLMM_THREADS=`{v}`: {e}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads(&cli.opts)
        .and_then(|_| load_config(&cli.opts))
        .and_then(|cfg| run::run(cli.command.name(), &cfg, &run::Extras {
            out: cli.opts.out.clone(),
            emit_matrices: cli.opts.emit_matrices.clone(),
            dump_programs: cli.opts.dump_programs,
            emit_re: cli.opts.emit_re,
            csv_format: cli.command == Command::Gen && cli.opts.format != Some(Format::Json),
            csv_out: cli.opts.csv.clone(),
        }));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
