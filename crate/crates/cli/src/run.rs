//! Command implementations.

use std::fmt;
use std::path::PathBuf;

use glmm::apportion::{apportion, ApportionMethod};
use glmm::data::{Column, DataFrame};
use glmm::design::{expand_design, parse_nelder};
use glmm::family::FamilyLink;
use glmm::hmc::HmcOptions;
use glmm::laplace::{la_fit, LaOptions};
use glmm::mcml::{glm_start, mcml_fit_from, FitResult, McmlAlgorithm, McmlOptions};
use glmm::model::GlmmModel;
use glmm::optdesign::{optimal_design, Algorithm, DesignSpace, SearchOptions};
use glmm::{mmio, GlmmError};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{AltModel, FitMethod, RunConfig, WarmStart};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    /// Output was written but the fit did not meet its tolerance.
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::NonConvergence(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::NonConvergence(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl From<GlmmError> for CliError {
    fn from(e: GlmmError) -> Self {
        use GlmmError::*;
        match e {
            Syntax { .. }
            | InvalidLevelCount { .. }
            | RowCapExceeded { .. }
            | UnknownFunction(_)
            | MalformedTerm(_)
            | Unidentifiable(_)
            | MissingVariable(_)
            | NonNumericVariable { .. }
            | DimensionLimit { .. }
            | ParameterRange { .. }
            | Dimension(_)
            | DegenerateFactor(_)
            | InvalidLink { .. }
            | Apportion(_)
            | Data(_)
            | InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub struct Extras {
    pub out: Option<PathBuf>,
    pub emit_matrices: Option<PathBuf>,
    pub dump_programs: bool,
    pub emit_re: bool,
    pub csv_format: bool,
    pub csv_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Engine {
    name: &'static str,
    version: &'static str,
    opcode_version: u32,
}

#[derive(Serialize)]
struct Output<'a> {
    engine: Engine,
    command: &'a str,
    config: &'a RunConfig,
    result: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    programs: Option<Vec<Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrices: Option<Vec<String>>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn write_text(path: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<DataFrame, CliError> {
    let mut df = match (&cfg.data, &cfg.nelder) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            DataFrame::from_csv_str(&text)?
        }
        (None, Some(expr)) => expand_design(&parse_nelder(expr)?)?.to_frame(),
        (None, None) => return Err(config_err("either `data` or `nelder` is required")),
    };
    for (name, expr) in &cfg.derive {
        df.derive_comparison(name, expr)?;
    }
    Ok(df)
}

struct ModelSpec<'a> {
    formula: &'a str,
    family: &'a str,
    link: Option<&'a str>,
    beta: Option<&'a [f64]>,
    theta: Option<&'a [f64]>,
    phi: Option<f64>,
}

fn main_spec(cfg: &RunConfig) -> Result<ModelSpec<'_>, CliError> {
    Ok(ModelSpec {
        formula: cfg.formula.as_deref().ok_or_else(|| config_err("`formula` is required"))?,
        family: &cfg.family,
        link: cfg.link.as_deref(),
        beta: cfg.beta.as_deref(),
        theta: cfg.theta.as_deref(),
        phi: cfg.phi,
    })
}

fn alt_spec<'a>(cfg: &'a RunConfig, alt: &'a AltModel) -> Result<ModelSpec<'a>, CliError> {
    let base = main_spec(cfg)?;
    Ok(ModelSpec {
        formula: alt.formula.as_deref().unwrap_or(base.formula),
        family: alt.family.as_deref().unwrap_or(base.family),
        link: alt.link.as_deref().or(base.link),
        beta: alt.beta.as_deref().or(base.beta),
        theta: alt.theta.as_deref().or(base.theta),
        phi: alt.phi.or(base.phi),
    })
}

fn build_model(cfg: &RunConfig, df: &DataFrame, spec: &ModelSpec) -> Result<GlmmModel, CliError> {
    let family = FamilyLink::parse(spec.family, spec.link)?;
    let mut m = GlmmModel::with_ranges(spec.formula, df.clone(), family, &cfg.ranges)?;
    m.set_attenuation(cfg.attenuate);
    m.update_parameters(spec.beta, spec.theta, spec.phi)?;
    if let Some(col) = &cfg.offset {
        m.set_offset(df.numeric(col)?)?;
    }
    Ok(m)
}

fn emit_matrices(dir: &PathBuf, m: &GlmmModel) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    let files = [
        ("X.mtx", mmio::dense_to_string(m.x())),
        ("Z.mtx", mmio::sparse_to_string(m.z())),
        ("D.mtx", mmio::sparse_to_string(&m.re().d()?)),
        ("Sigma.mtx", mmio::dense_to_string(&m.sigma_approx()?)),
    ];
    let mut names = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| config_err(format!("cannot write {}: {e}", p.display())))?;
        names.push(name.to_string());
    }
    Ok(names)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialise")
}

pub fn run(command: &str, cfg: &RunConfig, extras: &Extras) -> Result<(), CliError> {
    let mut pending: Option<CliError> = None;
    let mut programs = None;
    let mut matrices = None;
    let result = match command {
        "gen" => {
            let df = load_data(cfg)?;
            if extras.csv_format {
                return write_text(&extras.out, &df.to_csv_string());
            }
            json!({ "rows": df.nrows(), "columns": df.names(), "csv": df.to_csv_string() })
        }
        "apportion" => {
            let a = &cfg.apportion;
            let methods = if a.methods.is_empty() {
                ApportionMethod::ALL.to_vec()
            } else {
                a.methods.clone()
            };
            let rows: Vec<Value> = methods
                .iter()
                .map(|&k| match apportion(&a.weights, a.m, k) {
                    Ok(c) => json!({ "method": k.name(), "counts": c }),
                    Err(e) => json!({ "method": k.name(), "error": e.to_string() }),
                })
                .collect();
            if rows.iter().all(|r| r.get("error").is_some()) {
                return Err(apportion(&a.weights, a.m, methods[0]).unwrap_err().into());
            }
            json!({ "m": a.m, "weights": a.weights, "allocations": rows })
        }
        _ => {
            let df = load_data(cfg)?;
            let model = build_model(cfg, &df, &main_spec(cfg)?)?;
            if extras.dump_programs {
                programs = Some(model.re().programs().iter().map(|p| p.to_json()).collect());
            }
            if let Some(dir) = &extras.emit_matrices {
                matrices = Some(emit_matrices(dir, &model)?);
            }
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            match command {
                "simulate" => simulate(cfg, &df, &model, &mut rng, extras)?,
                "power" => json!({ "alpha": cfg.alpha, "rows": model.power(cfg.alpha)? }),
                "fit" => {
                    let (value, converged) = fit(cfg, &df, model, &mut rng, extras.emit_re)?;
                    if !converged {
                        pending = Some(CliError::NonConvergence(format!(
                            "tolerance {} not met within {} iterations",
                            cfg.fit.tol, cfg.fit.max_iter
                        )));
                    }
                    value
                }
                "design" => design(cfg, &df, &model, &mut rng)?,
                other => return Err(config_err(format!("unknown command `{other}`"))),
            }
        }
    };
    let out = Output {
        engine: Engine {
            name: "glmm",
            version: glmm::VERSION,
            opcode_version: glmm::program::OPCODE_VERSION,
        },
        command,
        config: cfg,
        result,
        programs,
        matrices,
    };
    let mut text = serde_json::to_string_pretty(&out).expect("output serialises");
    text.push('\n');
    write_text(&extras.out, &text)?;
    match pending {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn simulate(cfg: &RunConfig, df: &DataFrame, model: &GlmmModel, rng: &mut ChaCha20Rng, extras: &Extras) -> Result<Value, CliError> {
    let sim = model.sim_data(rng)?;
    if let Some(path) = &extras.csv_out {
        let mut out = df.clone();
        out.push_column(&cfg.outcome, Column::Numeric(sim.y.clone()))?;
        write_text(&Some(path.clone()), &out.to_csv_string())?;
    }
    Ok(json!({ "n": sim.y.len(), "y": sim.y, "u": sim.u }))
}

fn fit(cfg: &RunConfig, df: &DataFrame, mut model: GlmmModel, rng: &mut ChaCha20Rng, emit_re: bool) -> Result<(Value, bool), CliError> {
    let y = df.numeric(&cfg.outcome)?.to_vec();
    model.set_y(&y)?;
    let (b0, phi0) = glm_start(&model)?;
    if cfg.beta.is_none() {
        model.set_beta(&b0)?;
    }
    if cfg.phi.is_none() {
        model.set_phi(phi0)?;
    }
    let f = &cfg.fit;
    let la_opts = LaOptions {
        variant: f.la_variant,
        tol: f.tol,
        max_iter: f.max_iter,
    };
    let mut warm = None;
    let mut result: FitResult = match f.method {
        FitMethod::La => la_fit(&mut model, &la_opts)?.result,
        FitMethod::Mcnr | FitMethod::Mcem => {
            let mut v0 = vec![0.0; model.q()];
            if f.warm_start == Some(WarmStart::La) {
                let la = la_fit(&mut model, &la_opts)?;
                v0 = la.state.v.clone();
                warm = Some(json!({
                    "beta": la.result.beta,
                    "theta": la.result.theta,
                    "phi": la.result.phi,
                    "converged": la.result.converged,
                    "iterations": la.result.iterations,
                }));
            }
            let opts = McmlOptions {
                algorithm: if f.method == FitMethod::Mcem {
                    McmlAlgorithm::Mcem
                } else {
                    McmlAlgorithm::Mcnr
                },
                tol: f.tol,
                max_iter: f.max_iter,
                simlik: f.simlik,
                se_method: f.se,
            };
            let hmc = HmcOptions {
                warmup: f.warmup,
                adapt: f.adapt,
                samples: f.samples,
                max_steps: f.max_steps,
                delta: f.delta,
                lambda: f.lambda,
            };
            mcml_fit_from(&mut model, &opts, &hmc, &v0, rng)?
        }
    };
    let converged = result.converged;
    if !emit_re {
        result.u.clear();
    }
    let mut value = to_value(&result);
    if let Some(w) = warm {
        value["warm_start"] = w;
    }
    Ok((value, converged))
}

fn design(cfg: &RunConfig, df: &DataFrame, model: &GlmmModel, rng: &mut ChaCha20Rng) -> Result<Value, CliError> {
    let d = &cfg.design;
    let m = d.m.ok_or_else(|| config_err("`design.m` (--m) is required"))?;
    let mut models = vec![model.clone()];
    let mut cs = vec![d.c.clone().ok_or_else(|| config_err("`design.c` (--c-vector) is required"))?];
    for alt in &d.models {
        models.push(build_model(cfg, df, &alt_spec(cfg, alt)?)?);
        cs.push(alt.c.clone().unwrap_or_else(|| cs[0].clone()));
    }
    let (assign, labels) = match &d.conditions {
        Some(col) => {
            let lv = df.levels(col)?;
            (Some(lv.codes), lv.labels)
        }
        None => (None, (0..df.nrows()).map(|i| i.to_string()).collect()),
    };
    let refs: Vec<&GlmmModel> = models.iter().collect();
    let mut space = DesignSpace::new(&refs, &cs, assign.as_deref(), d.rho.as_deref())?.with_kind(d.robust);
    if !d.rm_cols.is_empty() {
        space.rm_cols(&d.rm_cols)?;
    }
    let algorithms = d
        .algo
        .iter()
        .map(|&c| Algorithm::from_code(c))
        .collect::<glmm::Result<Vec<_>>>()?;
    let res = optimal_design(&space, m, &SearchOptions { algorithms, restarts: d.restarts }, rng)?;
    let mut value = to_value(&res);
    value["labels"] = json!(res.labels.iter().map(|&l| labels[l].clone()).collect::<Vec<_>>());
    value["uncorrelated"] = json!(space.is_uncorrelated());
    if let Some(w) = &d.weights {
        let table: Vec<Value> = ApportionMethod::ALL
            .iter()
            .map(|&k| match apportion(w, m, k) {
                Ok(c) => json!({ "method": k.name(), "counts": c }),
                Err(e) => json!({ "method": k.name(), "error": e.to_string() }),
            })
            .collect();
        value["apportionment"] = json!(table);
    }
    Ok(value)
}
