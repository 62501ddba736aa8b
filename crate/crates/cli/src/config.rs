//! Run configuration: a JSON document whose fields command-line flags override.

use std::collections::BTreeMap;
use std::path::PathBuf;

use glmm::apportion::ApportionMethod;
use glmm::laplace::LaVariant;
use glmm::mcml::SeMethod;
use glmm::optdesign::RobustKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    #[default]
    Mcnr,
    Mcem,
    La,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    La,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    pub tol: f64,
    pub max_iter: usize,
    pub la_variant: LaVariant,
    pub warm_start: Option<WarmStart>,
    pub simlik: bool,
    pub se: SeMethod,
    pub warmup: usize,
    pub adapt: usize,
    pub samples: usize,
    pub max_steps: usize,
    pub delta: f64,
    pub lambda: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let h = glmm::hmc::HmcOptions::default();
        let m = glmm::mcml::McmlOptions::default();
        Self {
            method: FitMethod::default(),
            tol: m.tol,
            max_iter: m.max_iter,
            la_variant: LaVariant::default(),
            warm_start: None,
            simlik: false,
            se: SeMethod::default(),
            warmup: h.warmup,
            adapt: h.adapt,
            samples: h.samples,
            max_steps: h.max_steps,
            delta: h.delta,
            lambda: h.lambda,
        }
    }
}

/// A further model for robust design criteria. Missing fields are taken
/// from the main model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AltModel {
    pub formula: Option<String>,
    pub family: Option<String>,
    pub link: Option<String>,
    pub beta: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    pub phi: Option<f64>,
    pub c: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    /// Number of conditions in the design.
    pub m: Option<usize>,
    /// Algorithm codes run in sequence: 1 local, 2 greedy, 3 reverse greedy.
    pub algo: Vec<u8>,
    pub c: Option<Vec<f64>>,
    pub restarts: usize,
    /// Column labelling the experimental condition of each row.
    pub conditions: Option<String>,
    pub rm_cols: Vec<usize>,
    pub robust: RobustKind,
    pub models: Vec<AltModel>,
    /// Prior weights of the models, main model first.
    pub rho: Option<Vec<f64>>,
    /// Weights per selected condition, apportioned over `m` when given.
    pub weights: Option<Vec<f64>>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            m: None,
            algo: vec![1],
            c: None,
            restarts: 10,
            conditions: None,
            rm_cols: Vec::new(),
            robust: RobustKind::default(),
            models: Vec::new(),
            rho: None,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ApportionConfig {
    pub weights: Vec<f64>,
    pub m: usize,
    /// Methods to run; all of them when empty.
    pub methods: Vec<ApportionMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub formula: Option<String>,
    pub data: Option<PathBuf>,
    pub nelder: Option<String>,
    /// Derived 0/1 columns, `name -> comparison` such as `"t >= cl"`.
    pub derive: BTreeMap<String, String>,
    pub family: String,
    pub link: Option<String>,
    pub beta: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    pub phi: Option<f64>,
    /// Effective range per random term, for compactly supported functions.
    pub ranges: Vec<Option<f64>>,
    pub offset: Option<String>,
    pub attenuate: bool,
    pub outcome: String,
    pub seed: u64,
    pub alpha: f64,
    pub fit: FitConfig,
    pub design: DesignConfig,
    pub apportion: ApportionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            formula: None,
            data: None,
            nelder: None,
            derive: BTreeMap::new(),
            family: "gaussian".into(),
            link: None,
            beta: None,
            theta: None,
            phi: None,
            ranges: Vec::new(),
            offset: None,
            attenuate: false,
            outcome: "y".into(),
            seed: 1,
            alpha: 0.05,
            fit: FitConfig::default(),
            design: DesignConfig::default(),
            apportion: ApportionConfig::default(),
        }
    }
}
