//! Markov chain Monte Carlo maximum likelihood.
//!
//! Each outer iteration samples `v` from its conditional distribution with
//! HMC, maps the draws to `u = L v`, updates the mean and scale parameters
//! (MCEM or MCNR) and then the covariance parameters by maximising the
//! average multivariate normal log-density of the draws.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{MvnLogDensity, RandomEffectStructure};
use crate::error::{GlmmError, Result};
use crate::family::{Family, FamilyLink, SufficientStats};
use crate::formula::ParamDomain;
use crate::hmc::{hmc_sample, HmcOptions, Target};
use crate::model::{collinear_columns, GlmmModel};
use crate::optim::{minimize, numerical_hessian, Bound, NelderMeadOptions, OptimResult};
use crate::sparse::SparseMatrixCRS;
use crate::special::{compensated_sum, log_sum_exp};

/// Importance-sampling effective sample size below which refinement is refused.
pub const MIN_ESS: f64 = 10.0;
/// Lower bound used for strictly positive covariance parameters.
pub const POSITIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum McmlAlgorithm {
    #[default]
    Mcnr,
    Mcem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    #[default]
    Information,
    Hessian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmlOptions {
    pub algorithm: McmlAlgorithm,
    pub tol: f64,
    pub max_iter: usize,
    pub simlik: bool,
    pub se_method: SeMethod,
}

impl Default for McmlOptions {
    fn default() -> Self {
        Self {
            algorithm: McmlAlgorithm::Mcnr,
            tol: 0.01,
            max_iter: 100,
            simlik: false,
            se_method: SeMethod::Information,
        }
    }
}

impl McmlOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(GlmmError::InvalidArgument(format!(
                "tolerance must be positive and the iteration cap non-zero, got {} and {}",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub max_delta: f64,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: f64,
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_size: f64,
    /// Objective after the iteration, for methods that track one.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Option<f64>,
    pub se_beta: Vec<f64>,
    pub se_theta: Option<Vec<f64>>,
    pub trace: Vec<TraceEntry>,
    /// Final random-effect draws, one `Q`-vector per sample.
    pub u: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Indices of covariance parameters that ended on a bound.
    pub boundary: Vec<usize>,
    /// Objective at the estimates, when the method defines one.
    pub loglik: Option<f64>,
}

/// Observations that share a row of `X`, `Z` and the offset, and hence a
/// linear predictor for every value of the parameters.
#[derive(Debug, Clone)]
pub struct RowGroups {
    /// First observation of each group.
    pub rows: Vec<usize>,
    pub stats: Vec<SufficientStats>,
    /// Rows of `X` for the groups.
    pub x: DMatrix<f64>,
    /// Rows of `Z` for the groups.
    pub z: SparseMatrixCRS,
    pub offset: Vec<f64>,
}

impl RowGroups {
    pub fn new(model: &GlmmModel) -> Result<Self> {
        let y = model.y()?;
        let x = model.x();
        let z = model.z();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut stats: Vec<SufficientStats> = Vec::new();
        for i in 0..model.n() {
            let (cols, vals) = z.row(i);
            let mut key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
            key.push(model.offset()[i].to_bits());
            key.extend(cols.iter().map(|&c| c as u64));
            key.extend(vals.iter().map(|v| v.to_bits()));
            let g = *index.entry(key).or_insert_with(|| {
                rows.push(i);
                stats.push(SufficientStats::default());
                rows.len() - 1
            });
            stats[g].add(y[i]);
        }
        let gx = DMatrix::from_fn(rows.len(), model.p(), |g, c| x[(rows[g], c)]);
        let mut trip = Vec::new();
        for (g, &i) in rows.iter().enumerate() {
            let (cols, vals) = z.row(i);
            trip.extend(cols.iter().zip(vals).map(|(&c, &v)| (g, c, v)));
        }
        let gz = SparseMatrixCRS::from_triplets(rows.len(), model.q(), trip, 0.0);
        let offset = rows.iter().map(|&i| model.offset()[i]).collect();
        Ok(Self {
            rows,
            stats,
            x: gx,
            z: gz,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `X beta + offset` on the groups.
    pub fn fixed_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let xb = &self.x * DVector::from_column_slice(beta);
        xb.iter().zip(&self.offset).map(|(a, o)| a + o).collect()
    }

    /// `sum_i log f(y_i | eta)` with `eta` given per group, `-inf` when a
    /// mean leaves the support.
    pub fn loglik(&self, family: FamilyLink, eta: &[f64], phi: f64) -> f64 {
        let mut terms = Vec::with_capacity(eta.len());
        for (s, &e) in self.stats.iter().zip(eta) {
            match family.grouped_log_density_score(s, e, phi) {
                Some((l, _)) => terms.push(l),
                None => return f64::NEG_INFINITY,
            }
        }
        let v = compensated_sum(terms);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// Log density of `v` given the data: `sum_i log f(y_i | v) - v'v / 2`.
pub struct ConditionalTarget {
    groups: RowGroups,
    zl: SparseMatrixCRS,
    zlt: SparseMatrixCRS,
    eta0: Vec<f64>,
    family: FamilyLink,
    phi: f64,
}

impl ConditionalTarget {
    pub fn new(model: &GlmmModel) -> Result<Self> {
        Self::with_groups(model, RowGroups::new(model)?, model.beta(), model.phi())
    }

    pub fn with_groups(model: &GlmmModel, groups: RowGroups, beta: &[f64], phi: f64) -> Result<Self> {
        let zl = groups.z.mul(model.re().cholesky()?);
        let zlt = zl.transpose();
        Ok(Self {
            eta0: groups.fixed_predictor(beta),
            groups,
            zl,
            zlt,
            family: model.family(),
            phi,
        })
    }

    /// Linear predictor per group.
    pub fn eta(&self, v: &[f64]) -> Vec<f64> {
        let mut eta = self.zl.mul_vec(v);
        for (e, e0) in eta.iter_mut().zip(&self.eta0) {
            *e += e0;
        }
        eta
    }

    /// Group sums of `d log f / d eta`, `None` outside the support.
    pub fn scores(&self, eta: &[f64]) -> Option<Vec<f64>> {
        self.groups
            .stats
            .iter()
            .zip(eta)
            .map(|(s, &e)| self.family.grouped_log_density_score(s, e, self.phi).map(|r| r.1))
            .collect()
    }

    /// `sum_i log f(y_i | v)`.
    pub fn conditional_loglik(&self, v: &[f64]) -> f64 {
        self.groups.loglik(self.family, &self.eta(v), self.phi)
    }

    pub fn groups(&self) -> &RowGroups {
        &self.groups
    }
}

impl Target for ConditionalTarget {
    fn dim(&self) -> usize {
        self.zl.ncols
    }

    fn log_density_grad(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        let eta = self.eta(v);
        let mut terms = Vec::with_capacity(eta.len());
        let mut s = Vec::with_capacity(eta.len());
        for (st, &e) in self.groups.stats.iter().zip(&eta) {
            match self.family.grouped_log_density_score(st, e, self.phi) {
                Some((l, d)) => {
                    terms.push(l);
                    s.push(d);
                }
                None => {
                    grad.fill(0.0);
                    return f64::NEG_INFINITY;
                }
            }
        }
        let ll = compensated_sum(terms);
        if !ll.is_finite() {
            grad.fill(0.0);
            return f64::NEG_INFINITY;
        }
        let g = self.zlt.mul_vec(&s);
        for ((gi, g0), vi) in grad.iter_mut().zip(g).zip(v) {
            *gi = g0 - vi;
        }
        ll - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientWrt {
    V,
    Beta,
}

/// Gradient of the joint log density `log f(y | v, beta) + log N(v; 0, I)`.
pub fn log_gradient(model: &GlmmModel, v: &[f64], wrt: GradientWrt) -> Result<Vec<f64>> {
    if v.len() != model.q() {
        return Err(GlmmError::Dimension(format!(
            "v has length {}, expected {}",
            v.len(),
            model.q()
        )));
    }
    let target = ConditionalTarget::new(model)?;
    let s = target
        .scores(&target.eta(v))
        .filter(|s| s.iter().all(|x| x.is_finite()))
        .ok_or_else(|| GlmmError::NonFinite("score".into()))?;
    Ok(match wrt {
        GradientWrt::V => {
            let mut g = vec![0.0; v.len()];
            target.log_density_grad(v, &mut g);
            g
        }
        GradientWrt::Beta => (target.groups.x.transpose() * DVector::from_vec(s)).as_slice().to_vec(),
    })
}

/// `Z u` for each draw.
pub fn zu_samples(model: &GlmmModel, us: &[Vec<f64>]) -> Vec<Vec<f64>> {
    us.par_iter().map(|u| model.z().mul_vec(u)).collect()
}

/// `(1/m) sum_j sum_i log f(y_i | eta0_i + (Z u_j)_i)` with `eta0` and each
/// `zus[j]` given per group.
pub fn expected_loglik(family: FamilyLink, groups: &RowGroups, eta0: &[f64], zus: &[Vec<f64>], phi: f64) -> f64 {
    let per: Vec<f64> = zus
        .par_iter()
        .map(|zu| {
            let eta: Vec<f64> = eta0.iter().zip(zu).map(|(a, b)| a + b).collect();
            groups.loglik(family, &eta, phi)
        })
        .collect();
    let s = compensated_sum(per) / zus.len() as f64;
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

fn require_samples(us: &[Vec<f64>]) -> Result<()> {
    if us.is_empty() {
        Err(GlmmError::InvalidArgument("no random effect samples".into()))
    } else {
        Ok(())
    }
}

fn group_zu(groups: &RowGroups, us: &[Vec<f64>]) -> Vec<Vec<f64>> {
    us.par_iter().map(|u| groups.z.mul_vec(u)).collect()
}

/// Maximises the Monte Carlo expected conditional log-likelihood over the
/// mean parameters and, when the family has one, the scale parameter.
pub fn mcem_step(model: &GlmmModel, us: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    require_samples(us)?;
    let groups = RowGroups::new(model)?;
    let family = model.family();
    let zus = group_zu(&groups, us);
    let p = model.p();
    let has_phi = family.family.has_phi();
    let mut x0 = model.beta().to_vec();
    let mut bounds = vec![Bound::FREE; p];
    if has_phi {
        x0.push(model.phi());
        bounds.push(Bound::at_least(0.0));
    }
    let fixed_phi = model.phi();
    let r = minimize(
        |x| {
            let eta0 = groups.fixed_predictor(&x[..p]);
            let phi = if has_phi { x[p] } else { fixed_phi };
            -expected_loglik(family, &groups, &eta0, &zus, phi)
        },
        &x0,
        &bounds,
        &NelderMeadOptions::default(),
    )?;
    let phi = if has_phi { r.x[p] } else { fixed_phi };
    Ok((r.x[..p].to_vec(), phi))
}

/// One Monte Carlo Newton-Raphson update of the mean parameters:
/// `beta + E[X'WX]^{-1} E[X'W (deta/dmu) (y - mu)]`.
pub fn mcnr_step(model: &GlmmModel, us: &[Vec<f64>]) -> Result<Vec<f64>> {
    require_samples(us)?;
    let groups = RowGroups::new(model)?;
    let family = model.family();
    let phi = model.phi();
    let p = model.p();
    let eta0 = groups.fixed_predictor(model.beta());
    let zus = group_zu(&groups, us);
    let parts: Vec<Result<(DMatrix<f64>, DVector<f64>)>> = zus
        .par_iter()
        .map(|zu| {
            let mut a = DMatrix::zeros(p, p);
            let mut b = DVector::zeros(p);
            for (g, st) in groups.stats.iter().enumerate() {
                let eta = eta0[g] + zu[g];
                let mu = family.mean(eta);
                family.check_mean(mu)?;
                let d = family.link.dmu_deta(eta);
                let var = family.variance(mu, phi);
                let w = st.count * d * d / var;
                let r = d * (st.sum_y - st.count * mu) / var;
                let xg = groups.x.row(g);
                for c in 0..p {
                    b[c] += r * xg[c];
                    let wc = w * xg[c];
                    for k in 0..=c {
                        a[(c, k)] += wc * xg[k];
                    }
                }
            }
            for c in 0..p {
                for k in 0..c {
                    a[(k, c)] = a[(c, k)];
                }
            }
            Ok((a, b))
        })
        .collect();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for part in parts {
        let (aj, bj) = part?;
        a += aj;
        b += bj;
    }
    let m = us.len() as f64;
    a /= m;
    b /= m;
    let step = a.clone().cholesky().map(|c| c.solve(&b)).ok_or_else(|| GlmmError::Singular {
        msg: "expected X'WX is singular".into(),
        columns: collinear_columns(&a),
    })?;
    Ok(model.beta().iter().zip(step.iter()).map(|(b, s)| b + s).collect())
}

/// Maximises the expected conditional log-likelihood over the scale
/// parameter alone.
pub fn phi_step(model: &GlmmModel, beta: &[f64], us: &[Vec<f64>]) -> Result<f64> {
    if !model.family().family.has_phi() {
        return Ok(model.phi());
    }
    require_samples(us)?;
    let groups = RowGroups::new(model)?;
    let zus = group_zu(&groups, us);
    let eta0 = groups.fixed_predictor(beta);
    let family = model.family();
    let r = minimize(
        |x| -expected_loglik(family, &groups, &eta0, &zus, x[0]),
        &[model.phi()],
        &[Bound::at_least(0.0)],
        &NelderMeadOptions::default(),
    )?;
    Ok(r.x[0])
}

/// Box constraints used by the covariance-parameter optimiser.
pub fn theta_bounds(domains: &[ParamDomain]) -> Vec<Bound> {
    domains
        .iter()
        .map(|d| match *d {
            ParamDomain::Positive => Bound::at_least(POSITIVE_FLOOR),
            ParamDomain::OpenUnit => Bound::new(1e-6, 1.0 - 1e-6),
            ParamDomain::AtLeast(lo) => Bound::at_least(lo),
            ParamDomain::Closed(lo, hi) => Bound::new(lo, hi),
        })
        .collect()
}

/// Maximises the average `log N(u_j; 0, D(theta))` over the draws.
pub fn theta_step(re: &RandomEffectStructure, us: &[Vec<f64>], theta0: &[f64]) -> Result<OptimResult> {
    require_samples(us)?;
    let bounds = theta_bounds(&re.domains());
    minimize(
        |t| match re.mean_mvn_loglik(t, us) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        },
        theta0,
        &bounds,
        &NelderMeadOptions::default(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs the MCML loop from the model's current parameters, which are
/// updated in place.
pub fn mcml_fit<R: Rng + ?Sized>(
    model: &mut GlmmModel,
    options: &McmlOptions,
    hmc: &HmcOptions,
    rng: &mut R,
) -> Result<FitResult> {
    let v0 = vec![0.0; model.q()];
    mcml_fit_from(model, options, hmc, &v0, rng)
}

/// As [`mcml_fit`] with the first chain started at the standardised
/// random effects `v0`.
pub fn mcml_fit_from<R: Rng + ?Sized>(
    model: &mut GlmmModel,
    options: &McmlOptions,
    hmc: &HmcOptions,
    v0: &[f64],
    rng: &mut R,
) -> Result<FitResult> {
    options.validate()?;
    hmc.validate()?;
    model.y()?;
    if v0.len() != model.q() {
        return Err(GlmmError::Dimension(format!(
            "starting v has length {}, expected {}",
            v0.len(),
            model.q()
        )));
    }
    let has_phi = model.family().family.has_phi();
    let mut v = v0.to_vec();
    let mut eps = None;
    let mut trace = Vec::new();
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut boundary = Vec::new();
    for iteration in 1..=options.max_iter {
        let out = {
            let target = ConditionalTarget::new(model)?;
            hmc_sample(&target, hmc, &v, eps, rng)?
        };
        eps = Some(out.step_size);
        v = out.samples.last().expect("at least one sample").clone();
        let l = model.re().cholesky()?.clone();
        us = out.samples.par_iter().map(|s| l.mul_vec(s)).collect();

        let (beta, phi) = match options.algorithm {
            McmlAlgorithm::Mcem => mcem_step(model, &us)?,
            McmlAlgorithm::Mcnr => {
                let beta = mcnr_step(model, &us)?;
                let phi = phi_step(model, &beta, &us)?;
                (beta, phi)
            }
        };
        let theta_fit = theta_step(model.re(), &us, model.theta())?;
        let mut delta = max_abs_diff(&beta, model.beta()).max(max_abs_diff(&theta_fit.x, model.theta()));
        if has_phi {
            delta = delta.max((phi - model.phi()).abs());
        }
        model.update_parameters(Some(&beta), Some(&theta_fit.x), Some(phi))?;
        boundary = theta_fit.at_bound;
        trace.push(TraceEntry {
            iteration,
            max_delta: delta,
            beta,
            theta: theta_fit.x,
            phi,
            accept_rate: out.accept_rate,
            divergences: out.divergences,
            step_size: out.step_size,
            objective: None,
        });
        if delta <= options.tol {
            converged = true;
            break;
        }
    }

    let mut loglik = None;
    if options.simlik {
        let r = simlik_refine(model, &us, None)?;
        model.update_parameters(Some(&r.beta), Some(&r.theta), Some(r.phi))?;
        boundary = r.at_bound;
        loglik = Some(r.objective);
    }
    let se = std_errors(model, options.se_method, &us)?;
    Ok(FitResult {
        method: match options.algorithm {
            McmlAlgorithm::Mcnr => "mcnr".into(),
            McmlAlgorithm::Mcem => "mcem".into(),
        },
        names: model.names().to_vec(),
        beta: model.beta().to_vec(),
        theta: model.theta().to_vec(),
        phi: has_phi.then(|| model.phi()),
        se_beta: se.beta,
        se_theta: se.theta,
        iterations: trace.len(),
        trace,
        u: us,
        converged,
        boundary,
        loglik,
    })
}

/// `log f(y | u_j, beta, phi) + log N(u_j; 0, D(theta))` for every draw.
pub fn joint_log_density(
    model: &GlmmModel,
    us: &[Vec<f64>],
    beta: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let groups = RowGroups::new(model)?;
    joint_log_density_grouped(model, &groups, us, beta, phi, theta)
}

fn joint_log_density_grouped(
    model: &GlmmModel,
    groups: &RowGroups,
    us: &[Vec<f64>],
    beta: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let family = model.family();
    let l = model.re().factor_for(theta, model.re().mode())?;
    let dens = MvnLogDensity::new(&l);
    let eta0 = groups.fixed_predictor(beta);
    us.par_iter()
        .map(|u| {
            let eta: Vec<f64> = groups.z.mul_vec(u).iter().zip(&eta0).map(|(a, b)| a + b).collect();
            Ok(groups.loglik(family, &eta, phi) + dens.eval(u)?)
        })
        .collect()
}

/// `exp(2 lse(w) - lse(2w))` for log weights `w`.
pub fn effective_sample_size(log_w: &[f64]) -> f64 {
    let doubled: Vec<f64> = log_w.iter().map(|w| 2.0 * w).collect();
    (2.0 * log_sum_exp(log_w) - log_sum_exp(&doubled)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimlikResult {
    pub beta: Vec<f64>,
    pub phi: f64,
    pub theta: Vec<f64>,
    /// `log (1/m) sum_j f(y|u_j) f(u_j) / h(u_j)` at the estimates.
    pub objective: f64,
    pub ess: f64,
    pub at_bound: Vec<usize>,
}

/// Log of the importance-sampled likelihood with proposal log density `log_h`.
pub fn simlik_objective(
    model: &GlmmModel,
    us: &[Vec<f64>],
    log_h: &[f64],
    beta: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<(f64, f64)> {
    simlik_objective_grouped(model, &RowGroups::new(model)?, us, log_h, beta, phi, theta)
}

fn simlik_objective_grouped(
    model: &GlmmModel,
    groups: &RowGroups,
    us: &[Vec<f64>],
    log_h: &[f64],
    beta: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<(f64, f64)> {
    let lw: Vec<f64> = joint_log_density_grouped(model, groups, us, beta, phi, theta)?
        .iter()
        .zip(log_h)
        .map(|(a, h)| a - h)
        .collect();
    Ok((log_sum_exp(&lw) - (us.len() as f64).ln(), effective_sample_size(&lw)))
}

fn pack(model: &GlmmModel, beta: &[f64], theta: &[f64], phi: f64) -> (Vec<f64>, Vec<Bound>) {
    let mut x = beta.to_vec();
    let mut bounds = vec![Bound::FREE; beta.len()];
    x.extend_from_slice(theta);
    bounds.extend(theta_bounds(&model.re().domains()));
    if model.family().family.has_phi() {
        x.push(phi);
        bounds.push(Bound::at_least(0.0));
    }
    (x, bounds)
}

fn unpack<'a>(model: &GlmmModel, x: &'a [f64]) -> (&'a [f64], &'a [f64], f64) {
    let p = model.p();
    let k = model.re().n_params();
    let phi = if model.family().family.has_phi() { x[p + k] } else { model.phi() };
    (&x[..p], &x[p..p + k], phi)
}

/// Maximises the importance-sampled likelihood over all parameters. The
/// proposal defaults to the unnormalised conditional density of `u` at the
/// model's current parameters.
pub fn simlik_refine(model: &GlmmModel, us: &[Vec<f64>], log_h: Option<&[f64]>) -> Result<SimlikResult> {
    require_samples(us)?;
    let groups = RowGroups::new(model)?;
    let own;
    let log_h = match log_h {
        Some(h) => h,
        None => {
            own = joint_log_density(model, us, model.beta(), model.phi(), model.theta())?;
            &own
        }
    };
    let (_, ess0) = simlik_objective(model, us, log_h, model.beta(), model.phi(), model.theta())?;
    if !(ess0 >= MIN_ESS) {
        return Err(GlmmError::LowEffectiveSampleSize { ess: ess0, min: MIN_ESS });
    }
    let (x0, bounds) = pack(model, model.beta(), model.theta(), model.phi());
    let r = minimize(
        |x| {
            let (b, t, phi) = unpack(model, x);
            match simlik_objective_grouped(model, &groups, us, log_h, b, phi, t) {
                Ok((v, _)) => -v,
                Err(_) => f64::INFINITY,
            }
        },
        &x0,
        &bounds,
        &NelderMeadOptions::default(),
    )?;
    let (b, t, phi) = unpack(model, &r.x);
    let (objective, ess) = simlik_objective(model, us, log_h, b, phi, t)?;
    if !(ess >= MIN_ESS) {
        return Err(GlmmError::LowEffectiveSampleSize { ess, min: MIN_ESS });
    }
    let p = model.p();
    Ok(SimlikResult {
        beta: b.to_vec(),
        phi,
        theta: t.to_vec(),
        objective,
        ess,
        at_bound: r.at_bound.iter().filter(|&&i| i >= p).map(|i| i - p).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StdErrors {
    pub beta: Vec<f64>,
    pub theta: Option<Vec<f64>>,
}

/// Standard errors from the information matrix, or from a finite-difference
/// Hessian of the importance-sampled log-likelihood built on `us`.
pub fn std_errors(model: &GlmmModel, method: SeMethod, us: &[Vec<f64>]) -> Result<StdErrors> {
    match method {
        SeMethod::Information => {
            let m = model.information_matrix()?;
            Ok(StdErrors {
                beta: (0..model.p()).map(|i| m[(i, i)].sqrt()).collect(),
                theta: None,
            })
        }
        SeMethod::Hessian => {
            require_samples(us)?;
            let groups = RowGroups::new(model)?;
            let log_h = joint_log_density(model, us, model.beta(), model.phi(), model.theta())?;
            let (x0, _) = pack(model, model.beta(), model.theta(), model.phi());
            let h = numerical_hessian(
                |x| {
                    let (b, t, phi) = unpack(model, x);
                    match simlik_objective_grouped(model, &groups, us, &log_h, b, phi, t) {
                        Ok((v, _)) => -v,
                        Err(_) => f64::NAN,
                    }
                },
                &x0,
                1e-4,
            );
            let eig = h.clone().symmetric_eigen();
            let mut eigs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            if eigs.iter().any(|e| !(*e > 0.0)) {
                eigs.sort_by(f64::total_cmp);
                return Err(GlmmError::HessianNotPd(eigs));
            }
            let cov = h.cholesky().expect("positive eigenvalues").inverse();
            let se: Vec<f64> = (0..x0.len()).map(|i| cov[(i, i)].sqrt()).collect();
            let p = model.p();
            let k = model.re().n_params();
            Ok(StdErrors {
                beta: se[..p].to_vec(),
                theta: Some(se[p..p + k].to_vec()),
            })
        }
    }
}

/// Mean parameters and scale from a GLM fit that ignores the random
/// effects, by iteratively reweighted least squares.
pub fn glm_start(model: &GlmmModel) -> Result<(Vec<f64>, f64)> {
    let y = model.y()?;
    let family = model.family();
    let x = model.x();
    let (n, p) = (model.n(), model.p());
    let offset = model.offset();
    let clamp = |mu: f64| match family.family {
        Family::Binomial | Family::Beta => mu.clamp(1e-6, 1.0 - 1e-6),
        Family::Poisson | Family::Gamma => mu.max(1e-6),
        Family::Gaussian => mu,
    };
    let mut mu: Vec<f64> = y
        .iter()
        .map(|&v| match family.family {
            Family::Binomial | Family::Beta => (v + 0.5) / 2.0,
            Family::Poisson => v + 0.1,
            _ => clamp(v),
        })
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| family.link.link(m)).collect();
    let mut beta = vec![0.0; p];
    for _ in 0..50 {
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let d = family.link.dmu_deta(eta[i]);
            let m = clamp(mu[i]);
            let w = d * d / family.variance(m, 1.0);
            let z = eta[i] - offset[i] + (y[i] - m) / d;
            let xi = x.row(i).transpose();
            xtwx += w * &xi * xi.transpose();
            xtwz += w * z * xi;
        }
        let next = xtwx.clone().cholesky().map(|c| c.solve(&xtwz)).ok_or_else(|| GlmmError::Singular {
            msg: "X'WX is singular in the starting-value fit".into(),
            columns: collinear_columns(&xtwx),
        })?;
        let change = max_abs_diff(next.as_slice(), &beta);
        beta = next.as_slice().to_vec();
        eta = model.fixed_predictor(&beta);
        mu = eta.iter().map(|&e| clamp(family.mean(e))).collect();
        if change < 1e-10 {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(GlmmError::NonFinite("starting values".into()));
    }
    let phi = match family.family {
        Family::Gaussian => {
            let rss: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
            (rss / n as f64).sqrt().max(1e-8)
        }
        Family::Gamma => {
            let df = (n.saturating_sub(p)).max(1) as f64;
            let disp: f64 = y.iter().zip(&mu).map(|(a, b)| ((a - b) / b).powi(2)).sum::<f64>() / df;
            1.0 / disp.max(1e-8)
        }
        Family::Beta => {
            let v: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
            let m: f64 = mu.iter().map(|b| b * (1.0 - b)).sum::<f64>() / n as f64;
            (m / v.max(1e-12) - 1.0).max(1e-3)
        }
        Family::Binomial | Family::Poisson => model.phi(),
    };
    Ok((beta, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{expand_design, parse_nelder};
    use crate::family::Link;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn model(family: Family, link: Link, formula: &str, design: &str) -> GlmmModel {
        let data = expand_design(&parse_nelder(design).unwrap()).unwrap().to_frame();
        GlmmModel::new(formula, data, FamilyLink::new(family, link).unwrap()).unwrap()
    }

    fn with_data(mut m: GlmmModel, seed: u64) -> GlmmModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sim = m.sim_data(&mut rng).unwrap();
        m.set_y(&sim.y).unwrap();
        m
    }

    fn joint(model: &GlmmModel, v: &[f64]) -> f64 {
        let t = ConditionalTarget::new(model).unwrap();
        t.conditional_loglik(v) - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
    }

    fn fd_check(model: &GlmmModel, rel: f64) {
        let q = model.q();
        let v: Vec<f64> = (0..q).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
        let g = log_gradient(model, &v, GradientWrt::V).unwrap();
        for k in 0..q {
            let h = 1e-5;
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = (joint(model, &vp) - joint(model, &vm)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= rel * g[k].abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(4)*t(3)>i(2)");
        m.update_parameters(Some(&[0.2, -0.1, 0.3]), Some(&[0.7]), Some(0.9)).unwrap();
        fd_check(&with_data(m, 3), 1e-6);
        let mut m = model(
            Family::Binomial,
            Link::Logit,
            "~ factor(t) + (1|gr(cl)) + (1|gr(cl,t))",
            "~cl(4)*t(3)>i(3)",
        );
        m.update_parameters(Some(&[0.2, -0.4, 0.3]), Some(&[0.5, 0.3]), None).unwrap();
        fd_check(&with_data(m, 4), 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_zero_residual() {
        let mut m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(2)");
        m.set_beta(&[1.0, 2.0]).unwrap();
        let y = m.fixed_predictor(&[1.0, 2.0]);
        m.set_y(&y).unwrap();
        let g = log_gradient(&m, &[0.0; 3], GradientWrt::V).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        let g = log_gradient(&m, &[0.0; 3], GradientWrt::Beta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    fn ols(m: &GlmmModel) -> (Vec<f64>, f64) {
        let x = m.x();
        let y = DVector::from_column_slice(m.y().unwrap());
        let b = (x.transpose() * x).cholesky().unwrap().solve(&(x.transpose() * &y));
        let r = &y - x * &b;
        (b.as_slice().to_vec(), (r.norm_squared() / m.n() as f64).sqrt())
    }

    #[test]
    fn mcem_single_zero_draw_is_ols() {
        let mut m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(3)>i(2)");
        m.update_parameters(Some(&[0.5, 0.1, -0.2]), Some(&[0.4]), Some(1.0)).unwrap();
        let m = with_data(m, 11);
        let (b, s) = ols(&m);
        let (beta, phi) = mcem_step(&m, &[vec![0.0; 3]]).unwrap();
        for (a, e) in beta.iter().zip(&b) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
        assert!((phi - s).abs() < 1e-5);
        let u = vec![0.3, -0.2, 0.5];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let (beta, _) = mcem_step(&m, &[u, neg]).unwrap();
        for (a, e) in beta.iter().zip(&b) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn mcnr_is_exact_for_gaussian() {
        let mut m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(3)>i(2)");
        m.update_parameters(Some(&[0.5, 0.1, -0.2]), Some(&[0.4]), Some(1.0)).unwrap();
        let mut m = with_data(m, 12);
        let us = vec![vec![0.1, 0.2, -0.3], vec![-0.4, 0.0, 0.2]];
        let zus = zu_samples(&m, &us);
        let mean_zu: Vec<f64> = (0..m.n()).map(|i| 0.5 * (zus[0][i] + zus[1][i])).collect();
        let x = m.x().clone();
        let y = DVector::from_iterator(m.n(), m.y().unwrap().iter().zip(&mean_zu).map(|(a, b)| a - b));
        let expect = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
        let beta = mcnr_step(&m, &us).unwrap();
        for (a, e) in beta.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
        m.set_beta(&beta).unwrap();
        let again = mcnr_step(&m, &us).unwrap();
        for (a, e) in again.iter().zip(&beta) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_step_recovers_scale() {
        let m = model(Family::Gaussian, Link::Identity, "~ 1 + (1|gr(cl))", "~cl(5)>i(2)");
        let us: Vec<Vec<f64>> = (0..20)
            .map(|j| (0..5).map(|k| ((j * 5 + k) as f64 * 0.37).sin()).collect())
            .collect();
        let ms: f64 = us.iter().flatten().map(|v| v * v).sum::<f64>() / 100.0;
        let r = theta_step(m.re(), &us, &[0.5]).unwrap();
        assert!((r.x[0] - ms.sqrt()).abs() < 1e-6, "{} vs {}", r.x[0], ms.sqrt());
        assert!(r.at_bound.is_empty());
        let r = theta_step(m.re(), &vec![vec![0.0; 5]; 3], &[0.5]).unwrap();
        assert!(r.x[0] < 2e-6);
        assert_eq!(r.at_bound, vec![0]);
    }

    #[test]
    fn degenerate_weights_are_refused() {
        let mut lw = vec![0.0; 100];
        lw[7] = 10.0;
        assert!(effective_sample_size(&lw) < 2.0);
        assert!((effective_sample_size(&[0.3; 50]) - 50.0).abs() < 1e-9);

        let mut m = model(Family::Gaussian, Link::Identity, "~ 1 + (1|gr(cl))", "~cl(3)>i(3)");
        m.update_parameters(Some(&[0.0]), Some(&[0.5]), Some(1.0)).unwrap();
        let m = with_data(m, 5);
        let us: Vec<Vec<f64>> = (0..30).map(|j| vec![0.01 * j as f64; 3]).collect();
        let mut log_h = joint_log_density(&m, &us, m.beta(), m.phi(), m.theta()).unwrap();
        log_h[0] -= 50.0;
        assert!(matches!(
            simlik_refine(&m, &us, Some(&log_h)),
            Err(GlmmError::LowEffectiveSampleSize { .. })
        ));
    }

    #[test]
    fn glm_start_matches_ols_for_gaussian() {
        let m = with_data(
            model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(3)>i(2)"),
            2,
        );
        let (b, s) = ols(&m);
        let (beta, phi) = glm_start(&m).unwrap();
        for (a, e) in beta.iter().zip(&b) {
            assert!((a - e).abs() < 1e-10);
        }
        assert!((phi - s).abs() < 1e-10);
    }

    #[test]
    fn glm_start_solves_logistic_score() {
        let mut m = model(Family::Binomial, Link::Logit, "~ factor(t) + (1|gr(cl))", "~cl(4)*t(3)>i(5)");
        m.update_parameters(Some(&[0.2, 0.5, -0.3]), Some(&[0.3]), None).unwrap();
        let mut m = with_data(m, 9);
        let (beta, _) = glm_start(&m).unwrap();
        m.set_beta(&beta).unwrap();
        m.set_theta(&[1e-9]).unwrap();
        let g = log_gradient(&m, &vec![0.0; m.q()], GradientWrt::Beta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }
}
