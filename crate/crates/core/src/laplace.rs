//! Laplace-approximation fitting.
//!
//! The approximate log-likelihood of the reparameterised model is
//! `-1/2 log|I + Z~' W Z~| + sum_i log f(y_i | v) - v'v/2` evaluated at the
//! conditional mode of `v`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};
use crate::mcml::{theta_bounds, FitResult, RowGroups, TraceEntry};
use crate::model::{collinear_columns, GlmmModel};
use crate::optim::{minimize, Bound, NelderMeadOptions};
use crate::sparse::SparseMatrixCRS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LaVariant {
    #[default]
    Scoring,
    Dfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaOptions {
    pub variant: LaVariant,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LaOptions {
    fn default() -> Self {
        Self {
            variant: LaVariant::Scoring,
            tol: 0.01,
            max_iter: 100,
        }
    }
}

impl LaOptions {
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

#[derive(Debug, Clone, PartialEq)]
pub struct LaState {
    pub v: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaFit {
    pub state: LaState,
    pub result: FitResult,
}

/// `Z L(theta)` restricted to the group rows.
fn group_zl(model: &GlmmModel, groups: &RowGroups, theta: &[f64]) -> Result<SparseMatrixCRS> {
    let l = model.re().factor_for(theta, model.re().mode())?;
    Ok(groups.z.mul(&l))
}

fn group_eta(groups: &RowGroups, zl: &SparseMatrixCRS, beta: &[f64], v: &[f64]) -> Vec<f64> {
    let mut eta = groups.fixed_predictor(beta);
    for (e, z) in eta.iter_mut().zip(zl.mul_vec(v)) {
        *e += z;
    }
    eta
}

/// `sum_i log f(y_i | v) - v'v/2`.
pub fn la_joint(model: &GlmmModel, beta: &[f64], phi: f64, theta: &[f64], v: &[f64]) -> Result<f64> {
    let groups = RowGroups::new(model)?;
    let zl = group_zl(model, &groups, theta)?;
    joint_with(model, &groups, &zl, beta, phi, v)
}

fn joint_with(
    model: &GlmmModel,
    groups: &RowGroups,
    zl: &SparseMatrixCRS,
    beta: &[f64],
    phi: f64,
    v: &[f64],
) -> Result<f64> {
    let ll = groups.loglik(model.family(), &group_eta(groups, zl, beta, v), phi);
    if !ll.is_finite() {
        return Err(GlmmError::NonFinite("conditional log-likelihood".into()));
    }
    Ok(ll - 0.5 * v.iter().map(|x| x * x).sum::<f64>())
}

/// `I + Z~' W Z~` with `W` at the given group linear predictor.
fn information_v(model: &GlmmModel, groups: &RowGroups, zl: &SparseMatrixCRS, eta: &[f64], phi: f64) -> Result<DMatrix<f64>> {
    let q = zl.ncols;
    let family = model.family();
    let mut m = DMatrix::identity(q, q);
    for (g, st) in groups.stats.iter().enumerate() {
        let w = st.count * family.weight(eta[g], phi)?;
        let (cols, vals) = zl.row(g);
        for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
            for (&cb, &vb) in cols[..=a].iter().zip(vals) {
                m[(ca, cb)] += w * va * vb;
            }
        }
    }
    for c in 0..q {
        for r in 0..c {
            m[(r, c)] = m[(c, r)];
        }
    }
    Ok(m)
}

fn log_det_spd(m: DMatrix<f64>) -> Result<f64> {
    let chol = m.cholesky().ok_or(GlmmError::NotPositiveDefinite {
        block: 0,
        pivot: f64::NAN,
    })?;
    let l = chol.l();
    Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Approximate log-likelihood at `v`.
pub fn la_loglik(model: &GlmmModel, beta: &[f64], phi: f64, theta: &[f64], v: &[f64]) -> Result<f64> {
    let groups = RowGroups::new(model)?;
    la_loglik_with(model, &groups, beta, phi, theta, v)
}

fn la_loglik_with(
    model: &GlmmModel,
    groups: &RowGroups,
    beta: &[f64],
    phi: f64,
    theta: &[f64],
    v: &[f64],
) -> Result<f64> {
    if v.len() != model.q() || beta.len() != model.p() {
        return Err(GlmmError::Dimension("parameter vector lengths".into()));
    }
    let zl = group_zl(model, groups, theta)?;
    let eta = group_eta(groups, &zl, beta, v);
    let joint = joint_with(model, groups, &zl, beta, phi, v)?;
    let logdet = log_det_spd(information_v(model, groups, &zl, &eta, phi)?)?;
    Ok(joint - 0.5 * logdet)
}

/// One simultaneous scoring step in `(beta, v)` at covariance parameters
/// `theta`, using the expected weights and the exact score.
pub fn scoring_update(
    model: &GlmmModel,
    beta: &[f64],
    v: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let groups = RowGroups::new(model)?;
    let zl = group_zl(model, &groups, theta)?;
    let (db, dv) = scoring_direction(model, &groups, &zl, beta, v, phi)?;
    Ok((
        beta.iter().zip(&db).map(|(a, b)| a + b).collect(),
        v.iter().zip(&dv).map(|(a, b)| a + b).collect(),
    ))
}

fn scoring_direction(
    model: &GlmmModel,
    groups: &RowGroups,
    zl: &SparseMatrixCRS,
    beta: &[f64],
    v: &[f64],
    phi: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let family = model.family();
    let (p, q) = (model.p(), model.q());
    let k = p + q;
    let eta = group_eta(groups, zl, beta, v);
    let mut h = DMatrix::zeros(k, k);
    let mut grad = DVector::zeros(k);
    let mut row = vec![0.0; k];
    for (g, st) in groups.stats.iter().enumerate() {
        let (_, s) = family
            .grouped_log_density_score(st, eta[g], phi)
            .ok_or_else(|| GlmmError::MeanOutOfSupport {
                family: family.family.name().into(),
                mu: family.mean(eta[g]),
            })?;
        let w = st.count * family.weight(eta[g], phi)?;
        row.iter_mut().for_each(|r| *r = 0.0);
        for c in 0..p {
            row[c] = groups.x[(g, c)];
        }
        let (cols, vals) = zl.row(g);
        for (&c, &val) in cols.iter().zip(vals) {
            row[p + c] = val;
        }
        let nz: Vec<usize> = (0..k).filter(|&i| row[i] != 0.0).collect();
        for &a in &nz {
            grad[a] += s * row[a];
            for &b in &nz {
                if b <= a {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
    }
    for i in 0..q {
        h[(p + i, p + i)] += 1.0;
        grad[p + i] -= v[i];
    }
    for c in 0..k {
        for r in 0..c {
            h[(r, c)] = h[(c, r)];
        }
    }
    let step = h.clone().cholesky().map(|c| c.solve(&grad)).ok_or_else(|| GlmmError::Singular {
        msg: "scoring matrix is singular".into(),
        columns: collinear_columns(&h),
    })?;
    Ok((step.as_slice()[..p].to_vec(), step.as_slice()[p..].to_vec()))
}

/// Maximises `sum_i log f(y_i | v) - v'v/2` jointly in `(beta, v)`.
fn step_one(
    model: &GlmmModel,
    groups: &RowGroups,
    variant: LaVariant,
    beta: &[f64],
    v: &[f64],
    phi: f64,
    theta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let zl = group_zl(model, groups, theta)?;
    let p = model.p();
    match variant {
        LaVariant::Scoring => {
            let mut beta = beta.to_vec();
            let mut v = v.to_vec();
            let mut current = joint_with(model, groups, &zl, &beta, phi, &v)?;
            for _ in 0..100 {
                let (db, dv) = scoring_direction(model, groups, &zl, &beta, &v, phi)?;
                let size = db.iter().chain(&dv).map(|x| x.abs()).fold(0.0, f64::max);
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..30 {
                    let nb: Vec<f64> = beta.iter().zip(&db).map(|(a, b)| a + t * b).collect();
                    let nv: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a + t * b).collect();
                    if let Ok(val) = joint_with(model, groups, &zl, &nb, phi, &nv) {
                        if val >= current - 1e-12 * current.abs().max(1.0) {
                            beta = nb;
                            v = nv;
                            current = val;
                            accepted = true;
                            break;
                        }
                    }
                    t *= 0.5;
                }
                if !accepted || size * t < 1e-10 {
                    break;
                }
            }
            Ok((beta, v))
        }
        LaVariant::Dfo => {
            let mut x0 = beta.to_vec();
            x0.extend_from_slice(v);
            let r = minimize(
                |x| match joint_with(model, groups, &zl, &x[..p], phi, &x[p..]) {
                    Ok(val) => -val,
                    Err(_) => f64::INFINITY,
                },
                &x0,
                &vec![Bound::FREE; x0.len()],
                &NelderMeadOptions::default(),
            )?;
            Ok((r.x[..p].to_vec(), r.x[p..].to_vec()))
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Alternates mode finding in `(beta, v)` with derivative-free updates of
/// `(theta, phi)`, then refines `(beta, theta, phi)` jointly at the final
/// mode. The model's parameters are updated in place.
pub fn la_fit(model: &mut GlmmModel, options: &LaOptions) -> Result<LaFit> {
    options.validate()?;
    model.y()?;
    let groups = RowGroups::new(model)?;
    let has_phi = model.family().family.has_phi();
    let (p, k) = (model.p(), model.re().n_params());
    let tb = theta_bounds(&model.re().domains());
    let mut v = vec![0.0; model.q()];
    let mut beta = model.beta().to_vec();
    let mut theta = model.theta().to_vec();
    let mut phi = model.phi();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut boundary = Vec::new();

    // (theta, phi) packed for the optimiser.
    let pack_tp = |theta: &[f64], phi: f64| {
        let mut x = theta.to_vec();
        let mut b = tb.clone();
        if has_phi {
            x.push(phi);
            b.push(Bound::at_least(0.0));
        }
        (x, b)
    };

    for iteration in 1..=options.max_iter {
        let (nb, nv) = step_one(model, &groups, options.variant, &beta, &v, phi, &theta)?;
        let (x0, bounds) = pack_tp(&theta, phi);
        let fixed_phi = phi;
        let r = minimize(
            |x| {
                let ph = if has_phi { x[k] } else { fixed_phi };
                match la_loglik_with(model, &groups, &nb, ph, &x[..k], &nv) {
                    Ok(val) => -val,
                    Err(_) => f64::INFINITY,
                }
            },
            &x0,
            &bounds,
            &NelderMeadOptions::default(),
        )?;
        let nt = r.x[..k].to_vec();
        let nphi = if has_phi { r.x[k] } else { phi };
        let mut delta = max_abs_diff(&nb, &beta).max(max_abs_diff(&nt, &theta));
        if has_phi {
            delta = delta.max((nphi - phi).abs());
        }
        boundary = r.at_bound.iter().copied().filter(|&i| i < k).collect();
        beta = nb;
        v = nv;
        theta = nt;
        phi = nphi;
        trace.push(TraceEntry {
            iteration,
            max_delta: delta,
            beta: beta.clone(),
            theta: theta.clone(),
            phi,
            accept_rate: 0.0,
            divergences: 0,
            step_size: 0.0,
            objective: Some(-r.fx),
        });
        if delta <= options.tol {
            converged = true;
            break;
        }
    }

    // Step 3.
    let mut x0 = beta.clone();
    let mut bounds = vec![Bound::FREE; p];
    let (tp, tpb) = pack_tp(&theta, phi);
    x0.extend(tp);
    bounds.extend(tpb);
    let fixed_phi = phi;
    let r = minimize(
        |x| {
            let ph = if has_phi { x[p + k] } else { fixed_phi };
            match la_loglik_with(model, &groups, &x[..p], ph, &x[p..p + k], &v) {
                Ok(val) => -val,
                Err(_) => f64::INFINITY,
            }
        },
        &x0,
        &bounds,
        &NelderMeadOptions::default(),
    )?;
    beta = r.x[..p].to_vec();
    theta = r.x[p..p + k].to_vec();
    if has_phi {
        phi = r.x[p + k];
    }
    let step3: Vec<usize> = r.at_bound.iter().filter(|&&i| i >= p && i < p + k).map(|i| i - p).collect();
    for i in step3 {
        if !boundary.contains(&i) {
            boundary.push(i);
        }
    }
    boundary.sort_unstable();
    model.update_parameters(Some(&beta), Some(&theta), Some(phi))?;
    let loglik = -r.fx;
    let l = model.re().cholesky()?;
    let u = l.mul_vec(&v);
    let m = model.information_matrix()?;
    let result = FitResult {
        method: match options.variant {
            LaVariant::Scoring => "la".into(),
            LaVariant::Dfo => "la-dfo".into(),
        },
        names: model.names().to_vec(),
        beta: beta.clone(),
        theta: theta.clone(),
        phi: has_phi.then_some(phi),
        se_beta: (0..p).map(|i| m[(i, i)].sqrt()).collect(),
        se_theta: None,
        iterations: trace.len(),
        trace,
        u: vec![u],
        converged,
        boundary,
        loglik: Some(loglik),
    };
    Ok(LaFit {
        state: LaState {
            iterations: result.iterations,
            v,
            beta,
            theta,
            phi,
            converged,
        },
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{expand_design, parse_nelder};
    use crate::family::{Family, FamilyLink, Link};
    use crate::mcml::{log_gradient, GradientWrt};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn model(family: Family, link: Link, formula: &str, design: &str, seed: u64) -> GlmmModel {
        let data = expand_design(&parse_nelder(design).unwrap()).unwrap().to_frame();
        let mut m = GlmmModel::new(formula, data, FamilyLink::new(family, link).unwrap()).unwrap();
        let p = m.p();
        let beta: Vec<f64> = (0..p).map(|i| 0.3 - 0.2 * i as f64).collect();
        m.update_parameters(Some(&beta), None, Some(0.8)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let y = m.sim_data(&mut rng).unwrap().y;
        m.set_y(&y).unwrap();
        m
    }

    /// Exact gaussian marginal log-likelihood from the dense covariance.
    fn exact_marginal(m: &GlmmModel) -> f64 {
        let zl = m.re().zl().unwrap().to_dense();
        let n = m.n();
        let s = &zl * zl.transpose() + DMatrix::identity(n, n) * m.phi().powi(2);
        let r = DVector::from_column_slice(m.y().unwrap()) - m.x() * DVector::from_column_slice(m.beta());
        let chol = s.cholesky().unwrap();
        let logdet: f64 = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&chol.solve(&r)))
    }

    #[test]
    fn gaussian_laplace_is_exact_at_the_mode() {
        let m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(2)>i(3)", 1);
        let groups = RowGroups::new(&m).unwrap();
        let zl = group_zl(&m, &groups, m.theta()).unwrap();
        // Newton iterations for the mode in v with beta held fixed.
        let mut v = vec![0.0; 3];
        for _ in 0..3 {
            let g = log_gradient(&m, &v, GradientWrt::V).unwrap();
            let info = information_v(&m, &groups, &zl, &group_eta(&groups, &zl, m.beta(), &v), m.phi()).unwrap();
            let d = info.cholesky().unwrap().solve(&DVector::from_vec(g));
            v.iter_mut().zip(d.iter()).for_each(|(a, b)| *a += b);
        }
        let la = la_loglik(&m, m.beta(), m.phi(), m.theta(), &v).unwrap();
        assert!((la - exact_marginal(&m)).abs() < 1e-8, "{la} vs {}", exact_marginal(&m));
    }

    #[test]
    fn log_det_matches_dense_determinant() {
        let m = model(Family::Binomial, Link::Logit, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(2)>i(3)", 2);
        let v = [0.2, -0.4, 0.1];
        let groups = RowGroups::new(&m).unwrap();
        let zl = group_zl(&m, &groups, m.theta()).unwrap();
        let eta = group_eta(&groups, &zl, m.beta(), &v);
        let fast = log_det_spd(information_v(&m, &groups, &zl, &eta, 1.0).unwrap()).unwrap();
        let full = m.re().zl().unwrap().to_dense();
        let eta_full = m.linear_predictor(m.beta(), &m.re().cholesky().unwrap().mul_vec(&v)).unwrap();
        let w = DMatrix::from_diagonal(&DVector::from_vec(m.glm_weights(&eta_full).unwrap()));
        let dense = DMatrix::identity(3, 3) + full.transpose() * w * &full;
        assert!((fast - dense.determinant().ln()).abs() < 1e-9);
    }

    #[test]
    fn gaussian_scoring_reaches_the_mode_in_one_step() {
        let m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(4)*t(2)>i(2)", 3);
        let (b1, v1) = scoring_update(&m, m.beta(), &[0.0; 4], m.phi(), m.theta()).unwrap();
        let (b2, v2) = scoring_update(&m, &b1, &v1, m.phi(), m.theta()).unwrap();
        assert!(max_abs_diff(&b1, &b2) < 1e-10 && max_abs_diff(&v1, &v2) < 1e-10);
    }

    #[test]
    fn scoring_and_dfo_agree_on_logistic_toy() {
        let m = model(Family::Binomial, Link::Logit, "~ factor(t) + (1|gr(cl))", "~cl(4)*t(2)>i(8)", 4);
        let groups = RowGroups::new(&m).unwrap();
        let (bs, vs) = step_one(&m, &groups, LaVariant::Scoring, m.beta(), &[0.0; 4], 1.0, m.theta()).unwrap();
        let (bd, vd) = step_one(&m, &groups, LaVariant::Dfo, m.beta(), &[0.0; 4], 1.0, m.theta()).unwrap();
        assert!(max_abs_diff(&bs, &bd) < 1e-4, "{bs:?} {bd:?}");
        assert!(max_abs_diff(&vs, &vd) < 1e-4);
    }

    #[test]
    fn zero_covariance_reduces_to_glm() {
        let m = model(Family::Binomial, Link::Logit, "~ factor(t) + (1|gr(cl))", "~cl(3)*t(2)>i(3)", 5);
        let v = [0.5, -1.0, 0.25];
        let theta = [1e-150];
        let la = la_loglik(&m, m.beta(), 1.0, &theta, &v).unwrap();
        let glm = m.conditional_loglik(&m.fixed_predictor(m.beta())).unwrap();
        assert!((la - (glm - 0.5 * (0.25 + 1.0 + 0.0625))).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fit_matches_marginal_likelihood_maximiser() {
        let mut m = model(Family::Gaussian, Link::Identity, "~ factor(t) + (1|gr(cl))", "~cl(6)*t(3)>i(4)", 6);
        let truth = m.clone();
        // The alternating scheme stops at a distance of order `tol` from the
        // maximiser, so the stopping rule is tightened here.
        let fit = la_fit(&mut m, &LaOptions { tol: 1e-6, ..Default::default() }).unwrap();
        assert!(fit.result.converged);
        // Oracle: maximise the dense gaussian marginal likelihood directly.
        let p = truth.p();
        let mut x0 = truth.beta().to_vec();
        x0.extend([0.5, 0.5]);
        let mut bounds = vec![Bound::FREE; p];
        bounds.extend([Bound::at_least(0.0), Bound::at_least(0.0)]);
        let opts = NelderMeadOptions { max_evals: 20_000, ..Default::default() };
        let oracle = minimize(
            |x| {
                let mut t = truth.clone();
                t.update_parameters(Some(&x[..p]), Some(&x[p..p + 1]), Some(x[p + 1])).unwrap();
                -exact_marginal(&t)
            },
            &x0,
            &bounds,
            &opts,
        )
        .unwrap();
        let mut got = fit.result.beta.clone();
        got.extend(&fit.result.theta);
        got.push(fit.result.phi.unwrap());
        assert!(max_abs_diff(&got, &oracle.x) < 1e-4, "{got:?} vs {:?}", oracle.x);
        assert!((fit.result.loglik.unwrap() + oracle.fx).abs() < 1e-6);
    }

    #[test]
    fn absent_clustering_puts_variance_on_the_bound() {
        let data = expand_design(&parse_nelder("~cl(6)*t(3)>i(4)").unwrap()).unwrap().to_frame();
        let fl = FamilyLink::new(Family::Gaussian, Link::Identity).unwrap();
        let mut m = GlmmModel::new("~ factor(t) + (1|gr(cl))", data, fl).unwrap();
        let n = m.n();
        // Outcome with no cluster structure: each cluster has identical means.
        let y: Vec<f64> = (0..n).map(|i| [-1.0, 0.5, 0.5, 1.0][i % 4]).collect();
        m.set_y(&y).unwrap();
        let fit = la_fit(&mut m, &LaOptions::default()).unwrap();
        assert!(fit.result.theta[0] < 1e-3, "{:?}", fit.result.theta);
        assert_eq!(fit.result.boundary, vec![0]);
    }
}
