//! The mixed model: linear predictor, marginal covariance approximation,
//! information matrix, power, simulation and prediction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::covariance::{CholeskyMode, RandomEffectStructure};
use crate::data::{Column, DataFrame};
use crate::error::{GlmmError, Result};
use crate::family::{FamilyLink, Link};
use crate::formula::{parse_formula, ModelFormula};
use crate::sparse::{backward_solve, forward_solve, SparseMatrixCRS};
use crate::special::{compensated_sum, norm_cdf, norm_quantile};
use crate::xmatrix::{build_x, FixedDesignMatrix};

/// `16 sqrt(3) / (15 pi)`: the logistic function is close to `Phi(c x)`.
pub const LOGIT_ATTENUATION: f64 = 0.588_084_155_116_578_2;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PowerRow {
    pub parameter: String,
    pub value: f64,
    pub se: f64,
    pub power: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `X_new beta + Z_new E[u_new | u]`.
    pub linear_predictor: Vec<f64>,
    /// Conditional mean of the new random effects, averaged over samples.
    pub re_mean: Vec<f64>,
    /// Conditional covariance of the new random effects.
    pub re_cov: DMatrix<f64>,
    /// `Z` for the new rows against the new random effects.
    pub z: SparseMatrixCRS,
}

#[derive(Debug, Clone)]
pub struct GlmmModel {
    formula: ModelFormula,
    data: DataFrame,
    x: FixedDesignMatrix,
    re: RandomEffectStructure,
    family: FamilyLink,
    beta: Vec<f64>,
    phi: f64,
    offset: Vec<f64>,
    y: Option<Vec<f64>>,
    attenuate: bool,
}

impl GlmmModel {
    pub fn new(formula: &str, data: DataFrame, family: FamilyLink) -> Result<Self> {
        Self::with_ranges(formula, data, family, &[])
    }

    /// As [`GlmmModel::new`] with an effective range per random term for
    /// compactly supported functions.
    pub fn with_ranges(
        formula: &str,
        data: DataFrame,
        family: FamilyLink,
        ranges: &[Option<f64>],
    ) -> Result<Self> {
        let formula = parse_formula(formula)?;
        let x = build_x(&formula, &data)?;
        let re = RandomEffectStructure::new(&formula.random, &data, ranges)?;
        let n = data.nrows();
        Ok(Self {
            beta: vec![0.0; x.p()],
            formula,
            x,
            re,
            family,
            phi: 1.0,
            offset: vec![0.0; n],
            y: None,
            attenuate: false,
            data,
        })
    }

    pub fn formula(&self) -> &ModelFormula {
        &self.formula
    }

    pub fn data(&self) -> &DataFrame {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.p()
    }

    pub fn q(&self) -> usize {
        self.re.q()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x.x
    }

    pub fn fixed(&self) -> &FixedDesignMatrix {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.x.names
    }

    pub fn z(&self) -> &SparseMatrixCRS {
        self.re.z()
    }

    pub fn re(&self) -> &RandomEffectStructure {
        &self.re
    }

    pub fn family(&self) -> FamilyLink {
        self.family
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn theta(&self) -> &[f64] {
        self.re.theta()
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn y(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| GlmmError::InvalidArgument("model has no outcome data".into()))
    }

    pub fn attenuate(&self) -> bool {
        self.attenuate
    }

    /// Version of the covariance parameters; any change invalidates cached
    /// factors.
    pub fn version(&self) -> u64 {
        self.re.version()
    }

    pub fn set_beta(&mut self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.p() {
            return Err(GlmmError::Dimension(format!(
                "expected {} mean parameters, got {}",
                self.p(),
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(GlmmError::NonFinite("mean parameters".into()));
        }
        self.beta = beta.to_vec();
        Ok(())
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        self.re.set_theta(theta)
    }

    pub fn set_phi(&mut self, phi: f64) -> Result<()> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(GlmmError::InvalidArgument(format!(
                "scale parameter must be positive, got {phi}"
            )));
        }
        self.phi = phi;
        Ok(())
    }

    pub fn set_offset(&mut self, offset: &[f64]) -> Result<()> {
        if offset.len() != self.n() {
            return Err(GlmmError::Dimension("offset length".into()));
        }
        self.offset = offset.to_vec();
        Ok(())
    }

    pub fn set_y(&mut self, y: &[f64]) -> Result<()> {
        if y.len() != self.n() {
            return Err(GlmmError::Dimension(format!(
                "outcome has {} entries, data has {} rows",
                y.len(),
                self.n()
            )));
        }
        self.y = Some(y.to_vec());
        Ok(())
    }

    pub fn set_attenuation(&mut self, on: bool) {
        self.attenuate = on;
    }

    pub fn set_cholesky_mode(&mut self, mode: CholeskyMode) {
        self.re.set_mode(mode);
    }

    /// Sets any subset of the parameters in one call.
    pub fn update_parameters(
        &mut self,
        beta: Option<&[f64]>,
        theta: Option<&[f64]>,
        phi: Option<f64>,
    ) -> Result<()> {
        if let Some(b) = beta {
            self.set_beta(b)?;
        }
        if let Some(t) = theta {
            self.set_theta(t)?;
        }
        if let Some(p) = phi {
            self.set_phi(p)?;
        }
        Ok(())
    }

    /// `X beta + offset`.
    pub fn fixed_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let xb = self.x() * DVector::from_column_slice(beta);
        xb.iter().zip(&self.offset).map(|(a, o)| a + o).collect()
    }

    /// `X beta + offset + Z u`.
    pub fn linear_predictor(&self, beta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.p() || u.len() != self.q() {
            return Err(GlmmError::Dimension(format!(
                "beta has {} entries (need {}), u has {} (need {})",
                beta.len(),
                self.p(),
                u.len(),
                self.q()
            )));
        }
        let zu = self.z().mul_vec(u);
        Ok(self
            .fixed_predictor(beta)
            .into_iter()
            .zip(zu)
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Diagonal of `W` at the given linear predictor.
    pub fn glm_weights(&self, eta: &[f64]) -> Result<Vec<f64>> {
        eta.iter().map(|&e| self.family.weight(e, self.phi)).collect()
    }

    /// `z_i D z_i'` for every observation.
    pub fn re_variances(&self) -> Result<Vec<f64>> {
        let zl = self.re.zl()?;
        Ok((0..self.n())
            .map(|i| zl.row(i).1.iter().map(|v| v * v).sum())
            .collect())
    }

    /// Marginal linear predictor, attenuated when the flag is set.
    pub fn marginal_eta(&self) -> Result<Vec<f64>> {
        let eta = self.fixed_predictor(&self.beta);
        if !self.attenuate {
            return Ok(eta);
        }
        let s = self.re_variances()?;
        Ok(match self.family.link {
            Link::Log => eta.iter().zip(&s).map(|(e, s)| e + 0.5 * s).collect(),
            Link::Logit => eta
                .iter()
                .zip(&s)
                .map(|(e, s)| e / (1.0 + LOGIT_ATTENUATION * LOGIT_ATTENUATION * s).sqrt())
                .collect(),
            _ => eta,
        })
    }

    /// `Sigma = W^{-1} + Z D Z'`.
    pub fn sigma_approx(&self) -> Result<DMatrix<f64>> {
        let w = self.glm_weights(&self.marginal_eta()?)?;
        let zl = self.re.zl()?.to_dense();
        let mut s = &zl * zl.transpose();
        for (i, wi) in w.iter().enumerate() {
            s[(i, i)] += 1.0 / wi;
        }
        Ok(s)
    }

    /// `X' Sigma^{-1} X`, accumulated over groups of observations that share
    /// no random effects.
    pub fn fisher_information(&self) -> Result<DMatrix<f64>> {
        let w = self.glm_weights(&self.marginal_eta()?)?;
        let zl = self.re.zl()?;
        let groups = self.re.observation_groups();
        let p = self.p();
        let x = self.x();
        let parts: Vec<Result<DMatrix<f64>>> = groups
            .par_iter()
            .map(|g| {
                let mut cols: Vec<usize> = g.iter().flat_map(|&i| zl.row(i).0.to_vec()).collect();
                cols.sort_unstable();
                cols.dedup();
                let ng = g.len();
                let mut zg = DMatrix::zeros(ng, cols.len());
                for (r, &i) in g.iter().enumerate() {
                    let (c, v) = zl.row(i);
                    for (&j, &val) in c.iter().zip(v) {
                        let k = cols.binary_search(&j).expect("collected");
                        zg[(r, k)] = val;
                    }
                }
                let mut s = &zg * zg.transpose();
                for (r, &i) in g.iter().enumerate() {
                    s[(r, r)] += 1.0 / w[i];
                }
                let chol = s.cholesky().ok_or(GlmmError::NotPositiveDefinite {
                    block: g[0],
                    pivot: f64::NAN,
                })?;
                let xg = DMatrix::from_fn(ng, p, |r, c| x[(g[r], c)]);
                let a = chol.l().solve_lower_triangular(&xg).expect("non-singular factor");
                Ok(a.transpose() * a)
            })
            .collect();
        let mut info = DMatrix::zeros(p, p);
        for m in parts {
            info += m?;
        }
        Ok(info)
    }

    /// `M = (X' Sigma^{-1} X)^{-1}`.
    pub fn information_matrix(&self) -> Result<DMatrix<f64>> {
        invert_information(&self.fisher_information()?)
    }

    /// Per-parameter standard errors and power of two-sided tests at `alpha`.
    pub fn power(&self, alpha: f64) -> Result<Vec<PowerRow>> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(GlmmError::InvalidArgument(format!("alpha = {alpha}")));
        }
        let m = self.information_matrix()?;
        let z = norm_quantile(1.0 - alpha / 2.0);
        Ok((0..self.p())
            .map(|i| {
                let se = m[(i, i)].sqrt();
                PowerRow {
                    parameter: self.x.names[i].clone(),
                    value: self.beta[i],
                    se,
                    power: power_from_se(self.beta[i], se, z),
                }
            })
            .collect())
    }

    /// Draws `u`, then `y | u`, at the current parameters.
    pub fn sim_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Simulation> {
        let u = self.re.simulate_re(rng)?;
        let eta = self.linear_predictor(&self.beta, &u)?;
        let y = eta
            .iter()
            .map(|&e| self.family.sample(rng, self.family.mean(e), self.phi))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Simulation { y, u })
    }

    /// The bound data with an outcome column appended.
    pub fn frame_with_outcome(&self, y: &[f64], name: &str) -> Result<DataFrame> {
        let mut df = self.data.clone();
        df.push_column(name, Column::Numeric(y.to_vec()))?;
        Ok(df)
    }

    /// `sum_i log f(y_i | eta_i)`.
    pub fn conditional_loglik(&self, eta: &[f64]) -> Result<f64> {
        let y = self.y()?;
        let vals: Vec<f64> = eta
            .par_iter()
            .zip(y.par_iter())
            .map(|(&e, &yi)| self.family.log_density(yi, self.family.mean(e), self.phi))
            .collect();
        let s = compensated_sum(vals);
        if s.is_finite() {
            Ok(s)
        } else {
            Err(GlmmError::NonFinite("conditional log-likelihood".into()))
        }
    }

    /// Distribution of the random effects on the rows of `newdata` given
    /// samples `us` of the observed random effects.
    pub fn predict(&self, newdata: &DataFrame, us: &[Vec<f64>]) -> Result<Prediction> {
        if us.is_empty() {
            return Err(GlmmError::InvalidArgument("no random effect samples".into()));
        }
        let q = self.q();
        let mut ubar = vec![0.0; q];
        for u in us {
            if u.len() != q {
                return Err(GlmmError::Dimension("random effect sample length".into()));
            }
        }
        for (j, slot) in ubar.iter_mut().enumerate() {
            *slot = compensated_sum(us.iter().map(|u| u[j])) / us.len() as f64;
        }
        let theta = self.theta();
        let l = self.re.cholesky()?;
        let n_new = newdata.nrows();
        let mut new_offsets = Vec::new();
        let mut q_new = 0;
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let mut z_trip = Vec::new();
        for (t, prog) in self.re.programs().iter().enumerate() {
            let rows = prog.encode_rows(newdata)?;
            let mut uniq = rows.clone();
            uniq.sort_by(|a, b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            uniq.dedup();
            let k = uniq.len();
            let off = self.re.offsets()[t];
            let m_old = prog.n_levels();
            // Cross-covariance of new combinations with the observed ones.
            let mut d10 = DMatrix::zeros(k, q);
            for (a, ra) in uniq.iter().enumerate() {
                for b in 0..m_old {
                    d10[(a, off + b)] = prog.eval_rows(ra, prog.row(b), theta);
                }
            }
            let d11 = DMatrix::from_fn(k, k, |a, b| prog.eval_rows(&uniq[a], &uniq[b], theta));
            // D^{-1} applied to each cross-covariance row and to the mean.
            let mut solved = DMatrix::zeros(k, q);
            for a in 0..k {
                let mut r: Vec<f64> = d10.row(a).iter().copied().collect();
                forward_solve(l, &mut r);
                backward_solve(l, &mut r);
                for (j, v) in r.into_iter().enumerate() {
                    solved[(a, j)] = v;
                }
            }
            let mean = &solved * DVector::from_column_slice(&ubar);
            let cov = &d11 - &solved * d10.transpose();
            if cov.iter().any(|v| !v.is_finite()) {
                return Err(GlmmError::Singular {
                    msg: "observed random-effect covariance".into(),
                    columns: Vec::new(),
                });
            }
            let slope = match &prog.slope {
                Some(z) => newdata.numeric(z)?.to_vec(),
                None => vec![1.0; n_new],
            };
            for (i, r) in rows.iter().enumerate() {
                let c = uniq.binary_search_by(|u| {
                    u.iter()
                        .zip(r)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                z_trip.push((i, q_new + c.expect("present"), slope[i]));
            }
            new_offsets.push(q_new);
            q_new += k;
            means.push(mean);
            covs.push(cov);
        }
        let mut re_mean = Vec::with_capacity(q_new);
        let mut re_cov = DMatrix::zeros(q_new, q_new);
        for (t, (m, c)) in means.iter().zip(&covs).enumerate() {
            re_mean.extend(m.iter().copied());
            let o = new_offsets[t];
            re_cov.view_mut((o, o), (c.nrows(), c.ncols())).copy_from(c);
        }
        let z = SparseMatrixCRS::from_triplets(n_new, q_new, z_trip, 0.0);
        let xb = self.x.layout.apply(newdata)? * DVector::from_column_slice(&self.beta);
        let zu = z.mul_vec(&re_mean);
        let linear_predictor = xb.iter().zip(zu).map(|(a, b)| a + b).collect();
        Ok(Prediction {
            linear_predictor,
            re_mean,
            re_cov,
            z,
        })
    }
}

/// `Phi(|beta| / se - z)`.
pub fn power_from_se(beta: f64, se: f64, z: f64) -> f64 {
    norm_cdf(beta.abs() / se - z)
}

/// Inverts an information matrix, naming the columns most involved in any
/// near-linear dependence when it is singular.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = info.nrows();
    let scale = (0..p).map(|i| info[(i, i)].abs()).fold(0.0f64, f64::max);
    if let Some(chol) = info.clone().cholesky() {
        let l = chol.l();
        let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-12 * scale {
            return Ok(chol.inverse());
        }
    }
    Err(GlmmError::Singular {
        msg: "X' Sigma^-1 X is singular".into(),
        columns: collinear_columns(info),
    })
}

/// Columns with large weight in the eigenvector of the smallest eigenvalue.
pub fn collinear_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let eig = a.clone().symmetric_eigen();
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let v = eig.eigenvectors.column(k);
    (0..a.nrows()).filter(|&i| v[i].abs() > 0.1).collect()
}
