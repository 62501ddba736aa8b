//! c-optimal experimental designs by combinatorial search.
//!
//! A design is a set of experimental conditions, each a group of
//! observations. The objective is `c' M_d^{-1} c` with
//! `M_d = X_d' Sigma_d^{-1} X_d`, optionally combined over several models.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};
use crate::model::GlmmModel;
use crate::sparse::dense_cholesky;

/// Relative Cholesky pivot below which an information matrix is degenerate.
pub const PD_PIVOT_TOL: f64 = 1e-10;
/// Pivot magnitude below which a rank-1 update is refused.
pub const UPDATE_TOL: f64 = 1e-12;
const CORRELATION_TOL: f64 = 1e-14;
const SEED_RETRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RobustKind {
    /// `sum_r rho_r log(c_r' M_r^{-1} c_r)`.
    LogSum,
    /// `sum_r rho_r c_r' M_r^{-1} c_r`.
    #[default]
    WeightedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Local,
    Greedy,
    ReverseGreedy,
}

impl Algorithm {
    /// Numeric codes used on the command line: 1 local, 2 greedy, 3 reverse greedy.
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Algorithm::Local),
            2 => Ok(Algorithm::Greedy),
            3 => Ok(Algorithm::ReverseGreedy),
            _ => Err(GlmmError::InvalidArgument(format!("unknown algorithm code {code}"))),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Algorithm::Local => 1,
            Algorithm::Greedy => 2,
            Algorithm::ReverseGreedy => 3,
        }
    }
}

/// How the objective is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalPath {
    /// Sum of per-condition information when conditions are uncorrelated,
    /// rank-1 inverse updates otherwise.
    #[default]
    Auto,
    /// Rank-1 inverse updates regardless of the correlation structure.
    Correlated,
    /// Fresh inversion of `Sigma_d` for every candidate.
    Fresh,
}

#[derive(Debug, Clone)]
struct DesignModel {
    x: DMatrix<f64>,
    sigma: DMatrix<f64>,
    c: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DesignSpace {
    models: Vec<DesignModel>,
    rho: Vec<f64>,
    kind: RobustKind,
    /// Observation indices of each condition.
    conditions: Vec<Vec<usize>>,
    /// Condition label of each condition, ascending.
    labels: Vec<usize>,
    /// Index of the first identical condition.
    class_of: Vec<usize>,
    uncorrelated: bool,
    /// Per-model, per-condition `X_e' Sigma_e^{-1} X_e` when uncorrelated.
    summed: Vec<Vec<DMatrix<f64>>>,
    path: EvalPath,
}

impl DesignSpace {
    /// Design space over the rows of `models`, which must share their row
    /// count. `conditions` labels each observation; by default each
    /// observation is its own condition.
    pub fn new(
        models: &[&GlmmModel],
        cs: &[Vec<f64>],
        conditions: Option<&[usize]>,
        rho: Option<&[f64]>,
    ) -> Result<Self> {
        let mats = models
            .iter()
            .map(|m| Ok((m.x().clone(), m.sigma_approx()?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_matrices(mats, cs, conditions, rho)
    }

    /// Design space from explicit `(X, Sigma)` pairs.
    pub fn from_matrices(
        mats: Vec<(DMatrix<f64>, DMatrix<f64>)>,
        cs: &[Vec<f64>],
        conditions: Option<&[usize]>,
        rho: Option<&[f64]>,
    ) -> Result<Self> {
        if mats.is_empty() {
            return Err(GlmmError::InvalidArgument("design space needs at least one model".into()));
        }
        if cs.len() != mats.len() {
            return Err(GlmmError::Dimension(format!(
                "{} c vectors for {} models",
                cs.len(),
                mats.len()
            )));
        }
        let n = mats[0].0.nrows();
        let mut models = Vec::with_capacity(mats.len());
        for ((x, sigma), c) in mats.into_iter().zip(cs) {
            if x.nrows() != n || sigma.shape() != (n, n) {
                return Err(GlmmError::Dimension("models must share the observation set".into()));
            }
            if c.len() != x.ncols() {
                return Err(GlmmError::Dimension(format!(
                    "c has length {}, model has {} columns",
                    c.len(),
                    x.ncols()
                )));
            }
            models.push(DesignModel {
                x,
                sigma,
                c: DVector::from_column_slice(c),
            });
        }
        let r = models.len();
        let rho = match rho {
            Some(w) => {
                if w.len() != r || w.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(GlmmError::InvalidArgument(format!(
                        "model weights must lie in [0,1] and sum to one, got {w:?}"
                    )));
                }
                w.to_vec()
            }
            None => vec![1.0 / r as f64; r],
        };
        let assign: Vec<usize> = match conditions {
            Some(a) if a.len() != n => {
                return Err(GlmmError::Dimension(format!(
                    "condition assignment has {} entries for {n} observations",
                    a.len()
                )))
            }
            Some(a) => a.to_vec(),
            None => (0..n).collect(),
        };
        let mut labels: Vec<usize> = assign.clone();
        labels.sort_unstable();
        labels.dedup();
        let mut conds = vec![Vec::new(); labels.len()];
        for (i, a) in assign.iter().enumerate() {
            conds[labels.binary_search(a).expect("label present")].push(i);
        }
        let mut space = DesignSpace {
            models,
            rho,
            kind: RobustKind::default(),
            conditions: conds,
            labels,
            class_of: Vec::new(),
            uncorrelated: false,
            summed: Vec::new(),
            path: EvalPath::Auto,
        };
        space.uncorrelated = space.check_uncorrelated();
        space.class_of = space.find_classes();
        space.rebuild_summed()?;
        Ok(space)
    }

    pub fn with_kind(mut self, kind: RobustKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_path(mut self, path: EvalPath) -> Self {
        self.path = path;
        self
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn condition_rows(&self, j: usize) -> &[usize] {
        &self.conditions[j]
    }

    pub fn is_uncorrelated(&self) -> bool {
        self.uncorrelated
    }

    /// Unique conditions with their multiplicities, as `(representative, count)`.
    pub fn unique_counts(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (j, &c) in self.class_of.iter().enumerate() {
            if c == j {
                out.push((j, 0));
            }
        }
        for &c in &self.class_of {
            if let Some(e) = out.iter_mut().find(|e| e.0 == c) {
                e.1 += 1;
            }
        }
        out
    }

    /// Drops columns of `X` and the matching entries of `c` in every model.
    pub fn rm_cols(&mut self, cols: &[usize]) -> Result<()> {
        for m in &mut self.models {
            let p = m.x.ncols();
            if let Some(&bad) = cols.iter().find(|&&c| c >= p) {
                return Err(GlmmError::InvalidArgument(format!("column {bad} out of range for {p} columns")));
            }
            let keep: Vec<usize> = (0..p).filter(|c| !cols.contains(c)).collect();
            if keep.is_empty() {
                return Err(GlmmError::InvalidArgument("all columns removed".into()));
            }
            m.x = m.x.select_columns(&keep);
            m.c = DVector::from_iterator(keep.len(), keep.iter().map(|&c| m.c[c]));
        }
        self.rebuild_summed()
    }

    /// Columns that are all zero on the design, or constant when another
    /// constant column appears before them.
    pub fn suggest_rm_cols(&self, design: &[usize]) -> Vec<usize> {
        let rows: Vec<usize> = design.iter().flat_map(|&j| self.conditions[j].iter().copied()).collect();
        let mut out = Vec::new();
        for m in &self.models {
            let mut seen_constant = false;
            for c in 0..m.x.ncols() {
                let first = rows.first().map(|&i| m.x[(i, c)]).unwrap_or(0.0);
                let constant = rows.iter().all(|&i| m.x[(i, c)] == first);
                if constant && (first == 0.0 || seen_constant) {
                    out.push(c);
                }
                seen_constant |= constant;
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn check_uncorrelated(&self) -> bool {
        let n = self.models[0].x.nrows();
        let mut cond_of = vec![0; n];
        for (j, rows) in self.conditions.iter().enumerate() {
            for &i in rows {
                cond_of[i] = j;
            }
        }
        self.models.iter().all(|m| {
            let scale = (0..n).map(|i| m.sigma[(i, i)].abs()).fold(0.0, f64::max);
            (0..n).all(|a| (0..a).all(|b| cond_of[a] == cond_of[b] || m.sigma[(a, b)].abs() <= CORRELATION_TOL * scale))
        })
    }

    fn identical(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (&self.conditions[a], &self.conditions[b]);
        if ra.len() != rb.len() {
            return false;
        }
        let n = self.models[0].x.nrows();
        self.models.iter().all(|m| {
            ra.iter().zip(rb).all(|(&i, &k)| {
                m.x.row(i) == m.x.row(k)
                    && ra.iter().zip(rb).all(|(&i2, &k2)| m.sigma[(i, i2)] == m.sigma[(k, k2)])
                    && (0..n).all(|o| ra.contains(&o) || rb.contains(&o) || m.sigma[(i, o)] == m.sigma[(k, o)])
            })
        })
    }

    fn find_classes(&self) -> Vec<usize> {
        let j = self.conditions.len();
        let key = |c: usize| -> Vec<u64> {
            let mut k = vec![self.conditions[c].len() as u64];
            for m in &self.models {
                for &i in &self.conditions[c] {
                    k.extend(m.x.row(i).iter().map(|v| v.to_bits()));
                    k.push(m.sigma[(i, i)].to_bits());
                }
            }
            k
        };
        let mut reps: std::collections::HashMap<Vec<u64>, Vec<usize>> = std::collections::HashMap::new();
        let mut class_of = vec![0; j];
        for c in 0..j {
            let bucket = reps.entry(key(c)).or_default();
            match bucket.iter().find(|&&r| self.identical(r, c)) {
                Some(&r) => class_of[c] = r,
                None => {
                    bucket.push(c);
                    class_of[c] = c;
                }
            }
        }
        class_of
    }

    fn rebuild_summed(&mut self) -> Result<()> {
        self.summed.clear();
        if !self.uncorrelated {
            return Ok(());
        }
        self.summed = self
            .models
            .iter()
            .map(|m| {
                self.conditions
                    .iter()
                    .map(|rows| {
                        let s = DMatrix::from_fn(rows.len(), rows.len(), |a, b| m.sigma[(rows[a], rows[b])]);
                        let xe = DMatrix::from_fn(rows.len(), m.x.ncols(), |a, c| m.x[(rows[a], c)]);
                        let chol = s.cholesky().ok_or(GlmmError::NotPositiveDefinite {
                            block: rows[0],
                            pivot: f64::NAN,
                        })?;
                        let a = chol.l().solve_lower_triangular(&xe).expect("non-singular factor");
                        Ok(a.transpose() * a)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    fn use_summed(&self) -> bool {
        self.uncorrelated && self.path == EvalPath::Auto
    }

    fn combine(&self, values: &[f64]) -> f64 {
        match self.kind {
            RobustKind::LogSum => values.iter().zip(&self.rho).map(|(v, r)| r * v.ln()).sum(),
            RobustKind::WeightedMean => values.iter().zip(&self.rho).map(|(v, r)| r * v).sum(),
        }
    }

    /// Objective of `design` (condition indices) by direct inversion.
    pub fn objective(&self, design: &[usize]) -> Result<f64> {
        let vals = (0..self.models.len())
            .map(|r| c_objective(&self.models[r], &self.design_rows(design)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.combine(&vals))
    }

    /// Per-model `c' M_d^{-1} c` by direct inversion.
    pub fn model_objectives(&self, design: &[usize]) -> Result<Vec<f64>> {
        let rows = self.design_rows(design);
        self.models.iter().map(|m| c_objective(m, &rows)).collect()
    }

    /// Observation rows of the conditions in `design`.
    pub fn design_rows(&self, design: &[usize]) -> Vec<usize> {
        design.iter().flat_map(|&j| self.conditions[j].iter().copied()).collect()
    }

    fn fresh_state(&self, design: &[usize]) -> Result<State> {
        let caches = self
            .models
            .iter()
            .enumerate()
            .map(|(r, m)| {
                if self.use_summed() {
                    let mut info = DMatrix::zeros(m.x.ncols(), m.x.ncols());
                    for &j in design {
                        info += &self.summed[r][j];
                    }
                    Ok(Cache::Summed(info))
                } else {
                    let obs = self.design_rows(design);
                    let inv = sub_inverse(&m.sigma, &obs)?;
                    Ok(Cache::Inverse { obs, inv })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut design = design.to_vec();
        design.sort_unstable();
        Ok(State { design, caches })
    }

    fn state_objective(&self, state: &State) -> Option<f64> {
        let vals: Option<Vec<f64>> = state
            .caches
            .iter()
            .zip(&self.models)
            .map(|(cache, m)| {
                let info = match cache {
                    Cache::Summed(info) => info.clone(),
                    Cache::Inverse { obs, inv } => {
                        let xd = DMatrix::from_fn(obs.len(), m.x.ncols(), |a, c| m.x[(obs[a], c)]);
                        xd.transpose() * inv * xd
                    }
                };
                quad_inverse(&info, &m.c)
            })
            .collect();
        vals.map(|v| self.combine(&v))
    }

    fn remove(&self, state: &State, j: usize) -> Result<State> {
        if self.path == EvalPath::Fresh {
            let d: Vec<usize> = state.design.iter().copied().filter(|&x| x != j).collect();
            return self.fresh_state(&d);
        }
        let design = state.design.iter().copied().filter(|&x| x != j).collect();
        let caches = state
            .caches
            .iter()
            .enumerate()
            .map(|(r, cache)| match cache {
                Cache::Summed(info) => Ok(Cache::Summed(info - &self.summed[r][j])),
                Cache::Inverse { obs, inv } => {
                    let mut obs = obs.clone();
                    let mut inv = inv.clone();
                    for &i in &self.conditions[j] {
                        let pos = obs.iter().position(|&o| o == i).expect("observation in design");
                        inv = match downdate_inverse(&inv, pos) {
                            Ok(g) => g,
                            Err(_) => {
                                let mut rest = obs.clone();
                                rest.remove(pos);
                                sub_inverse(&self.models[r].sigma, &rest)?
                            }
                        };
                        obs.remove(pos);
                    }
                    Ok(Cache::Inverse { obs, inv })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(State { design, caches })
    }

    fn add(&self, state: &State, j: usize) -> Result<State> {
        let mut design = state.design.clone();
        let at = design.binary_search(&j).unwrap_or_else(|p| p);
        design.insert(at, j);
        if self.path == EvalPath::Fresh {
            return self.fresh_state(&design);
        }
        let caches = state
            .caches
            .iter()
            .enumerate()
            .map(|(r, cache)| match cache {
                Cache::Summed(info) => Ok(Cache::Summed(info + &self.summed[r][j])),
                Cache::Inverse { obs, inv } => {
                    let sigma = &self.models[r].sigma;
                    let mut obs = obs.clone();
                    let mut inv = inv.clone();
                    for &i in &self.conditions[j] {
                        let k = DVector::from_iterator(obs.len(), obs.iter().map(|&o| sigma[(o, i)]));
                        inv = match update_inverse(&inv, &k, sigma[(i, i)]) {
                            Ok(h) => h,
                            Err(_) => {
                                let mut all = obs.clone();
                                all.push(i);
                                sub_inverse(sigma, &all)?
                            }
                        };
                        obs.push(i);
                    }
                    Ok(Cache::Inverse { obs, inv })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(State { design, caches })
    }

    fn degenerate(&self, design: &[usize]) -> GlmmError {
        GlmmError::DegenerateDesign {
            msg: "information matrix is not positive definite".into(),
            columns: self.suggest_rm_cols(design),
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Summed(DMatrix<f64>),
    Inverse { obs: Vec<usize>, inv: DMatrix<f64> },
}

#[derive(Debug, Clone)]
struct State {
    /// Selected conditions, ascending.
    design: Vec<usize>,
    caches: Vec<Cache>,
}

/// `c' M^{-1} c`, or `None` when `M` fails the pivot check.
fn quad_inverse(info: &DMatrix<f64>, c: &DVector<f64>) -> Option<f64> {
    let l = dense_cholesky(info, PD_PIVOT_TOL).ok()?;
    let z = l.solve_lower_triangular(c)?;
    let v = z.norm_squared();
    v.is_finite().then_some(v)
}

fn sub_inverse(sigma: &DMatrix<f64>, obs: &[usize]) -> Result<DMatrix<f64>> {
    let s = DMatrix::from_fn(obs.len(), obs.len(), |a, b| sigma[(obs[a], obs[b])]);
    let chol = s.cholesky().ok_or(GlmmError::NotPositiveDefinite {
        block: 0,
        pivot: f64::NAN,
    })?;
    Ok(chol.inverse())
}

fn c_objective(m: &DesignModel, rows: &[usize]) -> Result<f64> {
    let xd = DMatrix::from_fn(rows.len(), m.x.ncols(), |a, c| m.x[(rows[a], c)]);
    let info = xd.transpose() * sub_inverse(&m.sigma, rows)? * xd;
    quad_inverse(&info, &m.c).ok_or_else(|| GlmmError::DegenerateDesign {
        msg: "information matrix is not positive definite".into(),
        columns: Vec::new(),
    })
}

/// Inverse of the covariance with observation `i` removed, from the inverse
/// `b` of the full covariance: `C - f f' / e`.
pub fn downdate_inverse(b: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
    let k = b.nrows();
    let e = b[(i, i)];
    if e.abs() < UPDATE_TOL {
        return Err(GlmmError::Singular {
            msg: format!("downdate pivot {e:e}"),
            columns: vec![i],
        });
    }
    let keep: Vec<usize> = (0..k).filter(|&r| r != i).collect();
    Ok(DMatrix::from_fn(k - 1, k - 1, |a, c| {
        let (ra, rc) = (keep[a], keep[c]);
        b[(ra, rc)] - b[(ra, i)] * b[(rc, i)] / e
    }))
}

/// Inverse of `[[Sigma_d, k], [k', h]]` from `a = Sigma_d^{-1}` by two
/// Sherman-Morrison corrections.
pub fn update_inverse(a: &DMatrix<f64>, k: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if k.len() != n {
        return Err(GlmmError::Dimension(format!("k has length {}, expected {n}", k.len())));
    }
    if !(h > 0.0) {
        return Err(GlmmError::Singular {
            msg: format!("new diagonal {h:e} is not positive"),
            columns: vec![n],
        });
    }
    // H** = H* + u v' with u = (k, 0), v = e_last; the first denominator is 1.
    let ak = a * k;
    let mut hss = DMatrix::zeros(n + 1, n + 1);
    hss.view_mut((0, 0), (n, n)).copy_from(a);
    for r in 0..n {
        hss[(r, n)] = -ak[r] / h;
    }
    hss[(n, n)] = 1.0 / h;
    // H = H** + v u'.
    let col = hss.column(n).into_owned();
    let mut u = DVector::zeros(n + 1);
    u.rows_mut(0, n).copy_from(k);
    let row = hss.transpose() * &u;
    let denom = 1.0 + u.dot(&col);
    if denom.abs() < UPDATE_TOL {
        return Err(GlmmError::Singular {
            msg: format!("update denominator {denom:e}"),
            columns: vec![n],
        });
    }
    Ok(hss - col * row.transpose() / denom)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SearchOptions {
    pub algorithms: Vec<Algorithm>,
    /// Independent runs from random starts; the best is kept.
    pub restarts: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Local],
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DesignResult {
    /// Selected condition indices, ascending.
    pub conditions: Vec<usize>,
    /// Labels of the selected conditions.
    pub labels: Vec<usize>,
    /// Observation rows of the selected conditions, ascending.
    pub rows: Vec<usize>,
    pub objective: f64,
    /// Objective after each accepted step of the best run, per algorithm.
    pub traces: Vec<Vec<f64>>,
}

fn argmin_first(vals: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    vals.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v >= bv => best,
        _ if v.is_finite() => Some((i, v)),
        _ => best,
    })
}

/// Best-improving swaps until none improves. Returns the final state and
/// the objective trace starting from `start`.
fn local_search_state(space: &DesignSpace, start: State) -> Result<(State, Vec<f64>)> {
    let j_total = space.n_conditions();
    let mut state = start;
    let mut current = space
        .state_objective(&state)
        .ok_or_else(|| space.degenerate(&state.design))?;
    let mut trace = vec![current];
    loop {
        let in_design = state.design.clone();
        let mut tried = Vec::new();
        let removals: Vec<usize> = in_design
            .iter()
            .copied()
            .filter(|&j| {
                let c = space.class_of[j];
                let fresh = !tried.contains(&c);
                tried.push(c);
                fresh
            })
            .collect();
        let outside: Vec<usize> = {
            let mut seen = Vec::new();
            (0..j_total)
                .filter(|j| in_design.binary_search(j).is_err())
                .filter(|&j| {
                    let c = space.class_of[j];
                    let fresh = !seen.contains(&c);
                    seen.push(c);
                    fresh
                })
                .collect()
        };
        let per_removal: Vec<Result<Option<(usize, f64)>>> = removals
            .par_iter()
            .map(|&j| {
                let reduced = space.remove(&state, j)?;
                let vals = outside
                    .iter()
                    .filter(|&&a| space.class_of[a] != space.class_of[j])
                    .map(|&a| Ok((a, space.add(&reduced, a).map(|s| space.state_objective(&s))?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(argmin_first(vals.into_iter().filter_map(|(a, v)| v.map(|v| (a, v)))))
            })
            .collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for (&j, res) in removals.iter().zip(per_removal) {
            if let Some((a, v)) = res? {
                if best.is_none_or(|b| v < b.2) {
                    best = Some((j, a, v));
                }
            }
        }
        match best {
            Some((j, a, v)) if v < current - 1e-12 * current.abs() => {
                state = space.add(&space.remove(&state, j)?, a)?;
                current = v;
                trace.push(current);
            }
            _ => break,
        }
    }
    Ok((state, trace))
}

fn greedy_state(space: &DesignSpace, start: State, target: usize) -> Result<(State, Vec<f64>)> {
    let mut state = start;
    let mut trace = vec![space
        .state_objective(&state)
        .ok_or_else(|| space.degenerate(&state.design))?];
    while state.design.len() < target {
        let mut seen = Vec::new();
        let candidates: Vec<usize> = (0..space.n_conditions())
            .filter(|j| state.design.binary_search(j).is_err())
            .filter(|&j| {
                let c = space.class_of[j];
                let fresh = !seen.contains(&c);
                seen.push(c);
                fresh
            })
            .collect();
        let vals = candidates
            .par_iter()
            .map(|&a| Ok((a, space.state_objective(&space.add(&state, a)?))))
            .collect::<Result<Vec<_>>>()?;
        let (a, v) = argmin_first(vals.into_iter().filter_map(|(a, v)| v.map(|v| (a, v))))
            .ok_or_else(|| space.degenerate(&state.design))?;
        state = space.add(&state, a)?;
        trace.push(v);
    }
    Ok((state, trace))
}

fn reverse_greedy_state(space: &DesignSpace, start: State, target: usize) -> Result<(State, Vec<f64>)> {
    let mut state = start;
    let mut trace = vec![space
        .state_objective(&state)
        .ok_or_else(|| space.degenerate(&state.design))?];
    while state.design.len() > target {
        let mut seen = Vec::new();
        let candidates: Vec<usize> = state
            .design
            .iter()
            .copied()
            .filter(|&j| {
                let c = space.class_of[j];
                let fresh = !seen.contains(&c);
                seen.push(c);
                fresh
            })
            .collect();
        let vals = candidates
            .par_iter()
            .map(|&j| Ok((j, space.state_objective(&space.remove(&state, j)?))))
            .collect::<Result<Vec<_>>>()?;
        let (j, v) = argmin_first(vals.into_iter().filter_map(|(a, v)| v.map(|v| (a, v))))
            .ok_or_else(|| space.degenerate(&state.design))?;
        state = space.remove(&state, j)?;
        trace.push(v);
    }
    Ok((state, trace))
}

fn random_state<R: Rng + ?Sized>(space: &DesignSpace, size: usize, rng: &mut R) -> Result<State> {
    let j = space.n_conditions();
    let mut last = Vec::new();
    for _ in 0..SEED_RETRIES {
        let d: Vec<usize> = sample(rng, j, size).into_vec();
        let state = space.fresh_state(&d)?;
        if space.state_objective(&state).is_some() {
            return Ok(state);
        }
        last = state.design;
    }
    Err(GlmmError::DegenerateDesign {
        msg: format!("no non-degenerate random design of size {size} in {SEED_RETRIES} attempts"),
        columns: space.suggest_rm_cols(&last),
    })
}

/// Local search from `start` (condition indices).
pub fn local_search(space: &DesignSpace, start: &[usize]) -> Result<DesignResult> {
    let (s, trace) = local_search_state(space, space.fresh_state(start)?)?;
    finish(space, s, vec![trace])
}

/// Greedy search from `seed` (condition indices) up to `j_prime` conditions.
pub fn greedy_search(space: &DesignSpace, seed: &[usize], j_prime: usize) -> Result<DesignResult> {
    check_size(space, j_prime)?;
    let (s, trace) = greedy_state(space, space.fresh_state(seed)?, j_prime)?;
    finish(space, s, vec![trace])
}

/// Reverse greedy search from the full design space.
pub fn reverse_greedy(space: &DesignSpace, j_prime: usize) -> Result<DesignResult> {
    check_size(space, j_prime)?;
    let all: Vec<usize> = (0..space.n_conditions()).collect();
    let (s, trace) = reverse_greedy_state(space, space.fresh_state(&all)?, j_prime)?;
    finish(space, s, vec![trace])
}

fn check_size(space: &DesignSpace, j_prime: usize) -> Result<()> {
    if j_prime == 0 || j_prime > space.n_conditions() {
        return Err(GlmmError::InvalidArgument(format!(
            "design size {j_prime} outside 1..={}",
            space.n_conditions()
        )));
    }
    Ok(())
}

fn finish(space: &DesignSpace, state: State, traces: Vec<Vec<f64>>) -> Result<DesignResult> {
    let objective = space
        .state_objective(&state)
        .ok_or_else(|| space.degenerate(&state.design))?;
    let mut rows = space.design_rows(&state.design);
    rows.sort_unstable();
    Ok(DesignResult {
        labels: state.design.iter().map(|&j| space.labels[j]).collect(),
        conditions: state.design,
        rows,
        objective,
        traces,
    })
}

/// Runs the chain of algorithms for a design of `j_prime` conditions, with
/// `options.restarts` independent random starts when the chain begins with
/// a random design.
pub fn optimal_design<R: Rng + ?Sized>(
    space: &DesignSpace,
    j_prime: usize,
    options: &SearchOptions,
    rng: &mut R,
) -> Result<DesignResult> {
    check_size(space, j_prime)?;
    if options.algorithms.is_empty() || options.restarts == 0 {
        return Err(GlmmError::InvalidArgument("need at least one algorithm and one run".into()));
    }
    let runs = if options.algorithms[0] == Algorithm::ReverseGreedy {
        1
    } else {
        options.restarts
    };
    let p = space.models.iter().map(|m| m.x.ncols()).max().unwrap_or(1);
    let mut best: Option<DesignResult> = None;
    for _ in 0..runs {
        let mut state: Option<State> = None;
        let mut traces = Vec::new();
        for &alg in &options.algorithms {
            let (s, t) = match alg {
                Algorithm::Local => {
                    let start = match state.take() {
                        Some(s) if s.design.len() == j_prime => s,
                        Some(s) => greedy_state(space, s, j_prime)?.0,
                        None => random_state(space, j_prime, rng)?,
                    };
                    local_search_state(space, start)?
                }
                Algorithm::Greedy => {
                    let start = match state.take() {
                        Some(s) => s,
                        None => random_state(space, p.max(2).min(j_prime), rng)?,
                    };
                    greedy_state(space, start, j_prime)?
                }
                Algorithm::ReverseGreedy => {
                    let start = match state.take() {
                        Some(s) => s,
                        None => space.fresh_state(&(0..space.n_conditions()).collect::<Vec<_>>())?,
                    };
                    if start.design.len() < j_prime {
                        greedy_state(space, start, j_prime)?
                    } else {
                        reverse_greedy_state(space, start, j_prime)?
                    }
                }
            };
            state = Some(s);
            traces.push(t);
        }
        let res = finish(space, state.expect("chain is non-empty"), traces)?;
        if best.as_ref().is_none_or(|b| res.objective < b.objective) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one run"))
}
