//! Random-effect structure: `Z`, block-diagonal `D(theta)`, its Cholesky
//! factor and the Gaussian log-density of the random effects.

use std::ops::Range;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::DataFrame;
use crate::error::{GlmmError, Result};
use crate::formula::{ParamDomain, RandomTerm};
use crate::program::{compile_term, CovarianceBlockProgram};
use crate::sparse::{dense_cholesky, forward_solve, sparse_cholesky, SparseMatrixCRS};
use crate::special::compensated_sum;

/// Relative pivot threshold for positive definiteness.
pub const PD_TOL: f64 = 1e-12;
/// Entries of compactly supported kernels below this are structural zeros.
pub const DROP_TOL: f64 = 1e-14;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CholeskyMode {
    #[default]
    Sparse,
    Dense,
}

/// One diagonal block of `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub term: usize,
    /// Columns of `Z` (and rows/columns of `D`) covered by the block.
    pub cols: Range<usize>,
    /// Rows of the term's unique-combination table.
    pub local: Range<usize>,
}

#[derive(Debug)]
pub struct RandomEffectStructure {
    programs: Vec<CovarianceBlockProgram>,
    offsets: Vec<usize>,
    blocks: Vec<Block>,
    z: SparseMatrixCRS,
    n_params: usize,
    theta: Vec<f64>,
    version: u64,
    mode: CholeskyMode,
    factor: OnceLock<Result<SparseMatrixCRS>>,
}

impl Clone for RandomEffectStructure {
    fn clone(&self) -> Self {
        let factor = OnceLock::new();
        if let Some(f) = self.factor.get() {
            let _ = factor.set(f.clone());
        }
        Self {
            programs: self.programs.clone(),
            offsets: self.offsets.clone(),
            blocks: self.blocks.clone(),
            z: self.z.clone(),
            n_params: self.n_params,
            theta: self.theta.clone(),
            version: self.version,
            mode: self.mode,
            factor,
        }
    }
}

/// A valid starting value inside each parameter domain.
pub fn default_theta(domains: &[ParamDomain]) -> Vec<f64> {
    domains
        .iter()
        .map(|d| match *d {
            ParamDomain::Positive => 0.5,
            ParamDomain::OpenUnit => 0.5,
            ParamDomain::AtLeast(lo) => lo + 0.5,
            ParamDomain::Closed(lo, hi) => 0.5 * (lo + hi),
        })
        .collect()
}

impl RandomEffectStructure {
    /// Compiles every random term against `data`. `ranges[t]`, when given,
    /// is the effective range for the compactly supported functions of term
    /// `t`.
    pub fn new(terms: &[RandomTerm], data: &DataFrame, ranges: &[Option<f64>]) -> Result<Self> {
        let mut programs = Vec::with_capacity(terms.len());
        let mut offset = 0;
        for (t, term) in terms.iter().enumerate() {
            let range = ranges.get(t).copied().flatten();
            let p = compile_term(term, data, offset, range)?;
            offset += p.n_params();
            programs.push(p);
        }
        Self::from_programs(programs, data.nrows())
    }

    pub fn from_programs(programs: Vec<CovarianceBlockProgram>, n: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(programs.len());
        let mut blocks = Vec::new();
        let mut q = 0;
        for (t, p) in programs.iter().enumerate() {
            if p.row_index.len() != n {
                return Err(GlmmError::Dimension(format!(
                    "term {} bound to {} rows, expected {n}",
                    p.label,
                    p.row_index.len()
                )));
            }
            offsets.push(q);
            for b in &p.blocks {
                blocks.push(Block {
                    term: t,
                    cols: q + b.start..q + b.end,
                    local: b.clone(),
                });
            }
            q += p.n_levels();
        }
        let mut trip = Vec::with_capacity(n * programs.len());
        for (t, p) in programs.iter().enumerate() {
            for i in 0..n {
                trip.push((i, offsets[t] + p.row_index[i], p.slope_values[i]));
            }
        }
        let z = SparseMatrixCRS::from_triplets(n, q, trip, 0.0);
        let n_params = programs.iter().map(|p| p.n_params()).sum();
        let domains: Vec<ParamDomain> = programs.iter().flat_map(|p| p.domains()).collect();
        Ok(Self {
            programs,
            offsets,
            blocks,
            z,
            n_params,
            theta: default_theta(&domains),
            version: 0,
            mode: CholeskyMode::default(),
            factor: OnceLock::new(),
        })
    }

    pub fn programs(&self) -> &[CovarianceBlockProgram] {
        &self.programs
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn q(&self) -> usize {
        self.z.ncols
    }

    pub fn n(&self) -> usize {
        self.z.nrows
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mode(&self) -> CholeskyMode {
        self.mode
    }

    pub fn domains(&self) -> Vec<ParamDomain> {
        self.programs.iter().flat_map(|p| p.domains()).collect()
    }

    pub fn set_mode(&mut self, mode: CholeskyMode) {
        if mode != self.mode {
            self.mode = mode;
            self.invalidate();
        }
    }

    fn invalidate(&mut self) {
        self.version += 1;
        self.factor = OnceLock::new();
    }

    pub fn validate(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(GlmmError::Dimension(format!(
                "expected {} covariance parameters, got {}",
                self.n_params,
                theta.len()
            )));
        }
        self.programs.iter().try_for_each(|p| p.validate(theta))
    }

    /// Replaces the covariance parameters; cached factors are dropped.
    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        self.validate(theta)?;
        self.theta = theta.to_vec();
        self.invalidate();
        Ok(())
    }

    pub fn z(&self) -> &SparseMatrixCRS {
        &self.z
    }

    /// Entry `(a, b)` of block `block`, with `a` and `b` local to the block.
    pub fn eval_d_entry(&self, block: usize, a: usize, b: usize, theta: &[f64]) -> f64 {
        let blk = &self.blocks[block];
        let p = &self.programs[blk.term];
        p.eval(blk.local.start + a, blk.local.start + b, theta)
    }

    fn block_entries(&self, block: usize, theta: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let blk = &self.blocks[block];
        let p = &self.programs[blk.term];
        let compact = p.functions.iter().any(|f| f.function.is_compact());
        let tol = if compact { DROP_TOL } else { 0.0 };
        let size = blk.local.len();
        let mut out = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..=i {
                let v = p.eval(blk.local.start + i, blk.local.start + j, theta);
                if !v.is_finite() {
                    return Err(GlmmError::NonFinite(format!(
                        "D entry ({i},{j}) of block {block} for {} is {v}",
                        p.label
                    )));
                }
                if v.abs() > tol {
                    out.push((blk.cols.start + i, blk.cols.start + j, v));
                    if i != j {
                        out.push((blk.cols.start + j, blk.cols.start + i, v));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense copy of one block of `D`.
    pub fn block_dense(&self, block: usize, theta: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
        let size = self.blocks[block].cols.len();
        let start = self.blocks[block].cols.start;
        let mut m = nalgebra::DMatrix::zeros(size, size);
        for (i, j, v) in self.block_entries(block, theta)? {
            m[(i - start, j - start)] = v;
        }
        Ok(m)
    }

    /// Assembles `D(theta)` block by block.
    pub fn build_d(&self, theta: &[f64]) -> Result<SparseMatrixCRS> {
        self.validate(theta)?;
        let parts: Vec<Result<Vec<(usize, usize, f64)>>> = (0..self.blocks.len())
            .into_par_iter()
            .map(|b| self.block_entries(b, theta))
            .collect();
        let mut trip = Vec::new();
        for p in parts {
            trip.extend(p?);
        }
        Ok(SparseMatrixCRS::from_triplets(self.q(), self.q(), trip, 0.0))
    }

    pub fn d(&self) -> Result<SparseMatrixCRS> {
        self.build_d(&self.theta)
    }

    fn block_of_col(&self, col: usize) -> usize {
        self.blocks
            .iter()
            .position(|b| b.cols.contains(&col))
            .unwrap_or(0)
    }

    /// Lower Cholesky factor of `D(theta)` in the requested mode.
    pub fn factor_for(&self, theta: &[f64], mode: CholeskyMode) -> Result<SparseMatrixCRS> {
        match mode {
            CholeskyMode::Sparse => {
                let d = self.build_d(theta)?;
                sparse_cholesky(&d, PD_TOL).map_err(|(k, pivot)| GlmmError::NotPositiveDefinite {
                    block: self.block_of_col(k),
                    pivot,
                })
            }
            CholeskyMode::Dense => {
                self.validate(theta)?;
                let parts: Vec<Result<Vec<(usize, usize, f64)>>> = (0..self.blocks.len())
                    .into_par_iter()
                    .map(|b| {
                        let dense = self.block_dense(b, theta)?;
                        let l = dense_cholesky(&dense, PD_TOL)
                            .map_err(|(_, pivot)| GlmmError::NotPositiveDefinite { block: b, pivot })?;
                        let s = self.blocks[b].cols.start;
                        let mut t = Vec::new();
                        for i in 0..l.nrows() {
                            for j in 0..=i {
                                if l[(i, j)] != 0.0 {
                                    t.push((s + i, s + j, l[(i, j)]));
                                }
                            }
                        }
                        Ok(t)
                    })
                    .collect();
                let mut trip = Vec::new();
                for p in parts {
                    trip.extend(p?);
                }
                Ok(SparseMatrixCRS::from_triplets(self.q(), self.q(), trip, 0.0))
            }
        }
    }

    /// Cached factor at the current parameters.
    pub fn cholesky(&self) -> Result<&SparseMatrixCRS> {
        self.factor
            .get_or_init(|| self.factor_for(&self.theta, self.mode))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// `log |D|` from the factor diagonal.
    pub fn log_det(&self) -> Result<f64> {
        Ok(log_det_factor(self.cholesky()?))
    }

    /// Gaussian log-density of `u` under `N(0, D)` at the current parameters.
    pub fn mvn_loglik(&self, u: &[f64]) -> Result<f64> {
        MvnLogDensity::new(self.cholesky()?).eval(u)
    }

    /// Average log-density of the columns of `u` at parameters `theta`.
    pub fn mean_mvn_loglik(&self, theta: &[f64], us: &[Vec<f64>]) -> Result<f64> {
        let l = self.factor_for(theta, self.mode)?;
        let dens = MvnLogDensity::new(&l);
        let vals: Result<Vec<f64>> = us
            .par_iter()
            .map(|u| dens.eval(u))
            .collect();
        Ok(compensated_sum(vals?) / us.len() as f64)
    }

    /// `u = L v` with `v ~ N(0, I)`.
    pub fn simulate_re<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let l = self.cholesky()?;
        let v: Vec<f64> = (0..self.q()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(l.mul_vec(&v))
    }

    /// `Z L` at the current parameters.
    pub fn zl(&self) -> Result<SparseMatrixCRS> {
        Ok(self.z.mul(self.cholesky()?))
    }

    /// Partition of observations into groups that share no random-effect
    /// block, so that the marginal covariance is block diagonal over them.
    pub fn observation_groups(&self) -> Vec<Vec<usize>> {
        let nb = self.blocks.len();
        let mut col_block = vec![0usize; self.q()];
        for (b, blk) in self.blocks.iter().enumerate() {
            for c in blk.cols.clone() {
                col_block[c] = b;
            }
        }
        let mut parent: Vec<usize> = (0..nb).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for i in 0..self.n() {
            let (cols, _) = self.z.row(i);
            if let Some((&first, rest)) = cols.split_first() {
                let a = find(&mut parent, col_block[first]);
                for &c in rest {
                    let b = find(&mut parent, col_block[c]);
                    if a != b {
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent[hi] = lo;
                    }
                }
            }
        }
        let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut singles = Vec::new();
        for i in 0..self.n() {
            let (cols, _) = self.z.row(i);
            match cols.first() {
                Some(&c) => {
                    let r = find(&mut parent, col_block[c]);
                    by_root.entry(r).or_default().push(i);
                }
                None => singles.push(vec![i]),
            }
        }
        let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
        groups.extend(singles);
        groups.sort_by_key(|g| g[0]);
        groups
    }
}

pub fn log_det_factor(l: &SparseMatrixCRS) -> f64 {
    2.0 * compensated_sum((0..l.nrows).map(|i| l.get(i, i).ln()))
}

/// `log N(u; 0, L L')` with the normalising constant computed once.
pub struct MvnLogDensity<'a> {
    l: &'a SparseMatrixCRS,
    constant: f64,
}

impl<'a> MvnLogDensity<'a> {
    pub fn new(l: &'a SparseMatrixCRS) -> Self {
        let constant = -0.5 * l.nrows as f64 * LN_2PI - 0.5 * log_det_factor(l);
        Self { l, constant }
    }

    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.l.nrows {
            return Err(GlmmError::Dimension(format!(
                "random effect vector has length {}, expected {}",
                u.len(),
                self.l.nrows
            )));
        }
        let mut z = u.to_vec();
        forward_solve(self.l, &mut z);
        Ok(self.constant - 0.5 * compensated_sum(z.iter().map(|v| v * v)))
    }
}
