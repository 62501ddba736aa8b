#![allow(dead_code)]

use std::f64::consts::PI;

use glmm::data::{Column, DataFrame};
use glmm::design::{expand_design, parse_nelder};
use glmm::family::{Family, FamilyLink, Link};
use glmm::formula::{parse_formula, CovFn};
use glmm::model::GlmmModel;
use glmm::optdesign::DesignSpace;
use glmm::program::{compile_term, CovarianceBlockProgram};
use glmm::special::{bessel_k, gamma};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn frame(design: &str) -> DataFrame {
    expand_design(&parse_nelder(design).unwrap()).unwrap().to_frame()
}

pub fn model(family: Family, link: Link, formula: &str, design: &str) -> GlmmModel {
    GlmmModel::new(formula, frame(design), FamilyLink::new(family, link).unwrap()).unwrap()
}

pub fn gaussian(formula: &str, design: &str) -> GlmmModel {
    model(Family::Gaussian, Link::Identity, formula, design)
}

/// Simulates an outcome at the current parameters and attaches it.
pub fn with_outcome(mut m: GlmmModel, seed: u64) -> GlmmModel {
    let y = m.sim_data(&mut rng(seed)).unwrap().y;
    m.set_y(&y).unwrap();
    m
}

/// Dense `phi^2 I + Z D Z'` built from `D` entry by entry.
pub fn dense_marginal_cov(m: &GlmmModel) -> DMatrix<f64> {
    let z = m.z().to_dense();
    let d = m.re().d().unwrap().to_dense();
    let n = m.n();
    &z * d * z.transpose() + DMatrix::identity(n, n) * m.phi().powi(2)
}

/// Gaussian-identity marginal log-likelihood from a dense Cholesky factor.
pub fn exact_gaussian_marginal(m: &GlmmModel) -> f64 {
    let s = dense_marginal_cov(m);
    let n = m.n();
    let r = DVector::from_column_slice(m.y().unwrap()) - m.x() * DVector::from_column_slice(m.beta());
    let chol = s.cholesky().unwrap();
    let logdet = 2.0 * (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + r.dot(&chol.solve(&r)))
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * (0.5 * n as f64).max(1.0)
}

/// Covariance between two points at distance `d` (scaled distance for the
/// compactly supported functions) written out from the function table.
pub fn kernel_oracle(f: CovFn, d: f64, t: &[f64]) -> f64 {
    let inside = |v: f64| if d < 1.0 { v } else { 0.0 };
    let y = d.min(1.0);
    match f {
        CovFn::Gr => {
            if d == 0.0 {
                t[0] * t[0]
            } else {
                0.0
            }
        }
        CovFn::Fexp => t[0] * (-d / t[1]).exp(),
        CovFn::Fexp0 => (-d / t[0]).exp(),
        CovFn::Sqexp => t[0] * (-(d / t[1]) * (d / t[1])).exp(),
        CovFn::Sqexp0 => (-(d / t[0]) * (d / t[0])).exp(),
        CovFn::Ar1 => t[0].powf(d),
        CovFn::Bessel => bessel_k(t[0], d),
        CovFn::Matern => {
            let nu = t[0];
            let s = (2.0 * nu).sqrt() * d / t[1];
            if s == 0.0 {
                1.0
            } else {
                2f64.powf(1.0 - nu) / gamma(nu) * s.powf(nu) * bessel_k(nu, s)
            }
        }
        CovFn::Wend0 => inside(t[0] * (1.0 - y).powf(t[1])),
        CovFn::Wend1 => inside(t[0] * (1.0 + (t[1] + 1.0) * y) * (1.0 - y).powf(t[1] + 1.0)),
        CovFn::Wend2 => {
            let a = t[1] + 2.0;
            inside(t[0] * (1.0 + a * y + (a * a - 1.0) * y * y / 3.0) * (1.0 - y).powf(a))
        }
        CovFn::Prodwm => {
            let nu = t[1];
            let wm = if y == 0.0 {
                1.0
            } else {
                2f64.powf(1.0 - nu) / gamma(nu) * y.powf(nu) * bessel_k(nu, y)
            };
            inside(t[0] * wm * (1.0 + 5.5 * y + 117.0 / 12.0 * y * y) * (1.0 - y).powf(5.5))
        }
        CovFn::Prodcb => {
            let cauchy = (1.0 + y.powf(t[1])).powi(-3);
            let bohman = (1.0 - y) * (PI * y).cos() + (PI * y).sin() / PI;
            inside(t[0] * cauchy * bohman)
        }
        CovFn::Prodek => {
            let w = 2.0 * PI * y;
            let kantar = if y == 0.0 {
                1.0
            } else {
                (1.0 - y) * w.sin() / w + (1.0 - w.cos()) / (PI * w)
            };
            inside(t[0] * (-y.powf(t[1])).exp() * kantar)
        }
    }
}

/// Program for `(1|f(vars))` over numeric columns named in `vars`.
pub fn single_program(f: CovFn, vars: &[&str]) -> CovarianceBlockProgram {
    let mut df = DataFrame::new();
    for v in vars {
        df.push_column(v, Column::Numeric(vec![0.0, 1.0])).unwrap();
    }
    let text = format!("~ 1 + (1|{}({}))", f.name(), vars.join(","));
    let formula = parse_formula(&text).unwrap();
    compile_term(&formula.random[0], &df, 0, None).unwrap()
}

/// A random point inside each parameter domain of `f` in `dims` dimensions,
/// kept away from values that make `D` numerically singular on a grid with
/// spacing of order 0.1.
pub fn draw_theta<R: Rng>(f: CovFn, dims: usize, rng: &mut R) -> Vec<f64> {
    use glmm::formula::ParamDomain::*;
    let doms = f.domains(dims);
    let mut out = Vec::with_capacity(doms.len());
    for (k, dom) in doms.iter().enumerate() {
        let v = match (f, k, *dom) {
            (CovFn::Sqexp, 1, _) | (CovFn::Sqexp0, 0, _) => rng.random_range(0.05..0.3),
            (CovFn::Matern, 0, _) | (CovFn::Bessel, 0, _) => rng.random_range(0.2..2.5),
            (CovFn::Matern, 1, _) => rng.random_range(0.05..0.4),
            (CovFn::Prodwm, 1, _) => rng.random_range(0.2..2.0),
            (_, _, Positive) => rng.random_range(0.1..2.0),
            (_, _, OpenUnit) => rng.random_range(0.05..0.95),
            (_, _, AtLeast(lo)) => rng.random_range(lo..lo + 3.0),
            (_, _, Closed(lo, hi)) => rng.random_range(lo..=hi),
        };
        out.push(v);
    }
    out
}

/// Exact posterior of the standardised effects `v` for a gaussian-identity
/// model: precision `I + L'Z'ZL / phi^2`.
pub fn gaussian_posterior(m: &GlmmModel) -> (DVector<f64>, DMatrix<f64>) {
    let zl = m.z().to_dense() * m.re().cholesky().unwrap().to_dense();
    let s2 = m.phi().powi(2);
    let q = m.q();
    let prec = DMatrix::identity(q, q) + zl.transpose() * &zl / s2;
    let cov = prec.try_inverse().unwrap();
    let r = DVector::from_column_slice(m.y().unwrap()) - m.x() * DVector::from_column_slice(m.beta());
    let mean = &cov * zl.transpose() * r / s2;
    (mean, cov)
}

/// Batch-means standard error of the mean of `x`.
pub fn batch_se(x: &[f64], batches: usize) -> f64 {
    let b = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|k| x[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Fifteen jittered points on a line; the compactly supported functions
/// use an effective range of 1.5.
pub fn kernel_model<R: Rng>(f: CovFn, r: &mut R) -> GlmmModel {
    let n = 15;
    let mut df = DataFrame::new();
    let x: Vec<f64> = (0..n).map(|i| 0.2 * i as f64 + r.random_range(0.0..0.05)).collect();
    let g: Vec<f64> = (0..n).map(|i| (i % 4) as f64).collect();
    df.push_column("x", Column::Numeric(x)).unwrap();
    df.push_column("g", Column::Numeric(g)).unwrap();
    let var = if f == CovFn::Gr { "g" } else { "x" };
    let formula = format!("~ 1 + (1|{}({var}))", f.name());
    let range = f.is_compact().then_some(1.5);
    GlmmModel::with_ranges(&formula, df, FamilyLink::parse("gaussian", None).unwrap(), &[range]).unwrap()
}

pub struct Instance {
    pub x: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub c: Vec<f64>,
    pub conditions: Vec<usize>,
}

/// `n` observations in `j` conditions of equal size with a dense covariance.
pub fn instance(r: &mut ChaCha20Rng, j: usize, per: usize, p: usize) -> Instance {
    let n = j * per;
    let mut x = DMatrix::from_fn(n, p, |_, _| r.random_range(-1.0..1.0));
    x.column_mut(0).fill(1.0);
    let sigma = random_spd(n, r) / n as f64;
    let c = (0..p).map(|k| if k == p - 1 { 1.0 } else { 0.0 }).collect();
    Instance {
        x,
        sigma,
        c,
        conditions: (0..n).map(|i| i / per).collect(),
    }
}

pub fn space(inst: &Instance) -> DesignSpace {
    DesignSpace::from_matrices(
        vec![(inst.x.clone(), inst.sigma.clone())],
        std::slice::from_ref(&inst.c),
        Some(&inst.conditions),
        None,
    )
    .unwrap()
}

/// `c' (X_d' Sigma_d^{-1} X_d)^{-1} c` by dense inversion, `None` when the
/// information matrix is singular.
pub fn oracle(inst: &Instance, design: &[usize]) -> Option<f64> {
    let rows: Vec<usize> = (0..inst.x.nrows()).filter(|i| design.contains(&inst.conditions[*i])).collect();
    let xd = inst.x.select_rows(&rows);
    let sd = inst.sigma.select_rows(&rows).select_columns(&rows);
    let m = xd.transpose() * sd.try_inverse()? * &xd;
    if m.clone().cholesky().is_none() || m.determinant().abs() < 1e-10 {
        return None;
    }
    let c = DVector::from_column_slice(&inst.c);
    Some(c.dot(&(m.try_inverse()? * &c)))
}

pub fn start(r: &mut ChaCha20Rng, j: usize, size: usize) -> Vec<usize> {
    let mut d = sample(r, j, size).into_vec();
    d.sort_unstable();
    d
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    (k - 1..n)
        .flat_map(|last| {
            combinations(last, k - 1).into_iter().map(move |mut c| {
                c.push(last);
                c
            })
        })
        .collect()
}
