//! Box-constrained derivative-free minimisation.
//!
//! Bounds are removed by a smooth change of variables (log for one-sided
//! bounds, logistic for two-sided ones) and the transformed problem is
//! solved with an adaptive Nelder-Mead simplex, restarted from the best
//! vertex until a restart no longer improves the objective.

use crate::error::{GlmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub const FREE: Bound = Bound {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Self {
        assert!(lower < upper, "empty interval [{lower}, {upper}]");
        Self { lower, upper }
    }

    pub fn at_least(lower: f64) -> Self {
        Self::new(lower, f64::INFINITY)
    }

    fn to_free(&self, x: f64) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (false, false) => x,
            (true, false) => (x - self.lower).max(1e-300).ln(),
            (false, true) => -(self.upper - x).max(1e-300).ln(),
            (true, true) => {
                let t = ((x - self.lower) / (self.upper - self.lower)).clamp(1e-15, 1.0 - 1e-15);
                (t / (1.0 - t)).ln()
            }
        }
    }

    fn from_free(&self, z: f64) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (false, false) => z,
            (true, false) => self.lower + z.exp(),
            (false, true) => self.upper - (-z).exp(),
            (true, true) => self.lower + (self.upper - self.lower) / (1.0 + (-z).exp()),
        }
    }

    /// Whether `x` lies within `tol` of a finite bound.
    pub fn near_bound(&self, x: f64, tol: f64) -> bool {
        (self.lower.is_finite() && x - self.lower <= tol)
            || (self.upper.is_finite() && self.upper - x <= tol)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Convergence threshold on the simplex diameter in transformed space.
    pub xtol: f64,
    /// Convergence threshold on the spread of objective values.
    pub ftol: f64,
    /// Initial simplex edge in transformed space.
    pub step: f64,
    pub max_restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            xtol: 1e-8,
            ftol: 1e-15,
            step: 0.5,
            max_restarts: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
    /// Indices of coordinates that ended within `1e-6` of a bound.
    pub at_bound: Vec<usize>,
}

/// Minimises `f` over the box `bounds` starting from `x0`. Non-finite
/// objective values are treated as `+inf`, except at the starting point.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &[Bound], opts: &NelderMeadOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), bounds.len());
    let k = x0.len();
    let to_x = |z: &[f64]| -> Vec<f64> { z.iter().zip(bounds).map(|(z, b)| b.from_free(*z)).collect() };
    let mut evals = 0usize;
    let mut eval = |z: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(&to_x(z));
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut z0: Vec<f64> = x0.iter().zip(bounds).map(|(x, b)| b.to_free(*x)).collect();
    let f0 = eval(&z0, &mut evals);
    if !f0.is_finite() {
        return Err(GlmmError::Optimizer(format!(
            "objective is not finite at the starting point {x0:?}"
        )));
    }
    if k == 0 {
        return Ok(OptimResult {
            x: vec![],
            fx: f0,
            evals,
            converged: true,
            at_bound: vec![],
        });
    }
    let kf = k as f64;
    // Adaptive coefficients for higher dimensions.
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / kf, 0.75 - 1.0 / (2.0 * kf), 1.0 - 1.0 / kf);
    let mut best = f0;
    let mut converged = false;
    for _restart in 0..=opts.max_restarts {
        let mut simplex: Vec<Vec<f64>> = vec![z0.clone()];
        for i in 0..k {
            let mut z = z0.clone();
            z[i] += opts.step;
            simplex.push(z);
        }
        let mut fs: Vec<f64> = Vec::with_capacity(k + 1);
        fs.push(best);
        for z in &simplex[1..] {
            fs.push(eval(z, &mut evals));
        }
        converged = false;
        while evals < opts.max_evals {
            let mut idx: Vec<usize> = (0..=k).collect();
            idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]).then(a.cmp(&b)));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            fs = idx.iter().map(|&i| fs[i]).collect();
            let spread = fs[k] - fs[0];
            let diam = simplex[1..]
                .iter()
                .flat_map(|z| z.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if spread <= opts.ftol * (1.0 + fs[0].abs()) || diam <= opts.xtol {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; k];
            for z in &simplex[..k] {
                for (c, v) in centroid.iter_mut().zip(z) {
                    *c += v / kf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[k])
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let zr = along(alpha);
            let fr = eval(&zr, &mut evals);
            if fr < fs[0] {
                let ze = along(alpha * gamma);
                let fe = eval(&ze, &mut evals);
                if fe < fr {
                    simplex[k] = ze;
                    fs[k] = fe;
                } else {
                    simplex[k] = zr;
                    fs[k] = fr;
                }
            } else if fr < fs[k - 1] {
                simplex[k] = zr;
                fs[k] = fr;
            } else {
                let (zc, fc) = if fr < fs[k] {
                    let zc = along(alpha * rho);
                    let fc = eval(&zc, &mut evals);
                    (zc, fc)
                } else {
                    let zc = along(-rho);
                    let fc = eval(&zc, &mut evals);
                    (zc, fc)
                };
                if fc < fs[k].min(fr) {
                    simplex[k] = zc;
                    fs[k] = fc;
                } else {
                    for i in 1..=k {
                        let zi: Vec<f64> = simplex[0]
                            .iter()
                            .zip(&simplex[i])
                            .map(|(b, z)| b + sigma * (z - b))
                            .collect();
                        fs[i] = eval(&zi, &mut evals);
                        simplex[i] = zi;
                    }
                }
            }
        }
        let (ib, fb) = fs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let improved = fb < best - opts.ftol * (1.0 + best.abs());
        if fb <= best {
            best = fb;
            z0 = simplex[ib].clone();
        }
        if !improved || evals >= opts.max_evals {
            break;
        }
    }
    let x = to_x(&z0);
    let at_bound = x
        .iter()
        .zip(bounds)
        .enumerate()
        .filter(|(_, (x, b))| b.near_bound(**x, 1e-6))
        .map(|(i, _)| i)
        .collect();
    Ok(OptimResult {
        x,
        fx: best,
        evals,
        converged,
        at_bound,
    })
}

/// Central-difference Hessian of `f` at `x` with relative step `h`.
pub fn numerical_hessian<F>(mut f: F, x: &[f64], h: f64) -> nalgebra::DMatrix<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let k = x.len();
    let steps: Vec<f64> = x.iter().map(|v| h * v.abs().max(1.0)).collect();
    let mut hess = nalgebra::DMatrix::zeros(k, k);
    let f0 = f(x);
    let mut shifted = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in d {
            y[i] += s;
        }
        f(&y)
    };
    for i in 0..k {
        let hi = steps[i];
        let fp = shifted(&[(i, hi)]);
        let fm = shifted(&[(i, -hi)]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let v = (shifted(&[(i, hi), (j, hj)]) - shifted(&[(i, hi), (j, -hj)])
                - shifted(&[(i, -hi), (j, hj)])
                + shifted(&[(i, -hi), (j, -hj)]))
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[Bound::FREE; 2],
            &NelderMeadOptions::default(),
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds() {
        let r = minimize(
            |x| (x[0] + 1.0).powi(2) + (x[1] - 3.0).powi(2),
            &[0.5, 0.5],
            &[Bound::at_least(0.0), Bound::new(0.0, 1.0)],
            &NelderMeadOptions::default(),
        )
        .unwrap();
        assert!(r.x[0] >= 0.0 && r.x[0] < 1e-6);
        assert!(r.x[1] <= 1.0 && r.x[1] > 1.0 - 1e-6);
        assert_eq!(r.at_bound, vec![0, 1]);
    }

    #[test]
    fn interior_minimum_in_many_dimensions() {
        let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let r = minimize(
            |x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2) * 2.0).sum::<f64>(),
            &[0.0; 6],
            &[Bound::FREE; 6],
            &NelderMeadOptions::default(),
        )
        .unwrap();
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(r.at_bound.is_empty());
    }

    #[test]
    fn non_finite_start_is_an_error() {
        assert!(minimize(|_| f64::NAN, &[1.0], &[Bound::FREE], &NelderMeadOptions::default()).is_err());
    }

    #[test]
    fn hessian_of_quadratic() {
        let h = numerical_hessian(|x| x[0] * x[0] + 3.0 * x[0] * x[1] + 2.0 * x[1] * x[1], &[0.3, -1.0], 1e-4);
        assert!((h[(0, 0)] - 2.0).abs() < 1e-5);
        assert!((h[(0, 1)] - 3.0).abs() < 1e-5);
        assert!((h[(1, 1)] - 4.0).abs() < 1e-5);
    }
}
