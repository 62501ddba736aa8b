//! Hamiltonian Monte Carlo with dual-averaging step-size adaptation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};

/// Energy error above which a trajectory counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmcOptions {
    pub warmup: usize,
    /// Warmup iterations during which the step size adapts.
    pub adapt: usize,
    pub samples: usize,
    pub max_steps: usize,
    /// Target acceptance probability.
    pub delta: f64,
    /// Integration time per trajectory.
    pub lambda: f64,
}

impl Default for HmcOptions {
    fn default() -> Self {
        Self {
            warmup: 500,
            adapt: 50,
            samples: 250,
            max_steps: 100,
            delta: 0.95,
            lambda: 5.0,
        }
    }
}

impl HmcOptions {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.adapt == 0 || self.samples == 0 || self.max_steps == 0 {
            return Err(GlmmError::InvalidArgument(
                "sampler iteration counts must be positive".into(),
            ));
        }
        if self.adapt > self.warmup {
            return Err(GlmmError::InvalidArgument(
                "adaptation iterations exceed warmup iterations".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.lambda > 0.0) {
            return Err(GlmmError::InvalidArgument(format!(
                "delta must be in (0,1) and lambda positive, got {} and {}",
                self.delta, self.lambda
            )));
        }
        Ok(())
    }
}

/// A differentiable log density.
pub trait Target {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct HmcOutput {
    pub samples: Vec<Vec<f64>>,
    /// Mean acceptance probability over the sampling iterations.
    pub accept_rate: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub steps: usize,
}

struct State {
    x: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn leapfrog<T: Target>(target: &T, s: &State, r0: &[f64], eps: f64, steps: usize) -> (State, Vec<f64>) {
    let mut x = s.x.clone();
    let mut g = s.grad.clone();
    let mut r = r0.to_vec();
    let mut logp = s.logp;
    for _ in 0..steps {
        for (ri, gi) in r.iter_mut().zip(&g) {
            *ri += 0.5 * eps * gi;
        }
        for (xi, ri) in x.iter_mut().zip(&r) {
            *xi += eps * ri;
        }
        logp = target.log_density_grad(&x, &mut g);
        if !logp.is_finite() {
            break;
        }
        for (ri, gi) in r.iter_mut().zip(&g) {
            *ri += 0.5 * eps * gi;
        }
    }
    (State { x, grad: g, logp }, r)
}

fn kinetic(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn momentum<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Doubles or halves the step until the one-step acceptance crosses 1/2.
pub fn find_reasonable_epsilon<T: Target, R: Rng + ?Sized>(target: &T, x: &[f64], rng: &mut R) -> f64 {
    let d = target.dim();
    let mut grad = vec![0.0; d];
    let logp = target.log_density_grad(x, &mut grad);
    let s = State {
        x: x.to_vec(),
        grad,
        logp,
    };
    let mut eps = 1.0;
    let r = momentum(rng, d);
    let h0 = logp - kinetic(&r);
    let log_accept = |eps: f64| {
        let (s1, r1) = leapfrog(target, &s, &r, eps, 1);
        let v = s1.logp - kinetic(&r1) - h0;
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut la = log_accept(eps);
    let a = if la > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..100 {
        if a * la <= -a * 2f64.ln() {
            break;
        }
        eps *= 2f64.powf(a);
        la = log_accept(eps);
    }
    eps.clamp(1e-10, 1e3)
}

/// Draws `options.samples` post-warmup states starting at `init`. When
/// `eps0` is given it replaces the initial step-size heuristic.
pub fn hmc_sample<T: Target, R: Rng + ?Sized>(
    target: &T,
    options: &HmcOptions,
    init: &[f64],
    eps0: Option<f64>,
    rng: &mut R,
) -> Result<HmcOutput> {
    options.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(GlmmError::Dimension(format!(
            "initial state has length {}, target has dimension {d}",
            init.len()
        )));
    }
    let mut grad = vec![0.0; d];
    let logp = target.log_density_grad(init, &mut grad);
    if !logp.is_finite() {
        return Err(GlmmError::Sampler(
            "log density is not finite at the initial state".into(),
        ));
    }
    let mut state = State {
        x: init.to_vec(),
        grad,
        logp,
    };
    let mut eps = eps0.unwrap_or_else(|| find_reasonable_epsilon(target, init, rng));
    let (gamma, t0, kappa) = (0.05, 10.0, 0.75);
    let mu = (10.0 * eps).ln();
    let mut log_eps_bar = 0.0;
    let mut h_bar = 0.0;

    let total = options.warmup + options.samples;
    let mut samples = Vec::with_capacity(options.samples);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut steps = 0;
    for it in 1..=total {
        steps = ((options.lambda / eps).ceil() as usize).clamp(1, options.max_steps);
        let r0 = momentum(rng, d);
        let h0 = state.logp - kinetic(&r0);
        let (prop, r1) = leapfrog(target, &state, &r0, eps, steps);
        let h1 = prop.logp - kinetic(&r1);
        let delta_h = if h1.is_finite() { h1 - h0 } else { f64::NEG_INFINITY };
        let divergent = -delta_h > DIVERGENCE_THRESHOLD;
        let alpha = if divergent { 0.0 } else { delta_h.exp().min(1.0) };
        if rng.random::<f64>() < alpha {
            state = prop;
        }
        if it <= options.warmup {
            if divergent {
                warmup_divergences += 1;
            }
            if it <= options.adapt {
                let m = it as f64;
                h_bar = (1.0 - 1.0 / (m + t0)) * h_bar + (options.delta - alpha) / (m + t0);
                let log_eps = mu - m.sqrt() / gamma * h_bar;
                let w = m.powf(-kappa);
                log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
                eps = log_eps.exp();
                if it == options.adapt {
                    eps = log_eps_bar.exp();
                }
            }
            if it == options.warmup && warmup_divergences == options.warmup {
                return Err(GlmmError::Sampler(format!(
                    "all {} warmup trajectories diverged (final step size {eps:e})",
                    options.warmup
                )));
            }
        } else {
            if divergent {
                divergences += 1;
            }
            accept_sum += alpha;
            samples.push(state.x.clone());
        }
    }
    Ok(HmcOutput {
        samples,
        accept_rate: accept_sum / options.samples as f64,
        divergences,
        warmup_divergences,
        step_size: eps,
        steps,
    })
}
