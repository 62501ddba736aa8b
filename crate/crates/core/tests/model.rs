mod common;

use common::*;
use glmm::family::{Family, FamilyLink, Link};
use glmm::model::GlmmModel;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn stepped_wedge(beta_int: f64, theta: [f64; 2]) -> GlmmModel {
    let mut df = frame("~(cl(10)*t(11))>i(10)");
    df.derive_comparison("int", "t > cl").unwrap();
    let fam = FamilyLink::new(Family::Binomial, Link::Logit).unwrap();
    let mut m = GlmmModel::new("~ factor(t) + int - 1 + (1|gr(cl)*ar1(t))", df, fam).unwrap();
    let mut beta = vec![0.0; 12];
    beta[11] = beta_int;
    m.update_parameters(Some(&beta), Some(&theta), None).unwrap();
    m
}

fn int_power(m: &GlmmModel) -> f64 {
    m.power(0.05).unwrap()[11].power
}

#[test]
fn power_increases_with_effect_size() {
    let grid: Vec<f64> = (1..=10).map(|k| 0.1 * k as f64).collect();
    let p: Vec<f64> = grid.iter().map(|&b| int_power(&stepped_wedge(b, [0.25, 0.7]))).collect();
    assert!(p.windows(2).all(|w| w[1] > w[0]), "{p:?}");
    let neg = int_power(&stepped_wedge(-0.5, [0.25, 0.7]));
    assert!((neg - p[4]).abs() < 0.05, "sign of the effect only enters through the weights");
}

#[test]
fn power_decreases_with_cluster_variance() {
    let grid: Vec<f64> = (1..=10).map(|k| 0.05 * k as f64).collect();
    let p: Vec<f64> = grid.iter().map(|&s| int_power(&stepped_wedge(0.5, [s, 0.7]))).collect();
    assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
}

fn any_model(seed: u64) -> GlmmModel {
    let mut r = rng(seed);
    let cases = [
        (Family::Gaussian, Link::Identity),
        (Family::Binomial, Link::Logit),
        (Family::Binomial, Link::Probit),
        (Family::Poisson, Link::Log),
        (Family::Gamma, Link::Log),
        (Family::Beta, Link::Logit),
    ];
    let (fam, link) = cases[r.random_range(0..cases.len())];
    let mut m = model(fam, link, "~ factor(t) + (1|gr(cl)*ar1(t)) + (1|gr(cl,t))", "~(cl(3)*t(3))>i(2)");
    let beta: Vec<f64> = (0..m.p()).map(|_| r.random_range(-0.5..0.5)).collect();
    let theta = [r.random_range(0.05..1.0), r.random_range(0.05..0.95), r.random_range(0.05..1.0)];
    m.update_parameters(Some(&beta), Some(&theta), Some(r.random_range(0.3..3.0))).unwrap();
    m.set_attenuation(r.random_bool(0.5));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigma_is_symmetric_positive_definite(seed in any::<u64>()) {
        let m = any_model(seed);
        let s = m.sigma_approx().unwrap();
        prop_assert!((&s - s.transpose()).amax() <= 1e-14 * s.amax());
        prop_assert!(s.cholesky().is_some());
    }

    #[test]
    fn gaussian_information_is_gls(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut df = frame("~(cl(3)*t(3))>i(2)");
        let x: Vec<f64> = (0..df.nrows()).map(|_| r.random_range(-1.0..1.0)).collect();
        df.push_column("x", glmm::data::Column::Numeric(x)).unwrap();
        let fam = FamilyLink::new(Family::Gaussian, Link::Identity).unwrap();
        let mut m = GlmmModel::new("~ factor(t) + x + (1|gr(cl)) + (1|gr(cl,t))", df, fam).unwrap();
        m.update_parameters(None, Some(&[r.random_range(0.1..1.0), r.random_range(0.1..1.0)]), Some(r.random_range(0.3..2.0))).unwrap();
        let s = dense_marginal_cov(&m);
        let x = m.x();
        let want = (x.transpose() * s.try_inverse().unwrap() * x).try_inverse().unwrap();
        let got = m.information_matrix().unwrap();
        prop_assert!((&got - &want).amax() <= 1e-9 * want.amax(), "{got} vs {want}");
    }

    #[test]
    fn linear_predictor_is_a_matrix_product(seed in any::<u64>()) {
        let m = any_model(seed);
        let mut r = rng(seed ^ 1);
        let beta: Vec<f64> = (0..m.p()).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..m.q()).map(|_| r.random_range(-2.0..2.0)).collect();
        let got = m.linear_predictor(&beta, &u).unwrap();
        let want = m.x() * DVector::from_vec(beta) + m.z().to_dense() * DVector::from_vec(u);
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn attenuation_leaves_gaussian_identity_alone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut m = gaussian("~ factor(t) + (1|gr(cl)*ar1(t))", "~(cl(3)*t(4))>i(2)");
        let beta: Vec<f64> = (0..m.p()).map(|_| r.random_range(-1.0..1.0)).collect();
        m.update_parameters(Some(&beta), Some(&[0.4, 0.6]), Some(1.3)).unwrap();
        prop_assert!(!m.attenuate());
        let (s0, i0, p0) = (m.sigma_approx().unwrap(), m.information_matrix().unwrap(), m.power(0.05).unwrap());
        m.set_attenuation(true);
        prop_assert_eq!(s0, m.sigma_approx().unwrap());
        prop_assert_eq!(i0, m.information_matrix().unwrap());
        prop_assert_eq!(p0, m.power(0.05).unwrap());
    }
}

/// Monte Carlo estimate of `E expit(eta + u)`, `u ~ N(0, sd^2)`, with its
/// standard error.
fn mc_logit_mean(eta: f64, sd: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let vals: Vec<f64> = (0..draws)
        .map(|_| {
            let u: f64 = r.sample::<f64, _>(StandardNormal) * sd;
            1.0 / (1.0 + (-(eta + u)).exp())
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    (mean, (var / draws as f64).sqrt())
}

fn logit_toy(eta: f64, sd: f64) -> (f64, f64) {
    let mut m = model(Family::Binomial, Link::Logit, "~ 1 + (1|gr(cl))", "~cl(1)>i(4)");
    m.update_parameters(Some(&[eta]), Some(&[sd]), None).unwrap();
    let plain = m.marginal_eta().unwrap();
    m.set_attenuation(true);
    let adj = m.marginal_eta().unwrap();
    assert!(adj.iter().zip(&plain).all(|(a, p)| a.abs() < p.abs()));
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    (expit(plain[0]), expit(adj[0]))
}

#[test]
fn attenuated_logit_mean_matches_monte_carlo() {
    // The approximation error grows with the variance; at sd 0.2 it is below
    // the Monte Carlo error of 1e5 draws.
    let (_, approx) = logit_toy(2.0, 0.2);
    let (mean, se) = mc_logit_mean(2.0, 0.2, 100_000, 99);
    assert!((approx - mean).abs() < 3.0 * se, "{approx} vs {mean} (se {se})");

    let (plain, approx) = logit_toy(0.8, 1.0);
    let (mean, _) = mc_logit_mean(0.8, 1.0, 100_000, 100);
    assert!((approx - mean).abs() < 0.25 * (plain - mean).abs(), "{plain} {approx} {mean}");
}

#[test]
fn binomial_weight_matches_finite_differences() {
    let fam = FamilyLink::new(Family::Binomial, Link::Logit).unwrap();
    let h = 1e-6;
    let d = (fam.mean(h) - fam.mean(-h)) / (2.0 * h);
    let var = fam.variance(fam.mean(0.0), 1.0);
    let w = fam.weight(0.0, 1.0).unwrap();
    assert!((1.0 / w - var / (d * d)).abs() < 1e-8);
    assert!((1.0 / w - 4.0).abs() < 1e-12);
}

#[test]
fn mean_only_information_is_gls_variance() {
    let mut m = gaussian("~ 1", "~i(12)");
    m.set_phi(1.5).unwrap();
    let info = m.information_matrix().unwrap();
    assert!((info[(0, 0)] - 2.25 / 12.0).abs() < 1e-15);
}
