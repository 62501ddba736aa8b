mod common;

use common::*;
use glmm::family::{Family, Link};
use glmm::laplace::{la_fit, la_loglik, LaOptions, LaVariant};
use glmm::model::GlmmModel;
use proptest::prelude::*;
use rand::Rng;

const FORMULAS: [(&str, &str); 4] = [
    ("~ 1 + (1|gr(cl))", "~cl(4)>i(3)"),
    ("~ factor(t) + (1|gr(cl)) + (1|gr(cl,t))", "~(cl(3)*t(3))>i(2)"),
    ("~ factor(t) + (1|gr(cl)*ar1(t))", "~(cl(3)*t(4))>i(2)"),
    ("~ 1 + (1|fexp(t))", "~t(6)>i(2)"),
];

fn random_instance(seed: u64) -> GlmmModel {
    let mut r = rng(seed);
    let (f, d) = FORMULAS[r.random_range(0..FORMULAS.len())];
    let mut m = gaussian(f, d);
    let beta: Vec<f64> = (0..m.p()).map(|_| r.random_range(-1.0..1.0)).collect();
    let theta: Vec<f64> = m
        .re()
        .domains()
        .iter()
        .map(|d| match d {
            glmm::formula::ParamDomain::OpenUnit => r.random_range(0.1..0.9),
            _ => r.random_range(0.2..1.2),
        })
        .collect();
    m.update_parameters(Some(&beta), Some(&theta), Some(r.random_range(0.4..1.5))).unwrap();
    with_outcome(m, seed ^ 0x5a5a)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gaussian_laplace_is_the_exact_marginal(seed in any::<u64>()) {
        let m = random_instance(seed);
        let v = gaussian_posterior(&m).0.as_slice().to_vec();
        let la = la_loglik(&m, m.beta(), m.phi(), m.theta(), &v).unwrap();
        let exact = exact_gaussian_marginal(&m);
        prop_assert!((la - exact).abs() <= 1e-8 * exact.abs(), "{la} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn derivative_free_objective_never_decreases(seed in any::<u64>()) {
        let mut m = random_instance(seed);
        let opts = LaOptions { variant: LaVariant::Dfo, tol: 1e-4, max_iter: 30 };
        let fit = la_fit(&mut m, &opts).unwrap();
        let obj: Vec<f64> = fit.result.trace.iter().map(|e| e.objective.unwrap()).collect();
        for w in obj.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{obj:?}");
        }
        let last = *obj.last().unwrap();
        let fin = fit.result.loglik.unwrap();
        prop_assert!(fin >= last - 1e-12 * last.abs(), "step 3 {fin} after {last}");
    }

    #[test]
    fn final_refinement_never_decreases(seed in any::<u64>()) {
        let mut m = random_instance(seed);
        let fit = la_fit(&mut m, &LaOptions::default()).unwrap();
        let last = fit.result.trace.last().unwrap().objective.unwrap();
        let fin = fit.result.loglik.unwrap();
        prop_assert!(fin >= last - 1e-12 * last.abs(), "step 3 {fin} after {last}");
    }
}

#[test]
fn binomial_fit_runs_and_reports_standard_errors() {
    let mut m = model(Family::Binomial, Link::Logit, "~ factor(t) + (1|gr(cl))", "~(cl(8)*t(3))>i(5)");
    m.update_parameters(Some(&[0.2, -0.3, 0.4]), Some(&[0.5]), None).unwrap();
    let mut m = with_outcome(m, 21);
    let fit = la_fit(&mut m, &LaOptions::default()).unwrap();
    assert!(fit.result.converged);
    assert_eq!(fit.result.method, "la");
    assert!(fit.result.se_beta.iter().all(|s| s.is_finite() && *s > 0.0));
    assert_eq!(fit.state.v.len(), m.q());
}
