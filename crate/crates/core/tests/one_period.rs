use crossmfg::fredholm;
use crossmfg::model::{AtomLaw, HoldingKernel, NoiseQuadrature, OnePeriodModel};
use crossmfg::oneperiod::{self, Sign};

fn model() -> OnePeriodModel {
    let law = AtomLaw::new(vec![1.0, 2.0, 3.0], vec![0.3, 0.5, 0.2]).unwrap();
    let b = vec![0.5, 1.0, 1.5];
    let mean_b = law.expect(&b);
    let q = 0.8;
    let lambda = (q / mean_b).sqrt();
    let sigma0 = b.iter().map(|v| lambda * v).collect();
    OnePeriodModel::new(
        law,
        NoiseQuadrature::gauss_hermite(6).unwrap(),
        NoiseQuadrature::two_point(),
        b,
        vec![0.4, 0.6, 0.8],
        sigma0,
        q,
    )
    .unwrap()
}

#[test]
fn best_response_maximizes_the_criterion_against_perturbations() {
    let m = model();
    let pi = oneperiod::pi_example_second_arg(&m, 0.3).unwrap();
    let eq = oneperiod::equilibrium(&m, Sign::Plus, &pi).unwrap();
    let n = m.n_atoms();
    for i in 0..n {
        let br = oneperiod::best_response(&m, &pi, &eq.f, i).unwrap();
        let row = |extra: &[f64]| HoldingKernel::from_fn(n, |r, c| if r == i { br.beta[c] + extra[c] } else { 0.0 });
        let best = oneperiod::mv_objective(&m, &pi, &row(&[0.0; 3]), &eq.f, i).unwrap();
        for d in [[0.05, 0.0, 0.0], [0.0, -0.1, 0.0], [0.02, 0.02, 0.02], [-0.3, 0.1, 0.2]] {
            let other = oneperiod::mv_objective(&m, &pi, &row(&d), &eq.f, i).unwrap();
            assert!(other <= best + 1e-12, "atom {i}: {other} > {best}");
        }
        let foc = oneperiod::foc_residual(&m, &pi, &row(&[0.0; 3]), &eq.f, i).unwrap();
        assert!(foc.iter().all(|r| r.abs() < 1e-9));
    }
}

#[test]
fn solved_field_matches_direct_substitution() {
    let m = model();
    let pi = HoldingKernel::constant(3, 0.15);
    let (f, report) = fredholm::solve_field(&m, &pi).unwrap();
    assert!(report.invertible);
    let res = fredholm::residual_grid(&m, &pi, &f).unwrap();
    assert!(res.iter().all(|r| r.abs() < 1e-12));
}

#[test]
fn non_collinear_coefficients_have_no_equilibrium() {
    let mut m = model();
    m.sigma0[1] *= 1.1;
    let pi = HoldingKernel::zeros(3);
    assert!(oneperiod::equilibrium(&m, Sign::Plus, &pi).is_err());
    assert!(oneperiod::equilibrium_field(&m, Sign::Minus).is_err());
}
