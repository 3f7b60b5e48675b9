//! Conditional-mean field of the one-period game.
//!
//! Given a holding kernel `π`, the field `F(x, e)` solves the second-kind
//! equation
//!
//! ```text
//! (1 + Ê[π(X̂, x)]) F(x, e) = b(x) + σ⁰(x) e + Ê[π(x, X̂) F(X̂, e)]
//! ```
//!
//! which is affine in `e`, so it splits into two linear systems sharing the
//! matrix `D − K`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, Spectrum};
use crate::model::{multiplier, HoldingKernel, ModelError, NoiseQuadrature, OnePeriodModel};

/// Relative threshold on the smallest singular value of `D − K`.
pub const TOL_SINGULAR: f64 = 1e-8;
/// Relative residual accepted for each of the two linear solves.
pub const TOL_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FredholmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("field equation is not uniquely solvable (smallest singular value {}, condition number {})", .0.spectral_gap, .0.condition_number)]
    NonUnique(UniquenessReport),
    #[error("linear solve residual {residual} exceeds tolerance {tolerance}")]
    Residual { residual: f64, tolerance: f64 },
}

/// `F(xᵢ, e) = f0[i] + f1[i]·e`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDecomposition {
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
}

impl FieldDecomposition {
    pub fn new(f0: Vec<f64>, f1: Vec<f64>) -> Self {
        assert_eq!(f0.len(), f1.len(), "f0 and f1 must have equal length");
        Self { f0, f1 }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn at(&self, i: usize, e: f64) -> f64 {
        self.f0[i] + self.f1[i] * e
    }
}

/// Solvability diagnostics of `D − K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniquenessReport {
    pub invertible: bool,
    pub condition_number: f64,
    /// Smallest singular value of `D − K`.
    pub spectral_gap: f64,
}

impl UniquenessReport {
    pub fn of(system: &DMatrix<f64>) -> Self {
        let s = Spectrum::of(system);
        Self {
            invertible: s.s_min > TOL_SINGULAR * s.s_max,
            condition_number: s.condition_number(),
            spectral_gap: s.s_min,
        }
    }
}

/// `K[i][j] = wⱼ π(xᵢ, x̂ⱼ)`.
pub fn kernel_operator(model: &OnePeriodModel, pi: &HoldingKernel) -> DMatrix<f64> {
    let w = model.mu0.weights();
    DMatrix::from_fn(pi.size(), pi.size(), |i, j| w[j] * pi.get(i, j))
}

/// The system matrix `D − K` with `D = diag(1 + Ê[π(X̂, xᵢ)])`.
pub fn system_matrix(model: &OnePeriodModel, pi: &HoldingKernel) -> Result<DMatrix<f64>, ModelError> {
    let d = multiplier(model, pi)?;
    let mut a = -kernel_operator(model, pi);
    for i in 0..pi.size() {
        a[(i, i)] += d.values[i];
    }
    Ok(a)
}

/// Solves the field equation for both affine components.
pub fn solve_field(
    model: &OnePeriodModel,
    pi: &HoldingKernel,
) -> Result<(FieldDecomposition, UniquenessReport), FredholmError> {
    let a = system_matrix(model, pi)?;
    let report = UniquenessReport::of(&a);
    if !report.invertible {
        return Err(FredholmError::NonUnique(report));
    }
    let f0 = solve_checked(&a, &DVector::from_column_slice(&model.b), report)?;
    let f1 = solve_checked(&a, &DVector::from_column_slice(&model.sigma0), report)?;
    log::debug!(
        "field solved: cond = {:.3e}, gap = {:.3e}",
        report.condition_number,
        report.spectral_gap
    );
    Ok((
        FieldDecomposition::new(f0.iter().copied().collect(), f1.iter().copied().collect()),
        report,
    ))
}

fn solve_checked(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    report: UniquenessReport,
) -> Result<DVector<f64>, FredholmError> {
    let x = linalg::solve_refined(a, rhs).ok_or(FredholmError::NonUnique(report))?;
    let residual = linalg::max_abs(&(rhs - a * &x));
    let tolerance = TOL_RESIDUAL * (1.0 + rhs.norm());
    if residual >= tolerance {
        return Err(FredholmError::Residual { residual, tolerance });
    }
    Ok(x)
}

/// Tabulates the field on (atom, node) pairs.
pub fn field_on_grid(dec: &FieldDecomposition, rho: &NoiseQuadrature) -> DMatrix<f64> {
    DMatrix::from_fn(dec.len(), rho.len(), |i, k| dec.at(i, rho.nodes()[k]))
}

/// Residual of the field equation at every (atom, node) pair.
pub fn residual_grid(model: &OnePeriodModel, pi: &HoldingKernel, dec: &FieldDecomposition) -> Result<DMatrix<f64>, ModelError> {
    let a = system_matrix(model, pi)?;
    let grid = field_on_grid(dec, &model.rho);
    let lhs = &a * &grid;
    Ok(DMatrix::from_fn(dec.len(), model.rho.len(), |i, k| {
        lhs[(i, k)] - model.b[i] - model.sigma0[i] * model.rho.nodes()[k]
    }))
}

/// Operator norm (max row sum) of `D⁻¹K`; below one the system is a
/// contraction perturbation of the identity.
pub fn contraction_norm(model: &OnePeriodModel, pi: &HoldingKernel) -> Result<f64, ModelError> {
    let d = multiplier(model, pi)?;
    let k = kernel_operator(model, pi);
    Ok((0..pi.size())
        .map(|i| k.row(i).iter().map(|v| v.abs()).sum::<f64>() / d.values[i].abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_atom;
    use crate::model::AtomLaw;
    use proptest::prelude::*;

    /// Solves the equation on the full (atom × node) grid as one dense
    /// system, with no affine ansatz.
    fn brute_force(model: &OnePeriodModel, pi: &HoldingKernel) -> DMatrix<f64> {
        let n = model.n_atoms();
        let k = model.rho.len();
        let w = model.mu0.weights();
        let mut a = DMatrix::zeros(n * k, n * k);
        let mut rhs = DVector::zeros(n * k);
        for node in 0..k {
            for i in 0..n {
                let row = node * n + i;
                let col_avg: f64 = (0..n).map(|j| w[j] * pi.get(j, i)).sum();
                a[(row, row)] += 1.0 + col_avg;
                for j in 0..n {
                    a[(row, node * n + j)] -= w[j] * pi.get(i, j);
                }
                rhs[row] = model.b[i] + model.sigma0[i] * model.rho.nodes()[node];
            }
        }
        let sol = a.lu().solve(&rhs).unwrap();
        DMatrix::from_fn(n, k, |i, node| sol[node * n + i])
    }

    #[test]
    fn zero_kernel_returns_coefficients() {
        let m = two_atom();
        let (f, rep) = solve_field(&m, &HoldingKernel::zeros(2)).unwrap();
        assert_eq!(f.f0, m.b);
        assert_eq!(f.f1, m.sigma0);
        assert!(rep.invertible);
    }

    #[test]
    fn constant_kernel_closed_form() {
        let m = two_atom();
        let (f, _) = solve_field(&m, &HoldingKernel::constant(2, 0.5)).unwrap();
        for i in 0..2 {
            let e0 = (m.b[i] + 0.5 * 1.5) / 1.5;
            let e1 = (m.sigma0[i] + 0.5 * 1.5) / 1.5;
            assert!((f.f0[i] - e0).abs() < 1e-14);
            assert!((f.f1[i] - e1).abs() < 1e-14);
        }
    }

    #[test]
    fn field_on_grid_examples() {
        let rho = NoiseQuadrature::two_point();
        let g = field_on_grid(&FieldDecomposition::new(vec![0.0, 0.0], vec![1.0, 1.0]), &rho);
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, 1.0]));
        let g = field_on_grid(&FieldDecomposition::new(vec![2.5, 2.5], vec![0.0, 0.0]), &rho);
        assert!(g.iter().all(|v| *v == 2.5));
        let g = field_on_grid(&FieldDecomposition::new(vec![1.5, 1.5], vec![1.5, 1.5]), &rho);
        assert_eq!(g[(0, 1)], 3.0);
    }

    #[test]
    fn non_unique_report_is_returned() {
        // D = I and K = [[1, 0], [−1, 0]], so D − K = [[0, 0], [1, 1]].
        let m = two_atom();
        let pi = HoldingKernel::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -2.0, 0.0])).unwrap();
        match solve_field(&m, &pi) {
            Err(FredholmError::NonUnique(rep)) => {
                assert!(!rep.invertible);
                assert!(rep.spectral_gap < 1e-12);
            }
            other => panic!("expected non-uniqueness, got {other:?}"),
        }
    }

    #[test]
    fn affine_solution_matches_full_grid_solve() {
        let m = OnePeriodModel::new(
            AtomLaw::new(vec![0.5, 1.0, 1.5, 2.0], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            NoiseQuadrature::gauss_hermite(6).unwrap(),
            NoiseQuadrature::two_point(),
            vec![0.3, -0.2, 1.0, 0.7],
            vec![1.0; 4],
            vec![0.5, 1.1, -0.4, 0.9],
            2.0,
        )
        .unwrap();
        let pi = HoldingKernel::from_fn(4, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64) + 0.05);
        let (f, rep) = solve_field(&m, &pi).unwrap();
        assert!(rep.invertible);
        let grid = field_on_grid(&f, &m.rho);
        let full = brute_force(&m, &pi);
        assert!((grid - full).amax() < 1e-9);
    }

    fn model_strategy() -> impl Strategy<Value = (OnePeriodModel, HoldingKernel)> {
        (1usize..=8, 2usize..=8).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(0.1f64..1.0, n),
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(0.2f64..2.0, n),
                proptest::collection::vec(-0.6f64..0.6, n * n),
                Just(n),
                Just(k),
            )
                .prop_map(|(raw_w, b, s0, p, n, k)| {
                    let total: f64 = raw_w.iter().sum();
                    let mut w: Vec<f64> = raw_w.iter().map(|x| x / total).collect();
                    let drift: f64 = w.iter().sum::<f64>() - 1.0;
                    w[0] -= drift;
                    let atoms = (0..n).map(|i| i as f64).collect();
                    let model = OnePeriodModel::new(
                        AtomLaw::new(atoms, w).unwrap(),
                        NoiseQuadrature::gauss_hermite(k).unwrap(),
                        NoiseQuadrature::two_point(),
                        b,
                        vec![1.0; n],
                        s0,
                        1.0,
                    )
                    .unwrap();
                    let pi = HoldingKernel::new(DMatrix::from_row_slice(n, n, &p)).unwrap();
                    (model, pi)
                })
        })
    }

    proptest! {
        #[test]
        fn solved_field_satisfies_equation_and_full_system((model, pi) in model_strategy()) {
            match solve_field(&model, &pi) {
                Ok((f, rep)) => {
                    prop_assert!(rep.invertible);
                    if rep.condition_number < 1e6 {
                        let res = residual_grid(&model, &pi, &f).unwrap();
                        prop_assert!(res.amax() < 1e-9);
                        let full = brute_force(&model, &pi);
                        let grid = field_on_grid(&f, &model.rho);
                        prop_assert!((grid - full).amax() < 1e-9);
                    }
                }
                Err(FredholmError::Model(ModelError::InadmissibleKernel { .. })) => {}
                Err(FredholmError::NonUnique(rep)) => prop_assert!(!rep.invertible),
                Err(FredholmError::Residual { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn contraction_implies_invertible((model, pi) in model_strategy()) {
            if let Ok(norm) = contraction_norm(&model, &pi) {
                if norm < 1.0 {
                    let a = system_matrix(&model, &pi).unwrap();
                    prop_assert!(UniquenessReport::of(&a).invertible);
                }
            }
        }
    }
}
