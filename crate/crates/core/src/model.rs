//! Domain types of the one-period game: atomized laws, noise quadratures,
//! tabulated coefficients and cross-holding kernels.
//!
//! Every `Ê^{μ₀}` integral becomes a weighted sum over the atoms of the
//! initial law, so kernels are plain square matrices indexed by atoms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Tolerance on `Σ weights = 1` for atomized laws and quadratures.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Tolerance on the first two moments of a noise quadrature.
pub const MOMENT_TOL: f64 = 1e-10;
/// Guard below which `1 + Ê[π(x̂, x)]` counts as zero.
pub const TOL_ZERO: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty support")]
    Empty,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("weight {index} is {value}, weights must be strictly positive")]
    ZeroWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("atoms must be strictly increasing (index {index})")]
    NotIncreasing { index: usize },
    #[error("noise quadrature has mean {mean} and second moment {second}, expected 0 and 1")]
    BadMoments { mean: f64, second: f64 },
    #[error("Gauss-Hermite order must be at least 2, got {0}")]
    QuadratureOrder(usize),
    #[error("idiosyncratic volatility vanishes at atom {index}")]
    DegenerateSigma { index: usize },
    #[error("common-noise volatility vanishes at atom {index}")]
    DegenerateSigma0 { index: usize },
    #[error("risk tolerance q must be positive, got {0}")]
    NonPositiveRiskTolerance(f64),
    #[error("kernel is {rows}x{cols}, expected {n}x{n}")]
    KernelShape { rows: usize, cols: usize, n: usize },
    #[error("inadmissible kernel: 1 + Ê[π(x̂, x)] = {value} at atom {atom}")]
    InadmissibleKernel { atom: usize, value: f64 },
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ModelError::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_probability(weights: &[f64]) -> Result<(), ModelError> {
    check_finite("weights", weights)?;
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| **w <= 0.0) {
        return Err(ModelError::ZeroWeight { index, value });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(ModelError::NotNormalized { sum });
    }
    Ok(())
}

/// A finitely supported probability law on the real line.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomLaw {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomLaw {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if atoms.is_empty() {
            return Err(ModelError::Empty);
        }
        if weights.len() != atoms.len() {
            return Err(ModelError::LengthMismatch {
                what: "weights",
                got: weights.len(),
                expected: atoms.len(),
            });
        }
        check_finite("atoms", &atoms)?;
        check_probability(&weights)?;
        if let Some(index) = (1..atoms.len()).find(|&i| atoms[i] <= atoms[i - 1]) {
            return Err(ModelError::NotIncreasing { index });
        }
        Ok(Self { atoms, weights })
    }

    /// Uniform law on the given (strictly increasing) atoms.
    pub fn uniform(atoms: Vec<f64>) -> Result<Self, ModelError> {
        let n = atoms.len().max(1);
        Self::new(atoms, vec![1.0 / n as f64; n])
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `Σᵢ wᵢ f[i]` for a function tabulated on the atoms.
    pub fn expect(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Discrete law standing in for a centered, unit-variance noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseQuadrature {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if nodes.is_empty() {
            return Err(ModelError::Empty);
        }
        if weights.len() != nodes.len() {
            return Err(ModelError::LengthMismatch {
                what: "weights",
                got: weights.len(),
                expected: nodes.len(),
            });
        }
        check_finite("nodes", &nodes)?;
        check_probability(&weights)?;
        let mean: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x).sum();
        let second: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
        if mean.abs() > MOMENT_TOL || (second - 1.0).abs() > MOMENT_TOL {
            return Err(ModelError::BadMoments { mean, second });
        }
        Ok(Self { nodes, weights })
    }

    /// The symmetric law on `{-1, +1}`.
    pub fn two_point() -> Self {
        Self {
            nodes: vec![-1.0, 1.0],
            weights: vec![0.5, 0.5],
        }
    }

    /// Gauss–Hermite rule for the standard normal law (probabilists'
    /// weight), computed with the Golub–Welsch eigenvalue method.
    pub fn gauss_hermite(order: usize) -> Result<Self, ModelError> {
        if order < 2 {
            return Err(ModelError::QuadratureOrder(order));
        }
        // Jacobi matrix of the monic probabilists' Hermite recurrence.
        let jacobi = DMatrix::from_fn(order, order, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Enforce the exact reflection symmetry of the rule.
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        for k in 0..order {
            let m = order - 1 - k;
            nodes[k] = 0.5 * (pairs[k].0 - pairs[m].0);
            weights[k] = 0.5 * (pairs[k].1 + pairs[m].1);
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(nodes, weights)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|x| x * x)
    }
}

/// The one-period model: initial law, noise laws, coefficient tables on the
/// atoms of `μ₀` and the risk tolerance `q` of the mean–variance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct OnePeriodModel {
    pub mu0: AtomLaw,
    /// Law of the common noise `ε⁰`.
    pub rho: NoiseQuadrature,
    /// Law of the idiosyncratic noise `ε`.
    pub eps: NoiseQuadrature,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub q: f64,
}

impl OnePeriodModel {
    pub fn new(
        mu0: AtomLaw,
        rho: NoiseQuadrature,
        eps: NoiseQuadrature,
        b: Vec<f64>,
        sigma: Vec<f64>,
        sigma0: Vec<f64>,
        q: f64,
    ) -> Result<Self, ModelError> {
        let n = mu0.len();
        for (what, v) in [("b", &b), ("sigma", &sigma), ("sigma0", &sigma0)] {
            if v.len() != n {
                return Err(ModelError::LengthMismatch {
                    what,
                    got: v.len(),
                    expected: n,
                });
            }
            check_finite(what, v)?;
        }
        if let Some(index) = sigma.iter().position(|s| *s == 0.0) {
            return Err(ModelError::DegenerateSigma { index });
        }
        if let Some(index) = sigma0.iter().position(|s| *s == 0.0) {
            return Err(ModelError::DegenerateSigma0 { index });
        }
        if !(q > 0.0 && q.is_finite()) {
            return Err(ModelError::NonPositiveRiskTolerance(q));
        }
        Ok(Self {
            mu0,
            rho,
            eps,
            b,
            sigma,
            sigma0,
            q,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.mu0.len()
    }

    /// `E^{μ₀}[b(X₀)]`.
    pub fn mean_b(&self) -> f64 {
        self.mu0.expect(&self.b)
    }

    pub fn check_kernel(&self, pi: &HoldingKernel) -> Result<(), ModelError> {
        let n = self.n_atoms();
        let (rows, cols) = pi.values.shape();
        if rows != n || cols != n {
            return Err(ModelError::KernelShape { rows, cols, n });
        }
        Ok(())
    }
}

/// A cross-holding strategy tabulated on the atom grid: entry `(i, j)` is
/// `π(xᵢ, x̂ⱼ)`, the fraction of the equity of `x̂ⱼ` held by `xᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldingKernel {
    pub values: DMatrix<f64>,
}

impl HoldingKernel {
    pub fn new(values: DMatrix<f64>) -> Result<Self, ModelError> {
        if values.nrows() != values.ncols() {
            return Err(ModelError::KernelShape {
                rows: values.nrows(),
                cols: values.ncols(),
                n: values.nrows(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "kernel",
                index,
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: DMatrix::zeros(n, n),
        }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            values: DMatrix::from_element(n, n, value),
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, f: F) -> Self {
        Self {
            values: DMatrix::from_fn(n, n, f),
        }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// `Ê^{μ₀}[π(xᵢ, X̂₀)]`: averages over the second argument.
    pub fn row_average(&self, law: &AtomLaw, i: usize) -> f64 {
        (0..self.size()).map(|j| law.weights()[j] * self.values[(i, j)]).sum()
    }

    /// `Ê^{μ₀}[π(X̂₀, xᵢ)]`: averages over the first argument.
    pub fn column_average(&self, law: &AtomLaw, i: usize) -> f64 {
        (0..self.size()).map(|j| law.weights()[j] * self.values[(j, i)]).sum()
    }
}

impl std::ops::Add for &HoldingKernel {
    type Output = HoldingKernel;

    fn add(self, rhs: &HoldingKernel) -> HoldingKernel {
        HoldingKernel {
            values: &self.values + &rhs.values,
        }
    }
}

/// `1/m^π(xᵢ) = 1 + Ê^{μ₀}[π(X̂₀, xᵢ)]` on every atom.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierVector {
    pub values: Vec<f64>,
}

impl MultiplierVector {
    /// `m^π(xᵢ)` itself.
    pub fn m(&self, i: usize) -> f64 {
        1.0 / self.values[i]
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Computes the dilution multiplier of a kernel, rejecting kernels for which
/// `1 + Ê[π(X̂₀, x)]` vanishes at some atom.
pub fn multiplier(model: &OnePeriodModel, pi: &HoldingKernel) -> Result<MultiplierVector, ModelError> {
    multiplier_with_tol(model, pi, TOL_ZERO)
}

pub fn multiplier_with_tol(
    model: &OnePeriodModel,
    pi: &HoldingKernel,
    tol_zero: f64,
) -> Result<MultiplierVector, ModelError> {
    model.check_kernel(pi)?;
    let values: Vec<f64> = (0..model.n_atoms())
        .map(|i| 1.0 + pi.column_average(&model.mu0, i))
        .collect();
    if let Some((atom, &value)) = values.iter().enumerate().find(|(_, v)| v.abs() < tol_zero) {
        return Err(ModelError::InadmissibleKernel { atom, value });
    }
    Ok(MultiplierVector { values })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two atoms {1, 2}, equal weights, b = (1, 2), σ = (1, 1), σ⁰ = (1, 2),
    /// q = 1.5 and two-point noises.
    pub fn two_atom() -> OnePeriodModel {
        OnePeriodModel::new(
            AtomLaw::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap(),
            NoiseQuadrature::two_point(),
            NoiseQuadrature::two_point(),
            vec![1.0, 2.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            1.5,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::two_atom;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_atom_model_is_valid() {
        let m = two_atom();
        assert_eq!(m.n_atoms(), 2);
        assert_eq!(m.mean_b(), 1.5);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let err = AtomLaw::new(vec![1.0, 2.0], vec![0.6, 0.6]).unwrap_err();
        assert!(matches!(err, ModelError::NotNormalized { sum } if (sum - 1.2).abs() < 1e-15));
    }

    #[test]
    fn zero_weight_rejected() {
        let err = AtomLaw::new(vec![1.0, 2.0], vec![1.0, 0.0]).unwrap_err();
        assert!(matches!(err, ModelError::ZeroWeight { index: 1, .. }));
    }

    #[test]
    fn unordered_atoms_rejected() {
        let err = AtomLaw::new(vec![2.0, 1.0], vec![0.5, 0.5]).unwrap_err();
        assert_eq!(err, ModelError::NotIncreasing { index: 1 });
    }

    #[test]
    fn degenerate_sigma0_rejected() {
        let base = two_atom();
        let err = OnePeriodModel::new(
            base.mu0.clone(),
            base.rho.clone(),
            base.eps.clone(),
            base.b.clone(),
            base.sigma.clone(),
            vec![0.0, 1.0],
            1.5,
        )
        .unwrap_err();
        assert_eq!(err, ModelError::DegenerateSigma0 { index: 0 });

        let err = OnePeriodModel::new(
            base.mu0.clone(),
            base.rho.clone(),
            base.eps.clone(),
            base.b.clone(),
            vec![1.0, 0.0],
            base.sigma0.clone(),
            1.5,
        )
        .unwrap_err();
        assert_eq!(err, ModelError::DegenerateSigma { index: 1 });
    }

    #[test]
    fn nonpositive_q_rejected() {
        let base = two_atom();
        for q in [0.0, -1.0] {
            let err = OnePeriodModel::new(
                base.mu0.clone(),
                base.rho.clone(),
                base.eps.clone(),
                base.b.clone(),
                base.sigma.clone(),
                base.sigma0.clone(),
                q,
            )
            .unwrap_err();
            assert_eq!(err, ModelError::NonPositiveRiskTolerance(q));
        }
    }

    #[test]
    fn biased_quadrature_rejected() {
        let err = NoiseQuadrature::new(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap_err();
        assert!(matches!(err, ModelError::BadMoments { .. }));
    }

    #[test]
    fn gauss_hermite_reproduces_normal_moments() {
        for order in 2..=20 {
            let gh = NoiseQuadrature::gauss_hermite(order).unwrap();
            assert!(gh.expect(|x| x).abs() < 1e-12, "order {order}");
            assert!((gh.second_moment() - 1.0).abs() < 1e-12, "order {order}");
            if order >= 3 {
                // Exact up to degree 2n-1, so the fourth moment needs n >= 3.
                assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-10, "order {order}");
            }
        }
        let gh4 = NoiseQuadrature::gauss_hermite(4).unwrap();
        assert!(gh4.weights().iter().all(|w| *w > 0.0));
        assert!(NoiseQuadrature::gauss_hermite(1).is_err());
    }

    #[test]
    fn multiplier_of_simple_kernels() {
        let m = two_atom();
        assert_eq!(multiplier(&m, &HoldingKernel::zeros(2)).unwrap().values, vec![1.0, 1.0]);
        let p0 = 0.37;
        let mult = multiplier(&m, &HoldingKernel::constant(2, p0)).unwrap();
        for v in mult.values {
            assert!((v - (1.0 + p0)).abs() < 1e-15);
        }
        let err = multiplier(&m, &HoldingKernel::constant(2, -1.0)).unwrap_err();
        assert!(matches!(err, ModelError::InadmissibleKernel { atom: 0, .. }));
    }

    #[test]
    fn multiplier_averages_over_first_argument() {
        let m = two_atom();
        // π(x₀, ·) = 1, π(x₁, ·) = 0: column averages are both 0.5.
        let pi = HoldingKernel::from_fn(2, |i, _| if i == 0 { 1.0 } else { 0.0 });
        assert_eq!(multiplier(&m, &pi).unwrap().values, vec![1.5, 1.5]);
        // π(·, x₀) = 1, π(·, x₁) = 0: column averages are 1 and 0.
        let pi = HoldingKernel::from_fn(2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        assert_eq!(multiplier(&m, &pi).unwrap().values, vec![2.0, 1.0]);
    }

    #[test]
    fn wrong_kernel_shape_rejected() {
        let m = two_atom();
        let err = multiplier(&m, &HoldingKernel::zeros(3)).unwrap_err();
        assert!(matches!(err, ModelError::KernelShape { n: 2, .. }));
    }

    proptest! {
        #[test]
        fn multiplier_is_affine_in_kernel(
            a in proptest::collection::vec(-0.4f64..0.4, 9),
            c in proptest::collection::vec(-0.4f64..0.4, 9),
        ) {
            let mu0 = AtomLaw::new(vec![0.5, 1.0, 3.0], vec![0.2, 0.3, 0.5]).unwrap();
            let model = OnePeriodModel::new(
                mu0,
                NoiseQuadrature::two_point(),
                NoiseQuadrature::two_point(),
                vec![1.0, 2.0, 3.0],
                vec![1.0; 3],
                vec![1.0; 3],
                1.0,
            ).unwrap();
            let k1 = HoldingKernel::new(DMatrix::from_row_slice(3, 3, &a)).unwrap();
            let k2 = HoldingKernel::new(DMatrix::from_row_slice(3, 3, &c)).unwrap();
            let sum = &k1 + &k2;
            let m1 = multiplier(&model, &k1).unwrap();
            let m2 = multiplier(&model, &k2).unwrap();
            let ms = multiplier(&model, &sum).unwrap();
            for i in 0..3 {
                let lhs = ms.values[i] - 1.0;
                let rhs = (m1.values[i] - 1.0) + (m2.values[i] - 1.0);
                prop_assert!((lhs - rhs).abs() < 1e-14);
            }
        }
    }
}
