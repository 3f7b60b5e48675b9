//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Singular-value summary of a square matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum {
    pub s_max: f64,
    pub s_min: f64,
}

impl Spectrum {
    pub fn of(a: &DMatrix<f64>) -> Self {
        let sv = a.clone().singular_values();
        let s_max = sv.iter().cloned().fold(0.0, f64::max);
        let s_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        Self { s_max, s_min }
    }

    pub fn condition_number(&self) -> f64 {
        if self.s_min > 0.0 {
            self.s_max / self.s_min
        } else {
            f64::INFINITY
        }
    }
}

/// Solves `a x = rhs` by LU with one step of iterative refinement.
/// Returns `None` when the factorization is singular.
pub fn solve_refined(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu.solve(rhs)?;
    let r = rhs - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Least-squares solution of `a x ≈ rhs` via SVD.
pub fn least_squares(a: &DMatrix<f64>, rhs: &DVector<f64>, eps: f64) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(rhs, eps).ok()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refined_solve_matches_known_solution() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let rhs = &a * &x;
        let got = solve_refined(&a, &rhs).unwrap();
        assert!(max_abs(&(got - x)) < 1e-14);
    }

    #[test]
    fn singular_matrix_has_zero_gap() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let s = Spectrum::of(&a);
        assert!(s.s_min < 1e-12 * s.s_max);
        assert!(s.condition_number() > 1e12);
    }
}
