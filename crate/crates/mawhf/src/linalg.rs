//! Small dense-matrix helpers shared across modules.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;

use crate::{Error, Result};

pub const COND_LIMIT: f64 = 1e12;

/// Entrywise infinity norm, `max |a_ij|`.
pub fn max_abs<T: ComplexField>(a: &DMatrix<T>) -> f64 {
    a.iter()
        .map(|x| x.clone().modulus().to_subset().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

/// Induced 1-norm (max column sum of moduli).
fn one_norm<T: ComplexField>(a: &DMatrix<T>) -> f64 {
    (0..a.ncols())
        .map(|j| {
            a.column(j)
                .iter()
                .map(|x| x.clone().modulus().to_subset().unwrap_or(f64::INFINITY))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Partial-pivot inverse with a condition-number guard.
pub fn guarded_inverse<T: ComplexField>(
    a: &DMatrix<T>,
    context: &'static str,
) -> Result<DMatrix<T>> {
    let na = one_norm(a);
    let inv = a
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned { context, cond: f64::INFINITY })?;
    let cond = na * one_norm(&inv);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::IllConditioned { context, cond });
    }
    Ok(inv)
}

/// Solve `a x = b` for a matrix right-hand side.
pub fn solve<T: ComplexField>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    context: &'static str,
) -> Result<DMatrix<T>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::IllConditioned { context, cond: f64::INFINITY })
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    a.map(|x| x.re)
}

/// Matrix exponential by Padé order-13 approximation with scaling and squaring.
pub fn expm<T: ComplexField>(a: &DMatrix<T>) -> DMatrix<T> {
    const PADE13: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA13: f64 = 4.25;

    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        ((norm / THETA13).log2().ceil() as i32).max(0) as u32
    } else {
        0
    };
    let scale = T::from_real(T::RealField::from_subset(&0.5f64.powi(squarings as i32)));
    let a = a.map(|x| x * scale.clone());

    let id = DMatrix::<T>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let c = |i: usize| T::from_real(T::RealField::from_subset(&PADE13[i]));

    let u_inner = &a6 * (a6.map(|x| x * c(13)) + a4.map(|x| x * c(11)) + a2.map(|x| x * c(9)))
        + a6.map(|x| x * c(7))
        + a4.map(|x| x * c(5))
        + a2.map(|x| x * c(3))
        + id.map(|x| x * c(1));
    let u = &a * u_inner;
    let v = &a6 * (a6.map(|x| x * c(12)) + a4.map(|x| x * c(10)) + a2.map(|x| x * c(8)))
        + a6.map(|x| x * c(6))
        + a4.map(|x| x * c(4))
        + a2.map(|x| x * c(2))
        + id.map(|x| x * c(0));

    let num = &v + &u;
    let den = &v - &u;
    let mut r = den
        .lu()
        .solve(&num)
        .expect("Padé denominator must be invertible");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Checks that the directed graph with an edge wherever `a[k][r] > tol` (k ≠ r)
/// is strongly connected.
pub fn strongly_connected(a: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    if n <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { a[(i, j)] } else { a[(j, i)] };
                if i != j && w > tol && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Polynomial extrapolation to zero (Neville tableau) for values sampled at
/// decreasing nodes `xs`. Returns the extrapolated value and an error estimate
/// from the last tableau correction.
pub fn richardson_to_zero(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert_eq!(n, ys.len());
    assert!(n >= 2);
    let mut tab = ys.to_vec();
    let mut prev_best = tab[n - 1];
    let mut best = prev_best;
    for j in 1..n {
        for i in (j..n).rev() {
            // Lagrange update for value at x = 0.
            tab[i] = (xs[i - j] * tab[i] - xs[i] * tab[i - 1]) / (xs[i - j] - xs[i]);
        }
        prev_best = best;
        best = tab[n - 1];
    }
    (best, (best - prev_best).abs())
}

/// All eigenvalues of a real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    a.clone().complex_eigenvalues().iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_matches_scalar_exponential() {
        let a = DMatrix::from_row_slice(1, 1, &[-2.5]);
        let e = expm(&a);
        assert_relative_eq!(e[(0, 0)], (-2.5f64).exp(), max_relative = 1e-13);
    }

    #[test]
    fn expm_matches_series_for_small_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -0.7, 1.1, -0.2]);
        // crude series oracle
        let mut term = DMatrix::identity(2, 2);
        let mut sum = DMatrix::identity(2, 2);
        for k in 1..40 {
            term = (&term * &a) / k as f64;
            sum += &term;
        }
        let e = expm(&a);
        assert!(max_abs(&(&e - &sum)) < 1e-12);
    }

    #[test]
    fn expm_handles_large_norm_by_squaring() {
        let a = DMatrix::from_row_slice(2, 2, &[-30.0, 10.0, 5.0, -40.0]);
        let half = expm(&a.map(|x| x * 0.5));
        let whole = expm(&a);
        assert!(max_abs(&(&half * &half - whole)) < 1e-10);
    }

    #[test]
    fn richardson_kills_linear_error() {
        let xs = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
        let ys: Vec<f64> = xs.iter().map(|s| 3.0 + 2.0 * s - 5.0 * s * s).collect();
        let (v, err) = richardson_to_zero(&xs, &ys);
        assert_relative_eq!(v, 3.0, epsilon = 1e-10);
        assert!(err < 1e-6);
    }

    #[test]
    fn connectivity_detects_reducible_chain() {
        let cyc = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(strongly_connected(&cyc, 0.0));
        let lower = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 1.0, 0.0]);
        assert!(!strongly_connected(&lower, 0.0));
    }
}
