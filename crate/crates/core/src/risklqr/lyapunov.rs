//! Discrete Lyapunov equation `X = A X Aᵀ + W` by Smith doubling.

use super::RiskLqrError;
use crate::{real, Real};
use nalgebra::DMatrix;

/// Largest eigenvalue magnitude.
pub fn spectral_radius<T: Real>(a: &DMatrix<T>) -> T {
    a.complex_eigenvalues()
        .iter()
        .map(|l| (l.re * l.re + l.im * l.im).sqrt())
        .fold(T::zero(), |acc, x| acc.max(x))
}

/// Relative residual `‖X − A X Aᵀ − W‖_F / max(‖W‖_F, 1)`.
pub fn lyapunov_residual<T: Real>(a: &DMatrix<T>, w: &DMatrix<T>, x: &DMatrix<T>) -> T {
    let res = x - a * x * a.transpose() - w;
    res.norm() / w.norm().max(T::one())
}

/// Solves `X = A X Aᵀ + W` for a Schur-stable `A`.
///
/// Doubling: `X ← X + A X Aᵀ`, `A ← A²` sums the series `Σ Aᵏ W Aᵀᵏ` in
/// `log` many squarings. Instability is reported as an infinite-cost error;
/// every returned solution satisfies a 1e-10 relative residual.
pub fn solve_discrete_lyapunov<T: Real>(
    a: &DMatrix<T>,
    w: &DMatrix<T>,
) -> Result<DMatrix<T>, RiskLqrError> {
    let n = a.nrows();
    if a.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(RiskLqrError::DimensionMismatch(
            "Lyapunov solve needs square same-size A and W".into(),
        ));
    }
    let rho = spectral_radius(a);
    if !(rho < T::one() - real::<T>(1e-12)) {
        return Err(RiskLqrError::UnstableClosedLoop {
            spectral_radius: rho.to_f64().unwrap_or(f64::NAN),
        });
    }

    let mut x = w.clone();
    let mut ak = a.clone();
    let tiny = real::<T>(1e-150);
    for _ in 0..100 {
        x = &ak * &x * ak.transpose() + &x;
        ak = &ak * &ak;
        if ak.norm() < tiny {
            break;
        }
    }
    let residual = lyapunov_residual(a, w, &x);
    if residual > real::<T>(1e-10) {
        return Err(RiskLqrError::LyapunovNotConverged {
            residual: residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn scalar_geometric_series() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let x = solve_discrete_lyapunov(&a, &w).unwrap();
        // Σ 0.25ᵏ = 1 / (1 − 0.25)
        assert_relative_eq!(x[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn random_stable_systems_meet_residual_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..30 {
            let n = rng.gen_range(2..10);
            let raw = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let rho = spectral_radius(&raw);
            let target = rng.gen_range(0.3..0.97);
            let a = raw * (target / rho);
            let l = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let w = &l * l.transpose();
            let x = solve_discrete_lyapunov(&a, &w).unwrap();
            let res = lyapunov_residual(&a, &w, &x);
            assert!(res < 1e-10, "trial {trial}: residual {res:.3e}");
        }
    }

    #[test]
    fn unstable_matrix_is_an_infinite_cost_error() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let w = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            solve_discrete_lyapunov(&a, &w),
            Err(RiskLqrError::UnstableClosedLoop { .. })
        ));
    }

    #[test]
    fn spectral_radius_of_rotation_scaling() {
        let r = 0.8;
        let theta: f64 = 0.3;
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                r * theta.cos(),
                r * theta.sin(),
                -r * theta.sin(),
                r * theta.cos(),
            ],
        );
        assert_relative_eq!(spectral_radius(&a), r, epsilon = 1e-12);
    }
}
