//! Objective, risk and Lagrangian evaluation for structured feedback gains.
//!
//! Two backends share one contract:
//!
//! * the **analytic** backend ([`AnalyticEvaluator`]) solves a discrete
//!   Lyapunov equation for the stationary state covariance of the undelayed
//!   closed loop — exact, and the oracle for cross-checks;
//! * the **Monte-Carlo** backend ([`MonteCarloEvaluator`]) averages seeded
//!   rollouts and is the one used during training, where delays and loss
//!   make the closed loop non-Markov in the state alone.
//!
//! The quantities evaluated are the time-averaged quadratic objective `R₀`,
//! the steady-state risk functional
//! `R_c = 4·E[x'QWQx] + 4·E[x]'Q M₃` compared against the adjusted tolerance
//! `c̄ = c − m₄ + 4 tr((WQ)²)`, the Lagrangian
//! `ℒ(K, λ) = R₀ + λ (R_c − c̄)`, and `Φ(K) = max_{λ∈[0,Λ]} ℒ(K, λ)`, whose
//! inner maximum sits at an endpoint because `ℒ` is affine in `λ`.

mod analytic;
mod lyapunov;
mod mc;
mod moments;

pub use analytic::{
    closed_loop_stationary, eval_lagrangian_analytic, eval_phi_analytic, eval_r0_analytic,
    eval_rc_analytic, max_oracle_analytic, AnalyticEvaluator,
};
pub use lyapunov::{lyapunov_residual, solve_discrete_lyapunov, spectral_radius};
pub use mc::MonteCarloEvaluator;
pub use moments::{
    compute_moments, compute_moments_sampled, moments_from_json, moments_from_samples,
    moments_to_json, MomentProvenance, NoiseMoments,
};

use crate::comms::{CommsError, SparsityMask};
use crate::{real, Real};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Finite stand-in cost for gains whose evaluation diverges, so that
/// gradient averaging over perturbed gains stays defined.
pub const DIVERGENCE_PENALTY: f64 = 1e9;

#[derive(Debug, Error)]
pub enum RiskLqrError {
    #[error("{0} must be symmetric")]
    NotSymmetric(&'static str),
    #[error("{0} must be positive semidefinite")]
    NotPsd(&'static str),
    #[error("{0} must be positive definite")]
    NotPd(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gain has nonzero entries outside its sparsity mask")]
    GainViolatesMask,
    #[error("infinite cost: closed loop is unstable (spectral radius {spectral_radius:.6})")]
    UnstableClosedLoop { spectral_radius: f64 },
    #[error("Lyapunov solve did not converge (relative residual {residual:.3e})")]
    LyapunovNotConverged { residual: f64 },
    #[error("risk tolerance must be positive")]
    InvalidTolerance,
    #[error("multiplier bound must be nonnegative")]
    InvalidMultiplierBound,
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Quadratic cost weights, validated at construction: `Q` symmetric PSD,
/// `R` symmetric PD.
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights<T> {
    q: DMatrix<T>,
    r: DMatrix<T>,
}

impl<T: Real> CostWeights<T> {
    pub fn new(q: DMatrix<T>, r: DMatrix<T>) -> Result<Self, RiskLqrError> {
        check_symmetric(&q, "Q")?;
        check_symmetric(&r, "R")?;
        let q_min = min_symmetric_eigenvalue(&q);
        let tol = real::<T>(1e-10) * q.amax().max(T::one());
        if q_min < -tol {
            return Err(RiskLqrError::NotPsd("Q"));
        }
        let r_min = min_symmetric_eigenvalue(&r);
        if r_min <= real::<T>(1e-12) * r.amax().max(T::one()) {
            return Err(RiskLqrError::NotPd("R"));
        }
        Ok(CostWeights { q, r })
    }

    pub fn identity(state_dim: usize, input_dim: usize) -> Self {
        CostWeights {
            q: DMatrix::identity(state_dim, state_dim),
            r: DMatrix::identity(input_dim, input_dim),
        }
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }
}

fn check_symmetric<T: Real>(m: &DMatrix<T>, name: &'static str) -> Result<(), RiskLqrError> {
    if m.nrows() != m.ncols() {
        return Err(RiskLqrError::NotSymmetric(name));
    }
    let tol = real::<T>(1e-10) * m.amax().max(T::one());
    if (m - m.transpose()).amax() > tol {
        return Err(RiskLqrError::NotSymmetric(name));
    }
    Ok(())
}

fn min_symmetric_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Risk tolerance and multiplier bound. `lambda_max = 0` disables the
/// constraint (risk-neutral training).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskConfig<T> {
    /// Tolerance `c` on the mean-variance risk.
    pub c: T,
    /// Upper bound `Λ` of the multiplier interval `[0, Λ]`.
    pub lambda_max: T,
}

impl<T: Real> RiskConfig<T> {
    pub fn new(c: T, lambda_max: T) -> Result<Self, RiskLqrError> {
        if !(c > T::zero()) {
            return Err(RiskLqrError::InvalidTolerance);
        }
        if lambda_max < T::zero() {
            return Err(RiskLqrError::InvalidMultiplierBound);
        }
        Ok(RiskConfig { c, lambda_max })
    }

    /// Constraint disabled: `Λ = 0`, so the max-oracle always returns `λ = 0`.
    pub fn neutral() -> Self {
        RiskConfig {
            c: T::one(),
            lambda_max: T::zero(),
        }
    }
}

/// Feedback gain with an attached sparsity structure. Masked-out entries are
/// exactly zero at all times.
#[derive(Clone, Debug, PartialEq)]
pub struct GainMatrix<T> {
    k: DMatrix<T>,
    mask: SparsityMask,
    /// Active column indices per row, precomputed for masked dot products.
    active: Vec<Vec<u32>>,
}

impl<T: Real> GainMatrix<T> {
    pub fn new(k: DMatrix<T>, mask: SparsityMask) -> Result<Self, RiskLqrError> {
        if (k.nrows(), k.ncols()) != (mask.rows(), mask.cols()) {
            return Err(RiskLqrError::DimensionMismatch(format!(
                "gain is {}×{}, mask is {}×{}",
                k.nrows(),
                k.ncols(),
                mask.rows(),
                mask.cols()
            )));
        }
        if !mask.respects(&k) {
            return Err(RiskLqrError::GainViolatesMask);
        }
        let active = active_columns(&mask);
        Ok(GainMatrix { k, mask, active })
    }

    /// Zero gain on the given structure.
    pub fn zeros(mask: SparsityMask) -> Self {
        let k = DMatrix::zeros(mask.rows(), mask.cols());
        let active = active_columns(&mask);
        GainMatrix { k, mask, active }
    }

    /// Projects a dense matrix onto the structure (masked entries zeroed).
    pub fn from_dense_projected(mut k: DMatrix<T>, mask: SparsityMask) -> Self {
        mask.project(&mut k);
        let active = active_columns(&mask);
        GainMatrix { k, mask, active }
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.k
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }

    pub fn rows(&self) -> usize {
        self.k.nrows()
    }

    pub fn cols(&self) -> usize {
        self.k.ncols()
    }

    /// `Σ_c K[row, c] v[c]` over the structurally free columns only.
    #[inline]
    pub fn masked_row_dot(&self, row: usize, v: &DVector<T>) -> T {
        let mut acc = T::zero();
        for &c in &self.active[row] {
            let c = c as usize;
            acc += self.k[(row, c)] * v[c];
        }
        acc
    }

    /// `K ← K + α D` for a direction `D` that already respects the mask.
    /// Masked entries stay exactly zero because `0 + α·0 = 0`.
    pub fn add_scaled(&mut self, direction: &DMatrix<T>, alpha: T) {
        debug_assert!(self.mask.respects(direction));
        self.k.zip_apply(direction, |k, d| *k += alpha * d);
    }

    /// The same structure displaced by `α D`, for perturbed evaluations.
    pub fn perturbed(&self, direction: &DMatrix<T>, alpha: T) -> Self {
        let mut out = self.clone();
        out.add_scaled(direction, alpha);
        out
    }
}

fn active_columns(mask: &SparsityMask) -> Vec<Vec<u32>> {
    (0..mask.rows())
        .map(|r| {
            (0..mask.cols())
                .filter(|&c| mask.allowed(r, c))
                .map(|c| c as u32)
                .collect()
        })
        .collect()
}

/// One evaluation of `Φ` with its ingredients.
#[derive(Clone, Copy, Debug)]
pub struct PhiSample<T> {
    pub phi: T,
    /// Multiplier the max-oracle chose (`0` or `Λ`).
    pub lambda: T,
    pub r0: T,
    pub rc: T,
    pub diverged: bool,
}

impl<T: Real> PhiSample<T> {
    pub fn diverged() -> Self {
        PhiSample {
            phi: real::<T>(DIVERGENCE_PENALTY),
            lambda: T::zero(),
            r0: real::<T>(DIVERGENCE_PENALTY),
            rc: T::zero(),
            diverged: true,
        }
    }
}

/// Report of a delay-inclusive moment re-estimation during training.
#[derive(Clone, Debug)]
pub struct MomentRefresh<T> {
    pub c_bar: T,
    pub sample_count: usize,
}

/// Evaluation backend for `Φ(K)`.
///
/// `seed` feeds the stochastic backends; deterministic backends ignore it.
pub trait PhiEvaluator<T: Real>: Sync {
    fn eval_phi(&self, gain: &GainMatrix<T>, seed: u64) -> PhiSample<T>;

    /// Spectral radius of the undelayed closed loop, when the backend knows
    /// the system. Used for initial-gain feasibility checks.
    fn closed_loop_radius(&self, _gain: &GainMatrix<T>) -> Option<T> {
        None
    }

    /// Re-estimates the effective perturbation moments under the current
    /// policy. Backends without that notion keep their moments.
    fn refresh_moments(&mut self, _gain: &GainMatrix<T>, _seed: u64) -> Option<MomentRefresh<T>> {
        None
    }
}

/// The endpoint rule shared by both backends: `λ = 0` when the risk estimate
/// meets the adjusted tolerance, `Λ` otherwise; ties break to `0`.
pub(crate) fn endpoint_multiplier<T: Real>(rc: T, c_bar: T, lambda_max: T) -> T {
    if rc <= c_bar {
        T::zero()
    } else {
        lambda_max
    }
}
