//! Lyapunov-based exact evaluation of the undelayed closed loop.

use super::{
    endpoint_multiplier, solve_discrete_lyapunov, spectral_radius, CostWeights, GainMatrix,
    NoiseMoments, PhiEvaluator, PhiSample, RiskConfig, RiskLqrError,
};
use crate::netmodel::DiscreteSystem;
use crate::{real, Real};
use nalgebra::{DMatrix, DVector};

/// Stationary covariance `Σ∞` and mean `x̄` of `x⁺ = A_K x + ξ`:
/// `Σ∞ = A_K Σ∞ A_Kᵀ + W`, `x̄ = (I − A_K)⁻¹ ξ̄`.
pub fn closed_loop_stationary<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
) -> Result<(DMatrix<T>, DVector<T>), RiskLqrError> {
    let a_k = sys.closed_loop(gain.matrix());
    let sigma = solve_discrete_lyapunov(&a_k, &moments.w)?;
    let n = a_k.nrows();
    let x_bar = if moments.mean.amax() == T::zero() {
        DVector::zeros(n)
    } else {
        (DMatrix::identity(n, n) - &a_k)
            .lu()
            .solve(&moments.mean)
            .ok_or(RiskLqrError::UnstableClosedLoop {
                spectral_radius: 1.0,
            })?
    };
    Ok((sigma, x_bar))
}

/// Second moment `Σ∞ + x̄ x̄ᵀ` of the stationary state.
fn stationary_second_moment<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
) -> Result<(DMatrix<T>, DVector<T>), RiskLqrError> {
    let (sigma, x_bar) = closed_loop_stationary(sys, gain, moments)?;
    let mut m2 = sigma;
    m2.syger(T::one(), &x_bar, &x_bar, T::one());
    m2.fill_upper_triangle_with_lower_triangle();
    Ok((m2, x_bar))
}

/// Stationary LQR objective
/// `R₀ = tr((Q + Kᵀ R K) (Σ∞ + x̄ x̄ᵀ))`.
pub fn eval_r0_analytic<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
    weights: &CostWeights<T>,
) -> Result<T, RiskLqrError> {
    let (m2, _) = stationary_second_moment(sys, gain, moments)?;
    let krk = gain.matrix().transpose() * weights.r() * gain.matrix();
    Ok(((weights.q() + krk) * m2).trace())
}

/// Stationary risk functional
/// `R_c = 4 tr(QWQ (Σ∞ + x̄ x̄ᵀ)) + 4 x̄ᵀ Q M₃`, the quantity compared
/// against the adjusted tolerance `c̄`.
pub fn eval_rc_analytic<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
    q: &DMatrix<T>,
) -> Result<T, RiskLqrError> {
    let (m2, x_bar) = stationary_second_moment(sys, gain, moments)?;
    let qwq = q * &moments.w * q;
    let four = real::<T>(4.0);
    Ok(four * (&qwq * m2).trace() + four * (q * &moments.m3).dot(&x_bar))
}

/// Lagrangian `ℒ(K, λ)` evaluated through the reweighted objective:
/// `Q_λ = Q + 4λ QWQ` plus the stationary mean of `4λ xᵀQM₃`, minus `λ c̄`.
/// Identical to `R₀ + λ (R_c − c̄)` by construction.
pub fn eval_lagrangian_analytic<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    lambda: T,
    moments: &NoiseMoments<T>,
    weights: &CostWeights<T>,
) -> Result<T, RiskLqrError> {
    let (m2, x_bar) = stationary_second_moment(sys, gain, moments)?;
    let four = real::<T>(4.0);
    let qwq = weights.q() * &moments.w * weights.q();
    let q_lambda = weights.q() + &qwq * (four * lambda);
    let krk = gain.matrix().transpose() * weights.r() * gain.matrix();
    let quad = ((q_lambda + krk) * m2).trace();
    let linear = four * lambda * (weights.q() * &moments.m3).dot(&x_bar);
    Ok(quad + linear - lambda * moments.c_bar)
}

/// Closed-form inner maximization: `λ' = 0` if `R_c(K) ≤ c̄`, else `Λ`.
/// Returns `(λ', Φ(K))`.
pub fn max_oracle_analytic<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
    weights: &CostWeights<T>,
    risk: &RiskConfig<T>,
) -> Result<(T, T), RiskLqrError> {
    let r0 = eval_r0_analytic(sys, gain, moments, weights)?;
    let rc = eval_rc_analytic(sys, gain, moments, weights.q())?;
    let lambda = endpoint_multiplier(rc, moments.c_bar, risk.lambda_max);
    Ok((lambda, r0 + lambda * (rc - moments.c_bar)))
}

/// `Φ(K)` with divergence mapped to the finite penalty.
pub fn eval_phi_analytic<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    moments: &NoiseMoments<T>,
    weights: &CostWeights<T>,
    risk: &RiskConfig<T>,
) -> PhiSample<T> {
    let r0 = match eval_r0_analytic(sys, gain, moments, weights) {
        Ok(v) => v,
        Err(_) => return PhiSample::diverged(),
    };
    let rc = match eval_rc_analytic(sys, gain, moments, weights.q()) {
        Ok(v) => v,
        Err(_) => return PhiSample::diverged(),
    };
    let lambda = endpoint_multiplier(rc, moments.c_bar, risk.lambda_max);
    PhiSample {
        phi: r0 + lambda * (rc - moments.c_bar),
        lambda,
        r0,
        rc,
        diverged: false,
    }
}

/// Exact evaluation backend over the undelayed closed loop.
#[derive(Clone, Debug)]
pub struct AnalyticEvaluator<T> {
    pub sys: DiscreteSystem<T>,
    pub weights: CostWeights<T>,
    pub moments: NoiseMoments<T>,
    pub risk: RiskConfig<T>,
}

impl<T: Real> PhiEvaluator<T> for AnalyticEvaluator<T> {
    fn eval_phi(&self, gain: &GainMatrix<T>, _seed: u64) -> PhiSample<T> {
        eval_phi_analytic(&self.sys, gain, &self.moments, &self.weights, &self.risk)
    }

    fn closed_loop_radius(&self, gain: &GainMatrix<T>) -> Option<T> {
        Some(spectral_radius(&self.sys.closed_loop(gain.matrix())))
    }
}
