//! Monte-Carlo evaluation backend: seeded rollouts through the delay and
//! loss channels.

use super::{
    endpoint_multiplier, moments_from_samples, spectral_radius, CostWeights, GainMatrix,
    MomentRefresh, NoiseMoments, PhiEvaluator, PhiSample, RiskConfig, RiskLqrError,
};
use crate::netmodel::DiscreteSystem;
use crate::sim::{lqr_cost, quad_form, rollout, ScenarioConfig, Trajectory};
use crate::util::{self, compensated_mean, stream};
use crate::{real, Real};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Rollout-averaging evaluator.
///
/// One evaluation runs `rollouts_per_eval` scenarios seeded from the call
/// seed, averages the realized objective and the risk integrand
/// `4 x'QWQx + 4 x'QM₃`, and applies the endpoint multiplier rule against
/// the cached `c̄`. Any diverged rollout makes the whole evaluation return
/// the divergence penalty.
#[derive(Clone, Debug)]
pub struct MonteCarloEvaluator<T> {
    pub sys: DiscreteSystem<T>,
    pub weights: CostWeights<T>,
    pub risk: RiskConfig<T>,
    /// Scenario template; the per-call seed replaces its `seed` field.
    pub template: ScenarioConfig<T>,
    pub rollouts_per_eval: usize,
    /// Rollouts recorded per moment refresh.
    pub refresh_rollouts: usize,
    /// When set, every scenario draws a fresh delay profile uniformly under
    /// this bound (seconds) instead of reusing the template's fixed profile,
    /// mirroring the testing protocol's per-scenario delays.
    pub resample_delay_bound: Option<f64>,
    moments: NoiseMoments<T>,
    qwq: DMatrix<T>,
    qm3: DVector<T>,
}

impl<T: Real> MonteCarloEvaluator<T> {
    pub fn new(
        sys: DiscreteSystem<T>,
        weights: CostWeights<T>,
        moments: NoiseMoments<T>,
        risk: RiskConfig<T>,
        template: ScenarioConfig<T>,
        rollouts_per_eval: usize,
    ) -> Result<Self, RiskLqrError> {
        template.validate()?;
        if rollouts_per_eval == 0 {
            return Err(RiskLqrError::DimensionMismatch(
                "rollouts_per_eval must be at least 1".into(),
            ));
        }
        let mut eval = MonteCarloEvaluator {
            sys,
            weights,
            risk,
            template,
            rollouts_per_eval,
            refresh_rollouts: 4,
            resample_delay_bound: None,
            qwq: DMatrix::zeros(0, 0),
            qm3: DVector::zeros(0),
            moments,
        };
        eval.rebuild_caches();
        Ok(eval)
    }

    pub fn moments(&self) -> &NoiseMoments<T> {
        &self.moments
    }

    pub fn set_moments(&mut self, moments: NoiseMoments<T>) {
        self.moments = moments;
        self.rebuild_caches();
    }

    fn rebuild_caches(&mut self) {
        self.qwq = self.weights.q() * &self.moments.w * self.weights.q();
        self.qm3 = self.weights.q() * &self.moments.m3;
    }

    /// Risk integrand `4 x'QWQx + 4 x'QM₃` averaged over a trajectory's cost
    /// window.
    fn rc_along(&self, traj: &Trajectory<T>) -> T {
        let steps = traj.steps();
        if steps == 0 {
            return T::zero();
        }
        let four = real::<T>(4.0);
        let total = util::compensated_sum(traj.states.iter().take(steps).map(|x| {
            four * (quad_form(&self.qwq, x) + self.qm3.dot(x))
        }));
        total / real::<T>(steps as f64)
    }

    /// Scenario configuration for one seed, with the per-evaluation delay
    /// redraw applied when configured.
    fn scenario(&self, seed: u64) -> ScenarioConfig<T> {
        let mut cfg = self.template.with_seed(seed);
        if let Some(bound) = self.resample_delay_bound {
            let dt = self.sys.dt.to_f64().unwrap_or(0.01);
            cfg.delays = crate::comms::sample_delays(self.sys.n_sg, bound, dt, seed);
        }
        cfg
    }

    /// One seeded scenario: realized `(R₀, R_c)` sample, `None` on
    /// divergence.
    fn sample_costs(&self, gain: &GainMatrix<T>, seed: u64) -> Option<(T, T)> {
        let cfg = self.scenario(seed);
        let traj = rollout(&self.sys, gain, &cfg).ok()?;
        if traj.is_diverged() {
            return None;
        }
        Some((
            lqr_cost(&traj, self.weights.q(), self.weights.r()),
            self.rc_along(&traj),
        ))
    }

    /// Mean `(R₀, R_c)` over `n` scenarios seeded from `seed`; `None` if any
    /// scenario diverges. Scenarios run as a parallel map and reduce in
    /// scenario order, so the average is schedule-independent.
    pub fn estimate_costs(&self, gain: &GainMatrix<T>, n: usize, seed: u64) -> Option<(T, T)> {
        let samples: Vec<Option<(T, T)>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let scenario_seed = util::split_seed(seed, &[stream::SCENARIO, s as u64]);
                self.sample_costs(gain, scenario_seed)
            })
            .collect();
        let mut r0 = Vec::with_capacity(n);
        let mut rc = Vec::with_capacity(n);
        for sample in samples {
            let (a, b) = sample?;
            r0.push(a);
            rc.push(b);
        }
        Some((compensated_mean(&r0), compensated_mean(&rc)))
    }
}

impl<T: Real> PhiEvaluator<T> for MonteCarloEvaluator<T> {
    fn eval_phi(&self, gain: &GainMatrix<T>, seed: u64) -> PhiSample<T> {
        match self.estimate_costs(gain, self.rollouts_per_eval, seed) {
            None => PhiSample::diverged(),
            Some((r0, rc)) => {
                let lambda = endpoint_multiplier(rc, self.moments.c_bar, self.risk.lambda_max);
                PhiSample {
                    phi: r0 + lambda * (rc - self.moments.c_bar),
                    lambda,
                    r0,
                    rc,
                    diverged: false,
                }
            }
        }
    }

    fn closed_loop_radius(&self, gain: &GainMatrix<T>) -> Option<T> {
        Some(spectral_radius(&self.sys.closed_loop(gain.matrix())))
    }

    /// Re-estimates the effective perturbation moments under the current
    /// policy by differencing delayed rollouts against the undelayed
    /// closed-loop prediction: `ξ'_t = x_{t+1} − (A − BK) x_t`.
    fn refresh_moments(&mut self, gain: &GainMatrix<T>, seed: u64) -> Option<MomentRefresh<T>> {
        let a_k = self.sys.closed_loop(gain.matrix());
        let mut samples = Vec::new();
        for r in 0..self.refresh_rollouts {
            let scenario_seed = util::split_seed(seed, &[stream::REFRESH, r as u64]);
            let cfg = self.scenario(scenario_seed);
            let traj = rollout(&self.sys, gain, &cfg).ok()?;
            if traj.is_diverged() {
                return None;
            }
            for t in 0..traj.states.len() - 1 {
                let predicted = &a_k * &traj.states[t];
                samples.push(&traj.states[t + 1] - predicted);
            }
        }
        // Recover the original tolerance c from the cached c̄ before
        // re-adjusting it under the new moments.
        let four = real::<T>(4.0);
        let wq = &self.moments.w * self.weights.q();
        let c = self.moments.c_bar + self.moments.m4 - four * (&wq * &wq).trace();
        let new =
            moments_from_samples(&samples, self.weights.q(), c, Some("refresh".into())).ok()?;
        let report = MomentRefresh {
            c_bar: new.c_bar,
            sample_count: samples.len(),
        };
        self.set_moments(new);
        Some(report)
    }
}
