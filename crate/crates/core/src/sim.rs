//! Closed-loop discrete-time rollouts under noise, delays and packet loss,
//! plus per-trajectory cost functionals.
//!
//! A rollout integrates `x_{t+1} = A x_t + B u_t + ξ_t` with
//! `u_{ℓ,t} = −K_{ℓ,·} · view_ℓ(t)`, where each controller's view passes
//! through the delay and loss channels of [`crate::comms`]. With zero delays
//! and no loss the views collapse to the current state and the engine takes
//! a fast path that is bit-identical to the channel path.
//!
//! Control inputs are always formed by masked dot products: entries the
//! communication graph forbids are structurally skipped, never multiplied by
//! a zero.

use crate::comms::{fill_delayed_view, DelayProfile, PacketLossModel};
use crate::netmodel::DiscreteSystem;
use crate::risklqr::{GainMatrix, NoiseMoments};
use crate::util::{self, stream};
use crate::{real, Real};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// States with magnitude beyond this bound flag the rollout as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("noise covariance is not symmetric positive semidefinite")]
    InvalidCovariance,
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("empirical noise model has no samples")]
    EmptyEmpirical,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Stochastic perturbation entering the state update each step.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseModel<T> {
    /// `ξ ~ N(mean, cov)`.
    Gaussian { mean: DVector<T>, cov: DMatrix<T> },
    /// Uniform draws from a bank of recorded perturbation samples.
    CustomEmpirical { samples: Vec<DVector<T>> },
}

impl<T: Real> NoiseModel<T> {
    /// Zero-mean isotropic Gaussian with standard deviation `std`.
    pub fn isotropic(dim: usize, std: T) -> Self {
        NoiseModel::Gaussian {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * std * std,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::isotropic(dim, T::zero())
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::Gaussian { mean, .. } => mean.len(),
            NoiseModel::CustomEmpirical { samples } => {
                samples.first().map_or(0, |s| s.len())
            }
        }
    }

    pub fn mean(&self) -> DVector<T> {
        match self {
            NoiseModel::Gaussian { mean, .. } => mean.clone(),
            NoiseModel::CustomEmpirical { samples } => {
                let mut m = DVector::zeros(self.dim());
                for s in samples {
                    m += s;
                }
                m / real::<T>(samples.len() as f64)
            }
        }
    }

    pub fn covariance(&self) -> DMatrix<T> {
        match self {
            NoiseModel::Gaussian { cov, .. } => cov.clone(),
            NoiseModel::CustomEmpirical { samples } => {
                let mean = self.mean();
                let mut w = DMatrix::zeros(self.dim(), self.dim());
                for s in samples {
                    let e = s - &mean;
                    w.syger(T::one(), &e, &e, T::one());
                }
                w.fill_upper_triangle_with_lower_triangle();
                w / real::<T>(samples.len() as f64)
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            NoiseModel::Gaussian { cov, .. } => cov.iter().all(|&v| v == T::zero()),
            NoiseModel::CustomEmpirical { samples } => samples.len() <= 1,
        }
    }
}

/// Seeded sampler for a [`NoiseModel`].
pub struct NoiseSampler<T> {
    kind: SamplerKind<T>,
    rng: ChaCha8Rng,
    scratch: DVector<T>,
}

enum SamplerKind<T> {
    Deterministic { mean: DVector<T> },
    Gaussian { mean: DVector<T>, factor: DMatrix<T> },
    Empirical { samples: Vec<DVector<T>> },
}

impl<T: Real> NoiseSampler<T> {
    pub fn new(model: &NoiseModel<T>, seed: u64) -> Result<Self, SimError> {
        let rng = ChaCha8Rng::seed_from_u64(util::mix(seed, stream::NOISE));
        let dim = model.dim();
        let kind = match model {
            NoiseModel::Gaussian { mean, cov } => {
                if model.is_deterministic() {
                    SamplerKind::Deterministic { mean: mean.clone() }
                } else {
                    SamplerKind::Gaussian {
                        mean: mean.clone(),
                        factor: psd_factor(cov)?,
                    }
                }
            }
            NoiseModel::CustomEmpirical { samples } => {
                if samples.is_empty() {
                    return Err(SimError::EmptyEmpirical);
                }
                SamplerKind::Empirical { samples: samples.clone() }
            }
        };
        Ok(NoiseSampler {
            kind,
            rng,
            scratch: DVector::zeros(dim),
        })
    }

    pub fn draw(&mut self) -> DVector<T> {
        match &self.kind {
            SamplerKind::Deterministic { mean } => mean.clone(),
            SamplerKind::Gaussian { mean, factor } => {
                for z in self.scratch.iter_mut() {
                    let draw: f64 = self.rng.sample(StandardNormal);
                    *z = real::<T>(draw);
                }
                let mut out = mean.clone();
                out.gemv(T::one(), factor, &self.scratch, T::one());
                out
            }
            SamplerKind::Empirical { samples } => {
                let idx = self.rng.gen_range(0..samples.len());
                samples[idx].clone()
            }
        }
    }
}

/// Square root factor of a PSD matrix; Cholesky when definite, symmetric
/// eigendecomposition with clamped tiny negatives otherwise.
fn psd_factor<T: Real>(cov: &DMatrix<T>) -> Result<DMatrix<T>, SimError> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(SimError::InvalidCovariance);
    }
    let scale = cov.amax().max(T::one());
    let sym_tol = scale * real::<T>(1e-10);
    if (cov - cov.transpose()).amax() > sym_tol {
        return Err(SimError::InvalidCovariance);
    }
    if let Some(ch) = nalgebra::Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let mut factor = eig.eigenvectors.clone();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -sym_tol {
            return Err(SimError::InvalidCovariance);
        }
        let s = lambda.max(T::zero()).sqrt();
        for r in 0..n {
            factor[(r, c)] *= s;
        }
    }
    Ok(factor)
}

/// Everything one rollout needs besides the system and the gain.
#[derive(Clone, Debug)]
pub struct ScenarioConfig<T> {
    /// Horizon in steps.
    pub horizon: usize,
    /// Magnitude bound of the initial speed impulse.
    pub impulse_scale: T,
    pub delays: DelayProfile,
    pub loss: PacketLossModel,
    pub noise: NoiseModel<T>,
    /// Scenario seed; all channel streams derive from it.
    pub seed: u64,
}

impl<T: Real> ScenarioConfig<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidHorizon);
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg
    }
}

/// Initial state with i.i.d. uniform speed impulses in `[−scale, scale]`.
///
/// Speed components are drawn for block-structured states (`n_sg ≥ 1`);
/// for structureless systems every component is drawn.
pub fn impulse_init<T: Real>(state_dim: usize, n_sg: usize, scale: T, seed: u64) -> DVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, stream::IMPULSE));
    let mut x0 = DVector::zeros(state_dim);
    if scale == T::zero() {
        return x0;
    }
    let s = scale.to_f64().expect("finite scale");
    if n_sg > 0 {
        for i in 0..n_sg {
            x0[4 * i + 1] = real::<T>(rng.gen_range(-s..=s));
        }
    } else {
        for v in x0.iter_mut() {
            *v = real::<T>(rng.gen_range(-s..=s));
        }
    }
    x0
}

/// Realized closed-loop trajectory.
///
/// `states` holds `x_0..x_T` (one more than `inputs`) for a completed run;
/// a diverged run truncates at the last finite state, with `diverged_at`
/// naming the step whose state overflowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub diverged_at: Option<usize>,
}

impl<T: Real> Trajectory<T> {
    pub fn is_diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Number of (state, input) pairs the running cost is averaged over.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Per-step state costs `x_t' Q x_t` for the stored states.
    pub fn state_costs(&self, q: &DMatrix<T>) -> Vec<T> {
        self.states.iter().map(|x| quad_form(q, x)).collect()
    }

    /// Per-step input costs `u_t' R u_t`.
    pub fn input_costs(&self, r: &DMatrix<T>) -> Vec<T> {
        self.inputs.iter().map(|u| quad_form(r, u)).collect()
    }
}

#[inline]
pub(crate) fn quad_form<T: Real>(m: &DMatrix<T>, v: &DVector<T>) -> T {
    let mut acc = T::zero();
    for c in 0..m.ncols() {
        let vc = v[c];
        if vc == T::zero() {
            continue;
        }
        let mut col = T::zero();
        for r in 0..m.nrows() {
            col += m[(r, c)] * v[r];
        }
        acc += col * vc;
    }
    acc
}

/// `u = −K x` with masked entries structurally skipped.
pub fn control_from_state<T: Real>(gain: &GainMatrix<T>, x: &DVector<T>) -> DVector<T> {
    let mut u = DVector::zeros(gain.rows());
    for l in 0..gain.rows() {
        u[l] = -gain.masked_row_dot(l, x);
    }
    u
}

/// `u_ℓ = −K_{ℓ,·} view_ℓ` with masked entries structurally skipped; one view
/// per controller.
pub fn control_from_views<T: Real>(gain: &GainMatrix<T>, views: &[DVector<T>]) -> DVector<T> {
    assert_eq!(views.len(), gain.rows());
    let mut u = DVector::zeros(gain.rows());
    for l in 0..gain.rows() {
        u[l] = -gain.masked_row_dot(l, &views[l]);
    }
    u
}

/// Runs the closed loop for `cfg.horizon` steps.
///
/// Deterministic given `cfg.seed`: the noise, loss and impulse streams are
/// split from it. A state overflow yields a truncated trajectory flagged
/// `diverged_at`, not an error.
pub fn rollout<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    cfg: &ScenarioConfig<T>,
) -> Result<Trajectory<T>, SimError> {
    rollout_impl(sys, gain, cfg, false)
}

/// [`rollout`] with the zero-delay/no-loss fast path disabled; the channel
/// machinery runs even when it is a no-op. Exposed for equivalence testing.
#[doc(hidden)]
pub fn rollout_through_channels<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    cfg: &ScenarioConfig<T>,
) -> Result<Trajectory<T>, SimError> {
    rollout_impl(sys, gain, cfg, true)
}

fn rollout_impl<T: Real>(
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    cfg: &ScenarioConfig<T>,
    force_channels: bool,
) -> Result<Trajectory<T>, SimError> {
    cfg.validate()?;
    let n = sys.state_dim();
    let m = sys.input_dim();
    if gain.cols() != n || gain.rows() != m {
        return Err(SimError::DimensionMismatch(format!(
            "gain is {}×{} but the system needs {}×{}",
            gain.rows(),
            gain.cols(),
            m,
            n
        )));
    }
    if cfg.noise.dim() != n {
        return Err(SimError::DimensionMismatch(format!(
            "noise dimension {} does not match state dimension {n}",
            cfg.noise.dim()
        )));
    }
    let channels_on = force_channels || !cfg.delays.is_zero() || !cfg.loss.is_none();
    if channels_on {
        if sys.n_sg == 0 || 4 * sys.n_sg != n {
            return Err(SimError::DimensionMismatch(
                "delay/loss channels need machine block structure".into(),
            ));
        }
        if cfg.delays.steps.len() != sys.n_sg {
            return Err(SimError::DimensionMismatch(format!(
                "delay profile covers {} machines, system has {}",
                cfg.delays.steps.len(),
                sys.n_sg
            )));
        }
    }

    let mut noise = NoiseSampler::new(&cfg.noise, cfg.seed)?;
    let x0 = impulse_init(n, sys.n_sg, cfg.impulse_scale, cfg.seed);

    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut inputs = Vec::with_capacity(cfg.horizon);
    states.push(x0);

    let bound = real::<T>(DIVERGENCE_BOUND);
    let mut diverged_at = None;

    let mut channels = if channels_on {
        Some(ChannelState::new(sys.n_sg, m, n, &cfg.loss))
    } else {
        None
    };
    let mut view_buf = DVector::<T>::zeros(n);
    let mut x_next = DVector::<T>::zeros(n);

    for t in 0..cfg.horizon {
        let u = match &mut channels {
            None => control_from_state(gain, &states[t]),
            Some(ch) => {
                let mut u = DVector::zeros(m);
                for l in 0..m {
                    fill_delayed_view(&states, &cfg.delays, l, sys.n_sg, t, &mut view_buf);
                    let received = ch.filter(l, t, &view_buf);
                    u[l] = -gain.masked_row_dot(l, received);
                }
                u
            }
        };

        x_next.gemv(T::one(), &sys.a, &states[t], T::zero());
        x_next.gemv(T::one(), &sys.b, &u, T::one());
        let xi = noise.draw();
        x_next.axpy(T::one(), &xi, T::one());

        inputs.push(u);
        if x_next.iter().any(|v| !v.is_finite()) || x_next.amax() > bound {
            diverged_at = Some(t + 1);
            break;
        }
        states.push(x_next.clone());
    }

    Ok(Trajectory {
        states,
        inputs,
        diverged_at,
    })
}

/// Per-controller hold-last-sample state for the loss channel inside a
/// rollout. One Bernoulli stream covers the whole measurement vector unless
/// the model asks for independent per-link streams.
struct ChannelState<T> {
    p: f64,
    per_link: bool,
    global_rng: ChaCha8Rng,
    link_rngs: Vec<ChaCha8Rng>,
    held: Vec<DVector<T>>,
    n_sg: usize,
    step_lost: bool,
}

impl<T: Real> ChannelState<T> {
    fn new(n_sg: usize, n_controllers: usize, state_dim: usize, loss: &PacketLossModel) -> Self {
        let link_rngs = if loss.per_link {
            (0..n_controllers * n_sg)
                .map(|k| {
                    ChaCha8Rng::seed_from_u64(util::split_seed(
                        loss.seed,
                        &[stream::LOSS, k as u64],
                    ))
                })
                .collect()
        } else {
            Vec::new()
        };
        ChannelState {
            p: loss.p,
            per_link: loss.per_link,
            global_rng: ChaCha8Rng::seed_from_u64(util::mix(loss.seed, stream::LOSS)),
            link_rngs,
            held: vec![DVector::zeros(state_dim); n_controllers],
            n_sg,
            step_lost: false,
        }
    }

    /// Filters controller `l`'s fresh view at step `t`, returning the view it
    /// actually acts on.
    fn filter(&mut self, l: usize, t: usize, fresh: &DVector<T>) -> &DVector<T> {
        if self.p == 0.0 && !self.per_link {
            self.held[l].copy_from(fresh);
            return &self.held[l];
        }
        if self.per_link {
            for i in 0..self.n_sg {
                let lost = self.link_rngs[l * self.n_sg + i].gen::<f64>() < self.p;
                if t == 0 || !lost {
                    for k in 4 * i..4 * i + 4 {
                        self.held[l][k] = fresh[k];
                    }
                }
            }
        } else {
            // One draw per step, shared by all controllers.
            if l == 0 {
                self.step_lost = self.global_rng.gen::<f64>() < self.p;
            }
            if t == 0 || !self.step_lost {
                self.held[l].copy_from(fresh);
            }
        }
        &self.held[l]
    }
}

/// Time-averaged quadratic cost `(1/T) Σ (x_t' Q x_t + u_t' R u_t)` over the
/// realized (state, input) pairs.
pub fn lqr_cost<T: Real>(traj: &Trajectory<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> T {
    let steps = traj.steps();
    if steps == 0 {
        return T::zero();
    }
    let total = util::compensated_sum(
        traj.states
            .iter()
            .take(steps)
            .zip(&traj.inputs)
            .map(|(x, u)| quad_form(q, x) + quad_form(r, u)),
    );
    total / real::<T>(steps as f64)
}

/// Time-averaged state cost `(1/T) Σ x_t' Q x_t` over the same window as
/// [`lqr_cost`].
pub fn state_cost_avg<T: Real>(traj: &Trajectory<T>, q: &DMatrix<T>) -> T {
    let steps = traj.steps();
    if steps == 0 {
        return T::zero();
    }
    let total = util::compensated_sum(
        traj.states
            .iter()
            .take(steps)
            .map(|x| quad_form(q, x)),
    );
    total / real::<T>(steps as f64)
}

/// One-trajectory sample of the mean-variance risk
/// `(1/T) Σ_t (x_t' Q x_t − E[x_t' Q x_t | 𝓕_t])²`.
///
/// The conditional expectation expands through the one-step predictor mean
/// `m = A x_{t−1} + B u_{t−1} + ξ̄` as `m' Q m + tr(QW)`; the sum runs over
/// the predicted steps `t = 1..T`.
pub fn risk_sample<T: Real>(
    sys: &DiscreteSystem<T>,
    traj: &Trajectory<T>,
    q: &DMatrix<T>,
    moments: &NoiseMoments<T>,
) -> T {
    let count = traj.states.len().saturating_sub(1);
    if count == 0 {
        return T::zero();
    }
    let tr_qw = (q * &moments.w).trace();
    let mut m = DVector::zeros(sys.state_dim());
    let total = util::compensated_sum((1..=count).map(|t| {
        m.copy_from(&moments.mean);
        m.gemv(T::one(), &sys.a, &traj.states[t - 1], T::one());
        m.gemv(T::one(), &sys.b, &traj.inputs[t - 1], T::one());
        let conditional = quad_form(q, &m) + tr_qw;
        let dev = quad_form(q, &traj.states[t]) - conditional;
        dev * dev
    }));
    total / real::<T>(count as f64)
}

/// Mean-squared frequency deviation of one machine's reconstructed bus
/// frequency: `f_t − f_ref = ω_t / 2π`, averaged over the cost window.
pub fn msfd<T: Real>(traj: &Trajectory<T>, sg: usize) -> T {
    let steps = traj.steps().max(1).min(traj.states.len());
    let two_pi = real::<T>(std::f64::consts::TAU);
    let total = util::compensated_sum(traj.states.iter().take(steps).map(|x| {
        let dev = x[4 * sg + 1] / two_pi;
        dev * dev
    }));
    total / real::<T>(steps as f64)
}

/// Trajectory CSV: `t, x[0..], u[0..], state_cost, input_cost`. The terminal
/// state row leaves the input columns empty.
pub fn trajectory_to_csv<T: Real, W: std::io::Write>(
    traj: &Trajectory<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    out: &mut W,
) -> std::io::Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    write!(out, "t")?;
    for i in 0..n {
        write!(out, ",x{i}")?;
    }
    for j in 0..m {
        write!(out, ",u{j}")?;
    }
    writeln!(out, ",state_cost,input_cost")?;
    for (t, x) in traj.states.iter().enumerate() {
        write!(out, "{t}")?;
        for v in x.iter() {
            write!(out, ",{}", v.to_f64().unwrap_or(f64::NAN))?;
        }
        if t < traj.inputs.len() {
            let u = &traj.inputs[t];
            for v in u.iter() {
                write!(out, ",{}", v.to_f64().unwrap_or(f64::NAN))?;
            }
            writeln!(
                out,
                ",{},{}",
                quad_form(q, x).to_f64().unwrap_or(f64::NAN),
                quad_form(r, u).to_f64().unwrap_or(f64::NAN)
            )?;
        } else {
            for _ in 0..m {
                write!(out, ",")?;
            }
            writeln!(out, ",{},", quad_form(q, x).to_f64().unwrap_or(f64::NAN))?;
        }
    }
    Ok(())
}

/// On-disk mirror of [`ScenarioConfig`].
#[derive(Serialize, Deserialize)]
pub struct ScenarioConfigFile {
    pub horizon: usize,
    pub impulse_scale: f64,
    pub delays: DelayProfile,
    pub loss: PacketLossModel,
    pub noise: NoiseModelFile,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModelFile {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    CustomEmpirical { samples: Vec<Vec<f64>> },
}

impl From<&NoiseModel<f64>> for NoiseModelFile {
    fn from(model: &NoiseModel<f64>) -> Self {
        match model {
            NoiseModel::Gaussian { mean, cov } => NoiseModelFile::Gaussian {
                mean: mean.iter().copied().collect(),
                cov: (0..cov.nrows())
                    .map(|r| cov.row(r).iter().copied().collect())
                    .collect(),
            },
            NoiseModel::CustomEmpirical { samples } => NoiseModelFile::CustomEmpirical {
                samples: samples.iter().map(|s| s.iter().copied().collect()).collect(),
            },
        }
    }
}

impl TryFrom<&NoiseModelFile> for NoiseModel<f64> {
    type Error = SimError;

    fn try_from(file: &NoiseModelFile) -> Result<Self, SimError> {
        match file {
            NoiseModelFile::Gaussian { mean, cov } => {
                let n = mean.len();
                if cov.len() != n || cov.iter().any(|row| row.len() != n) {
                    return Err(SimError::DimensionMismatch(
                        "covariance must be square and match the mean".into(),
                    ));
                }
                Ok(NoiseModel::Gaussian {
                    mean: DVector::from_vec(mean.clone()),
                    cov: DMatrix::from_fn(n, n, |r, c| cov[r][c]),
                })
            }
            NoiseModelFile::CustomEmpirical { samples } => {
                if samples.is_empty() {
                    return Err(SimError::EmptyEmpirical);
                }
                Ok(NoiseModel::CustomEmpirical {
                    samples: samples.iter().map(|s| DVector::from_vec(s.clone())).collect(),
                })
            }
        }
    }
}

pub fn scenario_config_to_json(cfg: &ScenarioConfig<f64>) -> Result<String, SimError> {
    let file = ScenarioConfigFile {
        horizon: cfg.horizon,
        impulse_scale: cfg.impulse_scale,
        delays: cfg.delays.clone(),
        loss: cfg.loss,
        noise: (&cfg.noise).into(),
        seed: cfg.seed,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn scenario_config_from_json(text: &str) -> Result<ScenarioConfig<f64>, SimError> {
    let file: ScenarioConfigFile = serde_json::from_str(text)?;
    Ok(ScenarioConfig {
        horizon: file.horizon,
        impulse_scale: file.impulse_scale,
        delays: file.delays,
        loss: file.loss,
        noise: (&file.noise).try_into()?,
        seed: file.seed,
    })
}
