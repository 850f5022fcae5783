//! Eigenmode reporting and multi-scenario statistical evaluation.

use crate::comms::{sample_delays, PacketLossModel};
use crate::netmodel::{
    build_continuous, discretize, rebuild_with_injections, DiscreteSystem, NetModelError,
    NetworkDescription, OperatingPoint,
};
use crate::risklqr::{CostWeights, GainMatrix, NoiseMoments, DIVERGENCE_PENALTY};
use crate::sim::{
    lqr_cost, msfd, risk_sample, rollout, state_cost_avg, NoiseModel, ScenarioConfig, SimError,
};
use crate::util::{self, stream};
use crate::{real, Real};
use nalgebra::DMatrix;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty input")]
    EmptyInput,
    #[error("a risk-tolerance sweep pairs designs with levels: got {designs} designs for {levels} levels")]
    LevelDesignMismatch { designs: usize, levels: usize },
    #[error("operating-point sweeps need the network description behind the model")]
    MissingModelSource,
    #[error(transparent)]
    NetModel(#[from] NetModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One oscillatory (or real) mode of the closed loop, mapped to the
/// continuous plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeReport<T> {
    /// Discrete-plane eigenvalue of `A − BK`.
    pub eigenvalue_d: Complex<T>,
    /// Continuous equivalent `ln(λ_d)/Δt = σ ± jω` (principal branch).
    pub eigenvalue_c: Complex<T>,
    /// Frequency `ω/2π` in Hz.
    pub freq_hz: T,
    /// Damping ratio `−σ/√(σ² + ω²)`, in `[−1, 1]`.
    pub damping: T,
    /// Set when `λ_d` sits on the negative real axis, where the principal
    /// log branch is ambiguous.
    pub branch_warning: bool,
}

/// Eigenvalues of `A − BK` mapped through the principal logarithm, filtered
/// to the frequency band `[lo, hi]` (Hz) and sorted by frequency. Conjugate
/// pairs are reported once, through the positive-frequency member.
pub fn closed_loop_modes<T: Real>(
    sys: &DiscreteSystem<T>,
    k: &DMatrix<T>,
    band_hz: (f64, f64),
) -> Vec<ModeReport<T>> {
    let a_cl = sys.closed_loop(k);
    let lo = real::<T>(band_hz.0);
    let hi = real::<T>(band_hz.1);
    let tol = real::<T>(1e-12);
    let two_pi = real::<T>(std::f64::consts::TAU);

    let mut modes: Vec<ModeReport<T>> = a_cl
        .complex_eigenvalues()
        .iter()
        .filter(|l| l.im >= -tol)
        .filter_map(|l| {
            let mag = (l.re * l.re + l.im * l.im).sqrt();
            if mag < tol {
                // Deadbeat eigenvalue: no finite continuous equivalent.
                return None;
            }
            let sigma = mag.ln() / sys.dt;
            let omega = l.im.atan2(l.re).abs() / sys.dt;
            let size = (sigma * sigma + omega * omega).sqrt();
            let damping = if size == T::zero() {
                T::zero()
            } else {
                -sigma / size
            };
            Some(ModeReport {
                eigenvalue_d: *l,
                eigenvalue_c: Complex::new(sigma, omega),
                freq_hz: omega / two_pi,
                damping,
                branch_warning: l.re < T::zero() && l.im.abs() <= tol,
            })
        })
        .filter(|m| m.freq_hz >= lo && m.freq_hz <= hi)
        .collect();
    modes.sort_by(|a, b| a.freq_hz.partial_cmp(&b.freq_hz).unwrap());
    modes
}

/// Order statistics of a sample, quartiles by linear interpolation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary<T> {
    pub median: T,
    pub q1: T,
    pub q3: T,
    pub min: T,
    pub max: T,
    pub mean: T,
    /// Unbiased variance; zero for a singleton.
    pub variance: T,
    pub n: usize,
}

fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let frac = real::<T>(h - h.floor());
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Summarizes a nonempty sample.
pub fn summarize<T: Real>(values: &[T]) -> Result<Summary<T>, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mean = util::compensated_mean(values);
    let variance = if n == 1 {
        T::zero()
    } else {
        let ss = util::compensated_sum(values.iter().map(|&v| (v - mean) * (v - mean)));
        ss / real::<T>((n - 1) as f64)
    };
    Ok(Summary {
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
        min: sorted[0],
        max: sorted[n - 1],
        mean,
        variance,
        n,
    })
}

/// Per-scenario metric arrays of one (level, design) cell.
#[derive(Clone, Debug, Default)]
pub struct ScenarioStats<T> {
    pub objective: Vec<T>,
    pub state_cost: Vec<T>,
    pub risk_sample: Vec<T>,
    pub msfd: Vec<T>,
}

impl<T: Real> ScenarioStats<T> {
    pub fn summaries(&self) -> Result<MetricSummaries<T>, AnalysisError> {
        Ok(MetricSummaries {
            objective: summarize(&self.objective)?,
            state_cost: summarize(&self.state_cost)?,
            risk_sample: summarize(&self.risk_sample)?,
            msfd: summarize(&self.msfd)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricSummaries<T> {
    pub objective: Summary<T>,
    pub state_cost: Summary<T>,
    pub risk_sample: Summary<T>,
    pub msfd: Summary<T>,
}

/// Sweep axes. `RiskC` pairs designs with levels one-to-one (policies
/// trained at those tolerances, evaluated under the base channel settings);
/// the other axes evaluate every design at every level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Delay,
    Loss,
    RiskC,
    OpPerturb,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delay" => Ok(SweepAxis::Delay),
            "loss" => Ok(SweepAxis::Loss),
            "risk-c" => Ok(SweepAxis::RiskC),
            "op-perturb" => Ok(SweepAxis::OpPerturb),
            other => Err(format!(
                "unknown axis '{other}' (expected delay | loss | risk-c | op-perturb)"
            )),
        }
    }
}

/// Fixed surroundings of a sweep: the system, weights, moments for the risk
/// predictor, scenario shape, and base channel settings for the axes that do
/// not vary them.
#[derive(Clone, Debug)]
pub struct SweepContext<T> {
    pub sys: DiscreteSystem<T>,
    pub weights: CostWeights<T>,
    pub moments: NoiseMoments<T>,
    pub horizon: usize,
    pub impulse_scale: T,
    pub noise: NoiseModel<T>,
    pub base_max_delay_s: f64,
    pub base_loss_p: f64,
    pub per_link_loss: bool,
    /// Machine whose reconstructed frequency feeds the MSFD metric.
    pub msfd_sg: usize,
    /// Network and operating point behind `sys`; required by the
    /// operating-point axis, which rebuilds the model per scenario.
    pub model_source: Option<(NetworkDescription<T>, OperatingPoint<T>)>,
}

/// One (level, design) cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepCell<T> {
    pub level: f64,
    pub design: String,
    pub stats: ScenarioStats<T>,
    /// Scenarios dropped because the perturbed model could not be rebuilt.
    pub excluded: usize,
}

struct ScenarioMetrics<T> {
    objective: T,
    state_cost: T,
    risk: T,
    msfd: T,
}

/// Runs `scenarios` seeded rollouts for every design at every level of the
/// axis and collects per-scenario metrics.
///
/// Scenario randomness (impulse, noise, delay draws, loss draws) is shared
/// across designs and levels — the axis level only changes the bound or
/// probability it feeds — so comparisons across a row use common random
/// numbers. Cells come back sorted by (level index, design index); scenario
/// order inside a cell is by scenario index regardless of parallelism.
pub fn scenario_sweep<T: Real>(
    ctx: &SweepContext<T>,
    designs: &[(String, GainMatrix<T>)],
    axis: SweepAxis,
    levels: &[f64],
    scenarios: usize,
    seed: u64,
) -> Result<Vec<SweepCell<T>>, AnalysisError> {
    if designs.is_empty() || levels.is_empty() || scenarios == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    if axis == SweepAxis::RiskC && designs.len() != levels.len() {
        return Err(AnalysisError::LevelDesignMismatch {
            designs: designs.len(),
            levels: levels.len(),
        });
    }
    if axis == SweepAxis::OpPerturb && ctx.model_source.is_none() {
        return Err(AnalysisError::MissingModelSource);
    }

    let dt = ctx.sys.dt.to_f64().unwrap_or(0.01);
    let mut cells = Vec::new();
    for (level_idx, &level) in levels.iter().enumerate() {
        let design_slice: Vec<(usize, &(String, GainMatrix<T>))> = match axis {
            SweepAxis::RiskC => vec![(level_idx, &designs[level_idx])],
            _ => designs.iter().enumerate().collect(),
        };

        // Per-scenario work, shared across the level's designs.
        let outcomes: Vec<Option<Vec<ScenarioMetrics<T>>>> = (0..scenarios)
            .into_par_iter()
            .map(|s| {
                let (max_delay_s, loss_p) = match axis {
                    SweepAxis::Delay => (level, ctx.base_loss_p),
                    SweepAxis::Loss => (ctx.base_max_delay_s, level),
                    SweepAxis::RiskC | SweepAxis::OpPerturb => {
                        (ctx.base_max_delay_s, ctx.base_loss_p)
                    }
                };
                let cfg = ScenarioConfig {
                    horizon: ctx.horizon,
                    impulse_scale: ctx.impulse_scale,
                    delays: sample_delays(
                        ctx.sys.n_sg,
                        max_delay_s,
                        dt,
                        util::split_seed(seed, &[s as u64, stream::DELAYS]),
                    ),
                    loss: PacketLossModel {
                        p: loss_p,
                        seed: util::split_seed(seed, &[s as u64, stream::LOSS]),
                        per_link: ctx.per_link_loss,
                    },
                    noise: ctx.noise.clone(),
                    seed: util::split_seed(seed, &[s as u64, stream::SCENARIO]),
                };

                // The operating-point axis swaps the system per scenario.
                let sys_local: DiscreteSystem<T>;
                let sys_ref: &DiscreteSystem<T> = match axis {
                    SweepAxis::OpPerturb => {
                        let (net, op) = ctx.model_source.as_ref().unwrap();
                        match perturbed_system(
                            net,
                            op,
                            level,
                            dt,
                            util::split_seed(seed, &[s as u64, stream::PERTURB]),
                        ) {
                            Some(sys) => {
                                sys_local = sys;
                                &sys_local
                            }
                            None => return None,
                        }
                    }
                    _ => &ctx.sys,
                };

                let metrics = design_slice
                    .iter()
                    .map(|(_, (_, gain))| run_scenario(ctx, sys_ref, gain, &cfg))
                    .collect();
                Some(metrics)
            })
            .collect();

        for (slot, (design_idx, (name, _))) in design_slice.iter().enumerate() {
            let mut stats = ScenarioStats::default();
            let mut excluded = 0usize;
            for outcome in &outcomes {
                match outcome {
                    None => excluded += 1,
                    Some(per_design) => {
                        let m = &per_design[slot];
                        stats.objective.push(m.objective);
                        stats.state_cost.push(m.state_cost);
                        stats.risk_sample.push(m.risk);
                        stats.msfd.push(m.msfd);
                    }
                }
            }
            let _ = design_idx;
            cells.push(SweepCell {
                level,
                design: name.clone(),
                stats,
                excluded,
            });
        }
    }
    Ok(cells)
}

fn run_scenario<T: Real>(
    ctx: &SweepContext<T>,
    sys: &DiscreteSystem<T>,
    gain: &GainMatrix<T>,
    cfg: &ScenarioConfig<T>,
) -> ScenarioMetrics<T> {
    match rollout(sys, gain, cfg) {
        Ok(traj) if !traj.is_diverged() => ScenarioMetrics {
            objective: lqr_cost(&traj, ctx.weights.q(), ctx.weights.r()),
            state_cost: state_cost_avg(&traj, ctx.weights.q()),
            risk: risk_sample(sys, &traj, ctx.weights.q(), &ctx.moments),
            msfd: msfd(&traj, ctx.msfd_sg),
        },
        // Diverged or misconfigured rollouts surface as the finite penalty
        // so cell arrays stay rectangular.
        _ => ScenarioMetrics {
            objective: real::<T>(DIVERGENCE_PENALTY),
            state_cost: real::<T>(DIVERGENCE_PENALTY),
            risk: real::<T>(DIVERGENCE_PENALTY),
            msfd: real::<T>(DIVERGENCE_PENALTY),
        },
    }
}

/// Rebuilds the model with every converter's injections scaled by
/// independent factors in `[1 − level, 1 + level]`.
fn perturbed_system<T: Real>(
    net: &NetworkDescription<T>,
    op: &OperatingPoint<T>,
    level: f64,
    dt: f64,
    seed: u64,
) -> Option<DiscreteSystem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pv: Vec<T> = net
        .vscs
        .iter()
        .map(|v| v.pv * real::<T>(1.0 + rng.gen_range(-level..=level)))
        .collect();
    let qv: Vec<T> = net
        .vscs
        .iter()
        .map(|v| v.qv * real::<T>(1.0 + rng.gen_range(-level..=level)))
        .collect();
    let (net2, op2) = rebuild_with_injections(net, op, &pv, &qv).ok()?;
    let lin = build_continuous(&net2, &op2).ok()?;
    discretize(&lin, real::<T>(dt)).ok()
}

/// Sweep CSV: `level,design,scenario,objective,state_cost,risk_sample,msfd`.
pub fn sweep_to_csv<T: Real, W: std::io::Write>(
    cells: &[SweepCell<T>],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "level,design,scenario,objective,state_cost,risk_sample,msfd")?;
    for cell in cells {
        for s in 0..cell.stats.objective.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                cell.level,
                cell.design,
                s,
                cell.stats.objective[s].to_f64().unwrap_or(f64::NAN),
                cell.stats.state_cost[s].to_f64().unwrap_or(f64::NAN),
                cell.stats.risk_sample[s].to_f64().unwrap_or(f64::NAN),
                cell.stats.msfd[s].to_f64().unwrap_or(f64::NAN),
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CellSummary<T> {
    level: f64,
    design: String,
    excluded: usize,
    metrics: MetricSummaries<T>,
}

/// Per-cell summary document for plotting.
pub fn sweep_summary_json<T: Real + Serialize>(
    cells: &[SweepCell<T>],
) -> Result<String, AnalysisError> {
    let rows: Vec<CellSummary<T>> = cells
        .iter()
        .map(|c| {
            Ok(CellSummary {
                level: c.level,
                design: c.design.clone(),
                excluded: c.excluded,
                metrics: c.stats.summaries()?,
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(serde_json::to_string_pretty(&rows)?)
}
