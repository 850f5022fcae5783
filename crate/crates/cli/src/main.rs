//! Batch front-end for building network models, training sparse damping
//! gains, and evaluating them across delay/loss/tolerance sweeps.
//!
//! Every command is hermetic: inputs are files and flags, all randomness
//! flows from `--seed`, and re-running with identical inputs reproduces the
//! result files byte for byte. A manifest with input digests is written
//! before any result.

mod bundle;
mod manifest;

use anyhow::{anyhow, Context};
use bundle::ModelBundle;
use clap::{Args, Parser, Subcommand};
use manifest::{write_atomic, RunManifest};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use wadc_core::analysis::{
    closed_loop_modes, scenario_sweep, sweep_summary_json, sweep_to_csv, ModeReport, SweepAxis,
    SweepContext,
};
use wadc_core::comms::{mask_from_graph, sample_delays, CommConfig, PacketLossModel};
use wadc_core::netmodel::{self, builtin_system};
use wadc_core::risklqr::{
    compute_moments, moments_to_json, spectral_radius, CostWeights, MonteCarloEvaluator,
    RiskConfig,
};
use wadc_core::sgdmax::{
    checkpoint_from_json, checkpoint_to_json, initial_gain, train, TrainConfig, ZopgConfig,
};
use wadc_core::sim::{NoiseModel, ScenarioConfig};
use wadc_core::{DiscreteSystemF64, GainMatrixF64};

/// Exit codes: 0 success, 2 usage, 3 validation, 4 runtime divergence.
struct CliError {
    code: i32,
    source: anyhow::Error,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(err: anyhow::Error) -> CliResult<T> {
    Err(CliError { code: 2, source: err })
}

trait IntoCli<T> {
    fn validation(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> IntoCli<T> for std::result::Result<T, E> {
    fn validation(self) -> CliResult<T> {
        self.map_err(|e| CliError { code: 3, source: e.into() })
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError { code: 4, source: e.into() })
    }
}

#[derive(Parser)]
#[command(name = "wadc", version, about = "Sparse risk-constrained damping control toolkit")]
struct Cli {
    /// Worker threads for sweeps and gradient sampling (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a discretized network model bundle, or inspect one.
    Model(ModelArgs),
    /// Train a sparse feedback gain.
    Train(TrainArgs),
    /// Evaluate one design over seeded test scenarios.
    Eval(EvalArgs),
    /// Report closed-loop (or open-loop) modes of a model.
    Modes(ModesArgs),
    /// Sweep designs across delay, loss, tolerance or operating-point axes.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Builtin system name: "two-area" or "ring(N_g,N_v,seed)".
    #[arg(long, conflicts_with = "network")]
    builtin: Option<String>,
    /// Network description JSON.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Sampling period in seconds.
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Maximum tolerated operating-point residual for file-loaded networks.
    #[arg(long, default_value_t = 1e-6)]
    allow_residual: f64,
    /// Output bundle path.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Frequency band (Hz) of the printed open-loop mode report.
    #[arg(long, default_value = "0.1,2.0", value_parser = parse_band)]
    band: (f64, f64),
    /// Print a summary of an existing bundle instead of building one.
    #[arg(long, conflicts_with_all = ["builtin", "network", "out"])]
    inspect: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Communication configuration JSON; defaults to the bundle's areas with
    /// adjacent-area links when omitted.
    #[arg(long)]
    comm: Option<PathBuf>,
    /// Optional JSON file with the same fields as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Step size.
    #[arg(long)]
    eta: Option<f64>,
    /// Iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Gradient samples per iteration.
    #[arg(long)]
    zopg_samples: Option<usize>,
    /// Smoothing radius.
    #[arg(long)]
    radius: Option<f64>,
    /// Risk tolerance c.
    #[arg(long)]
    risk_c: Option<f64>,
    /// Multiplier bound.
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// "on" trains with the risk constraint, "off" is the risk-neutral mode
    /// (multiplier bound forced to zero).
    #[arg(long)]
    risk: Option<String>,
    /// Rollout horizon in steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Initial speed-impulse magnitude.
    #[arg(long)]
    impulse: Option<f64>,
    /// Isotropic per-state noise standard deviation.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Noise standard deviation applied to speed states only.
    #[arg(long)]
    noise_omega_std: Option<f64>,
    #[arg(long)]
    rollouts_per_eval: Option<usize>,
    /// Moment refresh period in iterations (0 disables).
    #[arg(long)]
    refresh: Option<usize>,
    /// Gradient norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    eta: Option<f64>,
    iters: Option<usize>,
    zopg_samples: Option<usize>,
    radius: Option<f64>,
    risk_c: Option<f64>,
    lambda_max: Option<f64>,
    seed: Option<u64>,
    risk: Option<String>,
    horizon: Option<usize>,
    impulse: Option<f64>,
    noise_std: Option<f64>,
    noise_omega_std: Option<f64>,
    rollouts_per_eval: Option<usize>,
    refresh: Option<usize>,
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    comm: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenarios: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-scenario delay bound in seconds (defaults to the comm config's).
    #[arg(long)]
    max_delay: Option<f64>,
    /// Packet-loss probability (defaults to the comm config's).
    #[arg(long)]
    loss_p: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 0.05)]
    impulse: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_omega_std: f64,
    #[arg(long, default_value_t = 0.5)]
    risk_c: f64,
    /// Machine whose reconstructed frequency feeds the MSFD column.
    #[arg(long, default_value_t = 0)]
    msfd_sg: usize,
}

#[derive(Args)]
struct ModesArgs {
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint with the feedback gain; open loop when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "0.1,2.0", value_parser = parse_band)]
    band: (f64, f64),
    /// Optional CSV output path.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    comm: Option<PathBuf>,
    /// Comma-separated checkpoint paths.
    #[arg(long, value_delimiter = ',')]
    designs: Vec<PathBuf>,
    /// Design names for the output rows (default: file stems).
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    /// Axis: delay | loss | risk-c | op-perturb.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    scenarios: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Base delay bound for axes that do not sweep it.
    #[arg(long)]
    max_delay: Option<f64>,
    /// Base loss probability for axes that do not sweep it.
    #[arg(long)]
    loss_p: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 0.05)]
    impulse: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_omega_std: f64,
    #[arg(long, default_value_t = 0.5)]
    risk_c: f64,
    #[arg(long, default_value_t = 0)]
    msfd_sg: usize,
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("band must be LO,HI in Hz".into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| "bad band low")?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| "bad band high")?;
    if lo > hi {
        return Err("band low must not exceed high".into());
    }
    Ok((lo, hi))
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Parallelism only affects scheduling; results are reduced in
        // canonical order either way.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let outcome = match cli.command {
        Command::Model(args) => cmd_model(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Modes(args) => cmd_modes(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {:#}", err.source);
        std::process::exit(err.code);
    }
}

fn mode_table(modes: &[ModeReport<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>10} {:>10} {:>10} {:>10}  flags",
        "f (Hz)", "zeta", "sigma", "omega"
    );
    for m in modes {
        let _ = writeln!(
            out,
            "{:>10.3} {:>10.3} {:>10.3} {:>10.3}  {}",
            m.freq_hz,
            m.damping,
            m.eigenvalue_c.re,
            m.eigenvalue_c.im,
            if m.branch_warning { "branch-warning" } else { "" }
        );
    }
    out
}

fn modes_csv(modes: &[ModeReport<f64>]) -> String {
    let mut out = String::from("freq_hz,damping,sigma,omega,eig_d_re,eig_d_im,branch_warning\n");
    for m in modes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.freq_hz,
            m.damping,
            m.eigenvalue_c.re,
            m.eigenvalue_c.im,
            m.eigenvalue_d.re,
            m.eigenvalue_d.im,
            m.branch_warning
        );
    }
    out
}

fn cmd_model(args: ModelArgs) -> CliResult<()> {
    if let Some(path) = &args.inspect {
        let bundle = ModelBundle::load(path).validation()?;
        let sys = bundle.system().validation()?;
        let rho = spectral_radius(&sys.a);
        println!(
            "model: {} machines, {} converters, state dim {}, input dim {}, dt {} s",
            sys.n_sg,
            sys.n_vsc,
            sys.state_dim(),
            sys.input_dim(),
            sys.dt
        );
        println!("open-loop spectral radius: {rho:.6}");
        let modes = closed_loop_modes(
            &sys,
            &nalgebra::DMatrix::zeros(sys.input_dim(), sys.state_dim()),
            args.band,
        );
        print!("{}", mode_table(&modes));
        return Ok(());
    }

    let out = match &args.out {
        Some(o) => o.clone(),
        None => return usage(anyhow!("--out is required when building a model")),
    };
    let (bundle, inputs) = match (&args.builtin, &args.network) {
        (Some(name), None) => {
            let sys = builtin_system::<f64>(name).validation()?;
            let bundle = ModelBundle::from_network(
                &sys.network,
                &sys.op,
                args.dt,
                Some(sys.sg_areas.clone()),
                Some(sys.vsc_areas.clone()),
            )
            .validation()?;
            (bundle, vec![])
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .validation()?;
            let (net, op) = netmodel::json::network_from_json(&text).validation()?;
            let residual = netmodel::operating_residual(&net, &op).validation()?;
            if residual > args.allow_residual {
                return Err(CliError {
                    code: 3,
                    source: anyhow!(
                        "operating point residual {residual:.3e} exceeds --allow-residual {:.3e}",
                        args.allow_residual
                    ),
                });
            }
            (
                ModelBundle::from_network(&net, &op, args.dt, None, None).validation()?,
                vec![path.clone()],
            )
        }
        _ => return usage(anyhow!("exactly one of --builtin or --network is required")),
    };

    RunManifest::new(0, &inputs, std::slice::from_ref(&out))
        .validation()?
        .write(&manifest_path(&out))
        .validation()?;
    write_atomic(&out, bundle.to_json().validation()?.as_bytes()).validation()?;

    let sys = bundle.system().validation()?;
    println!("wrote {}", out.display());
    println!(
        "model: {} machines, {} converters, state dim {}, dt {} s",
        sys.n_sg,
        sys.n_vsc,
        sys.state_dim(),
        sys.dt
    );
    let modes = closed_loop_modes(
        &sys,
        &nalgebra::DMatrix::zeros(sys.input_dim(), sys.state_dim()),
        args.band,
    );
    print!("{}", mode_table(&modes));
    Ok(())
}

/// The manifest sits next to single-file outputs, or inside output dirs.
fn manifest_path(out: &Path) -> PathBuf {
    if out.extension().is_some() {
        out.with_extension("manifest.json")
    } else {
        out.join("manifest.json")
    }
}

/// Noise model from the two CLI intensity knobs.
fn noise_from_flags(
    state_dim: usize,
    n_sg: usize,
    noise_std: f64,
    noise_omega_std: f64,
) -> CliResult<NoiseModel<f64>> {
    if noise_std != 0.0 && noise_omega_std != 0.0 {
        return usage(anyhow!("--noise-std and --noise-omega-std are mutually exclusive"));
    }
    if noise_omega_std != 0.0 {
        let mut cov = nalgebra::DMatrix::zeros(state_dim, state_dim);
        for i in 0..n_sg {
            cov[(4 * i + 1, 4 * i + 1)] = noise_omega_std * noise_omega_std;
        }
        Ok(NoiseModel::Gaussian {
            mean: nalgebra::DVector::zeros(state_dim),
            cov,
        })
    } else {
        Ok(NoiseModel::isotropic(state_dim, noise_std))
    }
}

struct CommSetup {
    graph: wadc_core::comms::CommGraph,
    max_delay_s: f64,
    loss_p: f64,
    channel_seed: u64,
}

fn comm_setup(
    bundle: &ModelBundle,
    comm: &Option<PathBuf>,
    sys: &DiscreteSystemF64,
) -> CliResult<CommSetup> {
    match comm {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .validation()?;
            let cfg = CommConfig::from_json(&text).validation()?;
            let graph = cfg.build_graph(sys.n_sg, sys.n_vsc).validation()?;
            Ok(CommSetup {
                graph,
                max_delay_s: cfg.max_delay_s,
                loss_p: cfg.loss_p,
                channel_seed: cfg.seed,
            })
        }
        None => match (&bundle.sg_areas, &bundle.vsc_areas) {
            (Some(sg), Some(vsc)) => Ok(CommSetup {
                graph: wadc_core::comms::CommGraph::from_areas(sg, vsc, None),
                max_delay_s: 0.0,
                loss_p: 0.0,
                channel_seed: 0,
            }),
            _ => usage(anyhow!(
                "--comm is required for models without a builtin area assignment"
            )),
        },
    }
}

fn load_checkpoint(path: &Path, sys: &DiscreteSystemF64) -> CliResult<GainMatrixF64> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read checkpoint {}", path.display()))
        .validation()?;
    let (gain, _) = checkpoint_from_json(&text).validation()?;
    if gain.rows() != sys.input_dim() || gain.cols() != sys.state_dim() {
        return Err(CliError {
            code: 3,
            source: anyhow!(
                "checkpoint gain is {}x{} but the model needs {}x{}",
                gain.rows(),
                gain.cols(),
                sys.input_dim(),
                sys.state_dim()
            ),
        });
    }
    Ok(gain)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let file_cfg: TrainFileConfig = match &args.config {
        None => TrainFileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .validation()?;
            serde_json::from_str(&text)
                .with_context(|| format!("bad train config {}", path.display()))
                .validation()?
        }
    };
    // Flags win over the config file; hard defaults last.
    let eta = args.eta.or(file_cfg.eta).unwrap_or(1e-4);
    let iters = args.iters.or(file_cfg.iters).unwrap_or(15_000);
    let zopg_samples = args.zopg_samples.or(file_cfg.zopg_samples).unwrap_or(100);
    let radius = args.radius.or(file_cfg.radius).unwrap_or(0.1);
    let risk_c = args.risk_c.or(file_cfg.risk_c).unwrap_or(0.5);
    let lambda_max = args.lambda_max.or(file_cfg.lambda_max).unwrap_or(100.0);
    let seed = args.seed.or(file_cfg.seed).unwrap_or(0);
    let risk_on = match args.risk.or(file_cfg.risk).as_deref() {
        None | Some("on") => true,
        Some("off") => false,
        Some(other) => return usage(anyhow!("--risk must be on|off, got '{other}'")),
    };
    let horizon = args.horizon.or(file_cfg.horizon).unwrap_or(2000);
    let impulse = args.impulse.or(file_cfg.impulse).unwrap_or(0.05);
    let noise_std = args.noise_std.or(file_cfg.noise_std).unwrap_or(0.0);
    let noise_omega_std = args
        .noise_omega_std
        .or(file_cfg.noise_omega_std)
        .unwrap_or(0.0);
    let rollouts_per_eval = args
        .rollouts_per_eval
        .or(file_cfg.rollouts_per_eval)
        .unwrap_or(1);
    let refresh = args.refresh.or(file_cfg.refresh).unwrap_or(0);
    let grad_clip = args
        .grad_clip
        .or(file_cfg.grad_clip)
        .unwrap_or(wadc_core::sgdmax::GRADIENT_NORM_CLIP);

    let bundle = ModelBundle::load(&args.model).validation()?;
    let sys = bundle.system().validation()?;
    let comm = comm_setup(&bundle, &args.comm, &sys)?;
    let mask = mask_from_graph(&comm.graph).validation()?;
    let weights = CostWeights::identity(sys.state_dim(), sys.input_dim());
    let noise = noise_from_flags(sys.state_dim(), sys.n_sg, noise_std, noise_omega_std)?;
    let moments = compute_moments(&noise, weights.q(), risk_c).validation()?;
    let risk = RiskConfig::new(risk_c, if risk_on { lambda_max } else { 0.0 }).validation()?;

    let template = ScenarioConfig {
        horizon,
        impulse_scale: impulse,
        delays: sample_delays(sys.n_sg, comm.max_delay_s, sys.dt, comm.channel_seed),
        loss: PacketLossModel {
            p: comm.loss_p,
            seed: comm.channel_seed,
            per_link: false,
        },
        noise,
        seed: 0,
    };

    let init = initial_gain(&sys, &mask, &weights).runtime()?;
    let mut evaluator = MonteCarloEvaluator::new(
        sys.clone(),
        weights,
        moments.clone(),
        risk,
        template,
        rollouts_per_eval,
    )
    .validation()?;

    let mut cfg = TrainConfig::new(eta, iters, seed, init);
    cfg.moment_refresh_period = if refresh == 0 { None } else { Some(refresh) };
    cfg.gradient_clip = grad_clip;
    let zopg = ZopgConfig {
        radius,
        samples: zopg_samples,
    };

    let checkpoint_path = args.out.join("checkpoint.json");
    let trainlog_path = args.out.join("trainlog.csv");
    let moments_path = args.out.join("moments.json");
    let mut inputs = vec![args.model.clone()];
    if let Some(c) = &args.comm {
        inputs.push(c.clone());
    }
    if let Some(c) = &args.config {
        inputs.push(c.clone());
    }
    std::fs::create_dir_all(&args.out).validation()?;
    RunManifest::new(
        seed,
        &inputs,
        &[
            checkpoint_path.clone(),
            trainlog_path.clone(),
            moments_path.clone(),
        ],
    )
    .validation()?
    .write(&args.out.join("manifest.json"))
    .validation()?;

    let log = train(&mut evaluator, &cfg, &zopg).runtime()?;

    write_atomic(
        &moments_path,
        moments_to_json(evaluator.moments()).validation()?.as_bytes(),
    )
    .validation()?;
    let checkpoint =
        checkpoint_to_json(&log.final_gain, iters, seed, Some("moments.json".to_string()))
            .validation()?;
    write_atomic(&checkpoint_path, checkpoint.as_bytes()).validation()?;
    let mut csv = Vec::new();
    log.to_csv(&mut csv).validation()?;
    write_atomic(&trainlog_path, &csv).validation()?;

    if let Some(last) = log.records.last() {
        println!(
            "trained {iters} iterations: phi={:.6} rc_est={:.6} lambda_frac={:.2}",
            last.phi, last.rc_est, last.lambda_frac
        );
    }
    println!("wrote {}", checkpoint_path.display());
    Ok(())
}

/// Shared sweep context assembly for `eval` and `sweep`.
#[allow(clippy::too_many_arguments)]
fn sweep_context(
    bundle: &ModelBundle,
    sys: &DiscreteSystemF64,
    horizon: usize,
    impulse: f64,
    noise_std: f64,
    noise_omega_std: f64,
    risk_c: f64,
    base_max_delay_s: f64,
    base_loss_p: f64,
    msfd_sg: usize,
) -> CliResult<SweepContext<f64>> {
    let weights = CostWeights::identity(sys.state_dim(), sys.input_dim());
    let noise = noise_from_flags(sys.state_dim(), sys.n_sg, noise_std, noise_omega_std)?;
    let moments = compute_moments(&noise, weights.q(), risk_c).validation()?;
    if msfd_sg >= sys.n_sg.max(1) {
        return usage(anyhow!(
            "--msfd-sg {msfd_sg} out of range (model has {} machines)",
            sys.n_sg
        ));
    }
    Ok(SweepContext {
        sys: sys.clone(),
        weights,
        moments,
        horizon,
        impulse_scale: impulse,
        noise,
        base_max_delay_s,
        base_loss_p,
        per_link_loss: false,
        msfd_sg,
        model_source: bundle.model_source().validation()?,
    })
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let bundle = ModelBundle::load(&args.model).validation()?;
    let sys = bundle.system().validation()?;
    let comm = comm_setup(&bundle, &args.comm, &sys)?;
    let gain = load_checkpoint(&args.checkpoint, &sys)?;
    let max_delay = args.max_delay.unwrap_or(comm.max_delay_s);
    let loss_p = args.loss_p.unwrap_or(comm.loss_p);
    let ctx = sweep_context(
        &bundle,
        &sys,
        args.horizon,
        args.impulse,
        args.noise_std,
        args.noise_omega_std,
        args.risk_c,
        max_delay,
        loss_p,
        args.msfd_sg,
    )?;

    let results_path = args.out.join("results.csv");
    let summary_path = args.out.join("summary.json");
    let mut inputs = vec![args.model.clone(), args.checkpoint.clone()];
    if let Some(c) = &args.comm {
        inputs.push(c.clone());
    }
    std::fs::create_dir_all(&args.out).validation()?;
    RunManifest::new(args.seed, &inputs, &[results_path.clone(), summary_path.clone()])
        .validation()?
        .write(&args.out.join("manifest.json"))
        .validation()?;

    let design_name = args
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "design".into());
    let cells = scenario_sweep(
        &ctx,
        &[(design_name, gain)],
        SweepAxis::Delay,
        &[max_delay],
        args.scenarios,
        args.seed,
    )
    .runtime()?;

    let mut csv = Vec::new();
    sweep_to_csv(&cells, &mut csv).validation()?;
    write_atomic(&results_path, &csv).validation()?;
    write_atomic(
        &summary_path,
        sweep_summary_json(&cells).validation()?.as_bytes(),
    )
    .validation()?;

    let s = cells[0].stats.summaries().validation()?;
    println!(
        "{} scenarios: objective mean {:.6} (min {:.6}, max {:.6}), msfd mean {:.6e}",
        args.scenarios, s.objective.mean, s.objective.min, s.objective.max, s.msfd.mean
    );
    println!("wrote {}", results_path.display());
    Ok(())
}

fn cmd_modes(args: ModesArgs) -> CliResult<()> {
    let bundle = ModelBundle::load(&args.model).validation()?;
    let sys = bundle.system().validation()?;
    let k = match &args.checkpoint {
        Some(path) => load_checkpoint(path, &sys)?.matrix().clone(),
        None => nalgebra::DMatrix::zeros(sys.input_dim(), sys.state_dim()),
    };
    let modes = closed_loop_modes(&sys, &k, args.band);
    print!("{}", mode_table(&modes));
    if let Some(out) = &args.out {
        let mut inputs = vec![args.model.clone()];
        if let Some(c) = &args.checkpoint {
            inputs.push(c.clone());
        }
        RunManifest::new(0, &inputs, std::slice::from_ref(out))
            .validation()?
            .write(&manifest_path(out))
            .validation()?;
        write_atomic(out, modes_csv(&modes).as_bytes()).validation()?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    if args.levels.is_empty() {
        return usage(anyhow!("--levels must list at least one level"));
    }
    if args.designs.is_empty() {
        return usage(anyhow!("--designs must list at least one checkpoint"));
    }
    let axis: SweepAxis = args.axis.parse().map_err(|e: String| CliError {
        code: 2,
        source: anyhow!(e),
    })?;

    let bundle = ModelBundle::load(&args.model).validation()?;
    let sys = bundle.system().validation()?;
    let comm = comm_setup(&bundle, &args.comm, &sys)?;

    let names: Vec<String> = if args.names.is_empty() {
        args.designs
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "design".into())
            })
            .collect()
    } else if args.names.len() == args.designs.len() {
        args.names.clone()
    } else {
        return usage(anyhow!("--names must match --designs in length"));
    };

    let mut designs = Vec::new();
    for (name, path) in names.iter().zip(&args.designs) {
        designs.push((name.clone(), load_checkpoint(path, &sys)?));
    }

    let ctx = sweep_context(
        &bundle,
        &sys,
        args.horizon,
        args.impulse,
        args.noise_std,
        args.noise_omega_std,
        args.risk_c,
        args.max_delay.unwrap_or(comm.max_delay_s),
        args.loss_p.unwrap_or(comm.loss_p),
        args.msfd_sg,
    )?;

    let sweep_path = args.out.join("sweep.csv");
    let summary_path = args.out.join("summary.json");
    let mut inputs = vec![args.model.clone()];
    inputs.extend(args.designs.iter().cloned());
    if let Some(c) = &args.comm {
        inputs.push(c.clone());
    }
    std::fs::create_dir_all(&args.out).validation()?;
    RunManifest::new(args.seed, &inputs, &[sweep_path.clone(), summary_path.clone()])
        .validation()?
        .write(&args.out.join("manifest.json"))
        .validation()?;

    let cells = scenario_sweep(&ctx, &designs, axis, &args.levels, args.scenarios, args.seed)
        .runtime()?;

    let excluded: usize = cells.iter().map(|c| c.excluded).sum();
    if excluded > 0 {
        eprintln!("note: {excluded} scenario cells excluded (model rebuild failures)");
    }
    let mut csv = Vec::new();
    sweep_to_csv(&cells, &mut csv).validation()?;
    write_atomic(&sweep_path, &csv).validation()?;
    write_atomic(
        &summary_path,
        sweep_summary_json(&cells).validation()?.as_bytes(),
    )
    .validation()?;
    println!("wrote {} ({} cells)", sweep_path.display(), cells.len());
    Ok(())
}
