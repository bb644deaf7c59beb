//! Command-line front end.
//!
//! Exit status is 0 on success, 1 for bad flags or configuration and 2 for
//! failures while running (missing files, data out of range, numeric trouble).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::consensus::{comm_bits, spread, NeighborGraph, Protocol};
use crate::data::{extract_window, parse_trace_csv, resample};
use crate::env::{ObsMode, PlatoonEnv, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{AgentNet, NetShape};
use crate::train::{self, EvalStats, LogRow, ProtocolRun, TrainLog};
use crate::vehicle::{fit_energy_poly, rmse_against_physics, GridSpec, POLY_ORDER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const SWEEP_SIZES: [usize; 4] = [2, 4, 6, 8];

#[derive(Debug, Parser)]
#[command(name = "cacc", version, about = "Multi-agent cruise-control training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub protocol: Option<Protocol>,
    /// Total training environment steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub n_vehicles: Option<usize>,
    #[arg(long, global = true)]
    pub obs_mode: Option<ObsMode>,
    /// Overrides the config file and `CACC_OUTPUT_DIR`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the polynomial energy surrogate and write its coefficients.
    FitEnergy {
        /// Grid as `<speed samples>x<accel samples>`.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<GridSpec>,
    },
    /// Train one run per seed, writing logs and checkpoints.
    Train,
    /// Greedy evaluation of saved agents over many initial conditions.
    Eval {
        /// Directory holding `agent_<i>.ckpt`; defaults to the first seed's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        eval_seeds: Option<usize>,
    },
    /// Drive the platoon behind a recorded leader velocity trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Half-open window `t0:t1` in seconds.
        #[arg(long, value_parser = parse_window)]
        window: (f64, f64),
        #[arg(long, default_value = "v1")]
        leader_col: String,
        /// Agents to load; without it every follower holds a fixed action.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        action: usize,
    },
    /// Spread contraction and bit cost of the consensus protocols.
    ConsensusBench {
        #[arg(long, default_value_t = 500)]
        rounds: usize,
        #[arg(long, default_value_t = 64)]
        params: usize,
    },
    /// Train and evaluate platoons of 2, 4, 6 and 8 vehicles.
    SweepSize,
    /// Train and evaluate one run per consensus protocol.
    Compare {
        #[arg(long, value_delimiter = ',')]
        protocols: Option<Vec<Protocol>>,
    },
}

fn parse_grid(s: &str) -> std::result::Result<GridSpec, String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok(GridSpec {
        v_samples: parse(a)?,
        u_samples: parse(b)?,
    })
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected t0:t1, got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    let (t0, t1) = (parse(a)?, parse(b)?);
    if !(t0 < t1) {
        return Err(format!("window start {t0} is not before end {t1}"));
    }
    Ok((t0, t1))
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// Loads the config and applies flag overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::config(path.display().to_string(), source.to_string()),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = common.protocol {
        cfg.train.consensus.protocol = p;
    }
    if let Some(steps) = common.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(n) = common.n_vehicles {
        cfg.scenario.n_vehicles = n;
    }
    if let Some(mode) = common.obs_mode {
        cfg.train.obs_mode = mode;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(&cli.common)?;
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match &cli.command {
        Command::FitEnergy { grid } => cmd_fit_energy(&cfg, grid.unwrap_or(cfg.energy.grid), &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Eval { checkpoint, eval_seeds } => cmd_eval(&cfg, &out, checkpoint.as_deref(), *eval_seeds),
        Command::Replay {
            trace,
            window,
            leader_col,
            checkpoint,
            action,
        } => cmd_replay(&cfg, &out, trace, *window, leader_col, checkpoint.as_deref(), *action),
        Command::ConsensusBench { rounds, params } => cmd_consensus_bench(&cfg, &out, *rounds, *params),
        Command::SweepSize => cmd_sweep_size(&cfg, &out),
        Command::Compare { protocols } => {
            let protocols = protocols.clone().unwrap_or_else(|| Protocol::ALL.to_vec());
            cmd_compare(&cfg, &out, &protocols)
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn cmd_fit_energy(cfg: &RunConfig, grid: GridSpec, out: &Path) -> Result<String> {
    let fit = fit_energy_poly(&cfg.vehicle, grid)?;
    let held_out = rmse_against_physics(&fit.poly, &cfg.vehicle, &grid.offset_points());
    let path = out.join("energy_poly.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["k", "j", "p_kj"])?;
    for k in 0..POLY_ORDER {
        for j in 0..POLY_ORDER {
            w.write_record([k.to_string(), j.to_string(), format!("{:e}", fit.poly.coeffs[k][j])])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(format!(
        "rmse_kw={:.4} held_out_rmse_kw={held_out:.4} grid={}x{} -> {}",
        fit.rmse_kw,
        grid.v_samples,
        grid.u_samples,
        path.display()
    ))
}

fn checkpoint_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("seed{seed}"))
}

fn save_nets(dir: &Path, nets: &[AgentNet]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, net) in nets.iter().enumerate() {
        net.save_checkpoint(&dir.join(format!("agent_{i}.ckpt")))?;
    }
    Ok(())
}

pub fn load_nets(dir: &Path, n_agents: usize) -> Result<Vec<AgentNet>> {
    (0..n_agents)
        .map(|i| AgentNet::load_checkpoint(&dir.join(format!("agent_{i}.ckpt"))))
        .collect()
}

type SeedRun = (u64, Vec<AgentNet>, TrainLog, Vec<(usize, Vec<AgentNet>)>);

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let exp = cfg.experiment()?;
    let runs: Vec<Result<SeedRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let exp = &exp;
                s.spawn(move || {
                    let mut snapshots = Vec::new();
                    let (nets, log) = train::train_with_hook(&cfg.train, exp, seed, |episode, nets| {
                        snapshots.push((episode, nets.to_vec()));
                        Ok(())
                    })?;
                    Ok((seed, nets, log, snapshots))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let mut lines = Vec::new();
    for run in runs {
        let (seed, nets, log, snapshots) = run?;
        log.write_csv(&out.join(format!("train_log_seed{seed}.csv")))?;
        let dir = checkpoint_dir(out, seed);
        for (episode, snap) in &snapshots {
            save_nets(&dir.join(format!("episode_{episode}")), snap)?;
        }
        save_nets(&dir, &nets)?;
        let (head, tail) = log.head_tail_means(0.1);
        lines.push(format!(
            "seed {seed}: {} episodes, reward {head:.1} -> {tail:.1}, comm bits {}",
            log.rows.len(),
            log.total_bits()
        ));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, eval_seeds: Option<usize>) -> Result<String> {
    let exp = cfg.experiment()?;
    let dir = checkpoint.map_or_else(|| checkpoint_dir(out, cfg.seeds[0]), Path::to_path_buf);
    let env = exp.env(cfg.train.obs_mode)?;
    let nets = load_nets(&dir, env.n_agents())?;
    let n = eval_seeds.unwrap_or(cfg.train.eval_seeds);
    let report = train::evaluate(&nets, &exp, cfg.train.obs_mode, n)?;
    let path = out.join("eval_report.csv");
    report.write_csv(&path)?;
    let a = report.aggregate;
    Ok(format!(
        "{n} trials: ivs {:.2} m, velocity {:.2} m/s, |accel| {:.3} m/s2, power {:.2} kW, collisions {} -> {}",
        a.ivs_mean,
        a.velocity_mean,
        a.accel_abs_mean,
        a.power_mean_kw,
        a.collisions,
        path.display()
    ))
}

/// Nets whose greedy choice is always `action`.
pub fn constant_policy_nets(obs_mode: ObsMode, n_agents: usize, action: usize) -> Result<Vec<AgentNet>> {
    if action >= N_ACTIONS {
        return Err(Error::config("--action", format!("must be below {N_ACTIONS}")));
    }
    let mut net = AgentNet::zeros(NetShape::new(obs_mode.obs_dim(), 1, N_ACTIONS));
    net.actor_head.biases[action] = 1.0;
    Ok(vec![net; n_agents])
}

pub const REPLAY_HEADER: [&str; 12] = [
    "leader_col",
    "t0_s",
    "t1_s",
    "samples",
    "steps",
    "ivs_mean_m",
    "ivs_std_m",
    "velocity_mean_mps",
    "accel_abs_mean_mps2",
    "power_mean_kw",
    "energy_kwh",
    "collisions",
];

#[allow(clippy::too_many_arguments)]
pub fn cmd_replay(
    cfg: &RunConfig,
    out: &Path,
    trace: &Path,
    (t0, t1): (f64, f64),
    leader_col: &str,
    checkpoint: Option<&Path>,
    action: usize,
) -> Result<String> {
    let table = parse_trace_csv(trace)?;
    let uniform = resample(&table, cfg.scenario.dt)?;
    let profile = extract_window(&uniform, leader_col, t0, t1, cfg.scenario.dt)?;
    profile.write_csv(&out.join("leader_profile.csv"))?;

    let mut scenario = cfg.scenario.clone();
    scenario.episode_steps = profile.velocities.len();
    let exp = cfg.experiment()?;
    let mut env = PlatoonEnv::with_trace(scenario, exp.reward, exp.ovm, exp.energy, cfg.train.obs_mode, &profile)?;
    let nets = match checkpoint {
        Some(dir) => load_nets(dir, env.n_agents())?,
        None => constant_policy_nets(cfg.train.obs_mode, env.n_agents(), action)?,
    };
    let seed = cfg.scenario.seed;
    let (stats, log) = train::rollout(&nets, &mut env, seed)?;
    log.write_csv(&out.join("rollout.csv"))?;

    let steps = log.rows().last().map_or(0, |r| r.step + 1);
    let path = out.join("replay_summary.csv");
    write_replay_summary(&path, leader_col, t0, t1, profile.velocities.len(), steps, &stats)?;
    Ok(format!(
        "replayed {leader_col} over [{t0}, {t1}) s: {steps} steps, ivs {:.2} m, power {:.2} kW, collisions {} -> {}",
        stats.ivs_mean,
        stats.power_mean_kw,
        stats.collisions,
        path.display()
    ))
}

fn write_replay_summary(path: &Path, col: &str, t0: f64, t1: f64, samples: usize, steps: usize, s: &EvalStats) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(REPLAY_HEADER)?;
    w.write_record([
        col.to_string(),
        format!("{t0}"),
        format!("{t1}"),
        samples.to_string(),
        steps.to_string(),
        format!("{:.6}", s.ivs_mean),
        format!("{:.6}", s.ivs_std),
        format!("{:.6}", s.velocity_mean),
        format!("{:.6}", s.accel_abs_mean),
        format!("{:.6}", s.power_mean_kw),
        format!("{:.6}", s.energy_kwh),
        s.collisions.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub const BENCH_HEADER: [&str; 4] = ["round", "protocol", "spread", "bits_cumulative"];

pub fn cmd_consensus_bench(cfg: &RunConfig, out: &Path, rounds: usize, params: usize) -> Result<String> {
    let n = cfg.scenario.n_vehicles;
    let graph = NeighborGraph::line(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let init: Vec<Vec<f64>> = (0..n).map(|_| (0..params).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();

    let path = out.join("consensus_bench.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(BENCH_HEADER)?;
    let mut finals = Vec::new();
    for protocol in [Protocol::Bdc, Protocol::Wac, Protocol::Dcea] {
        let mut cc = cfg.train.consensus;
        cc.protocol = protocol;
        cc.validate(&graph)?;
        let per_round = comm_bits(protocol, params, &graph);
        let mut weights = init.clone();
        for round in 0..=rounds {
            if round > 0 {
                cc.apply(&mut weights, &graph)?;
            }
            w.write_record([
                round.to_string(),
                protocol.to_string(),
                format!("{:e}", spread(&weights)),
                (per_round * round as u64).to_string(),
            ])?;
        }
        finals.push(format!("{protocol} {:.3e}", spread(&weights)));
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(format!(
        "spread after {rounds} rounds: {} -> {}",
        finals.join(", "),
        path.display()
    ))
}

pub const SWEEP_HEADER: [&str; 9] = [
    "n_vehicles",
    "episodes",
    "first_decile_reward",
    "last_decile_reward",
    "eval_ivs_mean_m",
    "eval_velocity_mean_mps",
    "eval_accel_abs_mean_mps2",
    "eval_power_mean_kw",
    "eval_collisions",
];

pub fn cmd_sweep_size(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seed = cfg.seeds[0];
    let base = cfg.experiment()?;
    let results: Vec<Result<(usize, TrainLog, EvalStats)>> = std::thread::scope(|s| {
        let handles: Vec<_> = SWEEP_SIZES
            .iter()
            .map(|&n| {
                let mut exp = base.clone();
                exp.scenario.n_vehicles = n;
                s.spawn(move || {
                    let (nets, log) = train::train(&cfg.train, &exp, seed)?;
                    let report = train::evaluate(&nets, &exp, cfg.train.obs_mode, cfg.train.eval_seeds)?;
                    Ok((n, log, report.aggregate))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let path = out.join("sweep_size.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in results {
        let (n, log, a) = r?;
        let (head, tail) = log.head_tail_means(0.1);
        w.write_record([
            n.to_string(),
            log.rows.len().to_string(),
            format!("{head:.6}"),
            format!("{tail:.6}"),
            format!("{:.6}", a.ivs_mean),
            format!("{:.6}", a.velocity_mean),
            format!("{:.6}", a.accel_abs_mean),
            format!("{:.6}", a.power_mean_kw),
            a.collisions.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(format!("swept sizes {SWEEP_SIZES:?} -> {}", path.display()))
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path, protocols: &[Protocol]) -> Result<String> {
    let exp = cfg.experiment()?;
    let seed = cfg.seeds[0];
    let runs: Vec<ProtocolRun> = train::compare_protocols(&cfg.train, &exp, protocols, seed)?;
    for r in &runs {
        r.log.write_csv(&out.join(format!("train_log_{}.csv", r.protocol)))?;
    }
    let path = out.join("protocol_comparison.csv");
    train::write_comparison_csv(&runs, &path)?;
    let bits: Vec<String> = runs
        .iter()
        .map(|r| format!("{} {}", r.protocol, r.log.rows.last().map_or(0, |l: &LogRow| l.comm_bits_cum)))
        .collect();
    Ok(format!("compared {} protocols (bits: {}) -> {}", runs.len(), bits.join(", "), path.display()))
}
