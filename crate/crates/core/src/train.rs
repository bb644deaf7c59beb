//! Decentralized advantage actor-critic training and greedy evaluation.
//!
//! Every agent owns an [`AgentNet`] and learns from its own local reward.
//! One episode is one batch: after it ends each agent computes discounted
//! returns, takes one actor step and one critic step, and then the platoon
//! runs a consensus round over the flattened parameters.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{comm_bits, qsgd_step, ConsensusConfig, EfState, NeighborGraph, Protocol};
use crate::env::{ObsMode, PlatoonEnv, RewardWeights, RolloutLog, ScenarioConfig, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{Adam, AgentNet, Carry, GradBundle, LossGrad, NetShape, StepRecord, DEFAULT_HIDDEN};
use crate::ovm::OvmParams;
use crate::vehicle::{EnergyModel, MIN_SPACING_M};

/// Evaluation trial `k` resets the platoon with seed `EVAL_SEED_BASE + k`.
pub const EVAL_SEED_BASE: u64 = 1_000_000;

const STREAM_INIT: u64 = 0;
const STREAM_EPISODES: u64 = 1;
const STREAM_ACTIONS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
    /// Ternary steps with error feedback, dead zone from `consensus.quantizer_threshold`.
    Qsgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Environment steps in the whole run.
    pub total_steps: usize,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coeff: f64,
    /// Norm bound applied to the actor and critic gradients separately.
    pub grad_clip: f64,
    /// Steps per update segment; 0 means one update per episode.
    pub batch_steps: usize,
    pub obs_mode: ObsMode,
    pub consensus: ConsensusConfig,
    pub eval_seeds: usize,
    /// Episodes between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub hidden: usize,
    /// Multiplies rewards before they enter the losses (logs stay unscaled).
    pub reward_scale: f64,
    /// Start every agent from the same parameters.
    pub shared_init: bool,
    pub optimizer: Optimizer,
    /// Fill the `wall_ms` log column; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 600_000,
            gamma: 0.99,
            actor_lr: 5e-4,
            critic_lr: 2.5e-4,
            entropy_coeff: 0.01,
            grad_clip: 5.0,
            batch_steps: 0,
            obs_mode: ObsMode::Ia2c,
            consensus: ConsensusConfig::default(),
            eval_seeds: 50,
            checkpoint_every: 0,
            hidden: DEFAULT_HIDDEN,
            reward_scale: 0.001,
            shared_init: true,
            optimizer: Optimizer::Sgd,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a desktop run: fewer steps, more frequent updates.
    pub fn desk() -> Self {
        Self {
            total_steps: 100_000,
            eval_seeds: 20,
            batch_steps: 60,
            optimizer: Optimizer::Adam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("train.gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        for (name, lr) in [("train.actor_lr", self.actor_lr), ("train.critic_lr", self.critic_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(name, format!("must be > 0, got {lr}")));
            }
        }
        if !(self.entropy_coeff >= 0.0) {
            return Err(Error::config("train.entropy_coeff", "must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be > 0"));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::config("train.reward_scale", "must be > 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("train.hidden", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to build a platoon environment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: ScenarioConfig,
    pub reward: RewardWeights,
    pub ovm: OvmParams,
    pub energy: EnergyModel,
}

impl Experiment {
    pub fn env(&self, obs_mode: ObsMode) -> Result<PlatoonEnv> {
        PlatoonEnv::new(self.scenario.clone(), self.reward, self.ovm, self.energy, obs_mode)
    }
}

/// One agent's episode.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }
}

/// `G_t = r_t + γ·G_{t+1}`, seeded with `bootstrap` past the last step.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (g, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

pub fn advantages(returns: &[f64], values: &[f64]) -> Vec<f64> {
    returns.iter().zip(values).map(|(g, v)| g - v).collect()
}

fn entropy(policy: &[f64]) -> f64 {
    -policy.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct A2cGrads {
    pub actor: Vec<LossGrad>,
    pub critic: Vec<LossGrad>,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// Upstream gradients of `−Σ A·log π(a) − c·Σ H(π)` and `Σ (G − V)²`.
///
/// `bootstrap` is the value estimate after the last step, 0 when it ended
/// the episode.
pub fn a2c_loss_grads(traj: &Trajectory, gamma: f64, entropy_coeff: f64, reward_scale: f64, bootstrap: f64) -> A2cGrads {
    let scaled: Vec<f64> = traj.rewards.iter().map(|r| r * reward_scale).collect();
    let returns = discounted_returns(&scaled, gamma, bootstrap);
    let adv = advantages(&returns, &traj.values());
    let mut actor = Vec::with_capacity(traj.len());
    let mut critic = Vec::with_capacity(traj.len());
    let (mut actor_loss, mut critic_loss) = (0.0, 0.0);
    for (t, rec) in traj.records.iter().enumerate() {
        let a = traj.actions[t];
        let h = entropy(&rec.policy);
        actor_loss += -adv[t] * rec.policy[a].ln() - entropy_coeff * h;
        let d_logits = rec
            .policy
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let onehot = if k == a { 1.0 } else { 0.0 };
                let log_p = if p > 0.0 { p.ln() } else { 0.0 };
                adv[t] * (p - onehot) + entropy_coeff * p * (log_p + h)
            })
            .collect();
        actor.push(LossGrad { d_logits, d_value: 0.0 });
        critic_loss += (returns[t] - rec.value).powi(2);
        critic.push(LossGrad {
            d_logits: vec![0.0; rec.policy.len()],
            d_value: 2.0 * (rec.value - returns[t]),
        });
    }
    A2cGrads {
        actor,
        critic,
        actor_loss,
        critic_loss,
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_action<R: Rng + ?Sized>(policy: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in policy.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    policy.len() - 1
}

/// Argmax with ties going to the lowest index.
pub fn greedy_action(policy: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in policy.iter().enumerate() {
        if p > policy[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    /// Cumulative environment steps.
    pub steps: usize,
    /// Across-agent mean of each agent's summed (unscaled) reward.
    pub mean_reward: f64,
    pub collisions: usize,
    pub comm_bits_cum: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 6] = ["episode", "steps", "mean_reward", "collisions", "comm_bits_cum", "wall_ms"];

    pub fn total_bits(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.comm_bits_cum)
    }

    /// Mean episode reward over the first and last `fraction` of episodes.
    pub fn head_tail_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.rows.len();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len().max(1) as f64;
        (mean(&self.rows[..k.min(n)]), mean(&self.rows[n.saturating_sub(k)..]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.episode.to_string(),
                r.steps.to_string(),
                format!("{:.6}", r.mean_reward),
                r.collisions.to_string(),
                r.comm_bits_cum.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

enum Opt {
    Sgd,
    Adam { actor: Box<Adam>, critic: Box<Adam> },
    Qsgd { actor: EfState, critic: EfState },
}

impl Opt {
    fn new(kind: Optimizer, shape: NetShape) -> Self {
        match kind {
            Optimizer::Sgd => Opt::Sgd,
            Optimizer::Adam => Opt::Adam {
                actor: Box::new(Adam::new(shape)),
                critic: Box::new(Adam::new(shape)),
            },
            Optimizer::Qsgd => Opt::Qsgd {
                actor: EfState::zeros(shape.n_params()),
                critic: EfState::zeros(shape.n_params()),
            },
        }
    }

    fn apply(&mut self, net: &mut AgentNet, actor: &GradBundle, critic: &GradBundle, cfg: &TrainConfig) -> Result<()> {
        match self {
            Opt::Sgd => {
                net.add_scaled(actor, -cfg.actor_lr);
                net.add_scaled(critic, -cfg.critic_lr);
            }
            Opt::Adam { actor: a, critic: c } => {
                a.step(net, actor, cfg.actor_lr);
                c.step(net, critic, cfg.critic_lr);
            }
            Opt::Qsgd { actor: ea, critic: ec } => {
                let tau = cfg.consensus.quantizer_threshold;
                let mut w = net.to_flat();
                qsgd_step(&mut w, &actor.to_flat(), ea, cfg.actor_lr, tau)?;
                qsgd_step(&mut w, &critic.to_flat(), ec, cfg.critic_lr, tau)?;
                net.set_flat(&w)?;
            }
        }
        Ok(())
    }
}

fn collisions_in(outcome: &crate::env::StepOutcome, first_agent: usize) -> usize {
    outcome.info[first_agent..]
        .iter()
        .filter(|i| i.spacing <= MIN_SPACING_M)
        .count()
}

/// Number of episodes and the step budget of each.
pub fn episode_budgets(total_steps: usize, episode_steps: usize) -> Vec<usize> {
    let full = total_steps / episode_steps;
    let rest = total_steps % episode_steps;
    let mut v = vec![episode_steps; full];
    if rest > 0 {
        v.push(rest);
    }
    v
}

pub fn init_nets(cfg: &TrainConfig, obs_mode: ObsMode, n_agents: usize, seed: u64) -> Vec<AgentNet> {
    let shape = NetShape::new(obs_mode.obs_dim(), cfg.hidden, N_ACTIONS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    if cfg.shared_init {
        vec![AgentNet::new(shape, &mut rng); n_agents]
    } else {
        (0..n_agents).map(|_| AgentNet::new(shape, &mut rng)).collect()
    }
}

pub fn train(cfg: &TrainConfig, exp: &Experiment, seed: u64) -> Result<(Vec<AgentNet>, TrainLog)> {
    train_with_hook(cfg, exp, seed, |_, _| Ok(()))
}

/// Like [`train`], calling `hook(episode, nets)` every `checkpoint_every` episodes.
pub fn train_with_hook<F>(cfg: &TrainConfig, exp: &Experiment, seed: u64, mut hook: F) -> Result<(Vec<AgentNet>, TrainLog)>
where
    F: FnMut(usize, &[AgentNet]) -> Result<()>,
{
    cfg.validate()?;
    let mut env = exp.env(cfg.obs_mode)?;
    let n_agents = env.n_agents();
    let graph = NeighborGraph::line(n_agents);
    cfg.consensus.validate(&graph)?;

    let mut nets = init_nets(cfg, cfg.obs_mode, n_agents, seed);
    let shape = nets[0].shape();
    let mut opts: Vec<Opt> = (0..n_agents).map(|_| Opt::new(cfg.optimizer, shape)).collect();
    let bits_per_round = comm_bits(cfg.consensus.protocol, shape.n_params(), &graph);

    let mut episode_rng = ChaCha8Rng::seed_from_u64(seed);
    episode_rng.set_stream(STREAM_EPISODES);
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed);
    action_rng.set_stream(STREAM_ACTIONS);

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut steps_done = 0;
    let mut bits = 0u64;

    for (episode, budget) in episode_budgets(cfg.total_steps, env.episode_len()).into_iter().enumerate() {
        let mut obs = env.reset_with_seed(episode_rng.gen());
        let mut carries: Vec<Carry> = nets.iter().map(AgentNet::initial_carry).collect();
        let mut trajs = vec![Trajectory::default(); n_agents];
        let mut totals = vec![0.0; n_agents];
        let mut collisions = 0;

        let segment = if cfg.batch_steps == 0 { budget } else { cfg.batch_steps };
        for t in 0..budget {
            let mut actions = Vec::with_capacity(n_agents);
            let mut policies = Vec::with_capacity(n_agents);
            for (i, net) in nets.iter().enumerate() {
                let (rec, carry) = net.forward(&obs[i].to_vec(), &carries[i])?;
                let a = sample_action(&rec.policy, &mut action_rng);
                actions.push(a);
                policies.push(policy_array(&rec.policy));
                carries[i] = carry;
                trajs[i].records.push(rec);
                trajs[i].actions.push(a);
            }
            env.set_fingerprints(&policies)?;
            let out = env.apply_actions(&actions)?;
            steps_done += 1;
            for (i, &r) in out.rewards.iter().enumerate() {
                trajs[i].rewards.push(r);
                trajs[i].dones.push(out.done);
                totals[i] += r;
            }
            collisions += collisions_in(&out, env.first_agent());
            obs = out.observations;
            let last = out.done || t + 1 == budget;
            if last || trajs[0].len() == segment {
                for i in 0..n_agents {
                    let bootstrap = if out.done {
                        0.0
                    } else {
                        nets[i].forward(&obs[i].to_vec(), &carries[i])?.0.value
                    };
                    update_agent(&mut nets[i], &mut opts[i], &trajs[i], bootstrap, cfg)
                        .map_err(|e| Error::Numeric(format!("episode {episode}, agent {i}: {e}")))?;
                    trajs[i] = Trajectory::default();
                }
            }
            if out.done {
                break;
            }
        }

        if cfg.consensus.protocol != Protocol::None && (episode + 1) % cfg.consensus.period == 0 {
            let mut flat: Vec<Vec<f64>> = nets.iter().map(AgentNet::to_flat).collect();
            cfg.consensus.apply(&mut flat, &graph)?;
            for (net, w) in nets.iter_mut().zip(&flat) {
                net.set_flat(w)?;
            }
            bits += bits_per_round;
        }

        log.rows.push(LogRow {
            episode,
            steps: steps_done,
            mean_reward: totals.iter().sum::<f64>() / n_agents as f64,
            collisions,
            comm_bits_cum: bits,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if cfg.checkpoint_every > 0 && (episode + 1) % cfg.checkpoint_every == 0 {
            hook(episode, &nets)?;
        }
    }
    Ok((nets, log))
}

fn update_agent(net: &mut AgentNet, opt: &mut Opt, traj: &Trajectory, bootstrap: f64, cfg: &TrainConfig) -> Result<()> {
    let g = a2c_loss_grads(traj, cfg.gamma, cfg.entropy_coeff, cfg.reward_scale, bootstrap);
    if !(g.actor_loss.is_finite() && g.critic_loss.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss: actor {}, critic {}",
            g.actor_loss, g.critic_loss
        )));
    }
    let mut actor = net.backward(&traj.records, &g.actor)?;
    let mut critic = net.backward(&traj.records, &g.critic)?;
    actor.clip_norm(cfg.grad_clip);
    critic.clip_norm(cfg.grad_clip);
    opt.apply(net, &actor, &critic, cfg)?;
    if !net.is_finite() {
        return Err(Error::Numeric("non-finite parameters after update".into()));
    }
    Ok(())
}

fn policy_array(p: &[f64]) -> [f64; N_ACTIONS] {
    let mut out = [0.0; N_ACTIONS];
    out.copy_from_slice(p);
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }

    fn std(&self) -> f64 {
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}

/// Statistics of one greedy evaluation episode, or of several pooled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub ivs_mean: f64,
    pub ivs_std: f64,
    pub velocity_mean: f64,
    pub velocity_std: f64,
    pub accel_abs_mean: f64,
    pub accel_abs_std: f64,
    /// Summed over vehicles, per step.
    pub power_mean_kw: f64,
    pub power_std_kw: f64,
    pub energy_kwh: f64,
    pub collisions: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct EvalAcc {
    ivs: Moments,
    velocity: Moments,
    accel: Moments,
    power: Moments,
    energy_kwh: f64,
    collisions: usize,
}

impl EvalAcc {
    fn stats(&self) -> EvalStats {
        EvalStats {
            ivs_mean: self.ivs.mean(),
            ivs_std: self.ivs.std(),
            velocity_mean: self.velocity.mean(),
            velocity_std: self.velocity.std(),
            accel_abs_mean: self.accel.mean(),
            accel_abs_std: self.accel.std(),
            power_mean_kw: self.power.mean(),
            power_std_kw: self.power.std(),
            energy_kwh: self.energy_kwh,
            collisions: self.collisions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(reset seed, stats)` per trial.
    pub trials: Vec<(u64, EvalStats)>,
    /// Samples pooled over trials; energy is the per-trial mean, collisions the sum.
    pub aggregate: EvalStats,
}

impl EvalReport {
    pub const HEADER: [&'static str; 11] = [
        "trial",
        "ivs_mean_m",
        "ivs_std_m",
        "velocity_mean_mps",
        "velocity_std_mps",
        "accel_abs_mean_mps2",
        "accel_abs_std_mps2",
        "power_mean_kw",
        "power_std_kw",
        "energy_kwh",
        "collisions",
    ];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::HEADER)?;
        let rows = self
            .trials
            .iter()
            .map(|(seed, s)| (seed.to_string(), s))
            .chain(std::iter::once(("aggregate".to_string(), &self.aggregate)));
        for (label, s) in rows {
            w.write_record(stats_record(label, s))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn stats_record(label: String, s: &EvalStats) -> Vec<String> {
    vec![
        label,
        format!("{:.6}", s.ivs_mean),
        format!("{:.6}", s.ivs_std),
        format!("{:.6}", s.velocity_mean),
        format!("{:.6}", s.velocity_std),
        format!("{:.6}", s.accel_abs_mean),
        format!("{:.6}", s.accel_abs_std),
        format!("{:.6}", s.power_mean_kw),
        format!("{:.6}", s.power_std_kw),
        format!("{:.6}", s.energy_kwh),
        s.collisions.to_string(),
    ]
}

fn check_nets(nets: &[AgentNet], env: &PlatoonEnv) -> Result<()> {
    if nets.len() != env.n_agents() {
        return Err(Error::Usage(format!("{} nets for {} agents", nets.len(), env.n_agents())));
    }
    if let Some(net) = nets.iter().find(|n| n.shape().obs_dim != env.obs_dim()) {
        return Err(Error::Usage(format!(
            "net expects {} inputs, environment emits {}",
            net.shape().obs_dim,
            env.obs_dim()
        )));
    }
    Ok(())
}

fn greedy_episode(nets: &[AgentNet], env: &mut PlatoonEnv, seed: u64, mut log: Option<&mut RolloutLog>) -> Result<EvalAcc> {
    let mut obs = env.reset_with_seed(seed);
    let mut carries: Vec<Carry> = nets.iter().map(AgentNet::initial_carry).collect();
    let first = env.first_agent();
    let dt = env.scenario().dt;
    let mut acc = EvalAcc::default();
    for step in 0..env.episode_len() {
        let mut actions = Vec::with_capacity(nets.len());
        let mut policies = Vec::with_capacity(nets.len());
        for (i, net) in nets.iter().enumerate() {
            let (rec, carry) = net.forward(&obs[i].to_vec(), &carries[i])?;
            actions.push(greedy_action(&rec.policy));
            policies.push(policy_array(&rec.policy));
            carries[i] = carry;
        }
        env.set_fingerprints(&policies)?;
        let out = env.apply_actions(&actions)?;
        if let Some(log) = log.as_deref_mut() {
            log.record(step, &out, first);
        }
        for inf in &out.info[first..] {
            acc.ivs.push(inf.spacing);
            acc.velocity.push(inf.velocity);
            acc.accel.push(inf.accel.abs());
        }
        let platoon_kw: f64 = out.info.iter().map(|i| i.power_kw).sum();
        acc.power.push(platoon_kw);
        acc.energy_kwh += platoon_kw * dt / 3600.0;
        acc.collisions += collisions_in(&out, first);
        obs = out.observations;
        if out.done {
            break;
        }
    }
    Ok(acc)
}

/// Greedy rollouts on `env`, one per reset seed.
pub fn evaluate_env(nets: &[AgentNet], env: &mut PlatoonEnv, seeds: &[u64]) -> Result<EvalReport> {
    check_nets(nets, env)?;
    let mut pooled = EvalAcc::default();
    let mut trials = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let acc = greedy_episode(nets, env, seed, None)?;
        pooled.ivs.merge(&acc.ivs);
        pooled.velocity.merge(&acc.velocity);
        pooled.accel.merge(&acc.accel);
        pooled.power.merge(&acc.power);
        pooled.energy_kwh += acc.energy_kwh;
        pooled.collisions += acc.collisions;
        trials.push((seed, acc.stats()));
    }
    let mut aggregate = pooled.stats();
    aggregate.energy_kwh /= seeds.len().max(1) as f64;
    Ok(EvalReport { trials, aggregate })
}

pub fn eval_seeds(scenario: &ScenarioConfig, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64).map(|k| scenario.seed + EVAL_SEED_BASE + k).collect()
}

pub fn evaluate(nets: &[AgentNet], exp: &Experiment, obs_mode: ObsMode, n_seeds: usize) -> Result<EvalReport> {
    let mut env = exp.env(obs_mode)?;
    evaluate_env(nets, &mut env, &eval_seeds(&exp.scenario, n_seeds))
}

/// One greedy episode with per-step rows.
pub fn rollout(nets: &[AgentNet], env: &mut PlatoonEnv, seed: u64) -> Result<(EvalStats, RolloutLog)> {
    check_nets(nets, env)?;
    let mut log = RolloutLog::default();
    let acc = greedy_episode(nets, env, seed, Some(&mut log))?;
    Ok((acc.stats(), log))
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub protocol: Protocol,
    pub log: TrainLog,
    pub eval: EvalReport,
}

/// Trains and evaluates one run per protocol, all from the same seed.
pub fn compare_protocols(base: &TrainConfig, exp: &Experiment, protocols: &[Protocol], seed: u64) -> Result<Vec<ProtocolRun>> {
    if protocols.is_empty() {
        return Err(Error::Usage("no protocols to compare".into()));
    }
    let results: Vec<Result<ProtocolRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = protocols
            .iter()
            .map(|&protocol| {
                s.spawn(move || {
                    let mut cfg = base.clone();
                    cfg.consensus.protocol = protocol;
                    let (nets, log) = train(&cfg, exp, seed)?;
                    let eval = evaluate(&nets, exp, cfg.obs_mode, cfg.eval_seeds)?;
                    Ok(ProtocolRun { protocol, log, eval })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    results.into_iter().collect()
}

pub const COMPARISON_HEADER: [&str; 8] = [
    "protocol",
    "episodes",
    "first_decile_reward",
    "last_decile_reward",
    "comm_bits_total",
    "eval_ivs_mean_m",
    "eval_power_mean_kw",
    "eval_collisions",
];

pub fn write_comparison_csv(runs: &[ProtocolRun], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARISON_HEADER)?;
    for r in runs {
        let (head, tail) = r.log.head_tail_means(0.1);
        w.write_record([
            r.protocol.to_string(),
            r.log.rows.len().to_string(),
            format!("{head:.6}"),
            format!("{tail:.6}"),
            r.log.total_bits().to_string(),
            format!("{:.6}", r.eval.aggregate.ivs_mean),
            format!("{:.6}", r.eval.aggregate.power_mean_kw),
            r.eval.aggregate.collisions.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Perturbation;
    use crate::vehicle::VehicleParams;

    fn experiment(n: usize) -> Experiment {
        Experiment {
            scenario: ScenarioConfig {
                n_vehicles: n,
                episode_steps: 50,
                ..Default::default()
            },
            reward: RewardWeights::default(),
            ovm: OvmParams::default(),
            energy: EnergyModel::Physics(VehicleParams::default()),
        }
    }

    fn quick(total_steps: usize, protocol: Protocol) -> TrainConfig {
        TrainConfig {
            total_steps,
            hidden: 8,
            consensus: ConsensusConfig {
                protocol,
                ..Default::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn returns_by_hand() {
        assert_eq!(discounted_returns(&[1.0, 0.0, 2.0], 0.5, 0.0), vec![1.5, 1.0, 2.0]);
        assert_eq!(discounted_returns(&[], 0.9, 0.0), Vec::<f64>::new());
    }

    #[test]
    fn zero_discount_advantage_is_one_step() {
        let g = discounted_returns(&[3.0, -1.0], 0.0, 0.0);
        assert_eq!(advantages(&g, &[0.5, 0.25]), vec![2.5, -1.25]);
    }

    #[test]
    fn budgets() {
        assert_eq!(episode_budgets(1200, 600), vec![600, 600]);
        assert_eq!(episode_budgets(1000, 600), vec![600, 400]);
        assert_eq!(episode_budgets(50, 600), vec![50]);
    }

    #[test]
    fn greedy_tie_goes_low() {
        assert_eq!(greedy_action(&[0.25; 4]), 0);
        assert_eq!(greedy_action(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn sampling_matches_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = [0.1, 0.2, 0.3, 0.4];
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[sample_action(&p, &mut rng)] += 1;
        }
        for k in 0..4 {
            assert!((counts[k] as f64 / 40_000.0 - p[k]).abs() < 0.01);
        }
    }

    #[test]
    fn one_episode_one_update() {
        let exp = experiment(3);
        let cfg = quick(50, Protocol::None);
        let init = init_nets(&cfg, cfg.obs_mode, 3, 5);
        let (nets, log) = train(&cfg, &exp, 5).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].comm_bits_cum, 0);
        assert!(nets.iter().zip(&init).all(|(a, b)| a != b));
    }

    #[test]
    fn qsgd_optimizer_takes_ternary_steps() {
        let exp = experiment(2);
        let cfg = TrainConfig {
            optimizer: Optimizer::Qsgd,
            ..quick(50, Protocol::None)
        };
        let init = init_nets(&cfg, cfg.obs_mode, 2, 1);
        let (nets, _) = train(&cfg, &exp, 1).unwrap();
        let (a, c) = (cfg.actor_lr, cfg.critic_lr);
        let allowed = [0.0, a, c, a + c, a - c];
        for (net, start) in nets.iter().zip(&init) {
            for (x, x0) in net.to_flat().iter().zip(start.to_flat()) {
                let step = (x - x0).abs();
                assert!(allowed.iter().any(|s| (step - s).abs() < 1e-12), "step {step}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let exp = experiment(3);
        let cfg = quick(300, Protocol::Bdc);
        let (a, la) = train(&cfg, &exp, 9).unwrap();
        let (b, lb) = train(&cfg, &exp, 9).unwrap();
        assert_eq!(la, lb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_flat(), y.to_flat());
        }
    }

    #[test]
    fn bits_ratio_is_sixteen() {
        let exp = experiment(4);
        let (_, bdc) = train(&quick(400, Protocol::Bdc), &exp, 1).unwrap();
        let (_, wac) = train(&quick(400, Protocol::Wac), &exp, 1).unwrap();
        assert_eq!(bdc.rows.len(), wac.rows.len());
        assert_eq!(bdc.total_bits() * 16, wac.total_bits());
        assert!(bdc.total_bits() > 0);
    }

    #[test]
    fn wac_round_keeps_shared_init_identical() {
        let cfg = quick(50, Protocol::Wac);
        let nets = init_nets(&cfg, cfg.obs_mode, 4, 2);
        let mut flat: Vec<Vec<f64>> = nets.iter().map(AgentNet::to_flat).collect();
        cfg.consensus.apply(&mut flat, &NeighborGraph::line(4)).unwrap();
        assert!(flat.iter().all(|w| *w == nets[0].to_flat()));
    }

    #[test]
    fn zero_nets_pick_action_zero_and_hold_equilibrium() {
        let mut exp = experiment(4);
        exp.scenario = ScenarioConfig {
            perturbation: Perturbation::None,
            init_spacing_jitter: 0.0,
            init_velocity_jitter: 0.0,
            ..Default::default()
        };
        let shape = NetShape::new(ObsMode::Ia2c.obs_dim(), 8, N_ACTIONS);
        let nets = vec![AgentNet::zeros(shape); 4];
        let report = evaluate(&nets, &exp, ObsMode::Ia2c, 3).unwrap();
        assert_eq!(report.trials.len(), 3);
        assert_eq!(report.aggregate.ivs_mean, 20.0);
        assert_eq!(report.aggregate.collisions, 0);
        assert_eq!(report.aggregate.accel_abs_mean, 0.0);
    }

    #[test]
    fn eval_rejects_wrong_shape() {
        let exp = experiment(3);
        let shape = NetShape::new(ObsMode::Fprint.obs_dim(), 4, N_ACTIONS);
        let nets = vec![AgentNet::zeros(shape); 3];
        assert!(matches!(evaluate(&nets, &exp, ObsMode::Ia2c, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_grads_by_hand() {
        let shape = NetShape::new(ObsMode::Ia2c.obs_dim(), 4, N_ACTIONS);
        let net = AgentNet::zeros(shape);
        let (rec, _) = net.forward(&vec![0.0; shape.obs_dim], &net.initial_carry()).unwrap();
        let traj = Trajectory {
            records: vec![rec],
            actions: vec![2],
            rewards: vec![4.0],
            dones: vec![true],
        };
        let g = a2c_loss_grads(&traj, 0.99, 0.0, 0.5, 0.0);
        // G = 2, V = 0, π uniform.
        assert_eq!(g.actor[0].d_logits, vec![0.5, 0.5, -1.5, 0.5]);
        assert_eq!(g.critic[0].d_value, -4.0);
        assert_eq!(g.critic_loss, 4.0);
        // Uniform policy is the entropy maximum: the entropy gradient vanishes.
        let h = a2c_loss_grads(&Trajectory { rewards: vec![0.0], ..traj }, 0.99, 0.3, 1.0, 0.0);
        assert!(h.actor[0].d_logits.iter().all(|x| x.abs() < 1e-15));
    }
}
