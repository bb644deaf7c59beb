//! Platoon POMDP.
//!
//! Each agent picks one of four OVM gain pairs per step; the simulator turns
//! the gains into acceleration commands, advances all vehicles
//! synchronously, and scores every agent on spacing and velocity tracking,
//! comfort, a soft safety margin and electrical power.
//!
//! The first vehicle follows either a virtual car (virtual-target mode, in
//! which it is itself an agent) or a replayed velocity trace (trace-replay
//! mode, in which it is not an agent).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LeaderProfile;
use crate::error::{Error, Result};
use crate::ovm::{headway_velocity, ovm_accel, OvmParams};
use crate::vehicle::{self, EnergyModel, VehicleState, MIN_SPACING_M, U_MAX_MPS2, V_MAX_MPS};

pub const N_ACTIONS: usize = 4;
/// `(α, β)` for each action index.
pub const ACTION_GAINS: [(f64, f64); N_ACTIONS] = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)];
pub const OWN_FEATURES: usize = 5;
/// Front and rear.
pub const MAX_NEIGHBORS: usize = 2;
const VELOCITY_SCALE: f64 = 5.0;
const CLIP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaderMode {
    VirtualTarget,
    TraceReplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Perturbation {
    None,
    /// Leader target ramps linearly down to `depth · v_star` over the first
    /// half of `duration_s` and back up over the second half.
    DecelAccel { start_s: f64, depth: f64, duration_s: f64 },
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::DecelAccel {
            start_s: 20.0,
            depth: 0.6,
            duration_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    Ia2c,
    Fprint,
}

impl ObsMode {
    pub fn obs_dim(self) -> usize {
        let base = OWN_FEATURES * (1 + MAX_NEIGHBORS);
        match self {
            ObsMode::Ia2c => base,
            ObsMode::Fprint => base + N_ACTIONS * MAX_NEIGHBORS,
        }
    }
}

impl std::str::FromStr for ObsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ia2c" => Ok(ObsMode::Ia2c),
            "fprint" => Ok(ObsMode::Fprint),
            other => Err(Error::config("obs_mode", format!("unknown mode {other:?} (ia2c|fprint)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_vehicles: usize,
    /// m
    pub d_star: f64,
    /// m/s
    pub v_star: f64,
    /// s
    pub dt: f64,
    pub episode_steps: usize,
    pub leader_mode: LeaderMode,
    pub perturbation: Perturbation,
    /// Relative half-width of the uniform initial spacing jitter.
    pub init_spacing_jitter: f64,
    pub init_velocity_jitter: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 4,
            d_star: 20.0,
            v_star: 15.0,
            dt: 0.1,
            episode_steps: 600,
            leader_mode: LeaderMode::VirtualTarget,
            perturbation: Perturbation::default(),
            init_spacing_jitter: 0.15,
            init_velocity_jitter: 0.10,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, ovm: &OvmParams) -> Result<()> {
        if self.n_vehicles < 2 {
            return Err(Error::config(
                "scenario.n_vehicles",
                format!("a platoon needs at least 2 vehicles, got {}", self.n_vehicles),
            ));
        }
        if !(self.d_star > ovm.d_stop) {
            return Err(Error::config(
                "scenario.d_star",
                format!("must exceed the stop spacing {}", ovm.d_stop),
            ));
        }
        if !(self.v_star > 0.0 && self.v_star <= V_MAX_MPS) {
            return Err(Error::config("scenario.v_star", "must lie in (0, 30]"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("scenario.dt", "must be > 0"));
        }
        if self.episode_steps == 0 {
            return Err(Error::config("scenario.episode_steps", "must be >= 1"));
        }
        for (name, j) in [
            ("scenario.init_spacing_jitter", self.init_spacing_jitter),
            ("scenario.init_velocity_jitter", self.init_velocity_jitter),
        ] {
            if !(0.0..1.0).contains(&j) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if let Perturbation::DecelAccel {
            start_s,
            depth,
            duration_s,
        } = self.perturbation
        {
            if !(start_s >= 0.0 && duration_s > 0.0 && (0.0..=1.0).contains(&depth)) {
                return Err(Error::config(
                    "scenario.perturbation",
                    "need start_s >= 0, duration_s > 0, depth in [0, 1]",
                ));
            }
        }
        Ok(())
    }

    /// Velocity of the virtual car ahead of the first vehicle at time `t`.
    pub fn target_velocity(&self, t: f64) -> f64 {
        match self.perturbation {
            Perturbation::None => self.v_star,
            Perturbation::DecelAccel {
                start_s,
                depth,
                duration_s,
            } => {
                let half = 0.5 * duration_s;
                let low = depth * self.v_star;
                let tau = t - start_s;
                if tau <= 0.0 || tau >= duration_s {
                    self.v_star
                } else if tau <= half {
                    self.v_star + (low - self.v_star) * tau / half
                } else {
                    low + (self.v_star - low) * (tau - half) / half
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    /// Safe spacing `d_s`, m; the margin term activates below `2·d_s`.
    pub d_safe: f64,
    pub collision_penalty: f64,
    /// kW
    pub power_norm: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: -1.0,
            w2: -1.0,
            w3: -0.1,
            w4: -5.0,
            w5: -10.0,
            d_safe: 5.0,
            collision_penalty: 1000.0,
            power_norm: 135.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.collision_penalty > 0.0) {
            return Err(Error::config("reward.collision_penalty", "must be > 0"));
        }
        if !(self.power_norm > 0.0) {
            return Err(Error::config("reward.power_norm", "must be > 0"));
        }
        Ok(())
    }
}

/// `w1(d−d*)² + w2(v−v*)² + w3·u² + w4·max(0, 2d_s − d)² + w5·P/P_norm`.
pub fn compute_reward(weights: &RewardWeights, d: f64, v: f64, u: f64, power_kw: f64, d_star: f64, v_star: f64) -> f64 {
    let margin = (2.0 * weights.d_safe - d).max(0.0);
    weights.w1 * (d - d_star).powi(2)
        + weights.w2 * (v - v_star).powi(2)
        + weights.w3 * u * u
        + weights.w4 * margin * margin
        + weights.w5 * power_kw / weights.power_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[v̂, v̂_diff, v̂h, d̂, û]`.
    pub own: [f64; OWN_FEATURES],
    /// Front then rear neighbour's `own` vectors, zeros where absent.
    pub neighbor_block: Vec<f64>,
    /// Front then rear neighbour's previous-step policy (fingerprint mode only).
    pub fingerprint_block: Option<Vec<f64>>,
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.own);
        v.extend_from_slice(&self.neighbor_block);
        if let Some(fp) = &self.fingerprint_block {
            v.extend_from_slice(fp);
        }
        v
    }

    pub fn len(&self) -> usize {
        OWN_FEATURES + self.neighbor_block.len() + self.fingerprint_block.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleInfo {
    pub power_kw: f64,
    pub spacing: f64,
    pub velocity: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub collision: bool,
    /// Per vehicle (not per agent): in trace-replay mode index 0 is the leader.
    pub info: Vec<VehicleInfo>,
}

/// Full simulator state. Vehicle 0 is the platoon head.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub vehicles: Vec<VehicleState>,
    pub initial_velocity: Vec<f64>,
    pub step: usize,
    /// Previous-step policy of every agent, used for fingerprints.
    pub fingerprints: Vec<[f64; N_ACTIONS]>,
}

/// Builds the initial platoon for `cfg` in virtual-target mode.
pub fn reset(cfg: &ScenarioConfig) -> Result<EnvState> {
    cfg.validate(&OvmParams::default())?;
    Ok(initial_state(cfg, cfg.v_star, cfg.n_vehicles))
}

fn initial_state(cfg: &ScenarioConfig, lead_velocity: f64, n_agents: usize) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jitter = |scale: f64| 1.0 + scale * (2.0 * rng.gen::<f64>() - 1.0);
    let vehicles: Vec<VehicleState> = (0..cfg.n_vehicles)
        .map(|_| {
            let spacing = cfg.d_star * jitter(cfg.init_spacing_jitter);
            let velocity = (lead_velocity * jitter(cfg.init_velocity_jitter)).clamp(0.0, V_MAX_MPS);
            VehicleState {
                spacing,
                velocity,
                accel: 0.0,
            }
        })
        .collect();
    let initial_velocity = vehicles.iter().map(|v| v.velocity).collect();
    EnvState {
        vehicles,
        initial_velocity,
        step: 0,
        fingerprints: vec![[1.0 / N_ACTIONS as f64; N_ACTIONS]; n_agents],
    }
}

/// Observation of vehicle `vehicle` given its predecessor's velocity.
pub fn own_features(state: &EnvState, vehicle: usize, v_pred: f64, ovm: &OvmParams, dt: f64, d_star: f64) -> [f64; OWN_FEATURES] {
    let s = state.vehicles[vehicle];
    // Floor keeps the normalisation finite for trace starts at standstill.
    let v0 = state.initial_velocity[vehicle].max(1.0);
    [
        (s.velocity - v0) / v0,
        ((v_pred - s.velocity) / VELOCITY_SCALE).clamp(-CLIP, CLIP),
        ((headway_velocity(ovm, s.spacing) - s.velocity) / VELOCITY_SCALE).clamp(-CLIP, CLIP),
        (s.spacing + (v_pred - s.velocity) * dt - d_star) / d_star,
        s.accel / U_MAX_MPS2,
    ]
}

#[derive(Debug, Clone)]
pub struct PlatoonEnv {
    scenario: ScenarioConfig,
    reward: RewardWeights,
    ovm: OvmParams,
    energy: EnergyModel,
    obs_mode: ObsMode,
    trace: Option<Vec<f64>>,
    state: EnvState,
}

impl PlatoonEnv {
    pub fn new(
        scenario: ScenarioConfig,
        reward: RewardWeights,
        ovm: OvmParams,
        energy: EnergyModel,
        obs_mode: ObsMode,
    ) -> Result<Self> {
        scenario.validate(&ovm)?;
        reward.validate()?;
        ovm.validate()?;
        if scenario.leader_mode == LeaderMode::TraceReplay {
            return Err(Error::config(
                "scenario.leader_mode",
                "trace-replay needs a leader profile (use PlatoonEnv::with_trace)",
            ));
        }
        let state = initial_state(&scenario, scenario.v_star, scenario.n_vehicles);
        Ok(Self {
            scenario,
            reward,
            ovm,
            energy,
            obs_mode,
            trace: None,
            state,
        })
    }

    /// Trace-replay platoon: vehicle 0 replays `profile`, the rest are agents.
    pub fn with_trace(
        scenario: ScenarioConfig,
        reward: RewardWeights,
        ovm: OvmParams,
        energy: EnergyModel,
        obs_mode: ObsMode,
        profile: &LeaderProfile,
    ) -> Result<Self> {
        let scenario = ScenarioConfig {
            leader_mode: LeaderMode::TraceReplay,
            ..scenario
        };
        scenario.validate(&ovm)?;
        reward.validate()?;
        ovm.validate()?;
        if profile.velocities.is_empty() {
            return Err(Error::Range("leader profile is empty".into()));
        }
        let trace = profile.velocities.clone();
        let state = initial_state(&scenario, trace[0], scenario.n_vehicles - 1);
        let mut env = Self {
            scenario,
            reward,
            ovm,
            energy,
            obs_mode,
            trace: Some(trace),
            state,
        };
        env.pin_leader();
        Ok(env)
    }

    fn pin_leader(&mut self) {
        if let Some(trace) = &self.trace {
            let lead = &mut self.state.vehicles[0];
            lead.velocity = trace[0];
            lead.spacing = self.scenario.d_star;
            lead.accel = 0.0;
            self.state.initial_velocity[0] = trace[0];
        }
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn obs_mode(&self) -> ObsMode {
        self.obs_mode
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_mode.obs_dim()
    }

    /// Index of the first vehicle controlled by an agent.
    pub fn first_agent(&self) -> usize {
        usize::from(self.trace.is_some())
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.n_vehicles - self.first_agent()
    }

    pub fn episode_len(&self) -> usize {
        match &self.trace {
            Some(t) => self.scenario.episode_steps.min(t.len()),
            None => self.scenario.episode_steps,
        }
    }

    /// Restarts with the configured seed.
    pub fn reset(&mut self) -> Vec<Observation> {
        self.reset_with_seed(self.scenario.seed)
    }

    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<Observation> {
        self.scenario.seed = seed;
        let lead_velocity = self.trace.as_ref().map_or(self.scenario.v_star, |t| t[0]);
        self.state = initial_state(&self.scenario, lead_velocity, self.n_agents());
        self.pin_leader();
        self.observations()
    }

    /// Stores each agent's latest policy for fingerprint observations.
    pub fn set_fingerprints(&mut self, policies: &[[f64; N_ACTIONS]]) -> Result<()> {
        if policies.len() != self.n_agents() {
            return Err(Error::Usage(format!(
                "{} fingerprints for {} agents",
                policies.len(),
                self.n_agents()
            )));
        }
        self.state.fingerprints.copy_from_slice(policies);
        Ok(())
    }

    fn leader_velocity(&self, step: usize) -> f64 {
        match &self.trace {
            Some(t) => t[step.min(t.len() - 1)],
            None => self.scenario.target_velocity(step as f64 * self.scenario.dt),
        }
    }

    fn predecessor_velocity(&self, vehicle: usize) -> f64 {
        if vehicle == 0 {
            self.leader_velocity(self.state.step)
        } else {
            self.state.vehicles[vehicle - 1].velocity
        }
    }

    pub fn build_observation(&self, agent: usize) -> Observation {
        let first = self.first_agent();
        let own_of = |a: usize| {
            let vehicle = a + first;
            own_features(
                &self.state,
                vehicle,
                self.predecessor_velocity(vehicle),
                &self.ovm,
                self.scenario.dt,
                self.scenario.d_star,
            )
        };
        let neighbors = [agent.checked_sub(1), Some(agent + 1).filter(|&a| a < self.n_agents())];
        let mut neighbor_block = Vec::with_capacity(OWN_FEATURES * MAX_NEIGHBORS);
        for nb in neighbors {
            match nb {
                Some(a) => neighbor_block.extend_from_slice(&own_of(a)),
                None => neighbor_block.extend_from_slice(&[0.0; OWN_FEATURES]),
            }
        }
        let fingerprint_block = (self.obs_mode == ObsMode::Fprint).then(|| {
            neighbors
                .iter()
                .flat_map(|nb| match nb {
                    Some(a) => self.state.fingerprints[*a],
                    None => [0.0; N_ACTIONS],
                })
                .collect()
        });
        Observation {
            own: own_of(agent),
            neighbor_block,
            fingerprint_block,
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.n_agents()).map(|a| self.build_observation(a)).collect()
    }

    /// Advances the platoon one step with one action index per agent.
    pub fn apply_actions(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let n_agents = self.n_agents();
        if actions.len() != n_agents {
            return Err(Error::Usage(format!(
                "{} actions for {n_agents} agents",
                actions.len()
            )));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::Domain(format!("action index {bad} outside 0..{N_ACTIONS}")));
        }
        let dt = self.scenario.dt;
        let first = self.first_agent();
        let step = self.state.step;
        let n = self.scenario.n_vehicles;

        // Commands from the pre-step snapshot.
        let commands: Vec<f64> = (0..n)
            .map(|i| {
                if i < first {
                    return 0.0;
                }
                let (alpha, beta) = ACTION_GAINS[actions[i - first]];
                let s = self.state.vehicles[i];
                ovm_accel(&self.ovm.with_gains(alpha, beta), s.spacing, s.velocity, self.predecessor_velocity(i))
            })
            .collect();

        let lead_now = self.leader_velocity(step);
        let lead_next = self.leader_velocity(step + 1);
        let mut next = self.state.vehicles.clone();
        for i in 0..n {
            let current = self.state.vehicles[i];
            if i < first {
                // Replayed leader: velocity is prescribed.
                next[i] = VehicleState {
                    spacing: current.spacing,
                    velocity: lead_next,
                    accel: (lead_next - lead_now) / dt,
                };
                continue;
            }
            // Virtual car or replayed leader: exact for piecewise-linear profiles.
            let pred_disp = if i <= first {
                0.5 * (lead_now + lead_next) * dt
            } else {
                let pred = self.state.vehicles[i - 1];
                vehicle::displacement(pred.velocity, commands[i - 1], dt)
            };
            next[i] = vehicle::advance(current, pred_disp, commands[i], dt);
        }
        self.state.vehicles = next;
        self.state.step += 1;

        let info: Vec<VehicleInfo> = self
            .state
            .vehicles
            .iter()
            .map(|s| VehicleInfo {
                power_kw: self.energy.power_kw(s.velocity, s.accel),
                spacing: s.spacing,
                velocity: s.velocity,
                accel: s.accel,
            })
            .collect();

        let mut collision = false;
        let rewards: Vec<f64> = (first..n)
            .map(|i| {
                let inf = info[i];
                let mut r = compute_reward(
                    &self.reward,
                    inf.spacing,
                    inf.velocity,
                    inf.accel,
                    inf.power_kw,
                    self.scenario.d_star,
                    self.scenario.v_star,
                );
                if inf.spacing <= MIN_SPACING_M {
                    collision = true;
                    r -= self.reward.collision_penalty;
                }
                r
            })
            .collect();
        let done = collision || self.state.step >= self.episode_len();
        Ok(StepOutcome {
            observations: self.observations(),
            rewards,
            done,
            collision,
            info,
        })
    }
}

/// Per-step, per-vehicle rollout rows.
#[derive(Debug, Clone, Default)]
pub struct RolloutLog {
    rows: Vec<RolloutRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RolloutRow {
    pub step: usize,
    pub vehicle: usize,
    pub spacing_m: f64,
    pub velocity_mps: f64,
    pub accel_mps2: f64,
    pub power_kw: f64,
    pub reward: f64,
}

impl RolloutLog {
    pub const HEADER: [&'static str; 7] = [
        "step",
        "vehicle",
        "spacing_m",
        "velocity_mps",
        "accel_mps2",
        "power_kw",
        "reward",
    ];

    /// Records one outcome; vehicles without an agent get reward 0.
    pub fn record(&mut self, step: usize, outcome: &StepOutcome, first_agent: usize) {
        for (vehicle, inf) in outcome.info.iter().enumerate() {
            let reward = vehicle
                .checked_sub(first_agent)
                .map_or(0.0, |a| outcome.rewards[a]);
            self.rows.push(RolloutRow {
                step,
                vehicle,
                spacing_m: inf.spacing,
                velocity_mps: inf.velocity,
                accel_mps2: inf.accel,
                power_kw: inf.power_kw,
                reward,
            });
        }
    }

    pub fn rows(&self) -> &[RolloutRow] {
        &self.rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.vehicle.to_string(),
                format!("{:.6}", r.spacing_m),
                format!("{:.6}", r.velocity_mps),
                format!("{:.6}", r.accel_mps2),
                format!("{:.6}", r.power_kw),
                format!("{:.6}", r.reward),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
