//! The defender's environment.
//!
//! Each agent interaction reshapes the uncompromised inverters' curves and
//! then runs `agent_period` one-second ticks. A tick sets the compromised
//! curves for the attack window, steps every inverter on the voltage it saw
//! last, solves the power flow and feeds each bus voltage to its detector.
//!
//! Two observation modes exist. In aggregate mode (training) a single action
//! applies to every uncompromised inverter and the observation is the mean of
//! their local observations. In deployment mode every uncompromised inverter
//! acts on its own local observation.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorParams, OscillationFilter, WindowHistory};
use crate::error::{Error, Result};
use crate::feeder::{solve_power_flow_from, FeederModel, PowerFlowOptions};
use crate::inverter::{apply_action, volt_watt, DroopCurve, InverterParams, InverterState};
use crate::log::{EpisodeLog, TickRow};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{generate_scenario, recentre, AttackAnchor, EpisodeScenario, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub sigma_y: f64,
    pub sigma_a: f64,
    pub sigma_0: f64,
    pub sigma_p: f64,
    /// Below this available power the curtailment term is 0, pu.
    pub p_max_eps: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            sigma_y: 15.0,
            sigma_a: 0.05,
            sigma_0: 18.0,
            sigma_p: 80.0,
            p_max_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// One categorical head per action component.
    Factored,
    /// A single head over every (offset, slope) pair.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConfig {
    pub offsets: Vec<f64>,
    pub slopes: Vec<f64>,
    pub encoding: Encoding,
}

impl Default for ActionConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (-5..=5).map(|k| k as f64 / 100.0).collect();
        Self {
            offsets: grid.clone(),
            slopes: grid,
            encoding: Encoding::Factored,
        }
    }
}

/// Discrete actions. Index `a` is `offset_index * slopes.len() + slope_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    offsets: Vec<f64>,
    slopes: Vec<f64>,
    encoding: Encoding,
    null: usize,
}

impl ActionSpace {
    pub fn new(cfg: &ActionConfig) -> Result<Self> {
        let check = |name: &str, g: &[f64]| -> Result<usize> {
            if g.is_empty() {
                return Err(Error::config(name, "grid is empty"));
            }
            if g.iter().any(|x| !x.is_finite()) || g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(name, "grid must be finite and strictly increasing"));
            }
            let n = g.len();
            if (0..n).any(|k| (g[k] + g[n - 1 - k]).abs() > 1e-12) {
                return Err(Error::config(name, "grid must be symmetric about 0"));
            }
            g.iter()
                .position(|x| *x == 0.0)
                .ok_or_else(|| Error::config(name, "grid must contain 0"))
        };
        let zo = check("action.offsets", &cfg.offsets)?;
        let zs = check("action.slopes", &cfg.slopes)?;
        Ok(Self {
            offsets: cfg.offsets.clone(),
            slopes: cfg.slopes.clone(),
            encoding: cfg.encoding,
            null: zo * cfg.slopes.len() + zs,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.offsets.len() * self.slopes.len()
    }

    pub fn null(&self) -> usize {
        self.null
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    /// Categorical head sizes for the policy network.
    pub fn heads(&self) -> Vec<usize> {
        match self.encoding {
            Encoding::Factored => vec![self.offsets.len(), self.slopes.len()],
            Encoding::Joint => vec![self.n_actions()],
        }
    }

    /// Joint index to per-head indices.
    pub fn split(&self, a: usize) -> Vec<usize> {
        match self.encoding {
            Encoding::Factored => vec![a / self.slopes.len(), a % self.slopes.len()],
            Encoding::Joint => vec![a],
        }
    }

    /// Per-head indices to the joint index.
    pub fn join(&self, idx: &[usize]) -> usize {
        match self.encoding {
            Encoding::Factored => idx[0] * self.slopes.len() + idx[1],
            Encoding::Joint => idx[0],
        }
    }

    pub fn check(&self, a: usize) -> Result<()> {
        if a < self.n_actions() {
            Ok(())
        } else {
            Err(Error::config("action", format!("{a} is outside 0..{}", self.n_actions())))
        }
    }

    /// `(offset, slope_delta)` in pu.
    pub fn values(&self, a: usize) -> (f64, f64) {
        (self.offsets[a / self.slopes.len()], self.slopes[a % self.slopes.len()])
    }

    /// Grid positions `(offset_index, slope_index)`.
    pub fn grid_position(&self, a: usize) -> (usize, usize) {
        (a / self.slopes.len(), a % self.slopes.len())
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    Aggregate,
    Deployment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub scenario: ScenarioConfig,
    pub inverter: InverterParams,
    pub detector: DetectorParams,
    pub reward: RewardWeights,
    pub action: ActionConfig,
    pub power_flow: PowerFlowOptions,
    pub default_curve: DroopCurve,
    /// Past window means kept for the recent-max observation.
    pub history_len: usize,
    /// Ticks run at step-0 conditions before the detectors start.
    pub warmup_ticks: usize,
    /// Overrides the feeder file's source voltage, pu.
    pub source_v: Option<f64>,
    /// Bus whose voltage goes to the `v` column of the episode log.
    pub log_bus: Option<String>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            inverter: InverterParams::default(),
            detector: DetectorParams::default(),
            reward: RewardWeights::default(),
            action: ActionConfig::default(),
            power_flow: PowerFlowOptions::default(),
            default_curve: DroopCurve::default(),
            history_len: 5,
            warmup_ticks: 300,
            source_v: None,
            log_bus: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.detector.validate()?;
        for (name, tau) in [("inverter.tau_m", self.inverter.tau_m), ("inverter.tau_o", self.inverter.tau_o)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::config(name, format!("{tau} is outside (0, 1]")));
            }
        }
        if self.history_len == 0 {
            return Err(Error::config("history_len", "must be at least 1"));
        }
        let r = &self.reward;
        if [r.sigma_y, r.sigma_a, r.sigma_0, r.sigma_p, r.p_max_eps]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::config("reward", "weights must be finite and nonnegative"));
        }
        if let Some(v) = self.source_v {
            if !(v > 0.5 && v < 1.5) {
                return Err(Error::config("source_v", format!("{v} is outside (0.5, 1.5)")));
            }
        }
        ActionSpace::new(&self.action)?;
        Ok(())
    }
}

/// Local observation of one inverter, or the mean over inverters.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y_mean: f64,
    pub y_max_n: f64,
    /// Reactive headroom without curtailment, per unit of the inverter rating.
    pub q_avail_nom: f64,
    /// Previous action as a distribution over actions (one-hot locally).
    pub prev_action: Vec<f64>,
}

impl Observation {
    pub const N_SCALARS: usize = 3;

    pub fn dim(n_actions: usize) -> usize {
        Self::N_SCALARS + n_actions
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::N_SCALARS + self.prev_action.len());
        v.extend([self.y_mean, self.y_max_n, self.q_avail_nom]);
        v.extend_from_slice(&self.prev_action);
        v
    }

    fn mean(obs: &[Observation]) -> Observation {
        let k = obs.len() as f64;
        let mut prev = vec![0.0; obs[0].prev_action.len()];
        for o in obs {
            for (p, x) in prev.iter_mut().zip(&o.prev_action) {
                *p += x;
            }
        }
        Observation {
            y_mean: obs.iter().map(|o| o.y_mean).sum::<f64>() / k,
            y_max_n: obs.iter().map(|o| o.y_max_n).sum::<f64>() / k,
            q_avail_nom: obs.iter().map(|o| o.q_avail_nom).sum::<f64>() / k,
            prev_action: prev.into_iter().map(|p| p / k).collect(),
        }
    }
}

/// Reward terms of one window, each `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub oscillation: f64,
    pub action_change: f64,
    pub deviation: f64,
    pub curtailment: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.oscillation + self.action_change + self.deviation + self.curtailment
    }
}

/// Window quantities of one uncompromised inverter that enter the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitWindow {
    pub y: f64,
    /// Window mean of `(1 - p/p_max)^2`.
    pub curtail_sq: f64,
    pub action: usize,
    pub last_action: usize,
    pub delta_eta: [f64; 5],
}

/// Reward of one window, averaged over the uncompromised inverters.
pub fn compute_reward(w: &RewardWeights, units: &[UnitWindow]) -> RewardBreakdown {
    if units.is_empty() {
        return RewardBreakdown::default();
    }
    let k = units.len() as f64;
    let mean = |f: &dyn Fn(&UnitWindow) -> f64| units.iter().map(f).sum::<f64>() / k;
    RewardBreakdown {
        oscillation: -mean(&|u| w.sigma_y * u.y),
        action_change: -mean(&|u| if u.action != u.last_action { w.sigma_a } else { 0.0 }),
        deviation: -mean(&|u| w.sigma_0 * u.delta_eta.iter().map(|d| d * d).sum::<f64>().sqrt()),
        curtailment: -mean(&|u| w.sigma_p * u.curtail_sq),
    }
}

/// `(1 - p/p_max)^2`, or 0 when there is no sun.
pub fn curtailment_term(p: f64, p_max: f64, eps: f64) -> f64 {
    if p_max <= eps {
        0.0
    } else {
        let r = 1.0 - p / p_max;
        r * r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub done: bool,
}

pub struct Env {
    feeder: Arc<FeederModel>,
    cfg: EnvConfig,
    space: ActionSpace,
    source_v: f64,
    log_bus: usize,
    scenario: Option<EpisodeScenario>,
    step: usize,
    units: Vec<InverterState>,
    detectors: Vec<OscillationFilter>,
    voltages: Vec<Complex64>,
    y_bus: Vec<f64>,
    histories: Vec<WindowHistory>,
    /// Latest local observations of the uncompromised units.
    local: Vec<Observation>,
    last_actions: Vec<usize>,
    live_attack: Option<DroopCurve>,
    curtailed_energy: f64,
    log: Option<EpisodeLog>,
}

impl Env {
    pub fn new(feeder: Arc<FeederModel>, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let space = ActionSpace::new(&cfg.action)?;
        let source_v = cfg.source_v.unwrap_or(feeder.source_v());
        let log_bus = match &cfg.log_bus {
            Some(id) => feeder
                .bus_index(id)
                .ok_or_else(|| Error::config("log_bus", format!("no bus `{id}` in the feeder")))?,
            None => feeder.n_buses() - 1,
        };
        let detectors = (0..feeder.n_buses())
            .map(|_| OscillationFilter::new(cfg.detector))
            .collect::<Result<_>>()?;
        Ok(Self {
            voltages: vec![Complex64::new(source_v, 0.0); feeder.n_buses()],
            y_bus: vec![0.0; feeder.n_buses()],
            feeder,
            cfg,
            space,
            source_v,
            log_bus,
            scenario: None,
            step: 0,
            units: Vec::new(),
            detectors,
            histories: Vec::new(),
            local: Vec::new(),
            last_actions: Vec::new(),
            live_attack: None,
            curtailed_energy: 0.0,
            log: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn feeder(&self) -> &FeederModel {
        &self.feeder
    }

    pub fn obs_dim(&self) -> usize {
        Observation::dim(self.space.n_actions())
    }

    pub fn scenario(&self) -> Option<&EpisodeScenario> {
        self.scenario.as_ref()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.scenario.episode_len
    }

    /// Agent interactions per episode.
    pub fn horizon(&self) -> usize {
        self.cfg.scenario.episode_len.div_ceil(self.cfg.scenario.agent_period)
    }

    pub fn units(&self) -> &[InverterState] {
        &self.units
    }

    pub fn bus_voltages(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }

    /// Detector outputs at the last tick, per bus.
    pub fn bus_energy(&self) -> &[f64] {
        &self.y_bus
    }

    /// Defender curtailment so far, pu·s.
    pub fn curtailed_energy(&self) -> f64 {
        self.curtailed_energy
    }

    /// Starts recording every tick of the next episodes.
    pub fn enable_log(&mut self) {
        self.log = Some(EpisodeLog::new(&self.feeder));
    }

    pub fn take_log(&mut self) -> Option<EpisodeLog> {
        self.log.as_mut().map(|l| std::mem::replace(l, EpisodeLog::new(&self.feeder)))
    }

    /// New episode drawn from `seed` and episode index `episode`.
    pub fn reset(&mut self, seed: u64, episode: u64) -> Result<Observation> {
        let mut rng = stream_rng(seed, Stream::Scenario, episode);
        let sc = generate_scenario(&self.cfg.scenario, &self.feeder, &self.cfg.default_curve, &mut rng)?;
        self.reset_with(sc)
    }

    pub fn reset_with(&mut self, scenario: EpisodeScenario) -> Result<Observation> {
        let n_bus = self.feeder.n_buses();
        if scenario.load_profile.len() < self.cfg.scenario.episode_len
            || scenario.load_profile.iter().any(|r| r.len() != n_bus)
        {
            return Err(Error::Dimension {
                expected: n_bus,
                got: scenario.load_profile.first().map_or(0, |r| r.len()),
            });
        }
        let curve = self.cfg.default_curve;
        self.units = scenario
            .units
            .iter()
            .zip(&scenario.solar_profile[0])
            .map(|(u, &pm)| {
                let mut st = InverterState::at_equilibrium(u.s, pm, curve, self.cfg.inverter, self.source_v)?;
                st.compromised = u.compromised;
                Ok(st)
            })
            .collect::<Result<_>>()?;
        self.voltages = vec![Complex64::new(self.source_v, 0.0); n_bus];
        self.scenario = Some(scenario);
        self.voltages = self.solve(0)?;
        for (st, unit) in self.units.iter_mut().zip(&self.scenario.as_ref().unwrap().units) {
            st.v_bar = self.voltages[unit.bus].norm();
        }
        for _ in 0..self.cfg.warmup_ticks {
            self.step_units(0);
            self.voltages = self.solve(0)?;
        }
        for d in self.detectors.iter_mut() {
            d.reset();
        }
        self.y_bus.iter_mut().for_each(|y| *y = 0.0);
        let n_u = self.uncompromised().len();
        self.histories = vec![WindowHistory::new(self.cfg.history_len); n_u];
        self.last_actions = vec![self.space.null(); n_u];
        self.step = 0;
        self.live_attack = None;
        self.curtailed_energy = 0.0;
        if let Some(log) = self.log.as_mut() {
            *log = EpisodeLog::new(&self.feeder);
        }
        let idx = self.uncompromised();
        self.local = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| self.local_observation(i, 0.0, 0.0, self.last_actions[k]))
            .collect();
        Ok(self.observe())
    }

    fn uncompromised(&self) -> Vec<usize> {
        self.scenario.as_ref().map(|s| s.uncompromised().collect()).unwrap_or_default()
    }

    fn local_observation(&self, unit: usize, y_mean: f64, y_max: f64, prev: usize) -> Observation {
        let st = &self.units[unit];
        let mut onehot = vec![0.0; self.space.n_actions()];
        onehot[prev] = 1.0;
        Observation {
            y_mean,
            y_max_n: y_max,
            q_avail_nom: st.nominal_headroom() / st.s,
            prev_action: onehot,
        }
    }

    /// Mean of the uncompromised inverters' local observations.
    pub fn observe(&self) -> Observation {
        Observation::mean(&self.local)
    }

    /// Local observation of every uncompromised inverter.
    pub fn observe_local(&self) -> &[Observation] {
        &self.local
    }

    /// Applies one action to every uncompromised inverter and runs a window.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let n = self.local.len();
        self.step_local(&vec![action; n])
    }

    /// Applies one action per uncompromised inverter (in `observe_local`
    /// order) and runs a window.
    pub fn step_local(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.scenario.is_none() {
            return Err(Error::config("env", "step called before reset"));
        }
        if self.done() {
            return Err(Error::config("env", "episode already finished"));
        }
        let idx = self.uncompromised();
        if actions.len() != idx.len() {
            return Err(Error::Dimension {
                expected: idx.len(),
                got: actions.len(),
            });
        }
        let mut deltas = Vec::with_capacity(idx.len());
        for (&i, &a) in idx.iter().zip(actions) {
            self.space.check(a)?;
            let (o, s) = self.space.values(a);
            let c = apply_action(&self.cfg.default_curve, o, s)?;
            deltas.push(c.delta_from(&self.cfg.default_curve));
            self.units[i].curve = c;
        }
        let mean_action = {
            let k = actions.len() as f64;
            actions.iter().fold((0.0, 0.0), |acc, &a| {
                let (o, s) = self.space.values(a);
                (acc.0 + o / k, acc.1 + s / k)
            })
        };

        let period = self.cfg.scenario.agent_period;
        let end = (self.step + period).min(self.cfg.scenario.episode_len);
        let mut y_win = vec![Vec::with_capacity(period); idx.len()];
        let mut curt = vec![0.0; idx.len()];
        let log_from = self.log.as_ref().map_or(0, |l| l.rows.len());
        while self.step < end {
            let t = self.step;
            self.set_attack_curves(t)?;
            self.step_units(t);
            self.voltages = self.solve(t)?;
            for (b, d) in self.detectors.iter_mut().enumerate() {
                self.y_bus[b] = d.step(self.voltages[b].norm());
            }
            let units = &self.scenario.as_ref().unwrap().units;
            let mut y_tick = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let st = &self.units[i];
                let y = self.y_bus[units[i].bus];
                y_win[k].push(y);
                y_tick += y;
                curt[k] += curtailment_term(st.p, st.p_max, self.cfg.reward.p_max_eps);
                self.curtailed_energy += (st.p_max - volt_watt(&st.curve, st.v_bar, st.p_max)).max(0.0);
            }
            if self.log.is_some() {
                let row = self.tick_row(t, y_tick / idx.len() as f64, mean_action);
                let v = self.bus_voltages();
                self.log.as_mut().unwrap().push(row, v);
            }
            self.step += 1;
        }

        let ticks = y_win.first().map_or(0, |w| w.len()).max(1) as f64;
        let mut windows = Vec::with_capacity(idx.len());
        let mut local = Vec::with_capacity(idx.len());
        for k in 0..idx.len() {
            let (y_mean, y_max) = self.histories[k].close_window(&y_win[k])?;
            windows.push(UnitWindow {
                y: y_mean,
                curtail_sq: curt[k] / ticks,
                action: actions[k],
                last_action: self.last_actions[k],
                delta_eta: deltas[k],
            });
            local.push(self.local_observation(idx[k], y_mean, y_max, actions[k]));
        }
        let reward = compute_reward(&self.cfg.reward, &windows);
        self.last_actions = actions.to_vec();
        self.local = local;
        if let Some(log) = self.log.as_mut() {
            log.set_reward(log_from, &reward);
        }
        Ok(StepOutcome {
            reward,
            done: self.done(),
        })
    }

    fn set_attack_curves(&mut self, t: usize) -> Result<()> {
        let sc = self.scenario.as_ref().unwrap();
        if t == sc.attack_start {
            let curve = match sc.anchor {
                AttackAnchor::Nominal => sc.attacked_curve,
                AttackAnchor::Measured => {
                    let (sum, k) = self
                        .units
                        .iter()
                        .filter(|u| u.compromised)
                        .fold((0.0, 0usize), |a, u| (a.0 + u.v_bar, a.1 + 1));
                    recentre(&sc.attacked_curve, sum / k.max(1) as f64, sc.attack_offset)?
                }
            };
            self.live_attack = Some(curve);
        }
        let curve = match (sc.attack_active(t), self.live_attack) {
            (true, Some(c)) => c,
            _ => self.cfg.default_curve,
        };
        for u in self.units.iter_mut().filter(|u| u.compromised) {
            u.curve = curve;
        }
        Ok(())
    }

    fn step_units(&mut self, t: usize) {
        let sc = self.scenario.as_ref().unwrap();
        for (k, (st, unit)) in self.units.iter_mut().zip(&sc.units).enumerate() {
            st.set_p_max(sc.solar_profile[t][k]);
            *st = st.step(self.voltages[unit.bus].norm());
        }
    }

    fn solve(&self, t: usize) -> Result<Vec<Complex64>> {
        let sc = self.scenario.as_ref().unwrap();
        let mut inj: Vec<Complex64> = self
            .feeder
            .base_injections()
            .iter()
            .zip(&sc.load_profile[t])
            .map(|(s, m)| s * m)
            .collect();
        for (st, unit) in self.units.iter().zip(&sc.units) {
            inj[unit.bus] += Complex64::new(st.p, st.q);
        }
        let sol = solve_power_flow_from(&self.feeder, &inj, self.source_v, self.cfg.power_flow, Some(&self.voltages))?;
        Ok(sol.voltages)
    }

    fn tick_row(&self, t: usize, y: f64, action: (f64, f64)) -> TickRow {
        let sc = self.scenario.as_ref().unwrap();
        let (adv_t, adv_s) = match (sc.attack_active(t), self.live_attack) {
            (true, Some(c)) => {
                let d = self.cfg.default_curve.eta();
                let e = c.eta();
                (0.5 * (e[1] + e[2] - d[1] - d[2]), self.cfg.scenario.attack_slope)
            }
            _ => (0.0, 0.0),
        };
        TickRow {
            step: t,
            v: self.voltages[self.log_bus].norm(),
            y,
            translation: action.0,
            slope: action.1,
            translation_adv: adv_t,
            slope_adv: adv_s,
            ..Default::default()
        }
    }
}
