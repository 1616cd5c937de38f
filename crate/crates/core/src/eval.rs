//! Single-episode evaluation with the null controller or a trained policy.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::agent::train::Agent;
use crate::env::{Env, EnvConfig, ObservationMode, RewardBreakdown};
use crate::error::Result;
use crate::feeder::FeederModel;
use crate::log::{EpisodeLog, EpisodeSummary};
use crate::rng::{stream_rng, Stream};
use crate::scenario::{generate_scenario, EpisodeScenario};

#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Every defended inverter keeps the default curve.
    Null,
    /// Greedy actions of a trained policy.
    Policy(&'a Agent),
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub scenario: EpisodeScenario,
    pub log: EpisodeLog,
    pub rewards: Vec<RewardBreakdown>,
    /// Joint action of every defended inverter, per agent window.
    pub actions: Vec<Vec<usize>>,
    pub summary: EpisodeSummary,
}

/// Scenario `index` of the held-out evaluation stream.
pub fn evaluation_scenario(cfg: &EnvConfig, feeder: &FeederModel, seed: u64, index: u64) -> Result<EpisodeScenario> {
    let mut rng = stream_rng(seed, Stream::Evaluation, index);
    generate_scenario(&cfg.scenario, feeder, &cfg.default_curve, &mut rng)
}

/// Scenario used by `eval`: episode 0 of the scenario stream.
pub fn preset_scenario(cfg: &EnvConfig, feeder: &FeederModel, seed: u64) -> Result<EpisodeScenario> {
    let mut rng = stream_rng(seed, Stream::Scenario, 0);
    generate_scenario(&cfg.scenario, feeder, &cfg.default_curve, &mut rng)
}

pub fn run_episode(
    feeder: Arc<FeederModel>,
    cfg: &EnvConfig,
    scenario: EpisodeScenario,
    mode: ObservationMode,
    ctrl: Controller,
) -> Result<EpisodeResult> {
    let mut env = Env::new(feeder, cfg.clone())?;
    env.enable_log();
    env.reset_with(scenario.clone())?;
    let null = env.action_space().null();
    let mut rewards = Vec::new();
    let mut actions = Vec::new();
    while !env.done() {
        let acts: Vec<usize> = match (ctrl, mode) {
            (Controller::Null, _) => vec![null; env.observe_local().len()],
            (Controller::Policy(agent), ObservationMode::Aggregate) => {
                vec![agent.act_greedy(&env.observe())?; env.observe_local().len()]
            }
            (Controller::Policy(agent), ObservationMode::Deployment) => env
                .observe_local()
                .iter()
                .map(|o| agent.act_greedy(o))
                .collect::<Result<_>>()?,
        };
        let out = env.step_local(&acts)?;
        rewards.push(out.reward);
        actions.push(acts);
    }
    let log = env.take_log().expect("log enabled");
    let summary = EpisodeSummary::new(
        &log,
        &rewards,
        (scenario.attack_start, scenario.attack_end),
        env.curtailed_energy(),
    );
    Ok(EpisodeResult {
        scenario,
        log,
        rewards,
        actions,
        summary,
    })
}

/// Null and defended runs of one held-out scenario.
#[derive(Debug, Clone, Serialize)]
pub struct HeldOutCase {
    pub index: u64,
    pub hour: f64,
    pub compromised_fraction: f64,
    /// Tick of the first non-null action at or after attack onset, or the
    /// first window boundary after onset if the policy never moves.
    pub first_action: usize,
    pub baseline_y: f64,
    pub defended_y: f64,
    /// Pre-attack mean y of the baseline run.
    pub baseline_pre_y: f64,
    pub curtailment_energy: f64,
    /// Agent steps after attack end until every unit is within one bin of
    /// null on both grid axes; `None` if it never happens.
    pub steps_to_null: Option<usize>,
}

impl HeldOutCase {
    /// Relative drop in post-first-action mean y.
    pub fn reduction(&self) -> f64 {
        if self.baseline_y <= 0.0 {
            return 0.0;
        }
        1.0 - self.defended_y / self.baseline_y
    }

    /// Whether the undefended attack window shows a sustained oscillation.
    pub fn baseline_oscillates(&self, ratio: f64) -> bool {
        self.baseline_y >= ratio * self.baseline_pre_y.max(OSC_FLOOR)
    }
}

/// Lower bound on the pre-attack level used by [`HeldOutCase::baseline_oscillates`].
pub const OSC_FLOOR: f64 = 1e-3;

fn mean_y(log: &EpisodeLog, from: usize, to: usize) -> f64 {
    let ys: Vec<f64> = log
        .rows
        .iter()
        .filter(|r| r.step >= from && r.step < to)
        .map(|r| r.y)
        .collect();
    if ys.is_empty() {
        0.0
    } else {
        ys.iter().sum::<f64>() / ys.len() as f64
    }
}

/// Runs one scenario twice, undefended and with the policy.
pub fn held_out_case(
    feeder: &Arc<FeederModel>,
    cfg: &EnvConfig,
    agent: &Agent,
    scenario: EpisodeScenario,
    mode: ObservationMode,
    index: u64,
) -> Result<HeldOutCase> {
    let period = cfg.scenario.agent_period;
    let space = &agent.space;
    let null = space.grid_position(space.null());
    let (a, b) = (scenario.attack_start, scenario.attack_end);
    let base = run_episode(feeder.clone(), cfg, scenario.clone(), mode, Controller::Null)?;
    let def = run_episode(feeder.clone(), cfg, scenario, mode, Controller::Policy(agent))?;

    let boundary = |k: usize| k * period;
    let first_window = a.div_ceil(period);
    let first_action = (first_window..def.actions.len())
        .map(boundary)
        .take_while(|&t| t < b)
        .find(|&t| def.actions[t / period].iter().any(|&u| u != space.null()))
        .unwrap_or(boundary(first_window));
    let near_null = |acts: &[usize]| {
        acts.iter().all(|&u| {
            let (o, s) = space.grid_position(u);
            o.abs_diff(null.0) <= 1 && s.abs_diff(null.1) <= 1
        })
    };
    let after = b.div_ceil(period);
    let steps_to_null = (after..def.actions.len())
        .find(|&k| near_null(&def.actions[k]))
        .map(|k| k - after);
    Ok(HeldOutCase {
        index,
        hour: def.scenario.hour,
        compromised_fraction: def.scenario.compromised_fraction,
        first_action,
        baseline_y: mean_y(&base.log, first_action, b),
        defended_y: mean_y(&def.log, first_action, b),
        baseline_pre_y: mean_y(&base.log, 0, a),
        curtailment_energy: def.summary.curtailment_energy,
        steps_to_null,
    })
}

/// `n` scenarios of the evaluation stream, each run undefended and defended.
/// Scenarios are independent, so they run on the rayon pool.
pub fn held_out_suite(
    feeder: &Arc<FeederModel>,
    cfg: &EnvConfig,
    agent: &Agent,
    seed: u64,
    n: u64,
    mode: ObservationMode,
) -> Result<Vec<HeldOutCase>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sc = evaluation_scenario(cfg, feeder, seed, i)?;
            held_out_case(feeder, cfg, agent, sc, mode, i)
        })
        .collect()
}
