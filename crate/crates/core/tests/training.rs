use std::sync::Arc;

use droopguard::agent::train::{TrainConfig, Trainer};
use droopguard::env::{Env, EnvConfig};
use droopguard::feeder::{Bus, FeederModel, InverterSite, Line};
use droopguard::scenario::{AttackWindow, Selection};

/// Slack plus one loaded bus whose inverter is split between attacker and
/// defender, attacked for the whole episode.
fn toy() -> (Arc<FeederModel>, EnvConfig) {
    let feeder = FeederModel::new(
        vec![
            Bus { id: "src".into(), p_load: 0.0, q_load: 0.0 },
            Bus { id: "load".into(), p_load: 0.3, q_load: 0.09 },
        ],
        vec![Line { from: 0, to: 1, r: 0.1, x: 0.1 }],
        vec![InverterSite { bus: 1, s: 0.33 }],
        1.05,
    )
    .unwrap();
    let mut cfg = EnvConfig::default();
    cfg.scenario.selection = Selection::PerNode;
    cfg.scenario.attack_fraction_range = [0.45, 0.45];
    cfg.scenario.attack_window = AttackWindow::Fixed([0, cfg.scenario.episode_len]);
    cfg.scenario.hour_range = [12.0, 12.0];
    (Arc::new(feeder), cfg)
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn toy_feeder_training_improves() {
    let (feeder, cfg) = toy();
    let mut env = Env::new(feeder.clone(), cfg.clone()).unwrap();
    env.reset(1, 0).unwrap();
    let null = env.action_space().null();
    let mut null_return = 0.0;
    while !env.done() {
        null_return += env.step(null).unwrap().reward.total();
    }
    let tc = TrainConfig { iterations: 80, ..Default::default() };
    let mut t = Trainer::new(feeder, cfg, tc, 3).unwrap();
    let recs = t.train(|_, _| Ok(())).unwrap();
    let returns: Vec<f64> = recs.iter().map(|r| r.mean_return).collect();
    let ma = moving_average(&returns, 20);
    let coarse: Vec<f64> = ma.iter().step_by(10).copied().collect();
    for w in coarse.windows(2) {
        assert!(w[1] >= w[0] - 0.5, "moving average fell: {coarse:?}");
    }
    let last = *ma.last().unwrap();
    assert!(last > coarse[0] + 20.0, "{coarse:?}");
    assert!(last > null_return, "{last} vs null {null_return}");
}

#[test]
fn without_oscillation_penalty_the_policy_stays_null() {
    let (feeder, mut cfg) = toy();
    cfg.reward.sigma_y = 0.0;
    let tc = TrainConfig { iterations: 40, ..Default::default() };
    let mut t = Trainer::new(feeder.clone(), cfg.clone(), tc, 4).unwrap();
    t.train(|_, _| Ok(())).unwrap();
    let mut env = Env::new(feeder, cfg).unwrap();
    env.reset(9, 0).unwrap();
    let null = env.action_space().null();
    while !env.done() {
        assert_eq!(t.agent.act_greedy(&env.observe()).unwrap(), null);
        env.step(null).unwrap();
    }
}
