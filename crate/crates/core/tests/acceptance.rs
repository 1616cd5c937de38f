//! One pass/fail line per acceptance criterion.
//!
//! Criterion 7 trains a policy from scratch with the `train_default` preset,
//! so this target takes several minutes.

mod common;

use std::sync::Arc;
use std::time::Instant;

use droopguard::agent::checkpoint::Checkpoint;
use droopguard::agent::gae::compute_gae;
use droopguard::agent::mlp::Mlp;
use droopguard::agent::policy::Policy;
use droopguard::agent::ppo::{policy_loss_grad, Batch};
use droopguard::agent::train::Trainer;
use droopguard::config::Config;
use droopguard::detector::{DetectorParams, OscillationFilter};
use droopguard::env::{compute_reward, ObservationMode, RewardWeights, UnitWindow};
use droopguard::eval::{held_out_case, held_out_suite, preset_scenario, run_episode, Controller};
use droopguard::feeder::{solve_power_flow, PowerFlowOptions};
use droopguard::inverter::{
    var_headroom, volt_var, volt_watt, DroopCurve, InverterParams, InverterState,
};
use droopguard::rng::{stream_rng, Stream};
use rand::Rng;

use common::{newton_power_flow, random_case};

struct Report(Vec<(u8, &'static str, bool, String)>);

impl Report {
    fn add(&mut self, n: u8, name: &'static str, pass: bool, detail: String) {
        println!("criterion {n} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        self.0.push((n, name, pass, detail));
    }
}

fn power_flow(r: &mut Report) {
    let t0 = Instant::now();
    let opts = PowerFlowOptions { tol: 1e-10, max_iter: 200 };
    let mut worst = 0.0f64;
    let mut ok = true;
    for k in 0..200 {
        let mut rng = stream_rng(77, Stream::Scenario, k);
        let (model, inj, v0) = random_case(&mut rng);
        match (solve_power_flow(&model, &inj, v0, opts), newton_power_flow(&model, &inj, v0)) {
            (Ok(s), Some(v)) => {
                for (a, b) in s.voltages.iter().zip(&v) {
                    worst = worst.max((a - b).norm());
                }
            }
            _ => ok = false,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.add(
        1,
        "power-flow oracle equivalence",
        ok && worst < 1e-6 && secs < 30.0,
        format!("max per-bus |dV| {worst:.2e} pu over 200 feeders, {secs:.2} s"),
    );
}

fn droop_laws(r: &mut Report) {
    let c = DroopCurve::default();
    let [e1, e2, e3, e4, e5] = c.eta();
    let mut ok = true;
    // volt-watt: flat, boundary, midpoint, zero
    ok &= volt_watt(&c, e4 - 0.01, 0.8) == 0.8;
    ok &= volt_watt(&c, e4, 0.8) == 0.8;
    ok &= (volt_watt(&c, 0.5 * (e4 + e5), 0.8) - 0.4).abs() < 1e-12;
    ok &= volt_watt(&c, e5, 0.8) == 0.0;
    ok &= volt_watt(&c, e5 + 0.05, 0.8) == 0.0;
    // volt-var: both saturations, both slopes, the deadband
    ok &= volt_var(&c, e1 - 0.02, 0.3) == 0.3;
    ok &= volt_var(&c, e1, 0.3) == 0.3;
    ok &= (volt_var(&c, 0.5 * (e1 + e2), 0.3) - 0.15).abs() < 1e-12;
    ok &= volt_var(&c, e2, 0.3) == 0.0;
    ok &= volt_var(&c, 0.5 * (e2 + e3), 0.3) == 0.0;
    ok &= volt_var(&c, e3, 0.3) == 0.0;
    ok &= (volt_var(&c, 0.5 * (e3 + e4), 0.3) + 0.15).abs() < 1e-12;
    ok &= volt_var(&c, e4, 0.3) == -0.3;
    ok &= volt_var(&c, e4 + 0.02, 0.3) == -0.3;
    // headroom at full output with 10% oversizing
    let q = var_headroom(1.1, 1.0);
    ok &= (q - 0.458).abs() < 5e-4;
    let mut worst = 0.0f64;
    for v in [0.9, 0.94, 0.97, 1.0, 1.03, 1.06, 1.08, 1.12] {
        let params = InverterParams::default();
        let mut st = InverterState::at_equilibrium(0.55, 0.5, c, params, 1.0).unwrap();
        for _ in 0..400 {
            st = st.step(v);
        }
        let p = volt_watt(&c, v, 0.5);
        let q = volt_var(&c, v, var_headroom(0.55, p));
        worst = worst.max((st.p - p).abs()).max((st.q - q).abs());
    }
    r.add(
        2,
        "droop-law unit suite",
        ok && worst < 1e-9,
        format!("q_avail at s=1.1 p_rated {q:.4}, equilibrium error {worst:.1e}"),
    );
}

fn detector(r: &mut Report) {
    let p = DetectorParams::default();
    let run = |a: f64, f: f64, off: f64| -> Vec<f64> {
        let mut d = OscillationFilter::new(p).unwrap();
        (0..6000)
            .map(|k| d.step(off + a * (2.0 * std::f64::consts::PI * f * k as f64).sin()))
            .collect()
    };
    let tail = |ys: &[f64]| ys[ys.len() - 1000..].iter().sum::<f64>() / 1000.0;
    let constant = *run(0.0, 0.1, 1.02).last().unwrap();
    let a = 0.01;
    let sine = tail(&run(a, 0.2, 1.0));
    let sine_err = (sine / (p.c * a * a / 2.0) - 1.0).abs();
    let offset = run(a, 0.2, 0.96)
        .iter()
        .zip(run(a, 0.2, 1.04))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale_err = (tail(&run(2.0 * a, 0.2, 1.0)) / (4.0 * sine) - 1.0).abs();
    r.add(
        3,
        "detector analytics",
        constant < 1e-9 && sine_err < 0.05 && offset <= 1e-6 && scale_err < 0.01,
        format!(
            "constant y {constant:.1e}, sinusoid error {:.2}%, offset diff {offset:.1e}, scaling error {:.3}%",
            100.0 * sine_err,
            100.0 * scale_err
        ),
    );
}

fn instability(r: &mut Report) {
    let cfg = Config::preset("eval_45pct_noact").unwrap();
    let feeder = Arc::new(cfg.load_feeder().unwrap());
    let t0 = Instant::now();
    let sc = preset_scenario(&cfg.env, &feeder, cfg.env.scenario.rng_seed).unwrap();
    let (a, b) = (sc.attack_start, sc.attack_end);
    let res = run_episode(feeder, &cfg.env, sc, ObservationMode::Deployment, Controller::Null).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mean = |lo: usize, hi: usize| {
        let ys: Vec<f64> = res.log.rows[lo..hi].iter().map(|r| r.y).collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    let (pre, during, late) = (mean(0, a), mean(a, b), mean(b - 50, b));
    let comp = res.summary.reward_components;
    let share = comp.oscillation / res.summary.total_reward;
    r.add(
        4,
        "instability reproduction",
        during >= 10.0 * pre && late >= 10.0 * pre && share > 0.95 && secs < 10.0,
        format!(
            "pre-attack y {pre:.2e}, attack y {during:.3}, last 50 s {late:.3}, oscillation share {:.2}%, {secs:.2} s",
            100.0 * share
        ),
    );
}

fn reward(r: &mut Report) {
    let w = RewardWeights::default();
    let win = |y: f64, action: usize, last: usize, d: [f64; 5]| UnitWindow {
        y,
        curtail_sq: 0.0,
        action,
        last_action: last,
        delta_eta: d,
    };
    let r0 = compute_reward(&w, &[win(0.0, 60, 60, [0.0; 5]); 3]).total();
    let r1 = compute_reward(&w, &[win(1.0, 60, 60, [0.0; 5]); 3]).total();
    let r2 = compute_reward(&w, &[win(0.0, 115, 60, [0.05; 5]); 3]).total();
    let expect = -(0.05 + 18.0 * 0.05 * 5f64.sqrt());
    r.add(
        5,
        "reward arithmetic",
        r0 == 0.0 && r1 == -15.0 && r2 == expect && (r2 + 2.062).abs() < 5e-4,
        format!("{}, {r1}, {r2:.4}", r0 + 0.0),
    );
}

fn ppo(r: &mut Report) {
    let mut rng = stream_rng(9, Stream::Init, 0);
    let policy = Policy::new(Mlp::new(&[2, 4, 2], 1.0, &mut rng), vec![2]).unwrap();
    let mut b = Batch::default();
    for i in 0..8 {
        let o = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let lp = policy.dist(&o).unwrap().log_prob(&[i % 2]);
        b.obs.push(o);
        b.actions.push(vec![i % 2]);
        b.logp_old.push(lp + rng.gen_range(-0.3..0.3));
        b.advantages.push(rng.gen_range(-2.0..2.0));
    }
    let idx: Vec<usize> = (0..8).collect();
    let n = policy.net.n_params();
    let loss = |p: &Policy| policy_loss_grad(p, &b, &idx, 0.1, 0.0, &mut vec![0.0; n]).unwrap().0;
    let mut g = vec![0.0; n];
    policy_loss_grad(&policy, &b, &idx, 0.1, 0.0, &mut g).unwrap();
    let mut fd_err = 0.0f64;
    for i in 0..n {
        let (mut p, mut m) = (policy.clone(), policy.clone());
        p.net.params_mut()[i] += 1e-5;
        m.net.params_mut()[i] -= 1e-5;
        let fd = (loss(&p) - loss(&m)) / 2e-5;
        fd_err = fd_err.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
    }
    for i in 0..8 {
        b.logp_old[i] = policy.dist(&b.obs[i]).unwrap().log_prob(&b.actions[i]);
    }
    let (_, st) = policy_loss_grad(&policy, &b, &idx, 0.1, 0.0, &mut g).unwrap();
    let mean_adv = b.advantages.iter().sum::<f64>() / 8.0;
    let identity = st.clip_frac == 0.0 && (st.surrogate - mean_adv).abs() < 1e-12;

    let rewards: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..1.0)).collect();
    let values: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dones: Vec<bool> = (0..12).map(|k| k == 5 || k == 11).collect();
    let (adv, _) = compute_gae(&rewards, &values, &dones, 0.5, 0.95);
    let mut gae_err = 0.0f64;
    for t in 0..12 {
        // direct sum of discounted TD residuals up to the episode end
        let mut s = 0.0;
        let mut w = 1.0;
        for k in t..12 {
            let next = if dones[k] { 0.0 } else { values[k + 1] };
            s += w * (rewards[k] + 0.5 * next - values[k]);
            if dones[k] {
                break;
            }
            w *= 0.5 * 0.95;
        }
        gae_err = gae_err.max((s - adv[t]).abs());
    }
    r.add(
        6,
        "PPO correctness",
        fd_err < 1e-4 && identity && gae_err <= 1e-12,
        format!("gradient rel. error {fd_err:.1e}, identity ratio ok {identity}, GAE error {gae_err:.1e}"),
    );
}

fn efficacy(r: &mut Report) {
    let cfg = Config::preset("train_default").unwrap();
    let feeder = Arc::new(cfg.load_feeder().unwrap());
    let t0 = Instant::now();
    let mut trainer = Trainer::new(feeder.clone(), cfg.env.clone(), cfg.train.clone(), cfg.env.scenario.rng_seed).unwrap();
    trainer.train(|_, _| Ok(())).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let agent = &trainer.agent;

    let held = Config::preset("eval_heldout").unwrap();
    let cases = held_out_suite(&feeder, &held.env, agent, held.env.scenario.rng_seed, 20, ObservationMode::Deployment).unwrap();
    let osc: Vec<_> = cases.iter().filter(|c| c.baseline_oscillates(10.0)).collect();
    let good = osc.iter().filter(|c| c.reduction() >= 0.8).count();
    let frac_a = good as f64 / osc.len().max(1) as f64;
    let back = cases.iter().filter(|c| c.steps_to_null.is_some_and(|k| k <= 3)).count();
    let frac_c = back as f64 / cases.len() as f64;

    let am = Config::preset("eval_20pct_9am").unwrap();
    let sc = preset_scenario(&am.env, &feeder, am.env.scenario.rng_seed).unwrap();
    let morning = held_out_case(&feeder, &am.env, agent, sc, ObservationMode::Deployment, 0).unwrap();
    let ok_b = morning.reduction() >= 0.8 && morning.curtailment_energy <= 1e-9;

    r.add(
        7,
        "training efficacy (a) oscillation reduction",
        train_secs <= 7200.0 && frac_a >= 0.8,
        format!(
            "{good}/{} oscillating held-out scenarios reduced >= 80%, trained in {train_secs:.0} s",
            osc.len()
        ),
    );
    r.add(
        7,
        "training efficacy (b) morning attack without curtailment",
        ok_b,
        format!(
            "reduction {:.1}%, curtailment energy {:.2e} pu*s",
            100.0 * morning.reduction(),
            morning.curtailment_energy
        ),
    );
    r.add(
        7,
        "training efficacy (c) return to null after the attack",
        frac_c >= 0.8,
        format!("{back}/20 within 3 agent steps"),
    );
}

fn determinism(r: &mut Report) {
    let mut cfg = Config::preset("train_default").unwrap();
    cfg.train.iterations = 3;
    cfg.train.deterministic = true;
    let feeder = Arc::new(cfg.load_feeder().unwrap());
    let train = || {
        let mut t = Trainer::new(feeder.clone(), cfg.env.clone(), cfg.train.clone(), 5).unwrap();
        let recs = t.train(|_, _| Ok(())).unwrap();
        let ck = Checkpoint::new(&cfg, 5, t.iteration, &t.agent, &t.opt_p, &t.opt_v).to_bytes();
        (format!("{recs:?}"), ck)
    };
    let (a, b) = (train(), train());
    let ck = Checkpoint::from_bytes(&a.1).unwrap();
    let noon = Config::preset("eval_45pct_noon").unwrap();
    let eval = || {
        let sc = preset_scenario(&noon.env, &feeder, 1).unwrap();
        let res = run_episode(feeder.clone(), &noon.env, sc, ObservationMode::Deployment, Controller::Policy(&ck.agent)).unwrap();
        let dir = std::env::temp_dir().join(format!("dg-accept-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("episode.csv");
        res.log.write_csv(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        bytes
    };
    let same_eval = eval() == eval();
    r.add(
        8,
        "determinism",
        a == b && same_eval,
        format!("training curve and checkpoint identical {}, episode CSV identical {same_eval}", a == b),
    );
}

#[test]
fn acceptance() {
    let mut r = Report(Vec::new());
    power_flow(&mut r);
    droop_laws(&mut r);
    detector(&mut r);
    instability(&mut r);
    reward(&mut r);
    ppo(&mut r);
    efficacy(&mut r);
    determinism(&mut r);
    let failed: Vec<String> = r.0.iter().filter(|c| !c.2).map(|c| format!("{} {}", c.0, c.1)).collect();
    assert!(failed.is_empty(), "failed: {}", failed.join("; "));
}
