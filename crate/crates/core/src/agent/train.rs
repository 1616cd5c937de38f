//! Rollout collection and the training loop.
//!
//! Episode `k` of iteration `i` has global index `i * episodes_per_batch + k`.
//! Its scenario and its action sampling draw from generators keyed by that
//! index, so rollouts may run on any number of threads and still produce
//! the same batch.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::Mlp;
use super::policy::Policy;
use super::ppo::{ppo_update, Batch, PpoConfig};
use crate::env::{ActionSpace, Env, EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub episodes_per_batch: usize,
    pub hidden: Vec<usize>,
    pub ppo: PpoConfig,
    /// Rollout threads; 0 lets the pool decide.
    pub threads: usize,
    /// Single-threaded rollouts.
    pub deterministic: bool,
    /// Iterations between checkpoints.
    pub checkpoint_interval: usize,
    /// Stop after this many iterations without a better 10-iteration mean return.
    pub plateau_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            episodes_per_batch: 21,
            hidden: vec![64, 64, 32],
            ppo: PpoConfig::default(),
            threads: 0,
            deterministic: false,
            checkpoint_interval: 100,
            plateau_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.episodes_per_batch == 0 {
            return Err(Error::config("train.episodes_per_batch", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("train.hidden", "needs at least one nonzero layer"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("train.checkpoint_interval", "must be positive"));
        }
        Ok(())
    }
}

/// Policy and value networks with the action space they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: Policy,
    pub value: Mlp,
    pub space: ActionSpace,
}

impl Agent {
    pub fn new(space: ActionSpace, hidden: &[usize], seed: u64) -> Result<Self> {
        let obs = Observation::dim(space.n_actions());
        let heads = space.heads();
        let mut sizes = vec![obs];
        sizes.extend_from_slice(hidden);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut p_sizes = sizes.clone();
        p_sizes.push(heads.iter().sum());
        let policy = Policy::new(Mlp::new(&p_sizes, 0.01, &mut rng), heads)?;
        let mut v_sizes = sizes;
        v_sizes.push(1);
        let value = Mlp::new(&v_sizes, 1.0, &mut rng);
        Ok(Self { policy, value, space })
    }

    /// Most likely joint action for an observation.
    pub fn act_greedy(&self, obs: &Observation) -> Result<usize> {
        Ok(self.space.join(&self.policy.dist(&obs.to_vec())?.greedy()))
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub transitions: usize,
    /// Mean undiscounted episode return.
    pub mean_return: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    pub entropy_coef: f64,
}

pub struct Trainer {
    feeder: Arc<FeederModel>,
    env_cfg: EnvConfig,
    cfg: TrainConfig,
    seed: u64,
    pub agent: Agent,
    pub opt_p: Adam,
    pub opt_v: Adam,
    pub iteration: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(feeder: Arc<FeederModel>, env_cfg: EnvConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        env_cfg.validate()?;
        cfg.validate()?;
        let space = ActionSpace::new(&env_cfg.action)?;
        let agent = Agent::new(space, &cfg.hidden, seed)?;
        Self::with_agent(feeder, env_cfg, cfg, seed, agent, None, 0)
    }

    pub fn with_agent(
        feeder: Arc<FeederModel>,
        env_cfg: EnvConfig,
        cfg: TrainConfig,
        seed: u64,
        agent: Agent,
        opts: Option<(Adam, Adam)>,
        iteration: usize,
    ) -> Result<Self> {
        let threads = if cfg.deterministic { 1 } else { cfg.threads };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config("train.threads", e.to_string()))?;
        let (opt_p, opt_v) = opts.unwrap_or_else(|| {
            (
                Adam::new(agent.policy.net.n_params(), cfg.ppo.lr),
                Adam::new(agent.value.n_params(), cfg.ppo.lr),
            )
        });
        Ok(Self {
            feeder,
            env_cfg,
            cfg,
            seed,
            agent,
            opt_p,
            opt_v,
            iteration,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Rollouts of one iteration: the finished batch, episode returns and the
    /// number of episodes dropped after a simulation failure.
    pub fn collect(&self, iteration: usize) -> Result<(Batch, Vec<f64>, usize)> {
        let n = self.cfg.episodes_per_batch;
        let base = (iteration * n) as u64;
        let results: Vec<Result<(Batch, f64)>> = self.pool.install(|| {
            (0..n as u64)
                .into_par_iter()
                .map(|k| {
                    rollout(&self.feeder, &self.env_cfg, &self.agent, self.seed, base + k)
                })
                .collect()
        });
        let mut batch = Batch::default();
        let mut returns = Vec::new();
        let mut failed = 0;
        for r in results {
            match r {
                Ok((b, ret)) => {
                    batch.append(b);
                    returns.push(ret);
                }
                Err(Error::NonConvergence { .. } | Error::Degenerate(_)) => failed += 1,
                Err(e) => return Err(e),
            }
        }
        if batch.is_empty() {
            return Err(Error::Numerical(format!("all {n} rollouts of iteration {iteration} failed")));
        }
        let p = &self.cfg.ppo;
        batch.finish(p.gamma, p.lambda, p.normalize_advantages);
        Ok((batch, returns, failed))
    }

    pub fn entropy_coef(&self, iteration: usize) -> f64 {
        let p = &self.cfg.ppo;
        if p.entropy_decay && self.cfg.iterations > 0 {
            p.entropy_coef * (1.0 - iteration as f64 / self.cfg.iterations as f64).max(0.0)
        } else {
            p.entropy_coef
        }
    }

    /// Collects a batch and updates both networks.
    pub fn step(&mut self) -> Result<IterRecord> {
        let it = self.iteration;
        let (batch, returns, failed) = self.collect(it)?;
        let ent = self.entropy_coef(it);
        let mut rng = stream_rng(self.seed, Stream::Shuffle, it as u64);
        let m = ppo_update(
            &mut self.agent.policy,
            &mut self.agent.value,
            &mut self.opt_p,
            &mut self.opt_v,
            &batch,
            &self.cfg.ppo,
            ent,
            &mut rng,
        )?;
        self.iteration += 1;
        Ok(IterRecord {
            iteration: it,
            episodes: returns.len(),
            failed_episodes: failed,
            transitions: batch.len(),
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
            surrogate: m.policy.surrogate,
            value_loss: m.value_loss,
            clip_frac: m.policy.clip_frac,
            approx_kl: m.policy.approx_kl,
            entropy: m.policy.entropy,
            entropy_coef: ent,
        })
    }

    /// Runs to the iteration budget (or plateau), calling `on_iter` after each.
    pub fn train(&mut self, mut on_iter: impl FnMut(&Trainer, &IterRecord) -> Result<()>) -> Result<Vec<IterRecord>> {
        let mut curve = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut since_best = 0;
        while self.iteration < self.cfg.iterations {
            let rec = self.step()?;
            curve.push(rec);
            on_iter(self, &rec)?;
            if let Some(patience) = self.cfg.plateau_patience {
                let tail = &curve[curve.len().saturating_sub(10)..];
                let avg = tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64;
                if avg > best {
                    best = avg;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
        Ok(curve)
    }
}

/// One training episode in aggregate mode with sampled actions.
pub fn rollout(feeder: &Arc<FeederModel>, env_cfg: &EnvConfig, agent: &Agent, seed: u64, episode: u64) -> Result<(Batch, f64)> {
    let mut env = Env::new(feeder.clone(), env_cfg.clone())?;
    let mut rng = stream_rng(seed, Stream::Sampling, episode);
    let mut obs = env.reset(seed, episode)?;
    let mut b = Batch::default();
    let mut ret = 0.0;
    loop {
        let x = obs.to_vec();
        let d = agent.policy.dist(&x)?;
        let a = d.sample(&mut rng);
        let v = agent.value.forward(&x)?[0];
        let out = env.step(agent.space.join(&a))?;
        let r = out.reward.total();
        ret += r;
        b.logp_old.push(d.log_prob(&a));
        b.obs.push(x);
        b.actions.push(a);
        b.rewards.push(r);
        b.values.push(v);
        b.dones.push(out.done);
        if out.done {
            return Ok((b, ret));
        }
        obs = env.observe();
    }
}
