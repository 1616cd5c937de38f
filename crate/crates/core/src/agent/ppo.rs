//! Clipped-surrogate policy optimization.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gae::{compute_gae, normalize};
use super::mlp::Mlp;
use super::policy::Policy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    /// Learning rate of both networks.
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    /// Decay the entropy coefficient linearly to 0 over the run.
    pub entropy_decay: bool,
    pub normalize_advantages: bool,
    /// Global gradient-norm cap per network; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            lambda: 0.95,
            clip_eps: 0.1,
            lr: 1e-3,
            epochs: 4,
            minibatch: 105,
            entropy_coef: 0.01,
            entropy_decay: true,
            normalize_advantages: true,
            max_grad_norm: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::config(name, format!("{x} is outside [0, 1]")))
            }
        };
        unit("ppo.gamma", self.gamma)?;
        unit("ppo.lambda", self.lambda)?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("ppo.clip_eps", "must be in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("ppo.lr", "must be positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("ppo.minibatch", "epochs and minibatch must be positive"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("ppo.entropy_coef", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Transitions of whole episodes, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    /// One index per policy head.
    pub actions: Vec<Vec<usize>>,
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn append(&mut self, other: Batch) {
        self.obs.extend(other.obs);
        self.actions.extend(other.actions);
        self.logp_old.extend(other.logp_old);
        self.rewards.extend(other.rewards);
        self.values.extend(other.values);
        self.dones.extend(other.dones);
    }

    /// Computes advantages and returns; must run before any update.
    pub fn finish(&mut self, gamma: f64, lambda: f64, normalize_adv: bool) {
        let (mut adv, ret) = compute_gae(&self.rewards, &self.values, &self.dones, gamma, lambda);
        if normalize_adv {
            normalize(&mut adv);
        }
        self.advantages = adv;
        self.returns = ret;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyStats {
    /// Mean of `min(r A, clip(r) A)`.
    pub surrogate: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    /// Mean of `logp_old - logp_new`.
    pub approx_kl: f64,
}

/// Loss `-(surrogate + ent_coef * entropy)` over the samples `idx`; adds its
/// gradient into `grad`.
pub fn policy_loss_grad(
    policy: &Policy,
    batch: &Batch,
    idx: &[usize],
    clip_eps: f64,
    ent_coef: f64,
    grad: &mut [f64],
) -> Result<(f64, PolicyStats)> {
    let k = idx.len() as f64;
    let mut st = PolicyStats::default();
    for &i in idx {
        let (d, cache) = policy.dist_cache(&batch.obs[i])?;
        let lp = d.log_prob(&batch.actions[i]);
        let ratio = (lp - batch.logp_old[i]).exp();
        let a = batch.advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        // the clipped branch is flat in theta, so it contributes no gradient
        let d_lp = if unclipped <= clipped { ratio * a } else { 0.0 };
        let ent = d.entropy();
        st.surrogate += unclipped.min(clipped) / k;
        st.entropy += ent / k;
        st.approx_kl += (batch.logp_old[i] - lp) / k;
        if (ratio - 1.0).abs() > clip_eps {
            st.clip_frac += 1.0 / k;
        }
        let g_logits = policy.logit_grad(&d, &batch.actions[i], -d_lp / k, -ent_coef / k);
        policy.net.backward(&cache, &g_logits, grad);
    }
    Ok((-(st.surrogate + ent_coef * st.entropy), st))
}

/// Mean of `0.5 (V - R)^2` over `idx`; adds its gradient into `grad`.
pub fn value_loss_grad(value: &Mlp, batch: &Batch, idx: &[usize], grad: &mut [f64]) -> Result<f64> {
    let k = idx.len() as f64;
    let mut loss = 0.0;
    for &i in idx {
        let cache = value.forward_cache(&batch.obs[i])?;
        let err = cache.output()[0] - batch.returns[i];
        loss += 0.5 * err * err / k;
        value.backward(&cache, &[err / k], grad);
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy: PolicyStats,
    pub value_loss: f64,
}

fn clip_norm(g: &mut [f64], max: Option<f64>) {
    if let Some(max) = max {
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > max {
            g.iter_mut().for_each(|x| *x *= max / n);
        }
    }
}

/// Several epochs of minibatch steps on a finished batch. Metrics are from
/// the first minibatch pass over the data (before parameters move, the
/// surrogate equals the mean advantage). A non-finite loss restores the
/// networks and optimizers and returns an error.
pub fn ppo_update<R: Rng>(
    policy: &mut Policy,
    value: &mut Mlp,
    opt_p: &mut Adam,
    opt_v: &mut Adam,
    batch: &Batch,
    cfg: &PpoConfig,
    ent_coef: f64,
    rng: &mut R,
) -> Result<UpdateMetrics> {
    if batch.advantages.len() != batch.len() || batch.is_empty() {
        return Err(Error::Numerical("batch advantages not computed".into()));
    }
    let saved = (policy.clone(), value.clone(), opt_p.clone(), opt_v.clone());
    let mut first: Option<UpdateMetrics> = None;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut acc = UpdateMetrics::default();
        let mut n_mb = 0.0;
        for mb in order.chunks(cfg.minibatch) {
            let mut gp = vec![0.0; policy.net.n_params()];
            let (lp, st) = policy_loss_grad(policy, batch, mb, cfg.clip_eps, ent_coef, &mut gp)?;
            let mut gv = vec![0.0; value.n_params()];
            let lv = value_loss_grad(value, batch, mb, &mut gv)?;
            if !(lp.is_finite() && lv.is_finite()) || gp.iter().chain(&gv).any(|g| !g.is_finite()) {
                (*policy, *value, *opt_p, *opt_v) = saved;
                return Err(Error::Numerical(format!("non-finite loss (policy {lp}, value {lv})")));
            }
            clip_norm(&mut gp, cfg.max_grad_norm);
            clip_norm(&mut gv, cfg.max_grad_norm);
            opt_p.step(policy.net.params_mut(), &gp);
            opt_v.step(value.params_mut(), &gv);
            if first.is_none() {
                acc.policy.surrogate += st.surrogate;
                acc.policy.entropy += st.entropy;
                acc.policy.clip_frac += st.clip_frac;
                acc.policy.approx_kl += st.approx_kl;
                acc.value_loss += lv;
                n_mb += 1.0;
            }
        }
        if first.is_none() {
            acc.policy.surrogate /= n_mb;
            acc.policy.entropy /= n_mb;
            acc.policy.clip_frac /= n_mb;
            acc.policy.approx_kl /= n_mb;
            acc.value_loss /= n_mb;
            first = Some(acc);
        }
    }
    Ok(first.unwrap())
}
