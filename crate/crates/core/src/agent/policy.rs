//! Categorical policy heads on top of an [`Mlp`].
//!
//! The network output is the concatenation of one logit block per head. An
//! action is one index per head; its log-probability is the sum over heads.

use rand::Rng;

use super::mlp::{Cache, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    heads: Vec<usize>,
}

/// Per-head probabilities for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    pub probs: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
}

impl Dist {
    fn from_logits(logits: &[f64], heads: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(heads.len());
        let mut log_probs = Vec::with_capacity(heads.len());
        let mut off = 0;
        for &h in heads {
            let z = &logits[off..off + h];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let lp: Vec<f64> = z.iter().map(|v| v - lse).collect();
            probs.push(lp.iter().map(|v| v.exp()).collect());
            log_probs.push(lp);
            off += h;
        }
        Self { probs, log_probs }
    }

    pub fn log_prob(&self, action: &[usize]) -> f64 {
        self.log_probs.iter().zip(action).map(|(lp, &a)| lp[a]).sum()
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| -p.iter().zip(lp).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            })
            .collect()
    }

    /// Most likely index per head (lowest index on ties).
    pub fn greedy(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }

    /// Total variation distance summed over heads.
    pub fn total_variation(&self, other: &Dist) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .sum()
    }
}

impl Policy {
    pub fn new(net: Mlp, heads: Vec<usize>) -> Result<Self> {
        let total: usize = heads.iter().sum();
        if heads.is_empty() || heads.contains(&0) || net.output_dim() != total {
            return Err(Error::Dimension {
                expected: total,
                got: net.output_dim(),
            });
        }
        Ok(Self { net, heads })
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn dist(&self, obs: &[f64]) -> Result<Dist> {
        Ok(Dist::from_logits(&self.net.forward(obs)?, &self.heads))
    }

    pub fn dist_cache(&self, obs: &[f64]) -> Result<(Dist, Cache)> {
        let cache = self.net.forward_cache(obs)?;
        Ok((Dist::from_logits(cache.output(), &self.heads), cache))
    }

    /// `d/dlogits` of `w_lp * log pi(action) + w_ent * entropy`.
    pub fn logit_grad(&self, d: &Dist, action: &[usize], w_lp: f64, w_ent: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.net.output_dim());
        for (h, (p, lp)) in d.probs.iter().zip(&d.log_probs).enumerate() {
            let ent: f64 = -p.iter().zip(lp).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..p.len() {
                let onehot = if k == action[h] { 1.0 } else { 0.0 };
                g.push(w_lp * (onehot - p[k]) - w_ent * p[k] * (lp[k] + ent));
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = stream_rng(0, Stream::Init, 0);
        let p = Policy::new(Mlp::new(&[4, 8, 22], 1.0, &mut rng), vec![11, 11]).unwrap();
        let d = p.dist(&[1.0, -2.0, 30.0, 0.5]).unwrap();
        for h in &d.probs {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(Policy::new(Mlp::new(&[4, 5], 1.0, &mut rng), vec![11]).is_err());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let p = Policy::new(Mlp::new(&[2, 5], 1.0, &mut rng), vec![2, 3]).unwrap();
        let z = [0.3, -0.2, 1.0, 0.1, -0.5];
        let f = |z: &[f64]| {
            let d = Dist::from_logits(z, &[2, 3]);
            0.7 * d.log_prob(&[1, 2]) + 0.3 * d.entropy()
        };
        let g = p.logit_grad(&Dist::from_logits(&z, &[2, 3]), &[1, 2], 0.7, 0.3);
        for i in 0..5 {
            let mut a = z;
            a[i] += 1e-6;
            let mut b = z;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn greedy_and_sampling() {
        let d = Dist::from_logits(&[0.0, 5.0, 0.0], &[3]);
        assert_eq!(d.greedy(), vec![1]);
        let mut rng = stream_rng(0, Stream::Sampling, 0);
        let hits = (0..1000).filter(|_| d.sample(&mut rng)[0] == 1).count();
        assert!(hits > 950);
    }
}
