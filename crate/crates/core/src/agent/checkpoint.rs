//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `DGCKPT\0\0`, a little-endian `u32` format
//! version, a `u32` of zero, a `u64` header length, the JSON header, then
//! every tensor listed in the header as little-endian `f64`s, in order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::Mlp;
use super::policy::Policy;
use super::train::Agent;
use crate::config::Config;
use crate::env::{ActionConfig, ActionSpace};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: Config,
    pub seed: u64,
    pub iteration: usize,
    pub action: ActionConfig,
    pub heads: Vec<usize>,
    pub obs_dim: usize,
    /// How observations are scaled before the networks see them.
    pub observation_normalization: String,
    pub advantage_normalization: bool,
    pub policy_sizes: Vec<usize>,
    pub value_sizes: Vec<usize>,
    pub adam_steps: [u64; 2],
    pub tensors: Vec<TensorInfo>,
}

pub const OBSERVATION_NORMALIZATION: &str =
    "none: y_mean and y_max_n raw detector output; q_avail_nom per unit of inverter rating; previous action one-hot";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub agent: Agent,
    pub opt_p: Adam,
    pub opt_v: Adam,
}

impl Checkpoint {
    pub fn new(config: &Config, seed: u64, iteration: usize, agent: &Agent, opt_p: &Adam, opt_v: &Adam) -> Self {
        let np = agent.policy.net.n_params();
        let nv = agent.value.n_params();
        let t = |name: &str, len| TensorInfo { name: name.into(), len };
        let header = Header {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            seed,
            iteration,
            action: config.env.action.clone(),
            heads: agent.space.heads(),
            obs_dim: agent.policy.net.input_dim(),
            observation_normalization: OBSERVATION_NORMALIZATION.into(),
            advantage_normalization: config.train.ppo.normalize_advantages,
            policy_sizes: agent.policy.net.sizes().to_vec(),
            value_sizes: agent.value.sizes().to_vec(),
            adam_steps: [opt_p.steps(), opt_v.steps()],
            tensors: vec![
                t("policy", np),
                t("value", nv),
                t("adam_policy_m", np),
                t("adam_policy_v", np),
                t("adam_value_m", nv),
                t("adam_value_v", nv),
            ],
        };
        Self {
            header,
            agent: agent.clone(),
            opt_p: opt_p.clone(),
            opt_v: opt_v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let (_, pm, pv) = self.opt_p.state();
        let (_, vm, vv) = self.opt_v.state();
        for t in [self.agent.policy.net.params(), self.agent.value.params(), pm, pv, vm, vv] {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = bytes.get(24..24 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut rest = &bytes[24 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.len * 8;
            if rest.len() < n {
                return Err(Error::Checkpoint(format!("tensor `{}` truncated", t.name)));
            }
            tensors.push(
                rest[..n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>(),
            );
            rest = &rest[n..];
        }
        if !rest.is_empty() || tensors.len() != 6 {
            return Err(bad("unexpected tensor layout"));
        }
        let space = ActionSpace::new(&header.action)?;
        if space.heads() != header.heads {
            return Err(bad("action heads disagree with the action grid"));
        }
        let mut it = tensors.into_iter();
        let policy = Policy::new(Mlp::from_params(&header.policy_sizes, it.next().unwrap())?, header.heads.clone())?;
        let value = Mlp::from_params(&header.value_sizes, it.next().unwrap())?;
        let lr = header.config.train.ppo.lr;
        let mut opt_p = Adam::new(policy.net.n_params(), lr);
        opt_p.restore(header.adam_steps[0], it.next().unwrap(), it.next().unwrap());
        let mut opt_v = Adam::new(value.n_params(), lr);
        opt_v.restore(header.adam_steps[1], it.next().unwrap(), it.next().unwrap());
        Ok(Self {
            agent: Agent { policy, value, space },
            opt_p,
            opt_v,
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint's action space matches `action`.
    pub fn check_action_space(&self, action: &ActionConfig) -> Result<()> {
        if &self.header.action != action {
            return Err(Error::Checkpoint(format!(
                "action space mismatch: checkpoint has {} offsets x {} slopes ({:?}), config has {} x {} ({:?})",
                self.header.action.offsets.len(),
                self.header.action.slopes.len(),
                self.header.action.encoding,
                action.offsets.len(),
                action.slopes.len(),
                action.encoding
            )));
        }
        Ok(())
    }
}
