//! Run configuration: TOML files, named presets and the feeder they point at.
//!
//! A config file has a top-level `feeder` key and the tables `[env]` (with
//! sub-tables `scenario`, `inverter`, `detector`, `reward`, `action`,
//! `power_flow`), `[train]` (with `ppo`) and `[eval]`. Every field has a
//! default, so a file only lists what it changes. Unknown keys are errors.
//!
//! `feeder` is either `builtin:ieee37_balanced` or a path, relative paths
//! being resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::train::TrainConfig;
use crate::env::{EnvConfig, ObservationMode};
use crate::error::{Error, Result};
use crate::feeder::{ieee37_balanced, load_feeder, FeederModel};

pub const BUILTIN_FEEDER: &str = "builtin:ieee37_balanced";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Hold every defended inverter at the null action.
    pub null_policy: bool,
    pub mode: ObservationMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            null_policy: false,
            mode: ObservationMode::Deployment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub feeder: String,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative feeder paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            feeder: BUILTIN_FEEDER.to_string(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: None,
        }
    }
}

pub const PRESETS: [(&str, &str); 5] = [
    ("train_default", include_str!("../presets/train_default.toml")),
    ("eval_20pct_9am", include_str!("../presets/eval_20pct_9am.toml")),
    ("eval_45pct_noon", include_str!("../presets/eval_45pct_noon.toml")),
    ("eval_45pct_noact", include_str!("../presets/eval_45pct_noact.toml")),
    ("eval_heldout", include_str!("../presets/eval_heldout.toml")),
];

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[..s.start].lines().count().to_string())
                .map_or_else(|| "config".to_string(), |l| format!("line {l}"));
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                Error::config("preset", format!("unknown preset `{name}` (have {})", names.join(", ")))
            })
            .and_then(|(_, text)| Self::from_toml(text))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()
    }

    pub fn feeder_path(&self) -> Option<PathBuf> {
        if self.feeder == BUILTIN_FEEDER {
            return None;
        }
        let p = PathBuf::from(&self.feeder);
        Some(match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p,
        })
    }

    pub fn load_feeder(&self) -> Result<FeederModel> {
        match self.feeder_path() {
            None => Ok(ieee37_balanced()),
            Some(p) => load_feeder(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::AttackWindow;

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            let c = Config::preset(name).unwrap();
            c.load_feeder().unwrap();
        }
        let noact = Config::preset("eval_45pct_noact").unwrap();
        assert!(noact.eval.null_policy);
        assert_eq!(noact.env.scenario.attack_window, AttackWindow::Fixed([200, 450]));
        assert_eq!(noact.env.scenario.attack_fraction_range, [0.45, 0.45]);
    }

    #[test]
    fn round_trip() {
        let c = Config::preset("train_default").unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let e = Config::from_toml("[env.scenario]\nagent_period = 0\n").unwrap_err();
        assert!(e.to_string().contains("agent_period"), "{e}");
        let e = Config::from_toml("[env]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(Config::preset("nope").is_err());
    }

    #[test]
    fn relative_feeder_paths() {
        let mut c = Config {
            feeder: "f.feeder".into(),
            ..Default::default()
        };
        c.base_dir = Some(PathBuf::from("/x/y"));
        assert_eq!(c.feeder_path().unwrap(), PathBuf::from("/x/y/f.feeder"));
        let err = c.load_feeder().unwrap_err().to_string();
        assert!(err.contains("/x/y/f.feeder"));
    }
}
