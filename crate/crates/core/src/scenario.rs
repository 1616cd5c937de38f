//! Randomized episode scenarios: load and solar profiles, which inverters the
//! attacker holds, when the attack runs and what curve it installs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::inverter::{snap, DroopCurve, MIN_GAP};

/// When the attack runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackWindow {
    /// `[start, end)` in steps.
    Fixed([usize; 2]),
    /// Start drawn uniformly from `[100, episode_len - attack_duration]`.
    Randomized(RandomizedTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomizedTag {
    Randomized,
}

/// How the compromised share of capacity is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Whole inverters, capacity-weighted, until the feeder-wide fraction is met.
    Global,
    /// Every site is split: the drawn fraction of its capacity is compromised.
    PerNode,
}

/// What the attack offset is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackAnchor {
    /// Offset applied to the default curve as is.
    Nominal,
    /// The steepened curve is re-centred on the compromised inverters' mean
    /// filtered voltage at attack onset, then offset.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Steps per episode (1 s each).
    pub episode_len: usize,
    /// Steps between agent interactions.
    pub agent_period: usize,
    /// Peak solar as a fraction of total nominal load.
    pub pv_penetration: f64,
    /// Inverter capacity margin over rated active power.
    pub oversize: f64,
    pub attack_fraction_range: [f64; 2],
    pub attack_window: AttackWindow,
    /// Length of a randomized attack, steps.
    pub attack_duration: usize,
    pub attack_offset: f64,
    /// Amount removed from every breakpoint gap of the compromised curve.
    pub attack_slope: f64,
    pub attack_anchor: AttackAnchor,
    pub selection: Selection,
    /// Clock hour at episode start is drawn from this range.
    pub hour_range: [f64; 2],
    pub sunrise_hour: f64,
    pub day_length_hours: f64,
    /// Bounds of the per-bus load multiplier.
    pub load_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            episode_len: 700,
            agent_period: 35,
            pv_penetration: 0.5,
            oversize: 0.10,
            attack_fraction_range: [0.15, 0.50],
            attack_window: AttackWindow::Randomized(RandomizedTag::Randomized),
            attack_duration: 250,
            attack_offset: -0.004,
            attack_slope: 0.05,
            attack_anchor: AttackAnchor::Measured,
            selection: Selection::Global,
            hour_range: [5.0, 19.0],
            sunrise_hour: 6.0,
            day_length_hours: 12.0,
            load_range: [0.7, 1.3],
            rng_seed: 0,
        }
    }
}

/// Earliest randomized attack start, steps.
pub const EARLIEST_ATTACK: usize = 100;

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(Error::config("episode_len", "must be positive"));
        }
        if self.agent_period == 0 || self.agent_period > self.episode_len {
            return Err(Error::config("agent_period", "must be in 1..=episode_len"));
        }
        if !(self.pv_penetration >= 0.0 && self.pv_penetration.is_finite()) {
            return Err(Error::config("pv_penetration", "must be nonnegative"));
        }
        if !(self.oversize >= 0.0 && self.oversize.is_finite()) {
            return Err(Error::config("oversize", "must be nonnegative"));
        }
        let [lo, hi] = self.attack_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(
                "attack_fraction_range",
                format!("[{lo}, {hi}] must satisfy 0 < lo <= hi < 1"),
            ));
        }
        match self.attack_window {
            AttackWindow::Fixed([s, e]) => {
                if !(s < e && e <= self.episode_len) {
                    return Err(Error::config(
                        "attack_window",
                        format!("[{s}, {e}] must satisfy start < end <= episode_len"),
                    ));
                }
            }
            AttackWindow::Randomized(_) => {
                if self.attack_duration == 0
                    || EARLIEST_ATTACK + self.attack_duration > self.episode_len
                {
                    return Err(Error::config(
                        "attack_duration",
                        format!(
                            "a randomized attack of {} steps does not fit after step {EARLIEST_ATTACK}",
                            self.attack_duration
                        ),
                    ));
                }
            }
        }
        if !(self.attack_offset.abs() <= 0.2) {
            return Err(Error::config("attack_offset", "must lie within +-0.2 pu"));
        }
        if !(self.attack_slope >= 0.0 && self.attack_slope <= 0.2) {
            return Err(Error::config("attack_slope", "must lie in [0, 0.2] pu"));
        }
        let [h0, h1] = self.hour_range;
        if !(0.0 <= h0 && h0 <= h1 && h1 <= 24.0) {
            return Err(Error::config("hour_range", "must be an ordered range within [0, 24]"));
        }
        if !(self.day_length_hours > 0.0 && self.day_length_hours <= 24.0) {
            return Err(Error::config("day_length_hours", "must be in (0, 24]"));
        }
        let [l0, l1] = self.load_range;
        if !(0.0 <= l0 && l0 <= 1.0 && 1.0 <= l1 && l1.is_finite()) {
            return Err(Error::config("load_range", "must bracket 1.0 with a nonnegative floor"));
        }
        Ok(())
    }

    /// Clear-sky shape in [0, 1] at clock hour `hour`.
    pub fn clear_sky(&self, hour: f64) -> f64 {
        let x = (hour - self.sunrise_hour) / self.day_length_hours;
        if (0.0..=1.0).contains(&x) {
            (std::f64::consts::PI * x).sin().max(0.0)
        } else {
            0.0
        }
    }
}

/// One inverter as simulated. With per-node selection a site yields two units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub bus: usize,
    pub s: f64,
    pub compromised: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScenario {
    pub units: Vec<Unit>,
    /// `[step][bus]` load multiplier.
    pub load_profile: Vec<Vec<f64>>,
    /// `[step][unit]` available solar output, pu.
    pub solar_profile: Vec<Vec<f64>>,
    pub attack_start: usize,
    pub attack_end: usize,
    /// Compromised curve before any measured-voltage re-centring.
    pub attacked_curve: DroopCurve,
    pub anchor: AttackAnchor,
    pub attack_offset: f64,
    /// Clock hour at step 0.
    pub hour: f64,
    /// Realized compromised share of installed capacity.
    pub compromised_fraction: f64,
}

impl EpisodeScenario {
    pub fn attack_active(&self, step: usize) -> bool {
        (self.attack_start..self.attack_end).contains(&step)
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn uncompromised(&self) -> impl Iterator<Item = usize> + '_ {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| !u.compromised)
            .map(|(i, _)| i)
    }
}

/// Steepened attack curve: every breakpoint gap of `default` shrinks by
/// `attack_slope` (down to [`MIN_GAP`]) about the deadband centre, then the
/// curve is translated by `attack_offset`.
pub fn attacked_curve(default: &DroopCurve, config: &ScenarioConfig) -> Result<DroopCurve> {
    let e = default.eta();
    let gap = |k: usize| (e[k + 1] - e[k] - config.attack_slope).max(MIN_GAP);
    let (g12, g34, g45) = (gap(0), gap(2), gap(3));
    // the deadband may be empty in a valid curve; keep it that way
    let g23 = if e[2] == e[1] { 0.0 } else { gap(1) };
    let mid = 0.5 * (e[1] + e[2]) + config.attack_offset;
    let e2 = mid - 0.5 * g23;
    let e3 = mid + 0.5 * g23;
    DroopCurve::new([e2 - g12, e2, e3, e3 + g34, e3 + g34 + g45])
}

/// Translates `curve` so its deadband centre sits at `centre + offset`.
pub fn recentre(curve: &DroopCurve, centre: f64, offset: f64) -> Result<DroopCurve> {
    let e = curve.eta();
    let shift = snap(centre + offset - 0.5 * (e[1] + e[2]));
    DroopCurve::new(e.map(|x| x + shift))
}

pub fn generate_scenario<R: Rng>(
    config: &ScenarioConfig,
    model: &FeederModel,
    default_curve: &DroopCurve,
    rng: &mut R,
) -> Result<EpisodeScenario> {
    config.validate()?;
    let sites = model.inverters();
    if sites.is_empty() {
        return Err(Error::config("feeder", "no inverters to defend with"));
    }
    let n_bus = model.n_buses();
    let len = config.episode_len;

    let [h0, h1] = config.hour_range;
    let hour = if h1 > h0 { rng.gen_range(h0..=h1) } else { h0 };

    let [f0, f1] = config.attack_fraction_range;
    let target = if f1 > f0 { rng.gen_range(f0..=f1) } else { f0 };
    let total_s: f64 = sites.iter().map(|s| s.s).sum();
    let units: Vec<Unit> = match config.selection {
        Selection::Global => {
            let mut pool: Vec<usize> = (0..sites.len()).collect();
            let mut hit = vec![false; sites.len()];
            let mut acc = 0.0;
            while !pool.is_empty() {
                let pick = *pool
                    .choose_weighted(rng, |&i| sites[i].s)
                    .expect("capacities are positive");
                pool.retain(|&i| i != pick);
                let s = sites[pick].s;
                if (acc + s - target * total_s).abs() < (acc - target * total_s).abs() {
                    hit[pick] = true;
                    acc += s;
                }
            }
            sites
                .iter()
                .zip(&hit)
                .map(|(site, &h)| Unit {
                    bus: site.bus,
                    s: site.s,
                    compromised: h,
                })
                .collect()
        }
        Selection::PerNode => sites
            .iter()
            .flat_map(|site| {
                [
                    Unit { bus: site.bus, s: target * site.s, compromised: true },
                    Unit { bus: site.bus, s: (1.0 - target) * site.s, compromised: false },
                ]
            })
            .collect(),
    };
    if units.iter().all(|u| u.compromised) {
        return Err(Error::config(
            "attack_fraction_range",
            "every inverter would be compromised; none left to defend with",
        ));
    }
    let compromised_fraction =
        units.iter().filter(|u| u.compromised).map(|u| u.s).sum::<f64>() / total_s;

    let (attack_start, attack_end) = match config.attack_window {
        AttackWindow::Fixed([s, e]) => (s, e),
        AttackWindow::Randomized(_) => {
            let s = rng.gen_range(EARLIEST_ATTACK..=len - config.attack_duration);
            (s, s + config.attack_duration)
        }
    };

    // Load: feeder-wide level, a per-bus offset and two slow sinusoids.
    let [l0, l1] = config.load_range;
    let span = l1 - l0;
    let level = 1.0 + rng.gen_range(-1.0..=1.0) * span / 6.0;
    let mut per_bus = Vec::with_capacity(n_bus);
    for _ in 0..n_bus {
        let base = level + rng.gen_range(-1.0..=1.0) * span / 6.0;
        let waves: [(f64, f64, f64); 2] = std::array::from_fn(|_| {
            (
                rng.gen_range(0.0..=span / 12.0),
                rng.gen_range(600.0..3000.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        });
        per_bus.push((base, waves));
    }
    let load_profile = (0..len)
        .map(|t| {
            per_bus
                .iter()
                .map(|(base, waves)| {
                    let w: f64 = waves
                        .iter()
                        .map(|(a, p, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                        .sum();
                    (base + w).clamp(l0, l1)
                })
                .collect()
        })
        .collect();

    let total_load: f64 = model.buses().iter().map(|b| b.p_load).sum();
    let peak: Vec<f64> = units
        .iter()
        .map(|u| (config.pv_penetration * total_load * u.s / total_s).min(u.s / (1.0 + config.oversize)))
        .collect();
    let solar_profile = (0..len)
        .map(|t| {
            let shape = config.clear_sky(hour + t as f64 / 3600.0);
            peak.iter().map(|p| p * shape).collect()
        })
        .collect();

    Ok(EpisodeScenario {
        units,
        load_profile,
        solar_profile,
        attack_start,
        attack_end,
        attacked_curve: attacked_curve(default_curve, config)?,
        anchor: config.attack_anchor,
        attack_offset: config.attack_offset,
        hour,
        compromised_fraction,
    })
}
