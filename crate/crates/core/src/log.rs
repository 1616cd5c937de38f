//! Per-tick episode records and their CSV forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::RewardBreakdown;
use crate::error::{Error, Result};
use crate::feeder::FeederModel;

/// One row of the episode CSV. Reward columns carry the reward of the agent
/// window the tick belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TickRow {
    pub step: usize,
    pub v: f64,
    pub y: f64,
    pub translation: f64,
    pub slope: f64,
    pub translation_adv: f64,
    pub slope_adv: f64,
    pub component_y: f64,
    pub component_oa: f64,
    pub component_init: f64,
    pub component_pset_pmax: f64,
    pub total_reward: f64,
}

pub const COLUMNS: [&str; 12] = [
    "step",
    "v",
    "y",
    "translation",
    "slope",
    "translation_adv",
    "slope_adv",
    "component_y",
    "component_oa",
    "component_init",
    "component_pset_pmax",
    "total_reward",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub bus_ids: Vec<String>,
    pub rows: Vec<TickRow>,
    /// `[tick][bus]` voltage magnitudes.
    pub voltages: Vec<Vec<f64>>,
}

impl EpisodeLog {
    pub fn new(feeder: &FeederModel) -> Self {
        Self {
            bus_ids: feeder.buses().iter().map(|b| b.id.clone()).collect(),
            rows: Vec::new(),
            voltages: Vec::new(),
        }
    }

    pub fn push(&mut self, row: TickRow, voltages: Vec<f64>) {
        self.rows.push(row);
        self.voltages.push(voltages);
    }

    /// Writes `reward` into every row from index `from` on.
    pub fn set_reward(&mut self, from: usize, r: &RewardBreakdown) {
        for row in &mut self.rows[from..] {
            row.component_y = r.oscillation;
            row.component_oa = r.action_change;
            row.component_init = r.deviation;
            row.component_pset_pmax = r.curtailment;
            row.total_reward = r.total();
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Wide file: `step` then one column per bus.
    pub fn write_voltages_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["step".to_string()];
        header.extend(self.bus_ids.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (r, v) in self.rows.iter().zip(&self.voltages) {
            let mut rec = vec![r.step.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Log(format!("{}: {e}", path.display()))
}

/// Reads an episode CSV, checking the header against [`COLUMNS`].
pub fn read_episode_csv(path: &Path) -> Result<Vec<TickRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Log(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            COLUMNS.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<TickRow>, _>>()
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        return Err(Error::Log(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Span {
    pub mean_y: f64,
    pub max_y: f64,
}

impl Span {
    fn of(rows: &[TickRow]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        Self {
            mean_y: rows.iter().map(|r| r.y).sum::<f64>() / rows.len() as f64,
            max_y: rows.iter().map(|r| r.y).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub attack_start: usize,
    pub attack_end: usize,
    pub before: Span,
    pub during: Span,
    pub after: Span,
    pub total_reward: f64,
    /// Sum over agent windows of each reward component.
    pub reward_components: RewardBreakdown,
    /// Curtailment commanded on the defended inverters, pu·s.
    pub curtailment_energy: f64,
}

impl EpisodeSummary {
    pub fn new(log: &EpisodeLog, windows: &[RewardBreakdown], attack: (usize, usize), curtailment: f64) -> Self {
        let (a, b) = attack;
        let part = |lo: usize, hi: usize| -> Vec<TickRow> {
            log.rows.iter().filter(|r| r.step >= lo && r.step < hi).copied().collect()
        };
        let sum = windows.iter().fold(RewardBreakdown::default(), |acc, w| RewardBreakdown {
            oscillation: acc.oscillation + w.oscillation,
            action_change: acc.action_change + w.action_change,
            deviation: acc.deviation + w.deviation,
            curtailment: acc.curtailment + w.curtailment,
        });
        Self {
            attack_start: a,
            attack_end: b,
            before: Span::of(&part(0, a)),
            during: Span::of(&part(a, b)),
            after: Span::of(&part(b, usize::MAX)),
            total_reward: sum.total(),
            reward_components: sum,
            curtailment_energy: curtailment,
        }
    }
}
