//! Radial feeder model and balanced positive-sequence power flow.
//!
//! Feeder files are plain text, one record per line, grouped in sections:
//!
//! ```text
//! # comment
//! [slack]
//! <bus-id> <voltage-pu>
//! [bus]
//! <bus-id> <p_load-pu> <q_load-pu>
//! [line]
//! <from-id> <to-id> <r-pu> <x-pu>
//! [inverter]
//! <bus-id> <capacity-pu>
//! ```
//!
//! Bus ids are free-form tokens without whitespace. The slack bus must be the
//! first `[bus]` record so that it lands at index 0. Everything after `#` on a
//! line is ignored. Sections may appear in any order and more than once; the
//! `[slack]` section holds exactly one record.

use std::collections::HashMap;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    /// Base active load (consumption), pu.
    pub p_load: f64,
    /// Base reactive load (consumption), pu.
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn impedance(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverterSite {
    pub bus: usize,
    /// Apparent power capacity, pu.
    pub s: f64,
}

/// A validated radial feeder. Bus 0 is the slack (feeder head).
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    inverters: Vec<InverterSite>,
    source_v: f64,
    // Tree rooted at bus 0: breadth-first order, parent bus and the impedance
    // of the branch feeding each bus.
    order: Vec<usize>,
    parent: Vec<usize>,
    branch_z: Vec<Complex64>,
}

impl FeederModel {
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        inverters: Vec<InverterSite>,
        source_v: f64,
    ) -> Result<Self> {
        let n = buses.len();
        if n == 0 {
            return Err(Error::Topology("feeder has no buses".into()));
        }
        if !(source_v.is_finite() && source_v > 0.0) {
            return Err(Error::Topology(format!("source voltage {source_v} must be positive")));
        }
        let mut seen = HashMap::new();
        for (i, b) in buses.iter().enumerate() {
            if seen.insert(b.id.as_str(), i).is_some() {
                return Err(Error::Topology(format!("duplicate bus `{}`", b.id)));
            }
            if !(b.p_load.is_finite() && b.q_load.is_finite()) {
                return Err(Error::Topology(format!("bus `{}` has a non-finite load", b.id)));
            }
        }
        if lines.len() + 1 != n {
            return Err(Error::Topology(format!(
                "a radial feeder with {n} buses needs {} lines, found {}",
                n - 1,
                lines.len()
            )));
        }
        let mut adjacency = vec![Vec::new(); n];
        for (k, l) in lines.iter().enumerate() {
            if l.from >= n || l.to >= n {
                return Err(Error::Topology(format!("line {k} references a missing bus")));
            }
            if l.from == l.to {
                return Err(Error::Topology(format!(
                    "line {k} ({0}-{0}) is a self loop",
                    buses[l.from].id
                )));
            }
            if !(l.r >= 0.0 && l.x >= 0.0) || !l.r.is_finite() || !l.x.is_finite() {
                return Err(Error::Topology(format!(
                    "line {}-{} has a negative or non-finite impedance",
                    buses[l.from].id, buses[l.to].id
                )));
            }
            adjacency[l.from].push((l.to, k));
            adjacency[l.to].push((l.from, k));
        }
        if n > 1 && lines.iter().all(|l| l.r == 0.0 && l.x == 0.0) {
            return Err(Error::Topology("every line has zero impedance".into()));
        }

        let mut parent = vec![usize::MAX; n];
        let mut branch_z = vec![Complex64::new(0.0, 0.0); n];
        let mut used = vec![false; lines.len()];
        let mut order = Vec::with_capacity(n);
        parent[0] = 0;
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(v, k) in &adjacency[u] {
                if used[k] {
                    continue;
                }
                used[k] = true;
                if parent[v] != usize::MAX {
                    return Err(Error::Topology(format!(
                        "line {}-{} closes a cycle",
                        buses[lines[k].from].id, buses[lines[k].to].id
                    )));
                }
                parent[v] = u;
                branch_z[v] = lines[k].impedance();
                order.push(v);
            }
        }
        if let Some(v) = (0..n).find(|&v| parent[v] == usize::MAX) {
            return Err(Error::Topology(format!(
                "bus `{}` is not connected to the slack bus",
                buses[v].id
            )));
        }

        for inv in &inverters {
            if inv.bus >= n {
                return Err(Error::Topology("inverter references a missing bus".into()));
            }
            if !(inv.s.is_finite() && inv.s > 0.0) {
                return Err(Error::Topology(format!(
                    "inverter at bus `{}` has non-positive capacity {}",
                    buses[inv.bus].id, inv.s
                )));
            }
        }

        Ok(Self {
            buses,
            lines,
            inverters,
            source_v,
            order,
            parent,
            branch_z,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn inverters(&self) -> &[InverterSite] {
        &self.inverters
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack(&self) -> usize {
        0
    }

    /// Source voltage declared in the feeder file.
    pub fn source_v(&self) -> f64 {
        self.source_v
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Parent of each bus in the tree rooted at the slack (the slack is its own parent).
    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    /// Base loads as net injections (negative consumption), pu.
    pub fn base_injections(&self) -> Vec<Complex64> {
        self.buses
            .iter()
            .map(|b| Complex64::new(-b.p_load, -b.q_load))
            .collect()
    }
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feeder(&text)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Slack,
    Bus,
    Line,
    Inverter,
}

pub fn parse_feeder(text: &str) -> Result<FeederModel> {
    fn num(tok: &str, line: usize, what: &str) -> Result<f64> {
        tok.parse::<f64>().map_err(|_| Error::Parse {
            line,
            msg: format!("bad {what} `{tok}`"),
        })
    }

    let mut section = Section::None;
    let mut slack: Option<(String, f64, usize)> = None;
    let mut buses: Vec<(Bus, usize)> = Vec::new();
    let mut raw_lines: Vec<(String, String, f64, f64, usize)> = Vec::new();
    let mut raw_invs: Vec<(String, f64, usize)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if body.starts_with('[') {
            section = match body {
                "[slack]" => Section::Slack,
                "[bus]" => Section::Bus,
                "[line]" => Section::Line,
                "[inverter]" => Section::Inverter,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown section {other}"),
                    })
                }
            };
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        let want = match section {
            Section::None => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "record outside of any section".into(),
                })
            }
            Section::Slack | Section::Inverter => 2,
            Section::Bus => 3,
            Section::Line => 4,
        };
        if toks.len() != want {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {want} fields, found {}", toks.len()),
            });
        }
        match section {
            Section::Slack => {
                if slack.is_some() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "more than one slack record".into(),
                    });
                }
                slack = Some((toks[0].to_string(), num(toks[1], lineno, "voltage")?, lineno));
            }
            Section::Bus => buses.push((
                Bus {
                    id: toks[0].to_string(),
                    p_load: num(toks[1], lineno, "p_load")?,
                    q_load: num(toks[2], lineno, "q_load")?,
                },
                lineno,
            )),
            Section::Line => raw_lines.push((
                toks[0].to_string(),
                toks[1].to_string(),
                num(toks[2], lineno, "resistance")?,
                num(toks[3], lineno, "reactance")?,
                lineno,
            )),
            Section::Inverter => {
                raw_invs.push((toks[0].to_string(), num(toks[1], lineno, "capacity")?, lineno))
            }
            Section::None => unreachable!(),
        }
    }

    let (slack_id, source_v, slack_line) = slack.ok_or_else(|| Error::Parse {
        line: text.lines().count().max(1),
        msg: "missing [slack] section".into(),
    })?;
    let index: HashMap<&str, usize> = buses
        .iter()
        .enumerate()
        .map(|(i, (b, _))| (b.id.as_str(), i))
        .collect();
    match index.get(slack_id.as_str()) {
        Some(0) => {}
        Some(_) => {
            return Err(Error::Topology(format!(
                "slack bus `{slack_id}` must be the first [bus] record"
            )))
        }
        None => {
            return Err(Error::Parse {
                line: slack_line,
                msg: format!("slack bus `{slack_id}` is not declared in [bus]"),
            })
        }
    }
    let lookup = |id: &str, line: usize| -> Result<usize> {
        index.get(id).copied().ok_or_else(|| {
            Error::Topology(format!("line {line}: reference to undeclared bus `{id}`"))
        })
    };
    let mut lines = Vec::with_capacity(raw_lines.len());
    for (f, t, r, x, ln) in &raw_lines {
        lines.push(Line {
            from: lookup(f, *ln)?,
            to: lookup(t, *ln)?,
            r: *r,
            x: *x,
        });
    }
    let mut inverters = Vec::with_capacity(raw_invs.len());
    for (b, s, ln) in &raw_invs {
        inverters.push(InverterSite {
            bus: lookup(b, *ln)?,
            s: *s,
        });
    }
    FeederModel::new(buses.into_iter().map(|(b, _)| b).collect(), lines, inverters, source_v)
}

/// The bundled balanced reduction of the IEEE 37-node feeder.
pub const IEEE37_BALANCED: &str = include_str!("../assets/ieee37_balanced.feeder");

pub fn ieee37_balanced() -> FeederModel {
    parse_feeder(IEEE37_BALANCED).expect("bundled feeder is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub voltages: Vec<Complex64>,
    pub iterations: usize,
    /// Largest bus power mismatch of the returned state, pu.
    pub residual: f64,
}

impl PowerFlowSolution {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }
}

/// Backward/forward sweep from a flat start.
///
/// `injections` are net complex power injections per bus (generation minus
/// load); the slack entry is ignored.
pub fn solve_power_flow(
    model: &FeederModel,
    injections: &[Complex64],
    source_v: f64,
    opts: PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    solve_power_flow_from(model, injections, source_v, opts, None)
}

/// Backward/forward sweep, optionally warm-started from a previous solution.
pub fn solve_power_flow_from(
    model: &FeederModel,
    injections: &[Complex64],
    source_v: f64,
    opts: PowerFlowOptions,
    initial: Option<&[Complex64]>,
) -> Result<PowerFlowSolution> {
    let n = model.n_buses();
    if injections.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: injections.len(),
        });
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::Numerical(format!(
            "invalid power flow options tol={} max_iter={}",
            opts.tol, opts.max_iter
        )));
    }
    let slack = Complex64::new(source_v, 0.0);
    let mut v: Vec<Complex64> = match initial {
        Some(init) if init.len() == n => init.to_vec(),
        _ => vec![slack; n],
    };
    v[0] = slack;

    let mut branch_i = vec![Complex64::new(0.0, 0.0); n];
    let mut residual = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        // Backward: load currents drawn at each bus, accumulated towards the root.
        for &u in &model.order {
            // current injected into the network by bus u
            branch_i[u] = (injections[u] / v[u]).conj();
        }
        let load_i: Vec<Complex64> = branch_i.clone();
        for &u in model.order.iter().skip(1).rev() {
            let p = model.parent[u];
            let child = branch_i[u];
            branch_i[p] += child;
        }
        // Forward: voltage drops along each branch; branch current flows parent -> child.
        for &u in model.order.iter().skip(1) {
            let p = model.parent[u];
            v[u] = v[p] + model.branch_z[u] * branch_i[u];
        }
        residual = 0.0;
        for u in 1..n {
            let m = (v[u] * load_i[u].conj() - injections[u]).norm();
            if !m.is_finite() || v[u].norm() < 1e-6 {
                return Err(Error::Degenerate(format!(
                    "voltage collapse at bus `{}`",
                    model.buses[u].id
                )));
            }
            residual = residual.max(m);
        }
        if residual <= opts.tol {
            return Ok(PowerFlowSolution {
                voltages: v,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}
