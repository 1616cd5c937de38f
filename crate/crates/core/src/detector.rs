//! Oscillation-energy observer.
//!
//! A first-order high-pass strips the operating point from the bus voltage,
//! a square law with gain `c` turns the residual swing into power, and a
//! first-order low-pass extracts its DC level. Both filters are bilinear
//! transforms of the analog prototypes with the cutoffs pre-warped.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// High-pass cutoff, Hz.
    pub f_hp: f64,
    /// Low-pass cutoff, Hz.
    pub f_lp: f64,
    /// Square-law gain.
    pub c: f64,
    /// Sample interval, s.
    pub dt: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            f_hp: 0.02,
            f_lp: 0.01,
            c: 8000.0,
            dt: 1.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let nyquist = 0.5 / self.dt;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "sample interval must be positive"));
        }
        if !(self.f_lp > 0.0 && self.f_lp < self.f_hp && self.f_hp < nyquist) {
            return Err(Error::config(
                "f_hp",
                format!(
                    "need 0 < f_lp ({}) < f_hp ({}) < Nyquist ({nyquist})",
                    self.f_lp, self.f_hp
                ),
            ));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("c", "square-law gain must be positive"));
        }
        Ok(())
    }
}

/// First-order bilinear section: `y = b0*x + b1*x_prev - a1*y_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FirstOrder {
    b0: f64,
    b1: f64,
    a1: f64,
    x_prev: f64,
    y_prev: f64,
}

impl FirstOrder {
    fn warped(f_c: f64, dt: f64) -> (f64, f64) {
        let k = 2.0 / dt;
        let wc = k * (PI * f_c * dt).tan();
        (k, wc)
    }

    fn high_pass(f_c: f64, dt: f64) -> Self {
        let (k, wc) = Self::warped(f_c, dt);
        let d = k + wc;
        Self {
            b0: k / d,
            b1: -k / d,
            a1: -(k - wc) / d,
            x_prev: 0.0,
            y_prev: 0.0,
        }
    }

    fn low_pass(f_c: f64, dt: f64) -> Self {
        let (k, wc) = Self::warped(f_c, dt);
        let d = k + wc;
        Self {
            b0: wc / d,
            b1: wc / d,
            a1: -(k - wc) / d,
            x_prev: 0.0,
            y_prev: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x_prev - self.a1 * self.y_prev;
        self.x_prev = x;
        self.y_prev = y;
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillationFilter {
    params: DetectorParams,
    hp: FirstOrder,
    lp: FirstOrder,
    primed: bool,
}

impl OscillationFilter {
    pub fn new(params: DetectorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            hp: FirstOrder::high_pass(params.f_hp, params.dt),
            lp: FirstOrder::low_pass(params.f_lp, params.dt),
            primed: false,
        })
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    /// Last energy output (0 before the first sample).
    pub fn output(&self) -> f64 {
        self.lp.y_prev
    }

    /// Feeds one voltage sample and returns the oscillation energy.
    pub fn step(&mut self, v: f64) -> f64 {
        if !self.primed {
            // seed the input history so a nonzero operating point is not a step
            self.hp.x_prev = v;
            self.primed = true;
        }
        let dv = self.hp.step(v);
        let w = self.params.c * dv * dv;
        // the LP of a nonnegative input is nonnegative in exact arithmetic
        self.lp.step(w).max(0.0)
    }

    /// Clears all filter memory.
    pub fn reset(&mut self) {
        *self = Self::new(self.params).expect("params validated at construction");
    }
}

/// Mean of the current window and the maximum of that mean over the last `n`
/// windows, where `history` holds earlier window means, oldest first.
pub fn window_stats(y_samples: &[f64], history: &[f64], n: usize) -> Result<(f64, f64)> {
    if y_samples.is_empty() {
        return Err(Error::Numerical("empty detector window".into()));
    }
    if n == 0 {
        return Err(Error::config("history_len", "must be at least 1"));
    }
    let mean = y_samples.iter().sum::<f64>() / y_samples.len() as f64;
    let keep = history.len().min(n - 1);
    let max = history[history.len() - keep..]
        .iter()
        .copied()
        .fold(mean, f64::max);
    Ok((mean, max))
}

/// Fixed-length store of past window means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowHistory {
    len: usize,
    means: VecDeque<f64>,
}

impl WindowHistory {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            means: VecDeque::with_capacity(len),
        }
    }

    /// Computes `(mean, max)` for a finished window and records its mean.
    pub fn close_window(&mut self, y_samples: &[f64]) -> Result<(f64, f64)> {
        let hist: Vec<f64> = self.means.iter().copied().collect();
        let (mean, max) = window_stats(y_samples, &hist, self.len)?;
        if self.means.len() == self.len {
            self.means.pop_front();
        }
        self.means.push_back(mean);
        Ok((mean, max))
    }

    pub fn means(&self) -> impl Iterator<Item = f64> + '_ {
        self.means.iter().copied()
    }
}
