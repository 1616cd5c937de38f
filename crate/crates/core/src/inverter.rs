//! Smart-inverter Volt-VAR / Volt-Watt droop control.
//!
//! Active power is decided first (Volt-Watt precedence); the reactive limit is
//! the apparent-power headroom left over, and Volt-VAR scales within it. Both
//! outputs and the voltage measurement pass through first-order discrete
//! smoothing with per-step gains in (0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Breakpoints are kept on a 2^-40 pu lattice. Sums of lattice values below
/// 2 pu are exact in f64, so translating a curve and translating it back
/// restores it bit for bit.
const LATTICE: f64 = (1u64 << 40) as f64;

pub(crate) fn snap(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

/// Smallest spacing kept between breakpoints that bound a sloped segment, pu.
pub const MIN_GAP: f64 = 0.005;

/// The five voltage breakpoints `[eta1, ..., eta5]` of the VV/VW curves, pu.
///
/// VV injects full available VARs below `eta1`, ramps to zero at `eta2`, is
/// idle on the deadband up to `eta3`, and ramps to full absorption at `eta4`.
/// VW curtails linearly from full output at `eta4` to zero at `eta5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct DroopCurve {
    eta: [f64; 5],
}

impl DroopCurve {
    pub const DEFAULT_ETA: [f64; 5] = [0.95, 0.98, 1.02, 1.05, 1.10];

    pub fn new(eta: [f64; 5]) -> Result<Self> {
        let eta = eta.map(snap);
        let bad = |msg: &str| Error::InvalidCurve {
            eta,
            msg: msg.to_string(),
        };
        if eta.iter().any(|e| !(e.is_finite() && *e > 0.5 && *e < 1.5)) {
            return Err(bad("breakpoints must lie in (0.5, 1.5) pu"));
        }
        if !(eta[0] < eta[1] && eta[1] <= eta[2] && eta[2] < eta[3] && eta[3] < eta[4]) {
            return Err(bad("breakpoints must satisfy eta1 < eta2 <= eta3 < eta4 < eta5"));
        }
        Ok(Self { eta })
    }

    pub fn eta(&self) -> [f64; 5] {
        self.eta
    }

    /// Breakpoint deviation from `other`, the Δη vector of an action.
    pub fn delta_from(&self, other: &DroopCurve) -> [f64; 5] {
        std::array::from_fn(|k| self.eta[k] - other.eta[k])
    }
}

impl Default for DroopCurve {
    fn default() -> Self {
        Self::new(Self::DEFAULT_ETA).expect("default curve is valid")
    }
}

impl TryFrom<[f64; 5]> for DroopCurve {
    type Error = Error;

    fn try_from(eta: [f64; 5]) -> Result<Self> {
        Self::new(eta)
    }
}

impl From<DroopCurve> for [f64; 5] {
    fn from(c: DroopCurve) -> Self {
        c.eta
    }
}

/// Volt-Watt: active power set point for filtered voltage `v_bar`.
pub fn volt_watt(curve: &DroopCurve, v_bar: f64, p_max: f64) -> f64 {
    let [_, _, _, e4, e5] = curve.eta;
    if v_bar <= e4 {
        p_max
    } else if v_bar <= e5 {
        (e5 - v_bar) / (e5 - e4) * p_max
    } else {
        0.0
    }
}

/// Reactive headroom left after active output `u_p` on an inverter of capacity `s`.
pub fn var_headroom(s: f64, u_p: f64) -> f64 {
    (s * s - u_p * u_p).max(0.0).sqrt()
}

/// Volt-VAR: reactive set point for filtered voltage `v_bar` (positive injects).
pub fn volt_var(curve: &DroopCurve, v_bar: f64, q_avail: f64) -> f64 {
    let [e1, e2, e3, e4, _] = curve.eta;
    if v_bar <= e1 {
        q_avail
    } else if v_bar <= e2 {
        (e2 - v_bar) / (e2 - e1) * q_avail
    } else if v_bar < e3 {
        0.0
    } else if v_bar <= e4 {
        -(v_bar - e3) / (e4 - e3) * q_avail
    } else {
        -q_avail
    }
}

/// Reshapes `curve_default` by an agent action.
///
/// `offset` translates every breakpoint. A positive `slope_delta` moves
/// `eta1` towards `eta2` and `eta4` towards `eta3`, steepening both sloped VV
/// segments; a negative one flattens them. Gaps are clamped to [`MIN_GAP`]
/// (and `eta4` stays at least `MIN_GAP` below `eta5`).
pub fn apply_action(curve_default: &DroopCurve, offset: f64, slope_delta: f64) -> Result<DroopCurve> {
    if !(offset.is_finite() && slope_delta.is_finite()) {
        return Err(Error::InvalidCurve {
            eta: curve_default.eta,
            msg: format!("non-finite action ({offset}, {slope_delta})"),
        });
    }
    let offset = snap(offset);
    let slope_delta = snap(slope_delta);
    let mut eta = curve_default.eta.map(|e| e + offset);
    if slope_delta != 0.0 {
        let g12 = (eta[1] - eta[0] - slope_delta).max(MIN_GAP);
        let g34 = (eta[3] - eta[2] - slope_delta)
            .max(MIN_GAP)
            .min(eta[4] - eta[2] - MIN_GAP);
        eta[0] = eta[1] - g12;
        eta[3] = eta[2] + g34;
    }
    DroopCurve::new(eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverterParams {
    pub tau_m: f64,
    pub tau_o: f64,
}

impl Default for InverterParams {
    fn default() -> Self {
        Self {
            tau_m: 0.9,
            tau_o: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverterState {
    pub v_bar: f64,
    pub p: f64,
    pub q: f64,
    pub tau_m: f64,
    pub tau_o: f64,
    pub s: f64,
    pub p_max: f64,
    pub curve: DroopCurve,
    pub compromised: bool,
}

impl InverterState {
    /// A new inverter resting at the equilibrium for a constant voltage `v`.
    pub fn at_equilibrium(
        s: f64,
        p_max: f64,
        curve: DroopCurve,
        params: InverterParams,
        v: f64,
    ) -> Result<Self> {
        for (name, tau) in [("tau_m", params.tau_m), ("tau_o", params.tau_o)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::config(name, format!("{tau} is outside (0, 1]")));
            }
        }
        if !(s > 0.0) {
            return Err(Error::config("s", "inverter capacity must be positive"));
        }
        let mut st = Self {
            v_bar: v,
            p: 0.0,
            q: 0.0,
            tau_m: params.tau_m,
            tau_o: params.tau_o,
            s,
            p_max: p_max.clamp(0.0, s),
            curve,
            compromised: false,
        };
        let (p, q) = st.targets(v);
        st.p = p;
        st.q = q;
        Ok(st)
    }

    /// Sets the available solar output, capped at the inverter capacity.
    pub fn set_p_max(&mut self, p_max: f64) {
        self.p_max = p_max.clamp(0.0, self.s);
    }

    /// Equilibrium outputs for filtered voltage `v_bar`.
    pub fn targets(&self, v_bar: f64) -> (f64, f64) {
        let p = volt_watt(&self.curve, v_bar, self.p_max);
        let q = volt_var(&self.curve, v_bar, var_headroom(self.s, p));
        (p, q)
    }

    /// Reactive headroom with no curtailment.
    pub fn nominal_headroom(&self) -> f64 {
        var_headroom(self.s, self.p_max)
    }

    /// One discrete step of the measurement and output filters.
    pub fn step(&self, v_meas: f64) -> Self {
        let v_bar = self.v_bar + self.tau_m * (v_meas - self.v_bar);
        let (p_t, q_t) = self.targets(v_bar);
        Self {
            v_bar,
            p: self.p + self.tau_o * (p_t - self.p),
            q: self.q + self.tau_o * (q_t - self.q),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve() -> DroopCurve {
        DroopCurve::default()
    }

    #[test]
    fn volt_watt_branches() {
        let c = curve();
        assert_eq!(volt_watt(&c, 0.9, 0.8), 0.8);
        assert_eq!(volt_watt(&c, 1.05, 0.8), 0.8);
        let mid = (c.eta()[3] + c.eta()[4]) / 2.0;
        assert!((volt_watt(&c, mid, 0.8) - 0.4).abs() < 1e-12);
        assert_eq!(volt_watt(&c, 1.11, 0.8), 0.0);
    }

    #[test]
    fn headroom_law() {
        let p_rated = 0.37;
        let q = var_headroom(1.1 * p_rated, p_rated);
        assert!((q - 0.21f64.sqrt() * p_rated).abs() < 1e-15);
        assert!((q / p_rated - 0.458).abs() < 5e-4);
        assert_eq!(var_headroom(0.5, 0.0), 0.5);
        assert_eq!(var_headroom(0.5, 0.5), 0.0);
    }

    #[test]
    fn volt_var_branches() {
        let c = curve();
        let [e1, e2, e3, e4, _] = c.eta();
        assert_eq!(volt_var(&c, e1 - 0.01, 0.3), 0.3);
        assert_eq!(volt_var(&c, e1, 0.3), 0.3);
        assert_eq!(volt_var(&c, e2, 0.3), 0.0);
        assert_eq!(volt_var(&c, 1.0, 0.3), 0.0);
        assert_eq!(volt_var(&c, e3, 0.3), 0.0);
        assert!((volt_var(&c, (e3 + e4) / 2.0, 0.3) + 0.15).abs() < 1e-12);
        assert!((volt_var(&c, (e1 + e2) / 2.0, 0.3) - 0.15).abs() < 1e-12);
        assert_eq!(volt_var(&c, e4, 0.3), -0.3);
        assert_eq!(volt_var(&c, 1.2, 0.3), -0.3);
    }

    #[test]
    fn curve_validation() {
        assert!(DroopCurve::new([0.95, 0.98, 0.98, 1.05, 1.1]).is_ok());
        assert!(DroopCurve::new([0.98, 0.98, 1.02, 1.05, 1.1]).is_err());
        assert!(DroopCurve::new([0.95, 0.98, 1.02, 1.10, 1.1]).is_err());
        assert!(DroopCurve::new([0.45, 0.98, 1.02, 1.05, 1.1]).is_err());
        assert!(DroopCurve::new([0.95, 0.98, 1.02, 1.05, f64::NAN]).is_err());
    }

    #[test]
    fn unit_gain_filters_settle_in_one_step() {
        let params = InverterParams { tau_m: 1.0, tau_o: 1.0 };
        let st = InverterState::at_equilibrium(0.55, 0.5, curve(), params, 1.04).unwrap();
        let next = st.step(1.0);
        assert_eq!(next.p, 0.5);
        assert_eq!(next.q, 0.0);
    }

    #[test]
    fn constant_input_converges_to_droop_laws() {
        let params = InverterParams { tau_m: 0.3, tau_o: 0.3 };
        let c = curve();
        for v in [0.93, 0.96, 1.0, 1.03, 1.07, 1.2] {
            let mut st = InverterState::at_equilibrium(0.55, 0.5, c, params, 1.0).unwrap();
            st.v_bar = 0.9;
            st.p = 0.0;
            st.q = 0.4;
            for _ in 0..200 {
                st = st.step(v);
            }
            let p_eq = volt_watt(&c, v, 0.5);
            let q_eq = volt_var(&c, v, var_headroom(0.55, p_eq));
            assert!((st.p - p_eq).abs() < 1e-9 && (st.q - q_eq).abs() < 1e-9, "v={v}");
        }
    }

    #[test]
    fn rejects_bad_time_constants() {
        let bad = InverterParams { tau_m: 0.0, tau_o: 0.3 };
        assert!(InverterState::at_equilibrium(0.5, 0.4, curve(), bad, 1.0).is_err());
        let bad = InverterParams { tau_m: 0.3, tau_o: 1.2 };
        assert!(InverterState::at_equilibrium(0.5, 0.4, curve(), bad, 1.0).is_err());
    }

    #[test]
    fn identity_and_offset_actions() {
        let c = curve();
        assert_eq!(apply_action(&c, 0.0, 0.0).unwrap(), c);
        let up = apply_action(&c, 0.05, 0.0).unwrap();
        for (a, b) in up.eta().iter().zip(c.eta()) {
            assert!((a - b - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn max_steepening_clamps_to_min_gap() {
        for gap in [0.02, 0.03] {
            let c = DroopCurve::new([0.98 - gap, 0.98, 1.02, 1.02 + gap, 1.10]).unwrap();
            let e = apply_action(&c, 0.0, 0.05).unwrap().eta();
            assert!((e[1] - e[0] - MIN_GAP).abs() < 1e-12);
            assert!((e[3] - e[2] - MIN_GAP).abs() < 1e-12);
            assert_eq!((e[1], e[2], e[4]), (c.eta()[1], c.eta()[2], c.eta()[4]));
        }
    }

    #[test]
    fn flattening_keeps_ordering() {
        let e = apply_action(&curve(), 0.0, -0.05).unwrap().eta();
        assert!((e[1] - e[0] - 0.08).abs() < 1e-12);
        assert!((e[4] - e[3] - MIN_GAP).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        assert!(apply_action(&curve(), 0.6, 0.0).is_err());
        assert!(apply_action(&curve(), f64::NAN, 0.0).is_err());
    }

    fn valid_curve() -> impl Strategy<Value = DroopCurve> {
        (0.85f64..1.0, 0.005f64..0.05, 0.0f64..0.06, 0.005f64..0.05, 0.005f64..0.08).prop_map(
            |(e1, g1, g2, g3, g4)| {
                DroopCurve::new([e1, e1 + g1, e1 + g1 + g2, e1 + g1 + g2 + g3, e1 + g1 + g2 + g3 + g4])
                    .unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn droop_laws_are_lipschitz_and_monotone(
            c in valid_curve(), v in 0.8f64..1.3, eps in 1e-9f64..1e-3,
            p_max in 0.0f64..1.0, q_avail in 0.0f64..1.0,
        ) {
            let e = c.eta();
            let lp = p_max / (e[4] - e[3]) + 1e-9;
            let lq = q_avail / (e[1] - e[0]).min(e[3] - e[2]) + 1e-9;
            let (p0, p1) = (volt_watt(&c, v, p_max), volt_watt(&c, v + eps, p_max));
            let (q0, q1) = (volt_var(&c, v, q_avail), volt_var(&c, v + eps, q_avail));
            prop_assert!((p1 - p0).abs() <= lp * eps + 1e-12);
            prop_assert!((q1 - q0).abs() <= lq * eps + 1e-12);
            prop_assert!(p1 <= p0 && q1 <= q0);
            prop_assert!((0.0..=p_max).contains(&p0));
            prop_assert!(q0.abs() <= q_avail);
        }
    }

    proptest! {
        #[test]
        fn equilibrium_respects_capacity(c in valid_curve(), v in 0.8f64..1.3, s in 0.01f64..1.0, frac in 0.0f64..1.0) {
            let st = InverterState::at_equilibrium(s, frac * s, c, InverterParams::default(), v).unwrap();
            prop_assert!(st.p * st.p + st.q * st.q <= s * s * (1.0 + 1e-12));
            prop_assert!(st.p >= 0.0 && st.p <= st.p_max && st.p_max <= s);
        }

        #[test]
        fn step_contracts_towards_fixed_point(
            c in valid_curve(), v in 0.85f64..1.2, tm in 0.05f64..=1.0, to in 0.05f64..=1.0,
            p0 in 0.0f64..0.5, q0 in -0.5f64..0.5, vb0 in 0.85f64..1.2,
        ) {
            let params = InverterParams { tau_m: tm, tau_o: to };
            let mut st = InverterState::at_equilibrium(0.55, 0.5, c, params, vb0).unwrap();
            st.p = p0;
            st.q = q0;
            // let the measurement transient die out first
            while (st.v_bar - v).abs() > 1e-13 {
                st = st.step(v);
            }
            // a residual 1e-13 drift is amplified by steep gaps; pin it
            st.v_bar = v;
            let (pt, qt) = st.targets(st.v_bar);
            let mut dist = ((st.p - pt).powi(2) + (st.q - qt).powi(2)).sqrt();
            for _ in 0..50 {
                st = st.step(v);
                let d = ((st.p - pt).powi(2) + (st.q - qt).powi(2)).sqrt();
                prop_assert!(d <= dist + 1e-15);
                dist = d;
            }
        }

        #[test]
        fn offset_is_exactly_reversible(c in valid_curve(), off in -0.05f64..0.05) {
            let there = apply_action(&c, off, 0.0).unwrap();
            let back = apply_action(&there, -off, 0.0).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
