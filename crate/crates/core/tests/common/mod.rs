//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use droopguard::feeder::{Bus, FeederModel, Line};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

/// Dense bus admittance matrix of a feeder.
pub fn ybus(model: &FeederModel) -> Vec<Vec<Complex64>> {
    let n = model.n_buses();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for l in model.lines() {
        let g = 1.0 / l.impedance();
        y[l.from][l.from] += g;
        y[l.to][l.to] += g;
        y[l.from][l.to] -= g;
        y[l.to][l.from] -= g;
    }
    y
}

/// Full Newton-Raphson in polar coordinates on the bus admittance matrix,
/// bus 0 as slack. Returns `None` if it fails to converge.
pub fn newton_power_flow(model: &FeederModel, injections: &[Complex64], source_v: f64) -> Option<Vec<Complex64>> {
    let n = model.n_buses();
    let y = ybus(model);
    let mut vm = vec![source_v; n];
    let mut va = vec![0.0; n];
    let m = n - 1;
    if m == 0 {
        return Some(vec![Complex64::new(source_v, 0.0)]);
    }
    for _ in 0..50 {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let cur: Vec<Complex64> = (0..n).map(|i| (0..n).map(|j| y[i][j] * v[j]).sum()).collect();
        let s: Vec<Complex64> = (0..n).map(|i| v[i] * cur[i].conj()).collect();
        let mis: Vec<Complex64> = (1..n).map(|i| s[i] - injections[i]).collect();
        let worst = mis.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if worst < 1e-12 {
            return Some(v);
        }
        // dS/dθ = j diag(V) conj(diag(I) - Y diag(V)), dS/d|V| = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        let j = Complex64::i();
        for a in 1..n {
            for b in 1..n {
                let delta = if a == b { cur[a] } else { Complex64::new(0.0, 0.0) };
                let d_ang = j * v[a] * (delta - y[a][b] * v[b]).conj();
                let vn_b = v[b] / vm[b];
                let mut d_mag = v[a] * (y[a][b] * vn_b).conj();
                if a == b {
                    d_mag += cur[a].conj() * vn_b;
                }
                let (r, c) = (a - 1, b - 1);
                jac[(r, c)] = d_ang.re;
                jac[(r + m, c)] = d_ang.im;
                jac[(r, c + m)] = d_mag.re;
                jac[(r + m, c + m)] = d_mag.im;
            }
        }
        let rhs = DVector::from_iterator(
            2 * m,
            mis.iter().map(|c| -c.re).chain(mis.iter().map(|c| -c.im)),
        );
        let dx = jac.lu().solve(&rhs)?;
        for k in 0..m {
            va[k + 1] += dx[k];
            vm[k + 1] += dx[k + m];
        }
    }
    None
}

/// Random radial feeder: 3 to 40 buses, each hanging off a uniformly chosen
/// earlier bus, r and x in [1e-3, 0.1] pu, p and q loads in [0, 1] pu. Most
/// such draws have no power-flow solution, so all loads are then halved
/// until the Newton oracle converges with every |V| >= 0.8 pu.
pub fn random_case<R: Rng>(rng: &mut R) -> (FeederModel, Vec<Complex64>, f64) {
    let n = rng.gen_range(3..=40);
    let buses: Vec<Bus> = (0..n)
        .map(|i| Bus {
            id: format!("b{i}"),
            p_load: if i == 0 { 0.0 } else { rng.gen_range(0.0..1.0) },
            q_load: if i == 0 { 0.0 } else { rng.gen_range(0.0..1.0) },
        })
        .collect();
    let lines: Vec<Line> = (1..n)
        .map(|i| Line {
            from: rng.gen_range(0..i),
            to: i,
            r: rng.gen_range(1e-3..0.1),
            x: rng.gen_range(1e-3..0.1),
        })
        .collect();
    let v0 = rng.gen_range(0.97..1.05);
    let mut scale = 1.0;
    loop {
        let scaled = buses
            .iter()
            .map(|b| Bus { p_load: b.p_load * scale, q_load: b.q_load * scale, ..b.clone() })
            .collect();
        let model = FeederModel::new(scaled, lines.clone(), Vec::new(), 1.0).expect("random feeder is radial");
        let inj = model.base_injections();
        if let Some(v) = newton_power_flow(&model, &inj, v0) {
            if v.iter().all(|x| x.norm() >= 0.8) {
                return (model, inj, v0);
            }
        }
        scale *= 0.5;
    }
}
