use droopguard::detector::{DetectorParams, OscillationFilter};
use proptest::prelude::*;

fn run(params: DetectorParams, xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut f = OscillationFilter::new(params).unwrap();
    xs.map(|x| f.step(x)).collect()
}

fn sine(a: f64, freq: f64, offset: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| offset + a * (2.0 * std::f64::consts::PI * freq * k as f64).sin())
}

fn tail_mean(ys: &[f64], n: usize) -> f64 {
    ys[ys.len() - n..].iter().sum::<f64>() / n as f64
}

#[test]
fn constant_input_settles_below_threshold() {
    for v in [0.0, 0.95, 1.0, 1.07] {
        let ys = run(DetectorParams::default(), std::iter::repeat(v).take(5000));
        assert!(*ys.last().unwrap() < 1e-9);
    }
}

#[test]
fn sinusoid_gives_half_amplitude_squared() {
    let p = DetectorParams::default();
    for (a, freq) in [(0.002, 0.1), (0.01, 0.2), (0.005, 0.25)] {
        let ys = run(p, sine(a, freq, 1.0, 6000));
        let y = tail_mean(&ys, 1000);
        let expect = p.c * a * a / 2.0;
        assert!((y / expect - 1.0).abs() < 0.05, "A={a} f={freq}: {y} vs {expect}");
    }
}

#[test]
fn operating_point_does_not_matter() {
    let p = DetectorParams::default();
    let a = run(p, sine(0.01, 0.2, 0.96, 3000));
    let b = run(p, sine(0.01, 0.2, 1.04, 3000));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn output_scales_with_amplitude_squared() {
    let p = DetectorParams::default();
    let base = tail_mean(&run(p, sine(0.004, 0.15, 1.0, 6000)), 1000);
    for alpha in [0.5, 2.0, 3.0] {
        let y = tail_mean(&run(p, sine(0.004 * alpha, 0.15, 1.0, 6000)), 1000);
        assert!((y / (alpha * alpha * base) - 1.0).abs() < 0.01);
    }
}

#[test]
fn long_random_input_stays_bounded() {
    use droopguard::rng::{stream_rng, Stream};
    use rand::Rng;
    let p = DetectorParams::default();
    let mut rng = stream_rng(6, Stream::Scenario, 0);
    let mut f = OscillationFilter::new(p).unwrap();
    let mut peak = 0.0f64;
    for _ in 0..1_000_000 {
        let y = f.step(rng.gen_range(-2.0..2.0));
        assert!(y.is_finite() && y >= 0.0);
        peak = peak.max(y);
    }
    // |HP out| <= 2 max|v| and the low-pass has unit DC gain
    assert!(peak <= p.c * 16.0, "{peak}");
}

proptest! {
    #[test]
    fn bounded_input_gives_bounded_nonnegative_output(
        xs in prop::collection::vec(0.9f64..1.1, 1..400),
    ) {
        let p = DetectorParams::default();
        for y in run(p, xs.into_iter()) {
            // the high-pass output never exceeds twice the input range
            prop_assert!(y.is_finite() && y >= 0.0);
            prop_assert!(y <= p.c * (2.0 * 0.2f64).powi(2));
        }
    }
}
