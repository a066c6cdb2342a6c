//! Independent checks of the distribution layer: densities must integrate to
//! one under Simpson's rule, and sampler output must pass a KS test against
//! the textbook CDF. Neither check reuses the sampling or log-density code
//! paths it verifies.

use veil::rng::RngState;
use veil::{Distribution, Tensor};

/// Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(x: f64, loc: f64, scale: f64) -> f64 {
    0.5 * (1.0 + erf((x - loc) / (scale * std::f64::consts::SQRT_2)))
}

fn half_normal_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        erf(x / (scale * std::f64::consts::SQRT_2))
    }
}

/// Integrates exp(log_prob) over [lo, hi] with composite Simpson.
fn simpson_mass(d: &Distribution, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (hi - lo) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|i| lo + h * i as f64).collect();
    let pdf = d.log_prob(&Tensor::from_vec(vec![n + 1], grid)).exp().to_vec();
    let mut acc = pdf[0] + pdf[n];
    for (i, p) in pdf.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * p } else { 2.0 * p };
    }
    acc * h / 3.0
}

#[test]
fn normal_density_integrates_to_one() {
    let d = Distribution::normal(0.5, 1.3);
    let mass = simpson_mass(&d, 0.5 - 13.0, 0.5 + 13.0, 4000);
    assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
}

#[test]
fn half_normal_density_integrates_to_one() {
    let d = Distribution::half_normal(0.8);
    let mass = simpson_mass(&d, 0.0, 8.0 * 0.8, 4000);
    assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
}

#[test]
fn categorical_probabilities_sum_to_one() {
    let logits = Tensor::from_vec(vec![5], vec![0.3, -1.2, 2.0, 0.0, -0.4]);
    let d = Distribution::categorical(&logits);
    let mut mass = 0.0;
    for k in 0..5 {
        mass += d.log_prob(&Tensor::scalar(k as f64)).item().exp();
    }
    assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
}

/// One-sample KS statistic against a reference CDF.
fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

// 1.949 is the asymptotic critical coefficient at alpha = 0.001; a false
// failure on this fixed seed would mean the sampler, not bad luck.
const KS_COEFF: f64 = 1.949;

#[test]
fn normal_sampler_passes_ks() {
    let n = 100_000usize;
    let d = Distribution::normal(1.0, 2.5);
    let mut rng = RngState::new(2024);
    let mut xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng).item()).collect();
    let stat = ks_statistic(&mut xs, |x| normal_cdf(x, 1.0, 2.5));
    let crit = KS_COEFF / (n as f64).sqrt();
    assert!(stat < crit, "KS {stat} >= {crit}");
}

#[test]
fn half_normal_sampler_passes_ks() {
    let n = 100_000usize;
    let d = Distribution::half_normal(0.7);
    let mut rng = RngState::new(77);
    let mut xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng).item()).collect();
    let stat = ks_statistic(&mut xs, |x| half_normal_cdf(x, 0.7));
    let crit = KS_COEFF / (n as f64).sqrt();
    assert!(stat < crit, "KS {stat} >= {crit}");
}

#[test]
fn rsample_distribution_matches_sample_distribution() {
    // The pathwise sampler must produce the same law as the detached one.
    let n = 100_000usize;
    let d = Distribution::normal(-0.5, 0.9);
    let mut rng = RngState::new(8);
    let mut xs: Vec<f64> = (0..n).map(|_| d.rsample(&mut rng).unwrap().item()).collect();
    let stat = ks_statistic(&mut xs, |x| normal_cdf(x, -0.5, 0.9));
    assert!(stat < KS_COEFF / (n as f64).sqrt(), "KS {stat}");
}
