//! Posterior-predictive reports and calibration summaries. Predictions are
//! Monte Carlo: each draw resamples the latents from their guides, reruns
//! the pass, and takes the head variable's fresh value, so a draw carries
//! both parameter (epistemic) and likelihood (aleatoric) variation.

use serde::{Deserialize, Serialize};

use veil::Module;

use crate::models::Program;
use crate::CliError;

/// Per-row predictive summary. Intervals are symmetric normal-quantile
/// intervals around the draw mean, which keeps `lower <= mean <= upper` for
/// every row and collapses to a point when there is a single draw. The
/// decomposition fields are present for regression heads only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictiveRow {
    pub row: usize,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub epistemic: Option<f64>,
    pub aleatoric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub rows: Vec<PredictiveRow>,
    /// Raw predictive draws, one inner vector per row.
    pub draws: Vec<Vec<f64>>,
    pub level: f64,
    pub n_draws: usize,
}

/// Runs `n_draws` posterior-predictive passes and summarizes per row.
/// Observations are released first, so the head is drawn from its
/// (parameter-dependent) likelihood on every pass.
pub fn predictive(
    m: &mut Module,
    prog: &Program,
    n_rows: usize,
    n_draws: usize,
    level: f64,
) -> Result<Prediction, CliError> {
    assert!(n_draws > 0, "predictive needs at least one draw");
    m.observe_none();
    let mut ys = vec![Vec::with_capacity(n_draws); n_rows];
    let mut mus = vec![Vec::with_capacity(n_draws); n_rows];
    let mut sds = vec![Vec::with_capacity(n_draws); n_rows];
    for _ in 0..n_draws {
        veil::no_grad(|| {
            m.begin_pass();
            m.sample()?;
            prog.run(m)
        })?;
        let rv = m.rv("y").expect("head variable y");
        let value = rv.value().to_vec();
        if value.len() != n_rows {
            return Err(CliError::Data(format!(
                "head produced {} values for {n_rows} rows",
                value.len()
            )));
        }
        for (i, v) in value.iter().enumerate() {
            ys[i].push(*v);
        }
        if let (Some(mu), Some(sd)) = (rv.prior().mean_data(), rv.prior().stddev_data()) {
            for i in 0..n_rows {
                mus[i].push(mu[i]);
                sds[i].push(sd[i]);
            }
        }
    }
    let z = if level < 1.0 { Some(norm_ppf(0.5 + level / 2.0)) } else { None };
    let mut rows = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let (mean, sd) = mean_sd(&ys[i]);
        let (lower, upper) = match z {
            Some(z) => (mean - z * sd, mean + z * sd),
            // Degenerate level: finite but effectively unbounded interval.
            None => (mean - 1e12 * (sd + 1.0), mean + 1e12 * (sd + 1.0)),
        };
        let epistemic = (!mus[i].is_empty()).then(|| mean_sd(&mus[i]).1);
        let aleatoric = (!sds[i].is_empty()).then(|| mean_sd(&sds[i]).0);
        rows.push(PredictiveRow { row: i, mean, sd, lower, upper, epistemic, aleatoric });
    }
    Ok(Prediction { rows, draws: ys, level, n_draws })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Calibration of predictive intervals against held-out outcomes: empirical
/// coverage plus a probability-integral-transform decile table (each bucket
/// should hold about one tenth of the rows when calibrated).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub level: f64,
    pub n_rows: usize,
    pub n_draws: usize,
    pub covered: usize,
    pub coverage: f64,
    pub pit_decile_counts: Vec<usize>,
    pub pit_decile_freq: Vec<f64>,
}

pub fn calibrate(pred: &Prediction, y: &[f64]) -> Calibration {
    assert_eq!(pred.rows.len(), y.len(), "one outcome per predicted row");
    let n_rows = y.len();
    let mut covered = 0;
    let mut counts = vec![0usize; 10];
    for (i, yi) in y.iter().enumerate() {
        let r = &pred.rows[i];
        if r.lower <= *yi && *yi <= r.upper {
            covered += 1;
        }
        let draws = &pred.draws[i];
        let below = draws.iter().filter(|d| **d < *yi).count() as f64;
        let ties = draws.iter().filter(|d| **d == *yi).count() as f64;
        let pit = (below + 0.5 * ties) / draws.len() as f64;
        let bucket = ((pit * 10.0).floor() as usize).min(9);
        counts[bucket] += 1;
    }
    Calibration {
        level: pred.level,
        n_rows,
        n_draws: pred.n_draws,
        covered,
        coverage: covered as f64 / n_rows as f64,
        pit_decile_freq: counts.iter().map(|c| *c as f64 / n_rows as f64).collect(),
        pit_decile_counts: counts,
    }
}

/// Standard normal quantile function (Acklam's rational approximation,
/// absolute error below 1.2e-9 over the open unit interval).
pub fn norm_ppf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be inside (0, 1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}
