//! Distribution families used for priors, likelihoods, and guides.
//!
//! Log-densities are built from recorded tensor ops, so gradients flow to any
//! parameter tensor that requires them. Sampling goes through [`RngState`]
//! and never touches the tape; `rsample` is the pathwise (reparameterized)
//! variant that stays connected to the graph.

use crate::error::{Error, Result};
use crate::rng::{fnv1a, RngState};
use crate::tensor::shape::{broadcast_shapes, BroadcastZip};
use crate::Tensor;

/// A distribution over tensors of a fixed event shape.
///
/// Parameters broadcast against each other with trailing-dimension rules;
/// the event shape is the broadcast result. Scale parameters must be
/// positive (checked at construction; a scale that later becomes non-finite
/// surfaces as a non-finite density rather than a panic).
#[derive(Clone, Debug)]
pub enum Distribution {
    Normal { loc: Tensor, scale: Tensor },
    HalfNormal { scale: Tensor },
    Categorical { logits: Tensor },
    PointMass { value: Tensor },
}

/// Identity of a prior for branch tracking: static priors hash their family,
/// shape, and parameter bits; priors whose parameters were computed by ops
/// during the current pass are dynamic, and their identity is carried by the
/// site that declared them rather than by parameter bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fingerprint {
    Static(u64),
    Dynamic,
}

fn assert_scale_positive(family: &str, scale: &Tensor) {
    scale.with_data(|d| {
        for &v in d {
            assert!(v > 0.0, "{family}: scale must be positive, got {v}");
        }
    });
}

impl Distribution {
    pub fn normal(loc: impl Into<Tensor>, scale: impl Into<Tensor>) -> Distribution {
        let loc = loc.into();
        let scale = scale.into();
        assert_scale_positive("normal", &scale);
        broadcast_shapes("normal(loc, scale)", loc.shape(), scale.shape())
            .unwrap_or_else(|e| panic!("{e}"));
        Distribution::Normal { loc, scale }
    }

    pub fn half_normal(scale: impl Into<Tensor>) -> Distribution {
        let scale = scale.into();
        assert_scale_positive("half_normal", &scale);
        Distribution::HalfNormal { scale }
    }

    /// Distribution over class indices `0..K` where `K` is the size of the
    /// last axis of `logits`; leading axes are batch axes.
    pub fn categorical(logits: impl Into<Tensor>) -> Distribution {
        let logits = logits.into();
        assert!(
            logits.rank() >= 1 && logits.shape()[logits.rank() - 1] >= 1,
            "categorical: logits need a class axis, got shape {:?}",
            logits.shape()
        );
        Distribution::Categorical { logits }
    }

    /// Degenerate distribution concentrated at `value`. Sampling returns the
    /// value; the log-density is identically zero.
    pub fn point_mass(value: impl Into<Tensor>) -> Distribution {
        Distribution::PointMass { value: value.into() }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Distribution::Normal { .. } => "Normal",
            Distribution::HalfNormal { .. } => "HalfNormal",
            Distribution::Categorical { .. } => "Categorical",
            Distribution::PointMass { .. } => "PointMass",
        }
    }

    /// Shape of a single draw.
    pub fn event_shape(&self) -> Vec<usize> {
        match self {
            Distribution::Normal { loc, scale } => {
                broadcast_shapes("normal(loc, scale)", loc.shape(), scale.shape()).unwrap()
            }
            Distribution::HalfNormal { scale } => scale.shape().to_vec(),
            Distribution::Categorical { logits } => logits.shape()[..logits.rank() - 1].to_vec(),
            Distribution::PointMass { value } => value.shape().to_vec(),
        }
    }

    pub fn loc(&self) -> Option<&Tensor> {
        match self {
            Distribution::Normal { loc, .. } => Some(loc),
            _ => None,
        }
    }

    pub fn scale(&self) -> Option<&Tensor> {
        match self {
            Distribution::Normal { scale, .. } | Distribution::HalfNormal { scale } => Some(scale),
            _ => None,
        }
    }

    pub fn logits(&self) -> Option<&Tensor> {
        match self {
            Distribution::Categorical { logits } => Some(logits),
            _ => None,
        }
    }

    pub fn value(&self) -> Option<&Tensor> {
        match self {
            Distribution::PointMass { value } => Some(value),
            _ => None,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Distribution::Categorical { logits } => Some(logits.shape()[logits.rank() - 1]),
            _ => None,
        }
    }

    /// Marginal mean per event element, expanded to the event shape.
    /// `None` for Categorical (indices have no useful mean).
    pub fn mean_data(&self) -> Option<Vec<f64>> {
        match self {
            Distribution::Normal { loc, scale } => Some(self.expand_param(loc, scale.shape())),
            Distribution::HalfNormal { scale } => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                Some(scale.to_vec().iter().map(|s| s * c).collect())
            }
            Distribution::PointMass { value } => Some(value.to_vec()),
            Distribution::Categorical { .. } => None,
        }
    }

    /// Marginal standard deviation per event element, expanded to the event
    /// shape. `None` for Categorical.
    pub fn stddev_data(&self) -> Option<Vec<f64>> {
        match self {
            Distribution::Normal { loc, scale } => Some(self.expand_param(scale, loc.shape())),
            Distribution::HalfNormal { scale } => {
                let c = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
                Some(scale.to_vec().iter().map(|s| s * c).collect())
            }
            Distribution::PointMass { value } => Some(vec![0.0; value.len()]),
            Distribution::Categorical { .. } => None,
        }
    }

    // Broadcasts one parameter's data up to the event shape.
    fn expand_param(&self, param: &Tensor, other: &[usize]) -> Vec<f64> {
        let ev = self.event_shape();
        let pd = param.to_vec();
        BroadcastZip::new(&ev, param.shape(), other).map(|(a, _)| pd[a]).collect()
    }

    /// Draws a detached sample. Consumes one normal variate per event element
    /// for Normal/HalfNormal and one uniform per batch row for Categorical,
    /// in flat row-major order, so the stream position is shape-determined.
    pub fn sample(&self, rng: &mut RngState) -> Tensor {
        match self {
            Distribution::Normal { loc, scale } => {
                let ev = self.event_shape();
                let ld = loc.to_vec();
                let sd = scale.to_vec();
                let data: Vec<f64> = BroadcastZip::new(&ev, loc.shape(), scale.shape())
                    .map(|(a, b)| ld[a] + sd[b] * rng.normal())
                    .collect();
                Tensor::from_vec(ev, data)
            }
            Distribution::HalfNormal { scale } => {
                let sd = scale.to_vec();
                let data: Vec<f64> = sd.iter().map(|s| s * rng.normal().abs()).collect();
                Tensor::from_vec(scale.shape().to_vec(), data)
            }
            Distribution::Categorical { logits } => {
                let k = logits.shape()[logits.rank() - 1];
                let batch = self.event_shape();
                let ld = logits.to_vec();
                let rows = ld.len() / k;
                let mut data = Vec::with_capacity(rows);
                for row in 0..rows {
                    let l = &ld[row * k..(row + 1) * k];
                    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                    let total: f64 = w.iter().sum();
                    let threshold = rng.next_f64() * total;
                    let mut cum = 0.0;
                    let mut idx = k - 1;
                    for (i, wi) in w.iter().enumerate() {
                        cum += wi;
                        if cum >= threshold {
                            idx = i;
                            break;
                        }
                    }
                    data.push(idx as f64);
                }
                Tensor::from_vec(batch, data)
            }
            Distribution::PointMass { value } => {
                Tensor::from_vec(value.shape().to_vec(), value.to_vec())
            }
        }
    }

    /// Pathwise sample: the result is connected to the parameter tensors
    /// through recorded ops, so gradients flow into them. Categorical draws
    /// are discrete and cannot be reparameterized.
    pub fn rsample(&self, rng: &mut RngState) -> Result<Tensor> {
        match self {
            Distribution::Normal { loc, scale } => {
                let ev = self.event_shape();
                let n: usize = ev.iter().product();
                let eps = Tensor::from_vec(ev, rng.normal_vec(n.max(1)));
                Ok(loc + &(scale * &eps))
            }
            Distribution::HalfNormal { scale } => {
                let n = scale.len();
                let mag: Vec<f64> = rng.normal_vec(n).iter().map(|e| e.abs()).collect();
                let eps = Tensor::from_vec(scale.shape().to_vec(), mag);
                Ok(scale * &eps)
            }
            Distribution::Categorical { .. } => Err(Error::NotReparameterizable),
            Distribution::PointMass { value } => Ok(value.clone()),
        }
    }

    /// Log-density at `value`, elementwise over the broadcast of `value`
    /// against the event shape. Built from recorded ops.
    pub fn log_prob(&self, value: &Tensor) -> Tensor {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        match self {
            Distribution::Normal { loc, scale } => {
                let z = &(value - loc) / scale;
                (&z * &z).mul_scalar(-0.5) - &scale.ln() - 0.5 * ln_2pi
            }
            Distribution::HalfNormal { scale } => {
                // Support is x >= 0: double the Normal(0, scale) density on
                // the support, -inf off it. The mask keeps gradients flowing
                // only through in-support elements.
                let z = &(value / scale);
                let base = (z * z).mul_scalar(-0.5) - &scale.ln()
                    + (std::f64::consts::LN_2 - 0.5 * ln_2pi);
                let (mask, penalty): (Vec<f64>, Vec<f64>) = value.with_data(|d| {
                    d.iter()
                        .map(|&v| {
                            if v >= 0.0 {
                                (1.0, 0.0)
                            } else {
                                (0.0, f64::NEG_INFINITY)
                            }
                        })
                        .unzip()
                });
                let mask = Tensor::from_vec(value.shape().to_vec(), mask);
                let penalty = Tensor::from_vec(value.shape().to_vec(), penalty);
                &(&mask * &base) + &penalty
            }
            Distribution::Categorical { logits } => {
                let k = logits.shape()[logits.rank() - 1];
                value.with_data(|d| {
                    for &v in d {
                        assert!(
                            v.fract() == 0.0 && v >= 0.0 && (v as usize) < k,
                            "categorical: class index {v} out of range for {k} classes"
                        );
                    }
                });
                let last = [logits.rank() - 1];
                let m = logits.max_keepdim(&last);
                let lse = &m + &(logits - &m).exp().sum_keepdim(&last).ln();
                (logits - &lse).gather_last(value)
            }
            Distribution::PointMass { value: v } => {
                let shape = broadcast_shapes("log_prob(point_mass)", v.shape(), value.shape())
                    .unwrap_or_else(|e| panic!("{e}"));
                Tensor::zeros(shape)
            }
        }
    }

    /// Analytic KL divergence `KL(self || other)`, elementwise over the
    /// broadcast event shape. Supported for Normal/Normal pairs.
    pub fn kl(&self, other: &Distribution) -> Result<Tensor> {
        match (self, other) {
            (
                Distribution::Normal { loc: l1, scale: s1 },
                Distribution::Normal { loc: l2, scale: s2 },
            ) => {
                let dl = l1 - l2;
                let var1 = s1 * s1;
                let var2 = s2 * s2;
                let quad = &(&var1 + &(&dl * &dl)) / &var2.mul_scalar(2.0);
                Ok(&(&s2.ln() - &s1.ln()) + &quad - 0.5)
            }
            _ => Err(Error::UnsupportedKl { left: self.family(), right: other.family() }),
        }
    }

    /// See [`Fingerprint`]. Two priors with identical family, shapes, and
    /// parameter bits get the same static fingerprint.
    pub fn fingerprint(&self) -> Fingerprint {
        let params: Vec<&Tensor> = match self {
            Distribution::Normal { loc, scale } => vec![loc, scale],
            Distribution::HalfNormal { scale } => vec![scale],
            Distribution::Categorical { logits } => vec![logits],
            Distribution::PointMass { value } => vec![value],
        };
        if params.iter().any(|t| t.computed_this_pass()) {
            return Fingerprint::Dynamic;
        }
        let mut bytes: Vec<u8> = self.family().as_bytes().to_vec();
        for p in params {
            bytes.push(0xFE);
            bytes.extend_from_slice(&(p.rank() as u64).to_le_bytes());
            for &e in p.shape() {
                bytes.extend_from_slice(&(e as u64).to_le_bytes());
            }
            p.with_data(|d| {
                for &v in d {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            });
        }
        Fingerprint::Static(fnv1a(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape;

    #[test]
    fn normal_log_prob_matches_closed_form() {
        let d = Distribution::normal(0.0, 1.0);
        let lp = d.log_prob(&Tensor::scalar(0.0)).item();
        assert!((lp - (-0.9189385332046727)).abs() < 1e-12, "{lp}");

        // N(1, 2) at 3: -ln 2 - 0.5 ln 2pi - 0.5
        let d = Distribution::normal(1.0, 2.0);
        let lp = d.log_prob(&Tensor::scalar(3.0)).item();
        let expect = -(2.0f64.ln()) - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
    }

    #[test]
    fn half_normal_log_prob_matches_closed_form() {
        let d = Distribution::half_normal(1.0);
        let lp = d.log_prob(&Tensor::scalar(0.5)).item();
        assert!((lp - (-0.3507913526447274)).abs() < 1e-12, "{lp}");

        let neg = d.log_prob(&Tensor::scalar(-0.1)).item();
        assert!(neg.is_infinite() && neg < 0.0);
    }

    #[test]
    fn half_normal_out_of_support_blocks_gradient() {
        tape::clear::<f64>();
        let scale = Tensor::variable(vec![], vec![1.0]);
        let d = Distribution::half_normal(&scale);
        let lp = d.log_prob(&Tensor::from_vec(vec![2], vec![0.5, -0.5]));
        let total = lp.sum_all();
        assert!(total.item().is_infinite() && total.item() < 0.0);
        // The -inf lives in an additive constant, so gradients stay finite
        // and the out-of-support element contributes exactly zero.
        total.backward().unwrap();
        let g = scale.grad().unwrap()[0];
        // d/dscale [-ln s - v^2/(2 s^2)] at s=1, v=0.5 is -1 + 0.25
        assert!((g - (-0.75)).abs() < 1e-12, "{g}");
    }

    #[test]
    fn categorical_log_prob_matches_closed_form() {
        let d = Distribution::categorical(Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        let lp = d.log_prob(&Tensor::scalar(0.0)).item();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12, "{lp}");

        // logits ln1, ln2, ln3 -> probs 1/6, 2/6, 3/6, batched
        let logits = Tensor::from_vec(
            vec![2, 3],
            vec![0.0, 2.0f64.ln(), 3.0f64.ln(), 0.0, 2.0f64.ln(), 3.0f64.ln()],
        );
        let d = Distribution::categorical(&logits);
        let lp = d.log_prob(&Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let got = lp.to_vec();
        assert!((got[0] - (2.0f64 / 6.0).ln()).abs() < 1e-12);
        assert!((got[1] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normal_kl_matches_closed_form() {
        let p = Distribution::normal(0.0, 1.0);
        let q = Distribution::normal(1.0, 2.0);
        let kl = p.kl(&q).unwrap().item();
        assert!((kl - 0.4431471805599453).abs() < 1e-12, "{kl}");
        let zero = p.kl(&p).unwrap().item();
        assert!(zero.abs() < 1e-15);

        let c = Distribution::categorical(Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        assert!(matches!(p.kl(&c), Err(Error::UnsupportedKl { .. })));
    }

    #[test]
    fn normal_log_prob_gradients_match_fd() {
        tape::clear::<f64>();
        let loc = Tensor::variable(vec![], vec![0.3]);
        let scale = Tensor::variable(vec![], vec![0.8]);
        let v = Tensor::scalar(1.1);
        Distribution::normal(&loc, &scale).log_prob(&v).backward().unwrap();
        let (gl, gs) = (loc.grad().unwrap()[0], scale.grad().unwrap()[0]);

        let h = 1e-6;
        let f = |l: f64, s: f64| {
            Distribution::normal(l, s).log_prob(&Tensor::scalar(1.1)).item()
        };
        let fd_l = (f(0.3 + h, 0.8) - f(0.3 - h, 0.8)) / (2.0 * h);
        let fd_s = (f(0.3, 0.8 + h) - f(0.3, 0.8 - h)) / (2.0 * h);
        assert!((gl - fd_l).abs() < 1e-6, "{gl} vs {fd_l}");
        assert!((gs - fd_s).abs() < 1e-6, "{gs} vs {fd_s}");
    }

    #[test]
    fn rsample_connects_to_parameters() {
        tape::clear::<f64>();
        let loc = Tensor::variable(vec![], vec![2.0]);
        let scale = Tensor::variable(vec![], vec![0.5]);
        let d = Distribution::normal(&loc, &scale);
        let mut rng = RngState::new(7);
        let v = d.rsample(&mut rng).unwrap();
        let eps = (v.item() - 2.0) / 0.5;
        v.backward().unwrap();
        assert!((loc.grad().unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((scale.grad().unwrap()[0] - eps).abs() < 1e-12);

        tape::clear::<f64>();
        let hn = Distribution::half_normal(&scale);
        scale.clear_grad();
        let v = hn.rsample(&mut rng).unwrap();
        assert!(v.item() >= 0.0);
        v.backward().unwrap();
        assert!((scale.grad().unwrap()[0] - v.item() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn point_mass_passes_value_through() {
        let p = Tensor::variable(vec![2], vec![1.0, 2.0]);
        let d = Distribution::point_mass(&p);
        let mut rng = RngState::new(1);
        let r = d.rsample(&mut rng).unwrap();
        assert_eq!(r.id(), p.id());
        let s = d.sample(&mut rng);
        assert_ne!(s.id(), p.id());
        assert!(s.bits_eq(&p));
        assert_eq!(d.log_prob(&s).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let d = Distribution::normal(Tensor::from_vec(vec![3], vec![0.0, 1.0, 2.0]), 0.7);
        let a = d.sample(&mut RngState::new(42));
        let b = d.sample(&mut RngState::new(42));
        let c = d.sample(&mut RngState::new(43));
        assert!(a.bits_eq(&b));
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn sample_moments_match_parameters() {
        let n = 200_000usize;
        let mut rng = RngState::new(99);
        let d = Distribution::normal(2.0, 3.0);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = d.sample(&mut rng).item();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).sqrt();
        let tol = 5.0 * 3.0 / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < tol, "{mean}");
        assert!((sd - 3.0).abs() < 5.0 * tol, "{sd}");

        let hn = Distribution::half_normal(2.0);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += hn.sample(&mut rng).item();
        }
        let mean = sum / n as f64;
        let expect = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expect).abs() < 5.0 * 1.2 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn categorical_frequencies_match_softmax() {
        let logits = Tensor::from_vec(vec![3], vec![0.0, 2.0f64.ln(), 3.0f64.ln()]);
        let d = Distribution::categorical(&logits);
        let n = 60_000usize;
        let mut rng = RngState::new(5);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[d.sample(&mut rng).item() as usize] += 1;
        }
        for (i, expect) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - expect).abs() < 0.01, "class {i}: {freq} vs {expect}");
        }
    }

    #[test]
    fn fingerprints_track_identity() {
        let a = Distribution::normal(0.0, 1.0);
        let b = Distribution::normal(0.0, 1.0);
        let c = Distribution::normal(10.0, 1.0);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        // Family is part of the identity even when parameter bits agree.
        let hn = Distribution::half_normal(1.0);
        let n01 = Distribution::normal(1.0, 1.0);
        assert_ne!(hn.fingerprint(), n01.fingerprint());
        assert!(matches!(a.fingerprint(), Fingerprint::Static(_)));
    }

    #[test]
    fn computed_parameters_make_fingerprint_dynamic() {
        tape::advance_pass();
        let x = Tensor::scalar(1.0);
        let loc = &x + &Tensor::scalar(0.5);
        let d = Distribution::normal(&loc, 1.0);
        assert_eq!(d.fingerprint(), Fingerprint::Dynamic);
        assert_ne!(d.fingerprint(), Distribution::normal(1.5, 1.0).fingerprint());
        // Literal parameters stay static inside a pass.
        assert!(matches!(
            Distribution::normal(1.5, 1.0).fingerprint(),
            Fingerprint::Static(_)
        ));
    }

    #[test]
    #[should_panic(expected = "scale must be positive")]
    fn non_positive_scale_is_rejected() {
        Distribution::half_normal(-1.0);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn categorical_rejects_bad_index() {
        let d = Distribution::categorical(Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        d.log_prob(&Tensor::scalar(2.0));
    }

    #[test]
    fn broadcast_event_shapes() {
        let d = Distribution::normal(Tensor::from_vec(vec![2, 1], vec![0.0, 5.0]),
            Tensor::from_vec(vec![3], vec![1.0, 1.0, 1.0]));
        assert_eq!(d.event_shape(), vec![2, 3]);
        let s = d.sample(&mut RngState::new(3));
        assert_eq!(s.shape(), &[2, 3]);
        let lp = d.log_prob(&s);
        assert_eq!(lp.shape(), &[2, 3]);
        assert_eq!(d.mean_data().unwrap(), vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0]);
        assert_eq!(d.stddev_data().unwrap(), vec![1.0; 6]);
    }
}
