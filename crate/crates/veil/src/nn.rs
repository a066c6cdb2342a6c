//! Neural layers as modules: deterministic and Bayesian linear/conv layers,
//! stateless activation and shape layers, sequential containers, and
//! lifting of pretrained deterministic layers into Bayesian ones.

use crate::dist::Distribution;
use crate::error::Result;
use crate::graph::Module;
use crate::posterior::{Posterior, PosteriorKind};
use crate::rng::{fnv1a, RngState};
use crate::Tensor;

/// What a module computes when it is used as a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    Flatten,
    MaxPool2d { kernel: usize },
    Sequential,
}

/// Scalar-parameter prior templates for a Bayesian layer, broadcast
/// elementwise to the weight and bias shapes.
#[derive(Clone, Debug)]
pub struct PriorSpec {
    pub weight: Distribution,
    pub bias: Distribution,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            weight: Distribution::normal(0.0, 1.0),
            bias: Distribution::normal(0.0, 1.0),
        }
    }
}

fn uniform_init(rng: &mut RngState, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| (2.0 * rng.next_f64() - 1.0) * bound).collect()
}

fn broadcast_prior(template: &Distribution, shape: &[usize]) -> Distribution {
    let fill = |t: &Tensor| {
        assert_eq!(t.len(), 1, "layer prior templates take scalar parameters");
        Tensor::full(shape.to_vec(), t.item())
    };
    match template {
        Distribution::Normal { loc, scale } => Distribution::normal(fill(loc), fill(scale)),
        Distribution::HalfNormal { scale } => Distribution::half_normal(fill(scale)),
        other => panic!("unsupported weight prior family `{}`", other.family()),
    }
}

/// Dense layer with fan-in uniform initialization, weights as plain
/// parameters under a Deterministic posterior.
pub fn linear(name: &str, in_features: usize, out_features: usize, rng: &mut RngState) -> Module {
    let mut m = Module::with_posterior(name, PosteriorKind::Deterministic);
    m.layer = Some(LayerKind::Linear { in_features, out_features });
    let bound = 1.0 / (in_features as f64).sqrt();
    let w = uniform_init(rng, out_features * in_features, bound);
    let b = uniform_init(rng, out_features, bound);
    m.set_param("weight", Tensor::variable(vec![out_features, in_features], w)).unwrap();
    m.set_param("bias", Tensor::variable(vec![out_features], b)).unwrap();
    m
}

/// Dense layer whose weights are random variables: elementwise priors from
/// `prior` (standard normal by default) with a Normal guide.
pub fn linear_bayesian(
    name: &str,
    in_features: usize,
    out_features: usize,
    prior: Option<PriorSpec>,
    posterior: Option<PosteriorKind>,
    rng: &mut RngState,
) -> Result<Module> {
    let kind = posterior.unwrap_or(PosteriorKind::Normal { log_scale: -3.0 });
    let mut m = Module::with_posterior(name, kind);
    m.layer = Some(LayerKind::Linear { in_features, out_features });
    m.rng = rng.split();
    let spec = prior.unwrap_or_default();
    m.set_rv("weight", broadcast_prior(&spec.weight, &[out_features, in_features]))?;
    m.set_rv("bias", broadcast_prior(&spec.bias, &[out_features]))?;
    Ok(m)
}

/// Valid (no-padding, stride-1) convolution with fan-in initialization.
pub fn conv2d(
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    rng: &mut RngState,
) -> Module {
    let mut m = Module::with_posterior(name, PosteriorKind::Deterministic);
    m.layer = Some(LayerKind::Conv2d { in_channels, out_channels, kernel });
    let fan_in = in_channels * kernel * kernel;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = uniform_init(rng, out_channels * fan_in, bound);
    let b = uniform_init(rng, out_channels, bound);
    m.set_param(
        "weight",
        Tensor::variable(vec![out_channels, in_channels, kernel, kernel], w),
    )
    .unwrap();
    m.set_param("bias", Tensor::variable(vec![out_channels], b)).unwrap();
    m
}

/// Convolution whose kernel and bias are random variables.
pub fn conv2d_bayesian(
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    prior: Option<PriorSpec>,
    posterior: Option<PosteriorKind>,
    rng: &mut RngState,
) -> Result<Module> {
    let kind = posterior.unwrap_or(PosteriorKind::Normal { log_scale: -3.0 });
    let mut m = Module::with_posterior(name, kind);
    m.layer = Some(LayerKind::Conv2d { in_channels, out_channels, kernel });
    m.rng = rng.split();
    let spec = prior.unwrap_or_default();
    let wshape = [out_channels, in_channels, kernel, kernel];
    m.set_rv("weight", broadcast_prior(&spec.weight, &wshape))?;
    m.set_rv("bias", broadcast_prior(&spec.bias, &[out_channels]))?;
    Ok(m)
}

pub fn relu(name: &str) -> Module {
    stateless(name, LayerKind::Relu)
}

pub fn flatten_layer(name: &str) -> Module {
    stateless(name, LayerKind::Flatten)
}

pub fn max_pool2d(name: &str, kernel: usize) -> Module {
    stateless(name, LayerKind::MaxPool2d { kernel })
}

fn stateless(name: &str, kind: LayerKind) -> Module {
    let mut m = Module::with_posterior(name, PosteriorKind::Deterministic);
    m.layer = Some(kind);
    m
}

/// Container that runs its children in insertion order; children are named
/// by position ("0", "1", ...).
pub fn sequential(name: &str, layers: Vec<Module>) -> Result<Module> {
    let mut m = Module::with_posterior(name, PosteriorKind::Deterministic);
    m.layer = Some(LayerKind::Sequential);
    for (i, layer) in layers.into_iter().enumerate() {
        m.add_module(&i.to_string(), layer)?;
    }
    Ok(m)
}

/// Collapses all but the leading (batch) dimension; without `keep_batch`
/// flattens to rank 1.
pub fn flatten(x: &Tensor, keep_batch: bool) -> Tensor {
    if keep_batch {
        let n = x.shape().first().copied().unwrap_or(1).max(1);
        x.reshape(vec![n, x.len() / n])
    } else {
        x.reshape(vec![x.len()])
    }
}

impl Module {
    /// Runs this module's layer behavior. Bayesian layers read their weight
    /// RVs (a ledger touch, so their priors and guides enter the pass
    /// accounting); deterministic layers read plain parameters.
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let kind = self
            .layer
            .clone()
            .unwrap_or_else(|| panic!("module `{}` has no layer behavior", self.scope()));
        match kind {
            LayerKind::Linear { .. } => {
                let (w, b) = self.layer_weights();
                &x.matmul(&w.t()) + &b
            }
            LayerKind::Conv2d { .. } => {
                let (w, b) = self.layer_weights();
                x.conv2d(&w, Some(&b))
            }
            LayerKind::Relu => x.relu(),
            LayerKind::Flatten => flatten(x, true),
            LayerKind::MaxPool2d { kernel } => x.max_pool2d(kernel),
            LayerKind::Sequential => {
                let mut h = x.clone();
                for child in self.submodules.values_mut() {
                    h = child.forward(&h);
                }
                h
            }
        }
    }

    fn layer_weights(&mut self) -> (Tensor, Tensor) {
        if self.rvs.contains_key("weight") {
            (self.value("weight"), self.value("bias"))
        } else {
            (self.param("weight"), self.param("bias"))
        }
    }
}

/// Returns a copy of `model` where every deterministic linear/conv layer is
/// Bayesian: each weight's prior is Normal centered on its pretrained value
/// with scale `prior_scale * (|w| + 0.01)`, and guides start exactly at the
/// pretrained weights, so the initial forward reproduces the deterministic
/// model bit for bit. All other modules are copied unchanged.
pub fn lift(model: &Module, prior_scale: f64) -> Result<Module> {
    let mut out = model.deep_copy(fnv1a(b"lift"));
    lift_in_place(&mut out, prior_scale)?;
    Ok(out)
}

/// In-place variant of [`lift`] for converting a subtree of a larger model
/// while the rest stays deterministic. Takes the module through
/// `module_at_mut` to lift only part of a network.
pub fn lift_in_place(m: &mut Module, s: f64) -> Result<()> {
    for child in m.submodules.values_mut() {
        lift_in_place(child, s)?;
    }
    // Liftable = a weight-bearing layer whose weights still live in params.
    // Forward reads RVs when present (see layer_weights), so param presence,
    // not the posterior kind, is what distinguishes deterministic layers.
    let liftable = matches!(
        m.layer,
        Some(LayerKind::Linear { .. }) | Some(LayerKind::Conv2d { .. })
    ) && m.params.contains_key("weight");
    if !liftable {
        return Ok(());
    }
    let weights: Vec<(&str, Tensor)> = ["weight", "bias"]
        .iter()
        .map(|n| (*n, m.params.shift_remove(*n).expect("deterministic layer holds weight and bias")))
        .collect();
    m.posterior = Posterior::new(PosteriorKind::Normal { log_scale: -3.0 });
    for (name, t) in weights {
        let data = t.to_vec();
        let scales: Vec<f64> = data.iter().map(|w| s * (w.abs() + 0.01)).collect();
        let shape = t.shape().to_vec();
        let prior = Distribution::normal(
            Tensor::from_vec(shape.clone(), data.clone()),
            Tensor::from_vec(shape.clone(), scales),
        );
        m.install_rv(name, prior, Tensor::from_vec(shape, data))?;
    }
    Ok(())
}
