//! Guide construction: each posterior kind manufactures an approximating
//! distribution per random variable, holding that guide's learnable
//! parameters in a slot keyed by (leaf name, prior identity).
//!
//! Guides for priors supported on (0, inf) (HalfNormal) live in log space:
//! the guide is Normal over ln(value), samples are exp-transformed back, and
//! log_q carries the -ln(value) Jacobian. PointMass slots for such priors
//! hold their parameter in log space too so unconstrained optimizers cannot
//! step out of the support.
//!
//! Priors whose parameters were computed during the current pass (detected
//! via [`Fingerprint::Dynamic`]) get the prior itself as their guide under
//! every posterior kind, contributing zero learnable parameters. For
//! Automatic this is the specified behavior; the other kinds fall back to it
//! because a parameterized guide cannot track a prior that changes shape or
//! location every pass.

use indexmap::IndexMap;

use crate::dist::{Distribution, Fingerprint};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::Tensor;

/// Strategy for manufacturing guides. `Deterministic` marks modules that must
/// not host random variables at all (plain neural layers).
#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorKind {
    Manual,
    Automatic,
    Normal { log_scale: f64 },
    ScaledNormal { scaling: f64 },
    PointMass,
    Deterministic,
}

impl PosteriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorKind::Manual => "Manual",
            PosteriorKind::Automatic => "Automatic",
            PosteriorKind::Normal { .. } => "Normal",
            PosteriorKind::ScaledNormal { .. } => "ScaledNormal",
            PosteriorKind::PointMass => "PointMass",
            PosteriorKind::Deterministic => "Deterministic",
        }
    }
}

/// Guide identity: one guide per leaf name and prior fingerprint, so a leaf
/// reassigned with a materially different static prior (branching control
/// flow) owns one guide per branch.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SlotKey {
    pub leaf: String,
    pub fingerprint: Fingerprint,
}

impl SlotKey {
    /// Stable display form used in parameter names and manifests.
    pub fn tag(&self) -> String {
        match self.fingerprint {
            Fingerprint::Static(h) => format!("{}#{h:016x}", self.leaf),
            Fingerprint::Dynamic => format!("{}#dyn", self.leaf),
        }
    }
}

/// Coordinate space the slot's parameters live in relative to the RV value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Parameters are the log of the value; used for positive-support priors.
    Log,
}

#[derive(Clone, Debug)]
pub(crate) enum GuideForm {
    /// Normal guide: loc and unconstrained log-scale, both learnable.
    NormalGuide { loc: Tensor, log_scale: Tensor },
    /// Delta guide holding the current value (log-space for Log transform).
    PointMassGuide { value: Tensor },
    /// Dynamic prior: the guide is whatever the prior is this pass.
    PriorGuide,
    /// Resolved from the manual posterior's registered guides at use time.
    ManualGuide,
}

#[derive(Clone, Debug)]
pub(crate) struct Slot {
    pub form: GuideForm,
    pub transform: Transform,
}

/// Per-module guide factory and store.
pub struct Posterior {
    kind: PosteriorKind,
    slots: IndexMap<SlotKey, Slot>,
    manual_params: IndexMap<String, Tensor>,
    manual_guides: IndexMap<String, Distribution>,
    hook: Option<Box<dyn FnMut(&mut Posterior) + Send>>,
}

impl std::fmt::Debug for Posterior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Posterior")
            .field("kind", &self.kind)
            .field("slots", &self.slots)
            .field("manual_guides", &self.manual_guides.keys().collect::<Vec<_>>())
            .field("has_hook", &self.hook.is_some())
            .finish()
    }
}

impl Posterior {
    pub fn new(kind: PosteriorKind) -> Self {
        Posterior {
            kind,
            slots: IndexMap::new(),
            manual_params: IndexMap::new(),
            manual_guides: IndexMap::new(),
            hook: None,
        }
    }

    pub fn kind(&self) -> &PosteriorKind {
        &self.kind
    }

    /// Number of guide slots currently installed. Each slot belongs to one
    /// (leaf name, prior fingerprint) pair, so a branch-dependent prior shows
    /// up as one slot per branch once every branch has been visited.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Registers (or fetches) a learnable tensor owned by a Manual posterior.
    /// Idempotent by name so refresh hooks can call it every pass.
    pub fn manual_param(&mut self, name: &str, init: impl FnOnce() -> Tensor) -> Tensor {
        if let Some(t) = self.manual_params.get(name) {
            return t.clone();
        }
        let t = init();
        self.manual_params.insert(name.to_string(), t.clone());
        t
    }

    /// Registers the guide distribution a Manual posterior serves for `leaf`.
    pub fn set_manual_guide(&mut self, leaf: &str, guide: Distribution) {
        self.manual_guides.insert(leaf.to_string(), guide);
    }

    pub fn manual_guide(&self, leaf: &str) -> Option<&Distribution> {
        self.manual_guides.get(leaf)
    }

    /// Installs the refresh hook that runs at the start of every pass,
    /// before the model forward, so guides read by the pass are current.
    pub fn set_hook(&mut self, hook: impl FnMut(&mut Posterior) + Send + 'static) {
        self.hook = Some(Box::new(hook));
    }

    pub(crate) fn run_hook(&mut self) {
        if let Some(mut h) = self.hook.take() {
            h(self);
            self.hook = Some(h);
        }
    }


    pub(crate) fn slot(&self, key: &SlotKey) -> Option<&Slot> {
        self.slots.get(key)
    }

    pub(crate) fn manual_params_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.manual_params.iter()
    }

    pub(crate) fn manual_guides_iter(&self) -> impl Iterator<Item = (&String, &Distribution)> {
        self.manual_guides.iter()
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = (&SlotKey, &Slot)> {
        self.slots.iter()
    }

    pub(crate) fn insert_slot_raw(&mut self, key: SlotKey, slot: Slot) {
        self.slots.insert(key, slot);
    }

    /// Builds the guide slot for `key` if absent. `init` overrides the
    /// location-like parameter with a known value (posterior swaps initialize
    /// at current RV values); otherwise it is drawn from the prior via `rng`.
    /// Returns true when a new slot was created.
    pub(crate) fn ensure_slot(
        &mut self,
        scope: &str,
        key: &SlotKey,
        prior: &Distribution,
        init: Option<&[f64]>,
        rng: &mut RngState,
    ) -> Result<bool> {
        if self.slots.contains_key(key) {
            return Ok(false);
        }
        let slot = self.build_slot(scope, key, prior, init, rng)?;
        self.slots.insert(key.clone(), slot);
        Ok(true)
    }

    fn build_slot(
        &self,
        scope: &str,
        key: &SlotKey,
        prior: &Distribution,
        init: Option<&[f64]>,
        rng: &mut RngState,
    ) -> Result<Slot> {
        if key.fingerprint == Fingerprint::Dynamic {
            // Under Manual a registered guide still wins for dynamic priors.
            if self.kind == PosteriorKind::Manual && self.manual_guides.contains_key(&key.leaf) {
                return Ok(Slot { form: GuideForm::ManualGuide, transform: Transform::Identity });
            }
            return Ok(Slot { form: GuideForm::PriorGuide, transform: Transform::Identity });
        }
        let anchor = |rng: &mut RngState| -> Vec<f64> {
            if let Some(v) = init {
                return v.to_vec();
            }
            // Scalar sites anchor at the prior mean: one unlucky draw can
            // start a guide deep in a flat region of the objective (a noise
            // scale near zero, say) that optimizers leave very slowly.
            // Vector sites keep random anchors so exchangeable elements
            // (network weights) break symmetry.
            match prior.mean_data() {
                Some(m) if m.len() == 1 => m,
                _ => prior.sample(rng).to_vec(),
            }
        };
        let shape = prior.event_shape();
        match &self.kind {
            PosteriorKind::Deterministic => {
                Err(Error::DeterministicModule { scope: scope.to_string() })
            }
            PosteriorKind::Manual => {
                if self.manual_guides.contains_key(&key.leaf) {
                    Ok(Slot { form: GuideForm::ManualGuide, transform: Transform::Identity })
                } else {
                    Err(Error::MissingGuide { scope: scope.to_string() })
                }
            }
            PosteriorKind::PointMass => Ok(point_mass_slot(prior, &anchor(rng), shape)),
            PosteriorKind::Normal { log_scale } => {
                normal_slot(prior, &anchor(rng), shape, |_| *log_scale)
                    .ok_or_else(|| unsupported(prior, "Normal", scope))
            }
            PosteriorKind::ScaledNormal { scaling } => {
                let s = *scaling;
                normal_slot(prior, &anchor(rng), shape, |sigma| (s * sigma).ln())
                    .ok_or_else(|| unsupported(prior, "ScaledNormal", scope))
            }
            PosteriorKind::Automatic => {
                // Static Categorical priors cannot take a Normal-family
                // guide; hold a point at a prior draw instead.
                if matches!(prior, Distribution::Categorical { .. }) {
                    Ok(point_mass_slot(prior, &anchor(rng), shape))
                } else {
                    normal_slot(prior, &anchor(rng), shape, |_| -3.0)
                        .ok_or_else(|| unsupported(prior, "Automatic", scope))
                }
            }
        }
    }

    /// Draws a fresh value for the RV behind `key`. Reparameterized guides
    /// produce graph-connected values (ops over the slot parameters) so the
    /// ELBO can differentiate through them; dynamic guides draw detached
    /// samples from the current prior.
    pub(crate) fn draw_value(
        &self,
        scope: &str,
        key: &SlotKey,
        prior_now: &Distribution,
        rng: &mut RngState,
    ) -> Result<Tensor> {
        let slot = self
            .slots
            .get(key)
            .unwrap_or_else(|| panic!("no guide slot for `{scope}` (key {})", key.tag()));
        match &slot.form {
            GuideForm::NormalGuide { loc, log_scale } => {
                check_guide_health(scope, loc, log_scale)?;
                let n: usize = loc.len();
                let eps = Tensor::from_vec(loc.shape().to_vec(), rng.normal_vec(n));
                let z = loc + &(&log_scale.exp() * &eps);
                Ok(match slot.transform {
                    Transform::Identity => z,
                    Transform::Log => z.exp(),
                })
            }
            GuideForm::PointMassGuide { value } => Ok(match slot.transform {
                // mul_scalar(1) rebuilds the value as an op output: reads see
                // the parameter's current data and downstream priors register
                // as pass-computed.
                Transform::Identity => value.mul_scalar(1.0),
                Transform::Log => value.exp(),
            }),
            GuideForm::PriorGuide => Ok(prior_now.sample(rng)),
            GuideForm::ManualGuide => {
                let dist = self
                    .manual_guides
                    .get(&key.leaf)
                    .ok_or_else(|| Error::MissingGuide { scope: scope.to_string() })?;
                match dist.rsample(rng) {
                    Ok(v) => Ok(v),
                    Err(Error::NotReparameterizable) => Ok(dist.sample(rng)),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Event-summed log q(value) for the guide behind `key`, built from
    /// recorded ops. PointMass guides contribute identically zero.
    pub(crate) fn log_q(
        &self,
        scope: &str,
        key: &SlotKey,
        prior_now: &Distribution,
        value: &Tensor,
    ) -> Result<Tensor> {
        let slot = self
            .slots
            .get(key)
            .unwrap_or_else(|| panic!("no guide slot for `{scope}` (key {})", key.tag()));
        match &slot.form {
            GuideForm::NormalGuide { loc, log_scale } => {
                check_guide_health(scope, loc, log_scale)?;
                let q = Distribution::normal(loc, &log_scale.exp());
                Ok(match slot.transform {
                    Transform::Identity => q.log_prob(value).sum_all(),
                    Transform::Log => {
                        let lv = value.ln();
                        &q.log_prob(&lv).sum_all() - &lv.sum_all()
                    }
                })
            }
            GuideForm::PointMassGuide { .. } => Ok(Tensor::scalar(0.0)),
            GuideForm::PriorGuide => Ok(prior_now.log_prob(value).sum_all()),
            GuideForm::ManualGuide => {
                let dist = self
                    .manual_guides
                    .get(&key.leaf)
                    .ok_or_else(|| Error::MissingGuide { scope: scope.to_string() })?;
                Ok(dist.log_prob(value).sum_all())
            }
        }
    }

    /// The guide as a plain distribution (diagnostics; PointMass slots in log
    /// space surface as PointMass over the value-space point).
    pub(crate) fn guide_dist(
        &self,
        scope: &str,
        key: &SlotKey,
        prior_now: &Distribution,
    ) -> Result<Distribution> {
        let slot = self
            .slots
            .get(key)
            .unwrap_or_else(|| panic!("no guide slot for `{scope}` (key {})", key.tag()));
        match &slot.form {
            GuideForm::NormalGuide { loc, log_scale } => {
                check_guide_health(scope, loc, log_scale)?;
                Ok(Distribution::normal(loc, &log_scale.exp()))
            }
            GuideForm::PointMassGuide { value } => Ok(match slot.transform {
                Transform::Identity => Distribution::point_mass(value),
                Transform::Log => Distribution::point_mass(value.exp()),
            }),
            GuideForm::PriorGuide => Ok(prior_now.clone()),
            GuideForm::ManualGuide => self
                .manual_guides
                .get(&key.leaf)
                .cloned()
                .ok_or_else(|| Error::MissingGuide { scope: scope.to_string() }),
        }
    }

    /// Learnable tensors in creation order: slot parameters first, then
    /// manually registered ones. Names are scope-relative.
    pub(crate) fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (key, slot) in &self.slots {
            let tag = key.tag();
            match &slot.form {
                GuideForm::NormalGuide { loc, log_scale } => {
                    out.push((format!("{tag}.loc"), loc.clone()));
                    out.push((format!("{tag}.log_scale"), log_scale.clone()));
                }
                GuideForm::PointMassGuide { value } => {
                    out.push((format!("{tag}.point"), value.clone()));
                }
                GuideForm::PriorGuide | GuideForm::ManualGuide => {}
            }
        }
        for (name, t) in &self.manual_params {
            out.push((format!("posterior.{name}"), t.clone()));
        }
        out
    }

    /// Independent copy with fresh parameter storage. Manual hooks are not
    /// clonable and are dropped, along with any registered manual guides
    /// (they may reference the original's tensors); re-register after
    /// copying if the copy needs a Manual posterior.
    pub(crate) fn deep_copy(&self) -> Posterior {
        let mut slots = IndexMap::new();
        for (key, slot) in &self.slots {
            let form = match &slot.form {
                GuideForm::NormalGuide { loc, log_scale } => GuideForm::NormalGuide {
                    loc: copy_tensor(loc),
                    log_scale: copy_tensor(log_scale),
                },
                GuideForm::PointMassGuide { value } => {
                    GuideForm::PointMassGuide { value: copy_tensor(value) }
                }
                GuideForm::PriorGuide => GuideForm::PriorGuide,
                GuideForm::ManualGuide => GuideForm::ManualGuide,
            };
            slots.insert(key.clone(), Slot { form, transform: slot.transform });
        }
        let mut manual_params = IndexMap::new();
        for (name, t) in &self.manual_params {
            manual_params.insert(name.clone(), copy_tensor(t));
        }
        Posterior {
            kind: self.kind.clone(),
            slots,
            manual_params,
            manual_guides: IndexMap::new(),
            hook: None,
        }
    }
}

fn copy_tensor(t: &Tensor) -> Tensor {
    if t.requires_grad() {
        Tensor::variable(t.shape().to_vec(), t.to_vec())
    } else {
        Tensor::from_vec(t.shape().to_vec(), t.to_vec())
    }
}

fn unsupported(prior: &Distribution, kind: &'static str, scope: &str) -> Error {
    Error::UnsupportedGuide { prior: prior.family(), kind, scope: scope.to_string() }
}

/// A divergent optimizer step can push a guide's parameters to non-finite
/// values or underflow its scale to zero. Surfacing that as a structured
/// error (instead of panicking inside a distribution constructor) lets
/// callers report a numerical failure and exit cleanly.
fn check_guide_health(scope: &str, loc: &Tensor, log_scale: &Tensor) -> Result<()> {
    let healthy = loc.to_vec().iter().all(|v| v.is_finite())
        && log_scale
            .to_vec()
            .iter()
            .all(|v| v.is_finite() && v.exp() > f64::MIN_POSITIVE);
    if healthy {
        Ok(())
    } else {
        Err(Error::DegenerateGuide { scope: scope.to_string() })
    }
}

fn point_mass_slot(prior: &Distribution, anchor: &[f64], shape: Vec<usize>) -> Slot {
    match prior {
        Distribution::HalfNormal { .. } => Slot {
            form: GuideForm::PointMassGuide {
                value: Tensor::variable(shape, anchor.iter().map(|v| v.ln()).collect()),
            },
            transform: Transform::Log,
        },
        _ => Slot {
            form: GuideForm::PointMassGuide {
                value: Tensor::variable(shape, anchor.to_vec()),
            },
            transform: Transform::Identity,
        },
    }
}

/// Normal-family slot over `prior`, or None for unsupported (Categorical)
/// priors. `log_scale_of` maps each element's prior scale to the initial
/// unconstrained scale parameter.
fn normal_slot(
    prior: &Distribution,
    anchor: &[f64],
    shape: Vec<usize>,
    log_scale_of: impl Fn(f64) -> f64,
) -> Option<Slot> {
    match prior {
        Distribution::Normal { .. } => {
            let sigmas = prior.stddev_data().unwrap();
            Some(Slot {
                form: GuideForm::NormalGuide {
                    loc: Tensor::variable(shape.clone(), anchor.to_vec()),
                    log_scale: Tensor::variable(shape, sigmas.iter().map(|s| log_scale_of(*s)).collect()),
                },
                transform: Transform::Identity,
            })
        }
        Distribution::HalfNormal { scale } => {
            let sigmas = scale.to_vec();
            Some(Slot {
                form: GuideForm::NormalGuide {
                    loc: Tensor::variable(shape.clone(), anchor.iter().map(|v| v.ln()).collect()),
                    log_scale: Tensor::variable(shape, sigmas.iter().map(|s| log_scale_of(*s)).collect()),
                },
                transform: Transform::Log,
            })
        }
        // A delta prior admits only a delta guide.
        Distribution::PointMass { .. } => Some(point_mass_slot(prior, anchor, shape)),
        Distribution::Categorical { .. } => None,
    }
}
