//! The module tree: named random variables with lexically scoped paths,
//! per-pass ledgers, observation bindings, recursive sampling, and the
//! log p / log q accounting that inference consumes.
//!
//! A pass is bracketed by [`Module::begin_pass`] on the root; RVs assigned
//! or read during the pass land on their module's ledger (reads count so
//! that layer weights declared at construction still contribute their prior
//! and guide terms when a forward uses them). [`Module::sample`] redraws
//! unobserved RVs from their guides without touching ledgers.

use std::collections::HashSet;

use indexmap::IndexMap;

use crate::dist::{Distribution, Fingerprint};
use crate::error::{Error, Result};
use crate::posterior::{GuideForm, Posterior, PosteriorKind, SlotKey};
use crate::rng::{fnv1a, RngState};
use crate::tensor::tape;
use crate::Tensor;

/// A named node tying a prior distribution to a concrete value tensor.
#[derive(Debug)]
pub struct RandomVariable {
    name: String,
    scope: String,
    prior: Distribution,
    value: Tensor,
    observed: bool,
    /// Set when an observation was cleared; forces a redraw on next touch.
    stale: bool,
    key: SlotKey,
    /// Snapshot of the guide that produced `value` (None when observed).
    guide: Option<Distribution>,
}

impl RandomVariable {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn scope(&self) -> &str {
        &self.scope
    }
    pub fn prior(&self) -> &Distribution {
        &self.prior
    }
    pub fn value(&self) -> Tensor {
        self.value.clone()
    }
    pub fn observed(&self) -> bool {
        self.observed
    }
    pub(crate) fn stale(&self) -> bool {
        self.stale
    }
    pub fn guide(&self) -> Option<&Distribution> {
        self.guide.as_ref()
    }
    pub fn key(&self) -> &SlotKey {
        &self.key
    }
}

/// One ledger entry's densities: event-summed log p(value) under the prior
/// and log q(value) under the guide (zero for observed RVs and PointMass
/// guides). Both are graph-connected tensors.
#[derive(Debug)]
pub struct PqTerm {
    pub scope: String,
    pub log_p: Tensor,
    pub log_q: Tensor,
    pub observed: bool,
}

#[derive(Debug)]
struct PendingObs {
    tensor: Tensor,
    matched: bool,
}

/// A node in the model tree; owns submodules, parameters, buffers, random
/// variables, and the posterior that manufactures guides for those RVs.
#[derive(Debug)]
pub struct Module {
    pub(crate) scope: String,
    pub(crate) posterior: Posterior,
    pub(crate) submodules: IndexMap<String, Module>,
    pub(crate) params: IndexMap<String, Tensor>,
    pub(crate) buffers: IndexMap<String, Tensor>,
    pub(crate) rvs: IndexMap<String, RandomVariable>,
    pending_obs: IndexMap<String, PendingObs>,
    ledger: Vec<String>,
    pass_stamp: u64,
    passes: u64,
    pub(crate) rng: RngState,
    pub(crate) layer: Option<crate::nn::LayerKind>,
}

impl Module {
    /// Root or child module with an Automatic posterior.
    pub fn new(name: &str) -> Module {
        Module::with_posterior(name, PosteriorKind::Automatic)
    }

    pub fn with_posterior(name: &str, kind: PosteriorKind) -> Module {
        Module {
            scope: name.to_string(),
            posterior: Posterior::new(kind),
            submodules: IndexMap::new(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            rvs: IndexMap::new(),
            pending_obs: IndexMap::new(),
            ledger: Vec::new(),
            pass_stamp: 0,
            passes: 0,
            rng: RngState::new(0).derive(fnv1a(name.as_bytes())),
            layer: None,
        }
    }

    /// Full path of this module in the tree ("root.child.leaf").
    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    pub fn posterior_mut(&mut self) -> &mut Posterior {
        &mut self.posterior
    }

    /// Raw access to this module's draw stream, for model code that needs
    /// plain random numbers that are not random variables (stochastic
    /// control flow gates, data augmentation). Draws taken here advance the
    /// same stream the module's RVs use, so runs stay reproducible per seed.
    pub fn rng_mut(&mut self) -> &mut RngState {
        &mut self.rng
    }

    /// Derives every module's RNG stream from `seed` and its scope path, so
    /// draw sequences depend only on the seed and the tree structure.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = RngState::new(seed).derive(fnv1a(self.scope.as_bytes()));
        for child in self.submodules.values_mut() {
            child.reseed(seed);
        }
    }

    fn bound_kind(&self, name: &str) -> Option<&'static str> {
        if self.params.contains_key(name) {
            Some("parameter")
        } else if self.buffers.contains_key(name) {
            Some("buffer")
        } else if self.rvs.contains_key(name) {
            Some("random variable")
        } else if self.submodules.contains_key(name) {
            Some("module")
        } else {
            None
        }
    }

    fn check_collision(&self, name: &str, attempted: &'static str) -> Result<()> {
        match self.bound_kind(name) {
            Some(existing) if existing != attempted => Err(Error::NameCollision {
                name: format!("{}.{}", self.scope, name),
                existing,
                attempted,
            }),
            _ => Ok(()),
        }
    }

    /// Registers a trainable tensor. Re-registering the same name replaces
    /// the stored tensor.
    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        self.check_collision(name, "parameter")?;
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn param(&self, name: &str) -> Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}` on `{}`", self.scope))
            .clone()
    }

    /// Registers a non-trainable tensor.
    pub fn set_buffer(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        self.check_collision(name, "buffer")?;
        self.buffers.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn buffer(&self, name: &str) -> Tensor {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("no buffer `{name}` on `{}`", self.scope))
            .clone()
    }

    /// Attaches (or replaces) a child module, rewriting its subtree's scope
    /// paths under this module's.
    pub fn add_module(&mut self, name: &str, mut child: Module) -> Result<()> {
        self.check_collision(name, "module")?;
        child.set_scope(format!("{}.{}", self.scope, name));
        self.submodules.insert(name.to_string(), child);
        Ok(())
    }

    fn set_scope(&mut self, scope: String) {
        for rv in self.rvs.values_mut() {
            rv.scope = format!("{scope}.{}", rv.name);
        }
        for (name, child) in self.submodules.iter_mut() {
            child.set_scope(format!("{scope}.{name}"));
        }
        self.scope = scope;
    }

    /// Iterates this module's random variables in creation order.
    pub fn rvs(&self) -> impl Iterator<Item = &RandomVariable> {
        self.rvs.values()
    }

    /// Iterates immediate child modules in insertion order.
    pub fn children(&self) -> impl Iterator<Item = &Module> {
        self.submodules.values()
    }

    pub fn submodule(&self, name: &str) -> Option<&Module> {
        self.submodules.get(name)
    }

    pub fn submodule_mut(&mut self, name: &str) -> Option<&mut Module> {
        self.submodules.get_mut(name)
    }

    /// Resolves a dotted path relative to this module ("" is this module).
    pub fn module_at(&self, path: &str) -> Result<&Module> {
        let mut m = self;
        if path.is_empty() {
            return Ok(m);
        }
        for part in path.split('.') {
            m = m
                .submodules
                .get(part)
                .ok_or_else(|| Error::NoSuchModule(format!("{}.{path}", self.scope)))?;
        }
        Ok(m)
    }

    pub fn module_at_mut(&mut self, path: &str) -> Result<&mut Module> {
        let root_scope = self.scope.clone();
        let mut m = self;
        if path.is_empty() {
            return Ok(m);
        }
        for part in path.split('.') {
            m = m
                .submodules
                .get_mut(part)
                .ok_or_else(|| Error::NoSuchModule(format!("{root_scope}.{path}")))?;
        }
        Ok(m)
    }

    fn touch(&mut self, name: &str) {
        let now = tape::current_pass();
        if now != 0 && self.pass_stamp == now && !self.ledger.iter().any(|l| l == name) {
            self.ledger.push(name.to_string());
        }
    }

    /// Declares or refreshes a random variable and returns its current value.
    ///
    /// First touch builds the guide (asking this module's posterior) and
    /// draws an initial value unless an observation is bound. Reassignment
    /// with the same static prior retains the current value; switching to a
    /// materially different static prior (branching control flow) selects
    /// that branch's own guide and redraws. Dynamic priors (parameters
    /// computed this pass) refresh their value on every assignment.
    pub fn set_rv(&mut self, name: &str, prior: Distribution) -> Result<Tensor> {
        self.check_collision(name, "random variable")?;
        let scope_path = format!("{}.{}", self.scope, name);
        let key = SlotKey { leaf: name.to_string(), fingerprint: prior.fingerprint() };
        let dynamic = key.fingerprint == Fingerprint::Dynamic;

        if !self.rvs.contains_key(name) {
            let obs = match self.pending_obs.get_mut(name) {
                Some(p) => {
                    p.matched = true;
                    Some(p.tensor.clone())
                }
                None => None,
            };
            self.posterior.ensure_slot(&scope_path, &key, &prior, None, &mut self.rng)?;
            let (value, guide) = match &obs {
                Some(t) => (t.clone(), None),
                None => {
                    let v = self.posterior.draw_value(&scope_path, &key, &prior, &mut self.rng)?;
                    let g = self.posterior.guide_dist(&scope_path, &key, &prior).ok();
                    (v, g)
                }
            };
            self.rvs.insert(
                name.to_string(),
                RandomVariable {
                    name: name.to_string(),
                    scope: scope_path,
                    prior,
                    value: value.clone(),
                    observed: obs.is_some(),
                    stale: false,
                    key,
                    guide,
                },
            );
            self.touch(name);
            return Ok(value);
        }

        {
            let rv = self.rvs.get_mut(name).unwrap();
            rv.prior = prior;
            if rv.observed {
                self.posterior.ensure_slot(&scope_path, &key, &rv.prior, None, &mut self.rng)?;
                rv.key = key;
            } else if dynamic || key != rv.key || rv.stale {
                self.posterior.ensure_slot(&scope_path, &key, &rv.prior, None, &mut self.rng)?;
                rv.value =
                    self.posterior.draw_value(&scope_path, &key, &rv.prior, &mut self.rng)?;
                rv.guide = self.posterior.guide_dist(&scope_path, &key, &rv.prior).ok();
                rv.key = key;
                rv.stale = false;
            } else if matches!(
                self.posterior.slot(&key).map(|s| &s.form),
                Some(GuideForm::PointMassGuide { .. })
            ) {
                // Same key: the point is retained, but rebuild the value op
                // so the parameter's current data flows into this pass.
                rv.value =
                    self.posterior.draw_value(&scope_path, &key, &rv.prior, &mut self.rng)?;
            }
        }
        self.touch(name);
        Ok(self.rvs[name].value.clone())
    }

    /// Reads an RV's current value, recording the read on this pass's ledger.
    pub fn value(&mut self, name: &str) -> Tensor {
        assert!(
            self.rvs.contains_key(name),
            "no random variable `{name}` on `{}`",
            self.scope
        );
        self.touch(name);
        self.rvs[name].value.clone()
    }

    /// Reads an RV's current value without a ledger touch (diagnostics).
    pub fn peek(&self, name: &str) -> Tensor {
        self.rvs
            .get(name)
            .unwrap_or_else(|| panic!("no random variable `{name}` on `{}`", self.scope))
            .value
            .clone()
    }

    /// The RV record behind an attribute, if declared.
    pub fn rv(&self, name: &str) -> Option<&RandomVariable> {
        self.rvs.get(name)
    }

    /// The RV record at a dotted path relative to this module.
    pub fn rv_at(&self, path: &str) -> Option<&RandomVariable> {
        let (module_path, leaf) = split_path(path);
        self.module_at(module_path).ok().and_then(|m| m.rv(leaf))
    }

    /// The live guide distribution for an RV on this module.
    pub fn guide(&self, name: &str) -> Result<Distribution> {
        let rv = self
            .rvs
            .get(name)
            .unwrap_or_else(|| panic!("no random variable `{name}` on `{}`", self.scope));
        self.posterior.guide_dist(&rv.scope, &rv.key, &rv.prior)
    }

    /// Binds observations. Names resolve against this module's subtree;
    /// dotted paths reach submodules (the module part must exist). Bindings
    /// for RVs that do not exist yet are held and applied on first
    /// assignment; re-observing a name replaces the previous binding.
    /// Bound values are returned verbatim (bitwise) by every subsequent read.
    pub fn observe(&mut self, bindings: &[(&str, Tensor)]) -> Result<()> {
        for (path, t) in bindings {
            let (module_path, leaf) = split_path(path);
            let m = self.module_at_mut(module_path)?;
            let matched = match m.rvs.get_mut(leaf) {
                Some(rv) => {
                    rv.observed = true;
                    rv.stale = false;
                    rv.value = t.clone();
                    rv.guide = None;
                    true
                }
                None => false,
            };
            m.pending_obs.insert(leaf.to_string(), PendingObs { tensor: t.clone(), matched });
        }
        Ok(())
    }

    /// Clears every observation in the subtree; formerly observed RVs redraw
    /// from their guides at the next touch, so the model generates again.
    pub fn observe_none(&mut self) {
        for rv in self.rvs.values_mut() {
            if rv.observed {
                rv.observed = false;
                rv.stale = true;
            }
        }
        self.pending_obs.clear();
        for child in self.submodules.values_mut() {
            child.observe_none();
        }
    }

    /// Scope-qualified names of observation bindings that never matched an
    /// RV (useful after a pass to catch typos against stochastic structure).
    pub fn unmatched_observations(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_unmatched(&mut out);
        out
    }

    fn collect_unmatched(&self, out: &mut Vec<String>) {
        for (leaf, p) in &self.pending_obs {
            if !p.matched {
                out.push(format!("{}.{leaf}", self.scope));
            }
        }
        for child in self.submodules.values() {
            child.collect_unmatched(out);
        }
    }

    /// Opens a forward pass: advances the pass epoch, clears the subtree's
    /// ledgers, and runs Manual posterior refresh hooks (so guides read by
    /// the pass are current).
    pub fn begin_pass(&mut self) {
        let epoch = tape::advance_pass();
        self.begin_pass_at(epoch);
    }

    fn begin_pass_at(&mut self, epoch: u64) {
        self.pass_stamp = epoch;
        self.passes += 1;
        self.ledger.clear();
        self.posterior.run_hook();
        for child in self.submodules.values_mut() {
            child.begin_pass_at(epoch);
        }
    }

    /// Redraws every unobserved RV in the subtree from its guide. Values
    /// from reparameterized guides stay graph-connected to guide parameters.
    /// Dynamic-prior RVs are skipped; they refresh when the pass reassigns
    /// them with this pass's prior. Never touches ledgers.
    pub fn sample(&mut self) -> Result<()> {
        for rv in self.rvs.values_mut() {
            if rv.observed {
                continue;
            }
            if matches!(
                self.posterior.slot(&rv.key).map(|s| &s.form),
                Some(GuideForm::PriorGuide) | None
            ) {
                continue;
            }
            rv.value = self.posterior.draw_value(&rv.scope, &rv.key, &rv.prior, &mut self.rng)?;
            rv.stale = false;
            rv.guide = self.posterior.guide_dist(&rv.scope, &rv.key, &rv.prior).ok();
        }
        for child in self.submodules.values_mut() {
            child.sample()?;
        }
        Ok(())
    }

    /// One term per ledger entry across the subtree, in touch order
    /// (this module's entries first, then children's).
    pub fn pq_terms(&self) -> Result<Vec<PqTerm>> {
        if self.passes == 0 {
            return Err(Error::StaleLedger);
        }
        let mut out = Vec::new();
        self.collect_pq(&mut out)?;
        Ok(out)
    }

    fn collect_pq(&self, out: &mut Vec<PqTerm>) -> Result<()> {
        for leaf in &self.ledger {
            let rv = &self.rvs[leaf];
            let log_p = rv.prior.log_prob(&rv.value).sum_all();
            let log_q = if rv.observed {
                Tensor::scalar(0.0)
            } else {
                self.posterior.log_q(&rv.scope, &rv.key, &rv.prior, &rv.value)?
            };
            out.push(PqTerm {
                scope: rv.scope.clone(),
                log_p,
                log_q,
                observed: rv.observed,
            });
        }
        for child in self.submodules.values() {
            child.collect_pq(out)?;
        }
        Ok(())
    }

    /// Leaf names on this module's current-pass ledger, in touch order.
    pub fn ledger(&self) -> &[String] {
        &self.ledger
    }

    /// Trainable tensors of the subtree: this module's parameters, then its
    /// guide and manual-posterior parameters, then children's, depth-first
    /// in creation order, deduplicated by tensor identity.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        self.collect_params(&mut out, &mut seen);
        out
    }

    fn collect_params(&self, out: &mut Vec<(String, Tensor)>, seen: &mut HashSet<u64>) {
        for (name, t) in &self.params {
            if seen.insert(t.id()) {
                out.push((format!("{}.{name}", self.scope), t.clone()));
            }
        }
        for (name, t) in self.posterior.named_params() {
            if seen.insert(t.id()) {
                out.push((format!("{}.{name}", self.scope), t.clone()));
            }
        }
        for child in self.submodules.values() {
            child.collect_params(out, seen);
        }
    }

    /// Applies `f` to every module in the subtree, children first.
    pub fn apply(&mut self, f: &mut dyn FnMut(&mut Module)) {
        for child in self.submodules.values_mut() {
            child.apply(f);
        }
        f(self);
    }

    /// Replaces this module's posterior with a fresh one of `kind`,
    /// rebuilding guides for existing latent RVs initialized at their
    /// current values (PointMass slots hold them exactly; log-space slots
    /// roundtrip through ln/exp). RV values themselves are untouched.
    /// Observed RVs carry no guide, so they are skipped; whatever slot the
    /// next pass needs for them is built on assignment. Manual targets
    /// defer slot construction until guides are registered.
    pub fn rebuild_posterior(&mut self, kind: PosteriorKind) -> Result<()> {
        let mut fresh = Posterior::new(kind.clone());
        if kind != PosteriorKind::Manual {
            for rv in self.rvs.values() {
                if rv.observed {
                    continue;
                }
                let init = rv.value.to_vec();
                fresh.ensure_slot(&rv.scope, &rv.key, &rv.prior, Some(&init), &mut self.rng)?;
            }
        }
        self.posterior = fresh;
        Ok(())
    }

    /// Number of random variables in the subtree.
    pub fn rv_count(&self) -> usize {
        self.rvs.len() + self.submodules.values().map(Module::rv_count).sum::<usize>()
    }

    /// Independent copy with fresh tensor storage and an RNG stream derived
    /// from this one by `stream_tag` (each tag yields a distinct stream).
    /// Manual hooks and manual guides do not survive the copy.
    pub fn deep_copy(&self, stream_tag: u64) -> Module {
        Module {
            scope: self.scope.clone(),
            posterior: self.posterior.deep_copy(),
            submodules: self
                .submodules
                .iter()
                .map(|(n, c)| (n.clone(), c.deep_copy(stream_tag)))
                .collect(),
            params: self.params.iter().map(|(n, t)| (n.clone(), copy_tensor(t))).collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), copy_tensor(t))).collect(),
            rvs: self
                .rvs
                .iter()
                .map(|(n, rv)| {
                    (
                        n.clone(),
                        RandomVariable {
                            name: rv.name.clone(),
                            scope: rv.scope.clone(),
                            prior: copy_dist(&rv.prior),
                            value: Tensor::from_vec(rv.value.shape().to_vec(), rv.value.to_vec()),
                            observed: rv.observed,
                            stale: rv.stale,
                            key: rv.key.clone(),
                            guide: None,
                        },
                    )
                })
                .collect(),
            pending_obs: self
                .pending_obs
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        PendingObs {
                            tensor: Tensor::from_vec(p.tensor.shape().to_vec(), p.tensor.to_vec()),
                            matched: p.matched,
                        },
                    )
                })
                .collect(),
            ledger: self.ledger.clone(),
            pass_stamp: self.pass_stamp,
            passes: self.passes,
            rng: self.rng.derive(stream_tag),
            layer: self.layer.clone(),
        }
    }

    /// Restores (or creates) an RV record from persisted state without
    /// touching the posterior or drawing anything.
    pub(crate) fn restore_rv(
        &mut self,
        name: &str,
        prior: Distribution,
        value: Tensor,
        observed: bool,
        stale: bool,
        key: SlotKey,
    ) {
        let scope_path = format!("{}.{}", self.scope, name);
        match self.rvs.get_mut(name) {
            Some(rv) => {
                rv.prior = prior;
                rv.value = value;
                rv.observed = observed;
                rv.stale = stale;
                rv.key = key;
                rv.guide = None;
            }
            None => {
                self.rvs.insert(
                    name.to_string(),
                    RandomVariable {
                        name: name.to_string(),
                        scope: scope_path,
                        prior,
                        value,
                        observed,
                        stale,
                        key,
                        guide: None,
                    },
                );
            }
        }
    }

    /// Installs an RV with an exact value, bypassing the initial guide draw:
    /// the guide is built with its location anchored at `value` (lift uses
    /// this to keep pretrained weights bit-intact at initialization).
    pub(crate) fn install_rv(
        &mut self,
        name: &str,
        prior: Distribution,
        value: Tensor,
    ) -> Result<()> {
        self.check_collision(name, "random variable")?;
        let scope_path = format!("{}.{}", self.scope, name);
        let key = SlotKey { leaf: name.to_string(), fingerprint: prior.fingerprint() };
        self.posterior.ensure_slot(&scope_path, &key, &prior, Some(&value.to_vec()), &mut self.rng)?;
        let guide = self.posterior.guide_dist(&scope_path, &key, &prior).ok();
        self.rvs.insert(
            name.to_string(),
            RandomVariable {
                name: name.to_string(),
                scope: scope_path,
                prior,
                value,
                observed: false,
                stale: false,
                key,
                guide,
            },
        );
        Ok(())
    }
}

/// Transformer for [`Module::apply`] that swaps every module's posterior
/// kind, rebuilding guides initialized at current RV values.
pub fn set_posteriors(kind: PosteriorKind) -> impl FnMut(&mut Module) {
    move |m| {
        m.rebuild_posterior(kind.clone())
            .unwrap_or_else(|e| panic!("set_posteriors at `{}`: {e}", m.scope()));
    }
}

fn split_path(path: &str) -> (&str, &str) {
    match path.rfind('.') {
        Some(i) => (&path[..i], &path[i + 1..]),
        None => ("", path),
    }
}

fn copy_tensor(t: &Tensor) -> Tensor {
    if t.requires_grad() {
        Tensor::variable(t.shape().to_vec(), t.to_vec())
    } else {
        Tensor::from_vec(t.shape().to_vec(), t.to_vec())
    }
}

fn copy_dist(d: &Distribution) -> Distribution {
    let copy = |t: &Tensor| Tensor::from_vec(t.shape().to_vec(), t.to_vec());
    match d {
        Distribution::Normal { loc, scale } => {
            Distribution::Normal { loc: copy(loc), scale: copy(scale) }
        }
        Distribution::HalfNormal { scale } => Distribution::HalfNormal { scale: copy(scale) },
        Distribution::Categorical { logits } => {
            Distribution::Categorical { logits: copy(logits) }
        }
        Distribution::PointMass { value } => Distribution::PointMass { value: copy(value) },
    }
}
