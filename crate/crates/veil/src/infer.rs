//! Inference engines over module trees: stochastic ELBO estimation with
//! first-order optimizers (variational fits), point-mass MAP optimization,
//! and random-walk Metropolis MCMC with optional parallel chains.
//!
//! All three consume the same model contract: a "pass" closure that runs the
//! generative code against a module tree whose observations are already
//! bound. Engine randomness comes from the module's RNG streams, so a
//! reseeded model yields bitwise-identical fits.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Module;
use crate::posterior::{GuideForm, Transform};
use crate::rng::fnv1a;
use crate::tensor::tape;
use crate::Tensor;

/// Monte Carlo ELBO estimate: the mean over `n_samples` guide redraws of
/// Σ(log p − log q) across the pass's ledger. The returned scalar is
/// graph-connected to guide parameters through reparameterized draws, so
/// `estimate.neg().backward()` yields ascent directions.
pub fn elbo(
    m: &mut Module,
    pass: &mut dyn FnMut(&mut Module) -> Result<()>,
    n_samples: usize,
) -> Result<Tensor> {
    assert!(n_samples > 0, "elbo needs at least one sample");
    let mut acc = Tensor::scalar(0.0);
    for _ in 0..n_samples {
        m.begin_pass();
        m.sample()?;
        pass(m)?;
        for t in m.pq_terms()? {
            let (p, q) = (t.log_p.item(), t.log_q.item());
            if !p.is_finite() || !q.is_finite() {
                return Err(Error::NonFiniteTerm { scope: t.scope, log_p: p, log_q: q });
            }
            acc = &acc + &(&t.log_p - &t.log_q);
        }
    }
    Ok(acc.mul_scalar(1.0 / n_samples as f64))
}

/// First-order optimizers over parameter tensors. State (Adam moments) is
/// keyed by tensor identity and persists across steps.
#[derive(Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m1: HashMap<u64, Vec<f64>>,
        m2: HashMap<u64, Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m1: HashMap::new(),
            m2: HashMap::new(),
        }
    }

    /// One descent update from current gradients. Errors without touching
    /// any parameter if one of them has no gradient; gradients are left in
    /// place (callers clear them).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        for p in params {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(format!("#{}", p.id())));
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for p in params {
                    let g = p.grad().unwrap();
                    let mut d = p.to_vec();
                    for i in 0..d.len() {
                        d[i] -= *lr * g[i];
                    }
                    p.set_data(&d);
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m1, m2 } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for p in params {
                    let g = p.grad().unwrap();
                    let m = m1.entry(p.id()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = m2.entry(p.id()).or_insert_with(|| vec![0.0; g.len()]);
                    let mut d = p.to_vec();
                    for i in 0..d.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        d[i] -= *lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + *eps);
                    }
                    p.set_data(&d);
                }
            }
        }
        Ok(())
    }
}

/// Outcome of an optimization-based fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub engine: String,
    pub steps: usize,
    pub n_samples: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

fn fit_loop(
    engine: &str,
    m: &mut Module,
    pass: &mut dyn FnMut(&mut Module) -> Result<()>,
    steps: usize,
    n_samples: usize,
    opt: &mut Optimizer,
) -> Result<FitReport> {
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        tape::clear::<f64>();
        let loss = elbo(m, pass, n_samples)?.neg();
        let l = loss.item();
        if !l.is_finite() {
            tape::clear::<f64>();
            return Err(Error::NonFiniteLoss(step));
        }
        loss.backward()?;
        let all = m.parameters();
        // Control flow can leave this step's graph without some guides;
        // only parameters the graph actually reached get stepped.
        let touched: Vec<Tensor> = all.iter().filter(|p| p.grad().is_some()).cloned().collect();
        opt.step(&touched)?;
        for p in &all {
            p.clear_grad();
        }
        losses.push(l);
    }
    tape::clear::<f64>();
    Ok(FitReport {
        engine: engine.to_string(),
        steps,
        n_samples,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
    })
}

/// Stochastic variational fit: `steps` updates on the negative ELBO
/// estimated from `n_samples` guide redraws per step.
pub fn fit_vi(
    m: &mut Module,
    pass: &mut dyn FnMut(&mut Module) -> Result<()>,
    steps: usize,
    n_samples: usize,
    opt: &mut Optimizer,
) -> Result<FitReport> {
    fit_loop("vi", m, pass, steps, n_samples, opt)
}

/// Walks the tree and errors if any unobserved static-prior RV holds a
/// spread-out guide. PointMass guides and prior-following dynamic guides
/// are the only admissible forms for mode finding and MCMC.
fn enforce_point_mass(m: &Module, method: &'static str) -> Result<()> {
    let mut bad = Vec::new();
    collect_non_point(m, &mut bad);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NotPointMass { method, scopes: bad })
    }
}

fn collect_non_point(m: &Module, bad: &mut Vec<String>) {
    for rv in m.rvs.values() {
        if rv.observed() {
            continue;
        }
        match m.posterior.slot(rv.key()).map(|s| &s.form) {
            Some(GuideForm::NormalGuide { .. }) | Some(GuideForm::ManualGuide) => {
                bad.push(rv.scope().to_string());
            }
            _ => {}
        }
    }
    for child in m.submodules.values() {
        collect_non_point(child, bad);
    }
}

/// Maximum a posteriori fit: requires PointMass guides on the latents and
/// optimizes the log joint (log q is identically zero, so the negative ELBO
/// is the negative log joint). Mode positions for constrained latents are
/// found in their original value space.
pub fn fit_map(
    m: &mut Module,
    pass: &mut dyn FnMut(&mut Module) -> Result<()>,
    steps: usize,
    opt: &mut Optimizer,
) -> Result<FitReport> {
    // One structural pass so first-touch RVs exist before enforcement.
    crate::no_grad(|| {
        m.begin_pass();
        pass(m)
    })?;
    enforce_point_mass(m, "fit_map")?;
    fit_loop("map", m, pass, steps, 1, opt)
}

/// Random-walk Metropolis settings. `samples` draws are kept per chain
/// after `warmup` burn-in iterations, recording every `thin`-th state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcOptions {
    pub samples: usize,
    pub warmup: usize,
    pub step_scale: f64,
    pub thin: usize,
    pub chains: usize,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions { samples: 1000, warmup: 500, step_scale: 0.5, thin: 1, chains: 1 }
    }
}

/// Merged posterior draws. `draws[site]` holds one row per kept draw, all
/// chains concatenated in chain order; `chain_of[i]` is row i's chain.
/// Values are reported in each latent's original space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcRun {
    pub sites: Vec<String>,
    pub draws: IndexMap<String, Vec<Vec<f64>>>,
    pub chain_of: Vec<usize>,
    pub acceptance: Vec<f64>,
}

impl McmcRun {
    /// Flattens a site's draws to scalars (first element of each row).
    pub fn scalar_site(&self, site: &str) -> Vec<f64> {
        self.draws[site].iter().map(|row| row[0]).collect()
    }
}

struct Coord {
    site: String,
    param: Tensor,
    log_space: bool,
}

fn collect_coords(m: &Module, out: &mut Vec<Coord>) -> Result<()> {
    for rv in m.rvs.values() {
        if rv.observed() {
            continue;
        }
        if matches!(rv.prior(), crate::Distribution::Categorical { .. }) {
            return Err(Error::CategoricalLatent(rv.scope().to_string()));
        }
        if let Some(slot) = m.posterior.slot(rv.key()) {
            if let GuideForm::PointMassGuide { value } = &slot.form {
                out.push(Coord {
                    site: rv.scope().to_string(),
                    param: value.clone(),
                    log_space: slot.transform == Transform::Log,
                });
            }
        }
    }
    for child in m.submodules.values() {
        collect_coords(child, out)?;
    }
    Ok(())
}

/// Log joint density of the current point, in latent value space: evaluates
/// one pass and sums prior log-densities over the ledger, plus the change
/// of variables for log-space coordinates.
fn log_joint(
    m: &mut Module,
    pass: &(dyn Fn(&mut Module) -> Result<()> + Sync),
    coords: &[Coord],
) -> Result<f64> {
    crate::no_grad(|| {
        m.begin_pass();
        m.sample()?;
        pass(m)?;
        let mut lp = 0.0;
        for t in m.pq_terms()? {
            let v = t.log_p.item();
            if v.is_nan() {
                return Err(Error::NonFiniteTerm { scope: t.scope, log_p: v, log_q: 0.0 });
            }
            lp += v;
        }
        for c in coords {
            if c.log_space {
                lp += c.param.to_vec().iter().sum::<f64>();
            }
        }
        Ok(lp)
    })
}

struct ChainOut {
    per_site: Vec<Vec<Vec<f64>>>,
    acceptance: f64,
    final_state: Vec<Vec<f64>>,
}

fn run_chain(
    m: &mut Module,
    pass: &(dyn Fn(&mut Module) -> Result<()> + Sync),
    opts: &McmcOptions,
    chain: usize,
) -> Result<(Vec<String>, ChainOut)> {
    let mut coords = Vec::new();
    collect_coords(m, &mut coords)?;
    let sites: Vec<String> = coords.iter().map(|c| c.site.clone()).collect();
    let mut prop_rng = m.rng.derive(fnv1a(b"mcmc-proposals").wrapping_add(chain as u64));

    let mut theta: Vec<Vec<f64>> = coords.iter().map(|c| c.param.to_vec()).collect();
    let mut lj = log_joint(m, pass, &coords)?;
    assert!(
        lj.is_finite(),
        "initial state has zero posterior density; choose a feasible start"
    );

    let total = opts.warmup + opts.samples * opts.thin;
    let mut accepted = 0usize;
    let mut per_site: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(opts.samples); coords.len()];

    for it in 0..total {
        for (c, t) in coords.iter().zip(&theta) {
            let prop: Vec<f64> =
                t.iter().map(|v| v + opts.step_scale * prop_rng.normal()).collect();
            c.param.set_data(&prop);
        }
        let lj_new = log_joint(m, pass, &coords)?;
        if prop_rng.next_f64().ln() < lj_new - lj {
            accepted += 1;
            lj = lj_new;
            for (t, c) in theta.iter_mut().zip(&coords) {
                *t = c.param.to_vec();
            }
        } else {
            for (c, t) in coords.iter().zip(&theta) {
                c.param.set_data(t);
            }
        }
        if it >= opts.warmup && (it - opts.warmup) % opts.thin == opts.thin - 1 {
            for (si, (c, t)) in coords.iter().zip(&theta).enumerate() {
                let row = if c.log_space {
                    t.iter().map(|v| v.exp()).collect()
                } else {
                    t.clone()
                };
                per_site[si].push(row);
            }
        }
    }

    Ok((
        sites,
        ChainOut {
            per_site,
            acceptance: accepted as f64 / total.max(1) as f64,
            final_state: theta,
        },
    ))
}

/// Random-walk Metropolis over the PointMass latents. Proposals perturb all
/// coordinates jointly with isotropic normal noise (in log space for
/// positive-constrained latents, with the matching density correction, so
/// reported draws target the value-space posterior). Chains beyond the
/// first run on deep copies in parallel threads with derived RNG streams;
/// the model is left at the first chain's final state.
pub fn fit_mcmc(
    m: &mut Module,
    pass: &(dyn Fn(&mut Module) -> Result<()> + Sync),
    opts: &McmcOptions,
) -> Result<McmcRun> {
    assert!(opts.samples > 0 && opts.thin > 0 && opts.chains > 0, "degenerate mcmc options");
    // One structural pass so first-touch RVs exist before enforcement and
    // before chain copies are taken.
    crate::no_grad(|| {
        m.begin_pass();
        pass(m)
    })?;
    enforce_point_mass(m, "fit_mcmc")?;

    let mut outs: Vec<(Vec<String>, ChainOut)> = Vec::with_capacity(opts.chains);
    if opts.chains == 1 {
        outs.push(run_chain(m, pass, opts, 0)?);
    } else {
        let results: Vec<Result<(Vec<String>, ChainOut)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..opts.chains)
                .map(|c| {
                    let mut mc = m.deep_copy(fnv1a(b"mcmc-chain").wrapping_add(c as u64));
                    s.spawn(move || run_chain(&mut mc, pass, opts, c))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("mcmc chain panicked")).collect()
        });
        for r in results {
            outs.push(r?);
        }
        // Leave the caller's model at chain 0's final coordinates.
        let mut coords = Vec::new();
        collect_coords(m, &mut coords)?;
        for (c, state) in coords.iter().zip(&outs[0].1.final_state) {
            c.param.set_data(state);
        }
    }

    let sites = outs[0].0.clone();
    let mut draws: IndexMap<String, Vec<Vec<f64>>> =
        sites.iter().map(|s| (s.clone(), Vec::new())).collect();
    let mut chain_of = Vec::new();
    let mut acceptance = Vec::new();
    for (chain, (chain_sites, out)) in outs.into_iter().enumerate() {
        assert_eq!(chain_sites, sites, "chains disagree on coordinate order");
        let kept = out.per_site.first().map_or(0, Vec::len);
        chain_of.extend(std::iter::repeat(chain).take(kept));
        for (site, rows) in sites.iter().zip(out.per_site) {
            draws[site].extend(rows);
        }
        acceptance.push(out.acceptance);
    }
    Ok(McmcRun { sites, draws, chain_of, acceptance })
}

/// Effective sample size of a chain via the initial positive sequence
/// estimator: autocorrelations are summed in lag pairs until a pair sum
/// goes negative.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (x[i] - mean) * (x[i + lag] - mean);
        }
        s / n as f64 / c0
    };
    let mut sum = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    (n as f64 / (1.0 + 2.0 * sum)).min(n as f64)
}
