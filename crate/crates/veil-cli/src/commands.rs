//! The five workbench commands as library functions: each returns its
//! report document so tests and the binary share one code path. Artifacts
//! never embed wall-clock state; a command's outputs are a pure function of
//! its resolved configuration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use veil::nn;
use veil::rng::fnv1a;
use veil::{
    effective_sample_size, fit_map, fit_mcmc, fit_vi, set_posteriors, McmcOptions, Module,
    Optimizer, PosteriorKind, Tensor,
};

use crate::config::{hash_lines, run_config_map, Method, Model, PredictConfig, RunConfig};
use crate::data::{load_frame, target_column, Frame};
use crate::models::{build_module, rv_by_scope, scalar_latents, target_module, Program, StructureDoc};
use crate::report::{calibrate, predictive, Calibration, Prediction, PredictiveRow};
use crate::CliError;

/// Number of guide draws behind the per-latent mean/sd summaries in a fit
/// report (VI and MAP; MCMC summarizes its own chains).
const SUMMARY_DRAWS: usize = 512;

/// The run log: what was asked for, what data was used, and what happened.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunDoc {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub method: Option<String>,
    pub resolved: BTreeMap<String, String>,
    pub structure: StructureDoc,
    pub data: Option<DataDoc>,
    pub events: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataDoc {
    pub source: String,
    pub n_rows: usize,
    pub truth: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatentDoc {
    pub mean: f64,
    pub sd: f64,
}

/// The fit report: losses for optimization engines, chain statistics for
/// MCMC, and per-latent posterior summaries for every scalar latent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitDoc {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub method: String,
    pub engine: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
    pub latents: BTreeMap<String, LatentDoc>,
    pub acceptance: Option<Vec<f64>>,
    pub ess: Option<BTreeMap<String, f64>>,
}

pub struct FitOutcome {
    pub module: Module,
    pub program: Program,
    pub frame: Frame,
    pub rundoc: RunDoc,
    pub fitdoc: FitDoc,
}

/// Fits per the configuration, in memory. Fails before touching any state
/// on config or data errors, so a failed command leaves no artifacts.
pub fn run_fit(cfg: &RunConfig) -> Result<FitOutcome, CliError> {
    cfg.validate()?;
    let model = cfg.model;
    match (model, cfg.method) {
        (Model::Branching, Method::Map) | (Model::Branching, Method::Mcmc) => {
            return Err(CliError::Config(
                "branching supports vi only: its control-flow gate re-randomizes every pass, \
                 so mode finding and random-walk sampling have no fixed target"
                    .into(),
            ));
        }
        (Model::LiftedMlp, Method::Mcmc) | (Model::MlpClassifier, Method::Mcmc) => {
            return Err(CliError::Config(format!(
                "{} has network-sized latent tensors; the random-walk sampler only handles \
                 small latent spaces (use vi or map)",
                model.name()
            )));
        }
        _ => {}
    }

    let frame = if model == Model::Branching {
        Frame { headers: Vec::new(), columns: Vec::new(), truth: None }
    } else {
        load_frame(model, &cfg.data, cfg.seed, "synthetic-fit", true)?
    };
    let mut structure = StructureDoc::new(model, cfg.hidden, cfg.noise_sd);
    let mut m = build_module(&structure, cfg.seed)?;
    let prog = Program::new(model, &frame)?;
    if let Some(col) = target_column(model) {
        let y = frame.column(col).expect("target column").to_vec();
        let n = y.len();
        m.observe(&[(col, Tensor::from_vec(vec![n], y))])?;
    }

    let mut events = Vec::new();
    let mut losses = Vec::new();
    let mut final_loss = None;
    let steps_taken;
    let mut acceptance = None;
    let mut ess = None;
    let mut latents = BTreeMap::new();
    let engine;
    let anneal = (cfg.steps / 3).max(1);

    match cfg.method {
        Method::Vi => {
            if model == Model::LiftedMlp {
                let pre = fit_map(
                    &mut m,
                    &mut |mm| prog.run(mm),
                    cfg.pretrain_steps,
                    &mut Optimizer::adam(cfg.lr),
                )?;
                events.push(format!(
                    "pretrained deterministic network: {} map steps, final loss {:.6}",
                    pre.steps,
                    pre.final_loss
                ));
                let layer = "net.2";
                nn::lift_in_place(target_module(&mut m, layer)?, cfg.lift_scale)?;
                structure.lifted = true;
                structure.lift_layer = Some(layer.to_string());
                structure.lift_scale = cfg.lift_scale;
                events.push(format!(
                    "lifted {layer} with prior scale {} (other layers stay deterministic \
                     and keep training)",
                    cfg.lift_scale
                ));
            }
            let r1 = fit_vi(
                &mut m,
                &mut |mm| prog.run(mm),
                cfg.steps,
                cfg.n_samples,
                &mut Optimizer::adam(cfg.lr),
            )?;
            let r2 = fit_vi(
                &mut m,
                &mut |mm| prog.run(mm),
                anneal,
                cfg.n_samples,
                &mut Optimizer::adam(cfg.lr / 5.0),
            )?;
            events.push(format!(
                "vi: {} steps at lr {}, then {} annealing steps at lr {}",
                r1.steps,
                cfg.lr,
                r2.steps,
                cfg.lr / 5.0
            ));
            steps_taken = r1.steps + r2.steps;
            final_loss = Some(r2.final_loss);
            losses = r1.losses;
            losses.extend(r2.losses);
            engine = "vi";
        }
        Method::Map => {
            m.apply(&mut set_posteriors(PosteriorKind::PointMass));
            events.push("installed PointMass guides (map requires point guides)".into());
            let r1 = fit_map(&mut m, &mut |mm| prog.run(mm), cfg.steps, &mut Optimizer::adam(cfg.lr))?;
            let r2 =
                fit_map(&mut m, &mut |mm| prog.run(mm), anneal, &mut Optimizer::adam(cfg.lr / 5.0))?;
            events.push(format!(
                "map: {} steps at lr {}, then {} annealing steps at lr {}",
                r1.steps,
                cfg.lr,
                r2.steps,
                cfg.lr / 5.0
            ));
            steps_taken = r1.steps + r2.steps;
            final_loss = Some(r2.final_loss);
            losses = r1.losses;
            losses.extend(r2.losses);
            engine = "map";
        }
        Method::Mcmc => {
            m.apply(&mut set_posteriors(PosteriorKind::PointMass));
            events.push(
                "installed PointMass guides (the random-walk sampler moves point states)".into(),
            );
            let opts = McmcOptions {
                samples: cfg.steps,
                warmup: cfg.burn_in,
                step_scale: cfg.step_scale,
                thin: cfg.thin,
                chains: cfg.chains,
            };
            let run = fit_mcmc(&mut m, &|mm: &mut Module| prog.run(mm), &opts)?;
            let rates: Vec<String> =
                run.acceptance.iter().map(|a| format!("{a:.3}")).collect();
            events.push(format!(
                "mcmc: {} chain(s) x {} kept (burn-in {}, thin {}), acceptance [{}]",
                opts.chains,
                opts.samples,
                opts.warmup,
                opts.thin,
                rates.join(", ")
            ));
            let mut ess_map = BTreeMap::new();
            for site in &run.sites {
                let rows = &run.draws[site];
                if rows.first().map_or(0, Vec::len) != 1 {
                    continue;
                }
                let chain: Vec<f64> = run.scalar_site(site);
                let n = chain.len() as f64;
                let mean = chain.iter().sum::<f64>() / n;
                let sd = if chain.len() > 1 {
                    (chain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                latents.insert(site.clone(), LatentDoc { mean, sd });
                ess_map.insert(site.clone(), effective_sample_size(&chain));
            }
            steps_taken = opts.samples * opts.thin + opts.warmup;
            acceptance = Some(run.acceptance);
            ess = Some(ess_map);
            engine = "mcmc";
        }
    }

    if cfg.method != Method::Mcmc {
        latents = mc_latent_summaries(&mut m, &prog, SUMMARY_DRAWS)?;
    }

    let config_hash = cfg.hash();
    let rundoc = RunDoc {
        command: "fit".into(),
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        model: model.name().into(),
        method: Some(cfg.method.name().into()),
        resolved: run_config_map(cfg),
        structure,
        data: Some(DataDoc {
            source: match &cfg.data {
                crate::config::DataSpec::Path(p) => p.display().to_string(),
                _ => "synthetic".into(),
            },
            n_rows: frame.n_rows(),
            truth: frame.truth.clone(),
        }),
        events,
    };
    let fitdoc = FitDoc {
        config_hash,
        seed: cfg.seed,
        model: model.name().into(),
        method: cfg.method.name().into(),
        engine: engine.into(),
        steps: steps_taken,
        final_loss,
        losses,
        latents,
        acceptance,
        ess,
    };
    Ok(FitOutcome { module: m, program: prog, frame, rundoc, fitdoc })
}

/// Monte Carlo posterior summaries for every scalar latent: draw from the
/// guides, rerun the pass, read the value-space latents.
fn mc_latent_summaries(
    m: &mut Module,
    prog: &Program,
    k: usize,
) -> Result<BTreeMap<String, LatentDoc>, CliError> {
    let scopes = scalar_latents(m);
    if scopes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut acc: BTreeMap<String, Vec<f64>> =
        scopes.iter().map(|s| (s.clone(), Vec::with_capacity(k))).collect();
    for _ in 0..k {
        veil::no_grad(|| {
            m.begin_pass();
            m.sample()?;
            prog.run(m)
        })?;
        for s in &scopes {
            let rv = rv_by_scope(m, s).expect("latent scope");
            acc.get_mut(s).unwrap().push(rv.value().item());
        }
    }
    Ok(acc
        .into_iter()
        .map(|(s, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (s, LatentDoc { mean, sd })
        })
        .collect())
}

/// `fit`: run and write run log, fit report, and the state manifest.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutcome, CliError> {
    let outcome = run_fit(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    veil::save_json(&outcome.rundoc, cfg.out.join("run.json"))?;
    veil::save_json(&outcome.fitdoc, cfg.out.join("fit_report.json"))?;
    veil::save_state(&outcome.module, cfg.out.join("manifest"))?;
    Ok(outcome)
}

pub struct LoadedModel {
    pub module: Module,
    pub rundoc: RunDoc,
    pub model: Model,
}

/// Rebuilds a saved fit: module tree from the run log's structural facts,
/// then state from the manifest.
pub fn load_fitted(dir: &Path) -> Result<LoadedModel, CliError> {
    let rundoc: RunDoc = veil::load_json(dir.join("run.json"))?;
    let model = Model::parse(&rundoc.model)?;
    let mut module = build_module(&rundoc.structure, 0)?;
    veil::load_state(&mut module, dir.join("manifest"))?;
    Ok(LoadedModel { module, rundoc, model })
}

/// Releases observations, reseeds the predictive stream, and draws. Used by
/// both the in-process path and the load-from-manifest path so the two are
/// bitwise identical per seed.
pub fn predict_with(
    module: &mut Module,
    model: Model,
    frame: &Frame,
    n_draws: usize,
    level: f64,
    seed: u64,
) -> Result<Prediction, CliError> {
    let prog = Program::new(model, frame)?;
    module.reseed(seed.wrapping_add(fnv1a(b"predict")));
    predictive(module, &prog, frame.n_rows(), n_draws, level)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictDoc {
    pub command: String,
    pub config_hash: String,
    pub parent_hash: String,
    pub seed: u64,
    pub model: String,
    pub level: f64,
    pub n_draws: usize,
    pub n_rows: usize,
    pub rows: Vec<PredictiveRow>,
}

fn eval_frame(
    model: Model,
    pcfg: &PredictConfig,
    with_target: bool,
) -> Result<Frame, CliError> {
    if model == Model::Branching {
        return Err(CliError::Config(
            "the branching model has no predictive head; use demo-branching".into(),
        ));
    }
    load_frame(model, &pcfg.data, pcfg.seed, "synthetic-eval", with_target)
}

/// `predict` without artifact writing.
pub fn run_predict(pcfg: &PredictConfig) -> Result<(PredictDoc, Prediction), CliError> {
    pcfg.validate()?;
    let mut fitted = load_fitted(&pcfg.manifest)?;
    let frame = eval_frame(fitted.model, pcfg, false)?;
    let pred = predict_with(
        &mut fitted.module,
        fitted.model,
        &frame,
        pcfg.n_draws,
        pcfg.level,
        pcfg.seed,
    )?;
    let doc = PredictDoc {
        command: "predict".into(),
        config_hash: pcfg.hash(),
        parent_hash: fitted.rundoc.config_hash.clone(),
        seed: pcfg.seed,
        model: fitted.model.name().into(),
        level: pcfg.level,
        n_draws: pcfg.n_draws,
        n_rows: pred.rows.len(),
        rows: pred.rows.clone(),
    };
    Ok((doc, pred))
}

/// `predict`: write per-row CSV and the JSON report.
pub fn cmd_predict(pcfg: &PredictConfig) -> Result<PredictDoc, CliError> {
    let (doc, _) = run_predict(pcfg)?;
    std::fs::create_dir_all(&pcfg.out)?;
    veil::save_json(&doc, pcfg.out.join("predictions.json"))?;
    write_predictions_csv(&pcfg.out.join("predictions.csv"), &doc)?;
    Ok(doc)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_predictions_csv(path: &Path, doc: &PredictDoc) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# config_hash={} seed={} parent={}",
        doc.config_hash, doc.seed, doc.parent_hash
    )?;
    writeln!(f, "row,mean,sd,lower,upper,epistemic,aleatoric")?;
    for r in &doc.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.row,
            r.mean,
            r.sd,
            r.lower,
            r.upper,
            opt_cell(r.epistemic),
            opt_cell(r.aleatoric)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseDoc {
    pub command: String,
    pub config_hash: String,
    pub parent_hash: String,
    pub seed: u64,
    pub model: String,
    pub calibration: Calibration,
}

/// `diagnose`: predictive calibration against held-out outcomes.
pub fn run_diagnose(pcfg: &PredictConfig) -> Result<DiagnoseDoc, CliError> {
    pcfg.validate()?;
    let mut fitted = load_fitted(&pcfg.manifest)?;
    let frame = eval_frame(fitted.model, pcfg, true)?;
    let col = target_column(fitted.model).expect("diagnosable model has a target");
    let y = frame.column(col).expect("target column").to_vec();
    let pred = predict_with(
        &mut fitted.module,
        fitted.model,
        &frame,
        pcfg.n_draws,
        pcfg.level,
        pcfg.seed,
    )?;
    Ok(DiagnoseDoc {
        command: "diagnose".into(),
        config_hash: pcfg.hash(),
        parent_hash: fitted.rundoc.config_hash.clone(),
        seed: pcfg.seed,
        model: fitted.model.name().into(),
        calibration: calibrate(&pred, &y),
    })
}

pub fn cmd_diagnose(pcfg: &PredictConfig) -> Result<DiagnoseDoc, CliError> {
    let doc = run_diagnose(pcfg)?;
    std::fs::create_dir_all(&pcfg.out)?;
    veil::save_json(&doc, pcfg.out.join("diagnose.json"))?;
    Ok(doc)
}

/// Statistics for the passes that took one side of the gate. The weight
/// stats summarize guide draws: each branch owns its own guide (the slot key
/// includes the branch-dependent prior), so two independent summaries here
/// demonstrate that the posterior kept the branches separate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchSide {
    pub count: usize,
    pub frequency: f64,
    pub prior_loc: f64,
    pub prior_scale: f64,
    pub weight_mean: f64,
    pub weight_sd: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchingDoc {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_passes: usize,
    pub gate_positive: Option<BranchSide>,
    pub gate_negative: Option<BranchSide>,
    pub single_weight_per_pass: bool,
    pub guide_count: usize,
}

/// `demo-branching`: run the stochastic-control-flow model repeatedly and
/// report branch statistics. The gate draws Normal(0,1) each pass; a
/// positive gate selects the Normal(-1,1) prior for `weight`.
pub fn run_demo_branching(seed: u64, n_passes: usize) -> Result<BranchingDoc, CliError> {
    let structure = StructureDoc::new(Model::Branching, 0, 0.1);
    let mut m = build_module(&structure, seed)?;
    let prog = Program::Branching;
    let mut sides = [(0usize, 0.0f64, 0.0f64, 0.0f64, 0.0f64); 2];
    let mut single_weight = true;
    for _ in 0..n_passes {
        veil::no_grad(|| {
            m.begin_pass();
            m.sample()?;
            prog.run(&mut m)
        })?;
        if m.ledger() != ["weight"] {
            single_weight = false;
        }
        let rv = m.rv("weight").expect("weight rv");
        let loc = rv.prior().mean_data().expect("normal prior")[0];
        let scale = rv.prior().stddev_data().expect("normal prior")[0];
        let v = rv.value().item();
        let side = &mut sides[usize::from(loc >= 0.0)];
        side.0 += 1;
        side.1 += v;
        side.2 += v * v;
        side.3 = loc;
        side.4 = scale;
    }
    let summarize = |&(count, sum, sumsq, loc, scale): &(usize, f64, f64, f64, f64)| {
        (count > 0).then(|| {
            let mean = sum / count as f64;
            let var = if count > 1 {
                (sumsq - sum * sum / count as f64) / (count - 1) as f64
            } else {
                0.0
            };
            BranchSide {
                count,
                frequency: count as f64 / n_passes as f64,
                prior_loc: loc,
                prior_scale: scale,
                weight_mean: mean,
                weight_sd: var.max(0.0).sqrt(),
            }
        })
    };
    let lines = vec![
        "command=demo-branching".to_string(),
        format!("seed={seed}"),
        format!("n_passes={n_passes}"),
    ];
    Ok(BranchingDoc {
        command: "demo-branching".into(),
        config_hash: hash_lines(&lines),
        seed,
        n_passes,
        gate_positive: summarize(&sides[0]),
        gate_negative: summarize(&sides[1]),
        single_weight_per_pass: single_weight,
        guide_count: m.posterior().slot_count(),
    })
}

pub fn cmd_demo_branching(
    seed: u64,
    n_passes: usize,
    out: &Path,
) -> Result<BranchingDoc, CliError> {
    let doc = run_demo_branching(seed, n_passes)?;
    std::fs::create_dir_all(out)?;
    veil::save_json(&doc, out.join("branching.json"))?;
    Ok(doc)
}

#[derive(Clone, Debug)]
pub struct LiftConfig {
    pub manifest: PathBuf,
    pub scale: f64,
    pub layer: String,
    pub out: PathBuf,
}

/// `lift`: convert a saved deterministic network into a Bayesian one whose
/// priors anchor at the trained weights, without fitting. The result is a
/// loadable manifest; a later `fit` or `predict` picks it up from there.
pub fn cmd_lift(cfg: &LiftConfig) -> Result<RunDoc, CliError> {
    if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
        return Err(CliError::Config("scale must be a positive finite number".into()));
    }
    let mut fitted = load_fitted(&cfg.manifest)?;
    if fitted.model != Model::LiftedMlp {
        return Err(CliError::Config(format!(
            "model {} has no deterministic layers to lift",
            fitted.model.name()
        )));
    }
    if fitted.rundoc.structure.lifted {
        return Err(CliError::Config(
            "this manifest is already lifted; predict from it or refit".into(),
        ));
    }
    nn::lift_in_place(target_module(&mut fitted.module, &cfg.layer)?, cfg.scale)?;

    let mut structure = fitted.rundoc.structure.clone();
    structure.lifted = true;
    structure.lift_layer = Some(cfg.layer.clone());
    structure.lift_scale = cfg.scale;
    let lines = vec![
        "command=lift".to_string(),
        format!("layer={}", cfg.layer),
        format!("scale={}", cfg.scale),
        format!("parent={}", fitted.rundoc.config_hash),
    ];
    let mut resolved = BTreeMap::new();
    resolved.insert("layer".to_string(), cfg.layer.clone());
    resolved.insert("scale".to_string(), cfg.scale.to_string());
    let rundoc = RunDoc {
        command: "lift".into(),
        config_hash: hash_lines(&lines),
        seed: fitted.rundoc.seed,
        model: fitted.rundoc.model.clone(),
        method: None,
        resolved,
        structure,
        data: None,
        events: vec![format!(
            "lifted {} with prior scale {}; weights now carry priors centered on their \
             trained values",
            cfg.layer, cfg.scale
        )],
    };
    std::fs::create_dir_all(&cfg.out)?;
    veil::save_json(&rundoc, cfg.out.join("run.json"))?;
    veil::save_state(&fitted.module, cfg.out.join("manifest"))?;
    Ok(rundoc)
}
