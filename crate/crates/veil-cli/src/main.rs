use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use veil_cli::commands::{
    cmd_demo_branching, cmd_diagnose, cmd_fit, cmd_lift, cmd_predict, LiftConfig,
};
use veil_cli::config::{
    apply_run_kv, env_seed, read_config_file, DataSpec, PredictConfig, RunConfig,
};
use veil_cli::CliError;

/// Probabilistic-model workbench: fit the built-in example models, persist
/// and reload fits, and produce predictive and calibration reports. All
/// outputs are deterministic given the seed (flag, config file, or
/// VEIL_SEED).
#[derive(Parser)]
#[command(name = "veil", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model; writes run log, fit report, and state manifest
    Fit(Box<FitArgs>),
    /// Posterior-predictive summaries for new inputs from a saved fit
    Predict(EvalArgs),
    /// Calibration (coverage and PIT histogram) on held-out data
    Diagnose(EvalArgs),
    /// Stochastic-control-flow demonstration statistics
    DemoBranching(DemoArgs),
    /// Give a saved deterministic network priors centered on its weights
    Lift(LiftArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// linreg | hetreg | branching | mlp-classifier | lifted-mlp
    #[arg(long)]
    model: Option<String>,
    /// vi | map | mcmc
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps (vi/map) or kept samples per chain (mcmc)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// ELBO samples per step
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    /// MCMC burn-in iterations
    #[arg(long = "burn-in")]
    burn_in: Option<usize>,
    /// MCMC proposal scale
    #[arg(long = "step-scale")]
    step_scale: Option<f64>,
    /// Record every thin-th MCMC state
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Deterministic pretraining steps before lifting (lifted-mlp)
    #[arg(long = "pretrain-steps")]
    pretrain_steps: Option<usize>,
    /// Prior scale factor used by the lift (lifted-mlp)
    #[arg(long = "lift-scale")]
    lift_scale: Option<f64>,
    /// Fixed observation noise of the lifted-mlp regression head
    #[arg(long = "noise-sd")]
    noise_sd: Option<f64>,
    /// Hidden width of the network models
    #[arg(long)]
    hidden: Option<usize>,
    /// CSV dataset with the model's columns
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Synthetic generator spec, e.g. a=1.5,b=-2,sigma=0.5,n=200
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of a previous fit (or lift)
    #[arg(long)]
    manifest: PathBuf,
    /// CSV input rows; defaults to the model's synthetic generator
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Synthetic generator spec for input rows
    #[arg(long)]
    synthetic: Option<String>,
    /// Posterior-predictive draws per row
    #[arg(long = "n-draws")]
    n_draws: Option<usize>,
    /// Credible-interval level, e.g. 0.9
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "n-passes")]
    n_passes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LiftArgs {
    /// Output directory of a deterministic lifted-mlp fit
    #[arg(long)]
    manifest: PathBuf,
    /// Prior scale factor: sd = scale * (|w| + 0.01) per weight
    #[arg(long)]
    scale: Option<f64>,
    /// Module path to lift ("net" for the whole network, "net.2" for one layer)
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_fit(a: &FitArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &a.config {
        for (k, v, line) in read_config_file(path)? {
            apply_run_kv(&mut cfg, &k, &v, &format!("{} line {line}", path.display()))?;
        }
    }
    let mut flag = |k: &str, v: Option<String>| -> Result<(), CliError> {
        if let Some(v) = v {
            apply_run_kv(&mut cfg, k, &v, &format!("--{}", k.replace('_', "-")))?;
        }
        Ok(())
    };
    flag("model", a.model.clone())?;
    flag("method", a.method.clone())?;
    flag("seed", a.seed.map(|v| v.to_string()))?;
    flag("steps", a.steps.map(|v| v.to_string()))?;
    flag("lr", a.lr.map(|v| v.to_string()))?;
    flag("n_samples", a.n_samples.map(|v| v.to_string()))?;
    flag("burn_in", a.burn_in.map(|v| v.to_string()))?;
    flag("step_scale", a.step_scale.map(|v| v.to_string()))?;
    flag("thin", a.thin.map(|v| v.to_string()))?;
    flag("chains", a.chains.map(|v| v.to_string()))?;
    flag("pretrain_steps", a.pretrain_steps.map(|v| v.to_string()))?;
    flag("lift_scale", a.lift_scale.map(|v| v.to_string()))?;
    flag("noise_sd", a.noise_sd.map(|v| v.to_string()))?;
    flag("hidden", a.hidden.map(|v| v.to_string()))?;
    flag("data", a.data.as_ref().map(|p| p.display().to_string()))?;
    flag("synthetic", a.synthetic.clone())?;
    flag("out", a.out.as_ref().map(|p| p.display().to_string()))?;
    Ok(cfg)
}

fn resolve_eval(a: &EvalArgs) -> Result<PredictConfig, CliError> {
    let mut cfg = PredictConfig::new(a.manifest.clone());
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(p) = &a.data {
        cfg.data = DataSpec::Path(p.clone());
    }
    if let Some(s) = &a.synthetic {
        cfg.data =
            if s == "default" { DataSpec::Default } else { DataSpec::Synthetic(s.clone()) };
    }
    if let Some(n) = a.n_draws {
        cfg.n_draws = n;
    }
    if let Some(l) = a.level {
        cfg.level = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Fit(args) => {
            let cfg = resolve_fit(&args)?;
            let outcome = cmd_fit(&cfg)?;
            let loss = outcome
                .fitdoc
                .final_loss
                .map(|l| format!(", final loss {l:.6}"))
                .unwrap_or_default();
            println!(
                "fit complete: model={} method={} seed={}{loss}; artifacts in {}",
                cfg.model,
                cfg.method,
                cfg.seed,
                cfg.out.display()
            );
            for (name, s) in &outcome.fitdoc.latents {
                println!("  {name}: mean {:.4}, sd {:.4}", s.mean, s.sd);
            }
            Ok(())
        }
        Cmd::Predict(args) => {
            let cfg = resolve_eval(&args)?;
            let doc = cmd_predict(&cfg)?;
            println!(
                "predict complete: {} rows, {} draws each, level {}; artifacts in {}",
                doc.n_rows,
                doc.n_draws,
                doc.level,
                cfg.out.display()
            );
            Ok(())
        }
        Cmd::Diagnose(args) => {
            let cfg = resolve_eval(&args)?;
            let doc = cmd_diagnose(&cfg)?;
            println!(
                "diagnose complete: coverage {:.4} at level {} over {} rows; artifacts in {}",
                doc.calibration.coverage,
                doc.calibration.level,
                doc.calibration.n_rows,
                cfg.out.display()
            );
            Ok(())
        }
        Cmd::DemoBranching(args) => {
            let seed = match args.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let n_passes = args.n_passes.unwrap_or(10000);
            let out = args.out.unwrap_or_else(|| PathBuf::from("veil-out"));
            let doc = cmd_demo_branching(seed, n_passes, &out)?;
            let freq = doc
                .gate_positive
                .as_ref()
                .map(|s| format!("{:.4}", s.frequency))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "demo complete: {} passes, positive-gate frequency {freq}, {} guides; \
                 artifacts in {}",
                doc.n_passes,
                doc.guide_count,
                out.display()
            );
            Ok(())
        }
        Cmd::Lift(args) => {
            let cfg = LiftConfig {
                manifest: args.manifest,
                scale: args.scale.unwrap_or(0.1),
                layer: args.layer.unwrap_or_else(|| "net".into()),
                out: args.out.unwrap_or_else(|| PathBuf::from("veil-out")),
            };
            let doc = cmd_lift(&cfg)?;
            println!(
                "lift complete: {}; artifacts in {}",
                doc.events.first().map(String::as_str).unwrap_or(""),
                cfg.out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
