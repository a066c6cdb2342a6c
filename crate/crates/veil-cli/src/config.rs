//! Run configuration: defaults, `VEIL_SEED` fallback, flat key=value config
//! files, and command-line flags, applied in that order so flags win. The
//! resolved configuration has a canonical text form whose SHA-256 hash is
//! stamped into every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Model {
    Linreg,
    Hetreg,
    Branching,
    MlpClassifier,
    LiftedMlp,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Linreg => "linreg",
            Model::Hetreg => "hetreg",
            Model::Branching => "branching",
            Model::MlpClassifier => "mlp-classifier",
            Model::LiftedMlp => "lifted-mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Model, CliError> {
        match s {
            "linreg" => Ok(Model::Linreg),
            "hetreg" => Ok(Model::Hetreg),
            "branching" => Ok(Model::Branching),
            "mlp-classifier" => Ok(Model::MlpClassifier),
            "lifted-mlp" => Ok(Model::LiftedMlp),
            other => Err(CliError::Config(format!(
                "unknown model `{other}` (expected linreg, hetreg, branching, mlp-classifier, or lifted-mlp)"
            ))),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Method {
    Vi,
    Map,
    Mcmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vi => "vi",
            Method::Map => "map",
            Method::Mcmc => "mcmc",
        }
    }

    pub fn parse(s: &str) -> Result<Method, CliError> {
        match s {
            "vi" => Ok(Method::Vi),
            "map" => Ok(Method::Map),
            "mcmc" => Ok(Method::Mcmc),
            other => Err(CliError::Config(format!(
                "unknown method `{other}` (expected vi, map, or mcmc)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a model's dataset comes from: the model's default generator, a
/// synthetic spec like `a=1.5,b=-2,sigma=0.5,n=200`, or a CSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSpec {
    Default,
    Synthetic(String),
    Path(PathBuf),
}

impl DataSpec {
    fn canonical(&self) -> String {
        match self {
            DataSpec::Default => "synthetic=default".to_string(),
            DataSpec::Synthetic(s) => format!("synthetic={s}"),
            DataSpec::Path(p) => format!("data={}", p.display()),
        }
    }
}

/// Fully resolved `fit` configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: Model,
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub n_samples: usize,
    pub burn_in: usize,
    pub step_scale: f64,
    pub thin: usize,
    pub chains: usize,
    pub pretrain_steps: usize,
    pub lift_scale: f64,
    pub noise_sd: f64,
    pub hidden: usize,
    pub data: DataSpec,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: Model::Linreg,
            method: Method::Vi,
            seed: 0,
            steps: 1200,
            lr: 0.05,
            n_samples: 4,
            burn_in: 500,
            step_scale: 0.5,
            thin: 1,
            chains: 1,
            pretrain_steps: 400,
            lift_scale: 0.1,
            noise_sd: 0.1,
            hidden: 16,
            data: DataSpec::Default,
            out: PathBuf::from("veil-out"),
        }
    }
}

impl RunConfig {
    /// Canonical key=value rendering, one line per field in fixed order.
    pub fn canonical_lines(&self) -> Vec<String> {
        vec![
            format!("model={}", self.model),
            format!("method={}", self.method),
            format!("seed={}", self.seed),
            format!("steps={}", self.steps),
            format!("lr={}", self.lr),
            format!("n_samples={}", self.n_samples),
            format!("burn_in={}", self.burn_in),
            format!("step_scale={}", self.step_scale),
            format!("thin={}", self.thin),
            format!("chains={}", self.chains),
            format!("pretrain_steps={}", self.pretrain_steps),
            format!("lift_scale={}", self.lift_scale),
            format!("noise_sd={}", self.noise_sd),
            format!("hidden={}", self.hidden),
            self.data.canonical(),
        ]
    }

    pub fn hash(&self) -> String {
        hash_lines(&self.canonical_lines())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.steps == 0 {
            return Err(CliError::Config("steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CliError::Config("lr must be a positive finite number".into()));
        }
        if self.n_samples == 0 {
            return Err(CliError::Config("n_samples must be positive".into()));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(CliError::Config("thin and chains must be positive".into()));
        }
        if !(self.step_scale.is_finite() && self.step_scale > 0.0) {
            return Err(CliError::Config("step_scale must be a positive finite number".into()));
        }
        if !(self.lift_scale.is_finite() && self.lift_scale > 0.0) {
            return Err(CliError::Config("lift_scale must be a positive finite number".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return Err(CliError::Config("noise_sd must be a positive finite number".into()));
        }
        if self.hidden == 0 {
            return Err(CliError::Config("hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Fully resolved `predict`/`diagnose` configuration.
#[derive(Clone, Debug)]
pub struct PredictConfig {
    pub manifest: PathBuf,
    pub data: DataSpec,
    pub n_draws: usize,
    pub level: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl PredictConfig {
    pub fn new(manifest: PathBuf) -> Self {
        PredictConfig {
            manifest,
            data: DataSpec::Default,
            n_draws: 200,
            level: 0.9,
            seed: 0,
            out: PathBuf::from("veil-out"),
        }
    }

    /// Identity of the evaluation request. The parent fit is identified by
    /// its own config hash (stored next to this one in every report), so the
    /// manifest's filesystem location stays out of artifact bytes.
    pub fn canonical_lines(&self) -> Vec<String> {
        vec![
            format!("n_draws={}", self.n_draws),
            format!("level={}", self.level),
            format!("seed={}", self.seed),
            self.data.canonical(),
        ]
    }

    pub fn hash(&self) -> String {
        hash_lines(&self.canonical_lines())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_draws == 0 {
            return Err(CliError::Config("n_draws must be positive".into()));
        }
        if !(self.level.is_finite() && self.level > 0.0) {
            return Err(CliError::Config("level must be a positive finite number".into()));
        }
        Ok(())
    }
}

pub fn hash_lines(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Seed fallback from the environment, used when neither flag nor config
/// file sets one.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("VEIL_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("VEIL_SEED is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// One key=value override for a `RunConfig`. `source` names where it came
/// from for error messages ("--flag" or "config file line N").
pub fn apply_run_kv(cfg: &mut RunConfig, key: &str, value: &str, source: &str) -> Result<(), CliError> {
    let bad = |what: &str| CliError::Config(format!("{source}: {key}={value}: expected {what}"));
    match key {
        "model" => cfg.model = Model::parse(value)?,
        "method" => cfg.method = Method::parse(value)?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "steps" => cfg.steps = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "lr" => cfg.lr = value.parse().map_err(|_| bad("a number"))?,
        "n_samples" => cfg.n_samples = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "burn_in" => cfg.burn_in = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "step_scale" => cfg.step_scale = value.parse().map_err(|_| bad("a number"))?,
        "thin" => cfg.thin = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "chains" => cfg.chains = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "pretrain_steps" => {
            cfg.pretrain_steps = value.parse().map_err(|_| bad("an unsigned integer"))?
        }
        "lift_scale" => cfg.lift_scale = value.parse().map_err(|_| bad("a number"))?,
        "noise_sd" => cfg.noise_sd = value.parse().map_err(|_| bad("a number"))?,
        "hidden" => cfg.hidden = value.parse().map_err(|_| bad("an unsigned integer"))?,
        "data" => cfg.data = DataSpec::Path(PathBuf::from(value)),
        "synthetic" => {
            cfg.data = if value == "default" {
                DataSpec::Default
            } else {
                DataSpec::Synthetic(value.to_string())
            }
        }
        "out" => cfg.out = PathBuf::from(value),
        other => {
            return Err(CliError::Config(format!("{source}: unknown key `{other}`")));
        }
    }
    Ok(())
}

/// Reads a flat key=value config file. Blank lines and `#` comments are
/// skipped; anything else must be `key=value`.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String, usize)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{} line {}: expected key=value, got `{raw}`",
                path.display(),
                i + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(pairs)
}

/// The resolved config as a sorted map for inclusion in reports. Excludes
/// the output directory: identical fits must produce identical report bytes
/// no matter where they are written.
pub fn run_config_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in cfg.canonical_lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content_and_order() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        // The output directory is provenance, not identity: two runs of the
        // same experiment into different directories hash alike.
        let mut c = RunConfig::default();
        c.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn kv_overrides_parse_and_reject() {
        let mut cfg = RunConfig::default();
        apply_run_kv(&mut cfg, "model", "hetreg", "test").unwrap();
        apply_run_kv(&mut cfg, "lr", "0.01", "test").unwrap();
        apply_run_kv(&mut cfg, "synthetic", "a=1,n=50", "test").unwrap();
        assert_eq!(cfg.model, Model::Hetreg);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.data, DataSpec::Synthetic("a=1,n=50".into()));

        let err = apply_run_kv(&mut cfg, "steps", "many", "config file line 3").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("line 3"));
        let err = apply_run_kv(&mut cfg, "stepz", "1", "test").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn config_file_reports_malformed_lines() {
        let dir = std::env::temp_dir().join(format!("veil-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# comment\nmodel=linreg\n\nsteps 100\n").unwrap();
        let err = read_config_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 4"));
        std::fs::write(&path, "model=linreg\nseed=9\n").unwrap();
        let pairs = read_config_file(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1], ("seed".into(), "9".into(), 2));
        std::fs::remove_dir_all(&dir).ok();
    }
}
