//! Dataset handling: named-column frames, CSV ingestion with line-numbered
//! rejection of malformed rows, and the per-model synthetic generators.

use std::collections::BTreeMap;
use std::path::Path;

use veil::rng::{fnv1a, RngState};

use crate::config::{DataSpec, Model};
use crate::CliError;

/// A small column-major table of finite f64 values.
#[derive(Clone, Debug)]
pub struct Frame {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    /// Generator parameters when the frame is synthetic, for provenance.
    pub truth: Option<BTreeMap<String, f64>>,
}

impl Frame {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(&self.columns[i])
    }
}

/// Feature column names for a model's data frame.
pub fn feature_columns(model: Model) -> &'static [&'static str] {
    match model {
        Model::Linreg | Model::Hetreg | Model::LiftedMlp => &["x"],
        Model::MlpClassifier => &["x0", "x1"],
        Model::Branching => &[],
    }
}

/// Target column name, if the model conditions on data.
pub fn target_column(model: Model) -> Option<&'static str> {
    match model {
        Model::Branching => None,
        _ => Some("y"),
    }
}

/// Default synthetic-generator parameters per model, in canonical order.
pub fn synth_defaults(model: Model) -> Vec<(&'static str, f64)> {
    match model {
        Model::Linreg => vec![("a", 1.5), ("b", -2.0), ("sigma", 0.5), ("n", 200.0)],
        Model::Hetreg => {
            vec![("a", 1.0), ("b", 0.5), ("c", 0.1), ("d", 0.5), ("n", 300.0)]
        }
        Model::MlpClassifier => vec![("n", 400.0), ("sep", 3.0)],
        Model::LiftedMlp => vec![("amp", 1.0), ("freq", 1.0), ("sigma", 0.1), ("n", 256.0)],
        Model::Branching => vec![],
    }
}

/// Parses `a=1.5,b=-2,n=200` against the model's generator parameters.
pub fn parse_synth_spec(model: Model, spec: &str) -> Result<BTreeMap<String, f64>, CliError> {
    let mut params: BTreeMap<String, f64> =
        synth_defaults(model).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if params.is_empty() {
        return Err(CliError::Config(format!(
            "model {} has no synthetic generator",
            model.name()
        )));
    }
    if spec.is_empty() {
        return Ok(params);
    }
    for part in spec.split(',') {
        let Some((k, v)) = part.split_once('=') else {
            return Err(CliError::Config(format!(
                "synthetic spec `{spec}`: expected key=value, got `{part}`"
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !params.contains_key(k) {
            let known: Vec<&str> = synth_defaults(model).iter().map(|(k, _)| *k).collect();
            return Err(CliError::Config(format!(
                "synthetic spec: model {} has no parameter `{k}` (knows {})",
                model.name(),
                known.join(", ")
            )));
        }
        let val: f64 = v.parse().map_err(|_| {
            CliError::Config(format!("synthetic spec: `{k}={v}` is not a number"))
        })?;
        if !val.is_finite() {
            return Err(CliError::Config(format!("synthetic spec: `{k}` must be finite")));
        }
        params.insert(k.to_string(), val);
    }
    let n = params["n"];
    if n < 1.0 || n.fract() != 0.0 || n > 1e7 {
        return Err(CliError::Config(format!(
            "synthetic spec: n must be a positive integer up to 1e7, got {n}"
        )));
    }
    Ok(params)
}

/// Draws a synthetic frame. `stream` separates e.g. training data from
/// held-out data generated under the same seed and parameters.
pub fn generate(
    model: Model,
    params: &BTreeMap<String, f64>,
    seed: u64,
    stream: &str,
) -> Frame {
    let mut rng = RngState::new(seed).derive(fnv1a(stream.as_bytes()));
    let n = params["n"] as usize;
    let mut headers: Vec<String> =
        feature_columns(model).iter().map(|s| s.to_string()).collect();
    headers.push("y".to_string());
    let mut columns = vec![Vec::with_capacity(n); headers.len()];
    match model {
        Model::Linreg => {
            for _ in 0..n {
                let x = rng.uniform(-3.0, 3.0);
                let y = params["a"] * x + params["b"] + params["sigma"] * rng.normal();
                columns[0].push(x);
                columns[1].push(y);
            }
        }
        Model::Hetreg => {
            for _ in 0..n {
                let x = rng.uniform(-3.0, 3.0);
                let sd = params["c"] + params["d"] * x.abs();
                let y = params["a"] * x + params["b"] + sd * rng.normal();
                columns[0].push(x);
                columns[1].push(y);
            }
        }
        Model::MlpClassifier => {
            let half = params["sep"] / 2.0;
            for _ in 0..n {
                let k = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                let center = if k == 0.0 { -half } else { half };
                columns[0].push(center + rng.normal());
                columns[1].push(center + rng.normal());
                columns[2].push(k);
            }
        }
        Model::LiftedMlp => {
            for _ in 0..n {
                let x = rng.uniform(-3.0, 3.0);
                let y = params["amp"] * (params["freq"] * x).sin()
                    + params["sigma"] * rng.normal();
                columns[0].push(x);
                columns[1].push(y);
            }
        }
        Model::Branching => unreachable!("branching has no synthetic generator"),
    }
    Frame { headers, columns, truth: Some(params.clone()) }
}

/// Reads a CSV file and validates that `required` columns exist and hold
/// finite numbers. Malformed rows are rejected with their line number.
pub fn read_csv(path: &Path, required: &[&str]) -> Result<Frame, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> =
        rdr.headers()
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
            .iter()
            .map(|h| h.to_string())
            .collect();
    let missing: Vec<&str> =
        required.iter().filter(|r| !headers.iter().any(|h| h == *r)).copied().collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{}: missing column(s) {}; found columns {}",
            path.display(),
            missing.join(", "),
            headers.join(", ")
        )));
    }
    let picks: Vec<usize> = required
        .iter()
        .map(|r| headers.iter().position(|h| h == r).unwrap())
        .collect();
    let mut columns = vec![Vec::new(); required.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| "?".to_string());
            CliError::Data(format!("{} line {line}: {e}", path.display()))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        for (slot, &col) in picks.iter().enumerate() {
            let cell = rec.get(col).ok_or_else(|| {
                CliError::Data(format!(
                    "{} line {line}: row has no `{}` field",
                    path.display(),
                    required[slot]
                ))
            })?;
            let v: f64 = cell.parse().map_err(|_| {
                CliError::Data(format!(
                    "{} line {line}: column `{}`: cannot parse `{cell}` as a number",
                    path.display(),
                    required[slot]
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!(
                    "{} line {line}: column `{}`: non-finite value `{cell}`",
                    path.display(),
                    required[slot]
                )));
            }
            columns[slot].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(Frame {
        headers: required.iter().map(|s| s.to_string()).collect(),
        columns,
        truth: None,
    })
}

/// Resolves a `DataSpec` into a frame. `with_target` demands the target
/// column (fit and diagnose); prediction inputs need only the features.
pub fn load_frame(
    model: Model,
    spec: &DataSpec,
    seed: u64,
    stream: &str,
    with_target: bool,
) -> Result<Frame, CliError> {
    if model == Model::Branching {
        return Err(CliError::Config(
            "the branching model has no dataset; use the demo-branching command".into(),
        ));
    }
    match spec {
        DataSpec::Path(p) => {
            let mut cols: Vec<&str> = feature_columns(model).to_vec();
            if with_target {
                cols.push(target_column(model).unwrap());
            }
            read_csv(p, &cols)
        }
        DataSpec::Default => Ok(generate(model, &parse_synth_spec(model, "")?, seed, stream)),
        DataSpec::Synthetic(s) => {
            Ok(generate(model, &parse_synth_spec(model, s)?, seed, stream))
        }
    }
}
