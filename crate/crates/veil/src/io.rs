//! Model state persistence: `save_state` writes a directory holding
//! `manifest.json` (tree structure, posterior kinds, guide slots, RV
//! records, RNG positions) plus a `tensors/` directory of binary tensor
//! files; `load_state` fills a structurally matching model in place.
//!
//! Parameter and buffer tensors keep their identity on load (data is
//! replaced in place); guide slots are rebuilt from saved parameters, so a
//! loaded model samples and fits exactly as the saved one did. Manual
//! posterior refresh hooks are code and do not survive persistence;
//! re-register them after loading.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::graph::Module;
use crate::posterior::{GuideForm, Posterior, PosteriorKind, Slot, SlotKey, Transform};
use crate::rng::RngState;
use crate::{Fingerprint, Tensor};

const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    root: String,
    modules: IndexMap<String, ModuleRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModuleRecord {
    posterior: KindRecord,
    slots: Vec<SlotRecord>,
    manual_params: IndexMap<String, String>,
    manual_guides: IndexMap<String, DistRecord>,
    params: IndexMap<String, String>,
    buffers: IndexMap<String, String>,
    rvs: Vec<RvRecord>,
    /// Stream position, hex; restored exactly so draws continue where the
    /// saved model left off.
    rng: String,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KindRecord {
    Automatic,
    Manual,
    Normal { log_scale: f64 },
    ScaledNormal { scaling: f64 },
    PointMass,
    Deterministic,
}

impl KindRecord {
    fn of(kind: &PosteriorKind) -> KindRecord {
        match kind {
            PosteriorKind::Automatic => KindRecord::Automatic,
            PosteriorKind::Manual => KindRecord::Manual,
            PosteriorKind::Normal { log_scale } => KindRecord::Normal { log_scale: *log_scale },
            PosteriorKind::ScaledNormal { scaling } => {
                KindRecord::ScaledNormal { scaling: *scaling }
            }
            PosteriorKind::PointMass => KindRecord::PointMass,
            PosteriorKind::Deterministic => KindRecord::Deterministic,
        }
    }

    fn to_kind(&self) -> PosteriorKind {
        match self {
            KindRecord::Automatic => PosteriorKind::Automatic,
            KindRecord::Manual => PosteriorKind::Manual,
            KindRecord::Normal { log_scale } => PosteriorKind::Normal { log_scale: *log_scale },
            KindRecord::ScaledNormal { scaling } => {
                PosteriorKind::ScaledNormal { scaling: *scaling }
            }
            KindRecord::PointMass => PosteriorKind::PointMass,
            KindRecord::Deterministic => PosteriorKind::Deterministic,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SlotRecord {
    leaf: String,
    fingerprint: String,
    transform: String,
    form: FormRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum FormRecord {
    Normal { loc: String, log_scale: String },
    PointMass { value: String },
    Prior,
    Manual,
}

#[derive(Serialize, Deserialize)]
struct RvRecord {
    name: String,
    observed: bool,
    stale: bool,
    fingerprint: String,
    prior: DistRecord,
    value: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum DistRecord {
    Normal { loc: String, scale: String },
    HalfNormal { scale: String },
    Categorical { logits: String },
    PointMass { value: String },
}

fn fp_string(fp: &Fingerprint) -> String {
    match fp {
        Fingerprint::Static(h) => format!("{h:016x}"),
        Fingerprint::Dynamic => "dynamic".to_string(),
    }
}

fn parse_fp(s: &str) -> Result<Fingerprint> {
    if s == "dynamic" {
        return Ok(Fingerprint::Dynamic);
    }
    u64::from_str_radix(s, 16)
        .map(Fingerprint::Static)
        .map_err(|_| Error::Manifest(format!("bad fingerprint `{s}`")))
}

/// Writes tensors under `<dir>/tensors/` with deterministic sequential
/// names, so identical saves are byte-identical.
struct TensorStore {
    dir: PathBuf,
    count: usize,
}

impl TensorStore {
    fn put(&mut self, t: &Tensor) -> Result<String> {
        let name = format!("t{:06}.ptns", self.count);
        self.count += 1;
        t.write_file(self.dir.join(&name))?;
        Ok(name)
    }
}

fn read_tensor(dir: &Path, name: &str, trainable: bool) -> Result<Tensor> {
    let t: Tensor = Tensor::read_file(dir.join("tensors").join(name))?;
    if trainable {
        Ok(Tensor::variable(t.shape().to_vec(), t.to_vec()))
    } else {
        Ok(t)
    }
}

fn dist_record(store: &mut TensorStore, d: &Distribution) -> Result<DistRecord> {
    Ok(match d {
        Distribution::Normal { loc, scale } => {
            DistRecord::Normal { loc: store.put(loc)?, scale: store.put(scale)? }
        }
        Distribution::HalfNormal { scale } => DistRecord::HalfNormal { scale: store.put(scale)? },
        Distribution::Categorical { logits } => {
            DistRecord::Categorical { logits: store.put(logits)? }
        }
        Distribution::PointMass { value } => DistRecord::PointMass { value: store.put(value)? },
    })
}

fn load_dist(dir: &Path, rec: &DistRecord) -> Result<Distribution> {
    Ok(match rec {
        DistRecord::Normal { loc, scale } => Distribution::normal(
            read_tensor(dir, loc, false)?,
            read_tensor(dir, scale, false)?,
        ),
        DistRecord::HalfNormal { scale } => {
            Distribution::half_normal(read_tensor(dir, scale, false)?)
        }
        DistRecord::Categorical { logits } => {
            Distribution::categorical(read_tensor(dir, logits, false)?)
        }
        DistRecord::PointMass { value } => {
            Distribution::point_mass(read_tensor(dir, value, false)?)
        }
    })
}

fn module_record(m: &Module, store: &mut TensorStore) -> Result<ModuleRecord> {
    let mut slots = Vec::new();
    for (key, slot) in m.posterior.slots() {
        let form = match &slot.form {
            GuideForm::NormalGuide { loc, log_scale } => FormRecord::Normal {
                loc: store.put(loc)?,
                log_scale: store.put(log_scale)?,
            },
            GuideForm::PointMassGuide { value } => {
                FormRecord::PointMass { value: store.put(value)? }
            }
            GuideForm::PriorGuide => FormRecord::Prior,
            GuideForm::ManualGuide => FormRecord::Manual,
        };
        slots.push(SlotRecord {
            leaf: key.leaf.clone(),
            fingerprint: fp_string(&key.fingerprint),
            transform: match slot.transform {
                Transform::Identity => "identity".to_string(),
                Transform::Log => "log".to_string(),
            },
            form,
        });
    }

    let mut manual_params = IndexMap::new();
    for (name, t) in m.posterior.manual_params_iter() {
        manual_params.insert(name.clone(), store.put(t)?);
    }
    let mut manual_guides = IndexMap::new();
    for (leaf, d) in m.posterior.manual_guides_iter() {
        manual_guides.insert(leaf.clone(), dist_record(store, d)?);
    }

    let mut params = IndexMap::new();
    for (name, t) in &m.params {
        params.insert(name.clone(), store.put(t)?);
    }
    let mut buffers = IndexMap::new();
    for (name, t) in &m.buffers {
        buffers.insert(name.clone(), store.put(t)?);
    }

    let mut rvs = Vec::new();
    for rv in m.rvs.values() {
        rvs.push(RvRecord {
            name: rv.name().to_string(),
            observed: rv.observed(),
            stale: rv.stale(),
            fingerprint: fp_string(&rv.key().fingerprint),
            prior: dist_record(store, rv.prior())?,
            value: store.put(&rv.value())?,
        });
    }

    Ok(ModuleRecord {
        posterior: KindRecord::of(m.posterior.kind()),
        slots,
        manual_params,
        manual_guides,
        params,
        buffers,
        rvs,
        rng: format!("{:016x}", m.rng.pos()),
    })
}

fn walk<'a>(m: &'a Module, path: String, out: &mut Vec<(String, &'a Module)>) {
    out.push((path.clone(), m));
    for (name, child) in &m.submodules {
        let sub = if path.is_empty() { name.clone() } else { format!("{path}.{name}") };
        walk(child, sub, out);
    }
}

/// Serializes the subtree's full stochastic state under `dir`. The
/// directory is created; an existing manifest there is replaced.
pub fn save_state(m: &Module, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("tensors"))?;
    let mut store = TensorStore { dir: dir.join("tensors"), count: 0 };

    let mut flat = Vec::new();
    walk(m, String::new(), &mut flat);
    let mut modules = IndexMap::new();
    for (path, module) in flat {
        modules.insert(path, module_record(module, &mut store)?);
    }
    let manifest =
        Manifest { format: FORMAT, root: m.scope().to_string(), modules };
    save_json(&manifest, dir.join("manifest.json"))
}

fn restore_module(m: &mut Module, rec: &ModuleRecord, dir: &Path) -> Result<()> {
    let mut posterior = Posterior::new(rec.posterior.to_kind());
    for (name, file) in &rec.manual_params {
        let t = read_tensor(dir, file, true)?;
        posterior.manual_param(name, move || t);
    }
    for (leaf, drec) in &rec.manual_guides {
        posterior.set_manual_guide(leaf, load_dist(dir, drec)?);
    }
    for srec in &rec.slots {
        let form = match &srec.form {
            FormRecord::Normal { loc, log_scale } => GuideForm::NormalGuide {
                loc: read_tensor(dir, loc, true)?,
                log_scale: read_tensor(dir, log_scale, true)?,
            },
            FormRecord::PointMass { value } => {
                GuideForm::PointMassGuide { value: read_tensor(dir, value, true)? }
            }
            FormRecord::Prior => GuideForm::PriorGuide,
            FormRecord::Manual => GuideForm::ManualGuide,
        };
        let transform = match srec.transform.as_str() {
            "identity" => Transform::Identity,
            "log" => Transform::Log,
            other => return Err(Error::Manifest(format!("bad transform `{other}`"))),
        };
        posterior.insert_slot_raw(
            SlotKey { leaf: srec.leaf.clone(), fingerprint: parse_fp(&srec.fingerprint)? },
            Slot { form, transform },
        );
    }
    m.posterior = posterior;

    for (name, file) in &rec.params {
        let loaded = read_tensor(dir, file, false)?;
        let target = m.params.get(name).ok_or_else(|| {
            Error::Manifest(format!("target `{}` has no parameter `{name}`", m.scope()))
        })?;
        if target.shape() != loaded.shape() {
            return Err(Error::Manifest(format!(
                "parameter `{}.{name}`: shape {:?} in file, {:?} in target",
                m.scope(),
                loaded.shape(),
                target.shape()
            )));
        }
        target.set_data(&loaded.to_vec());
    }
    for (name, file) in &rec.buffers {
        let loaded = read_tensor(dir, file, false)?;
        let target = m.buffers.get(name).ok_or_else(|| {
            Error::Manifest(format!("target `{}` has no buffer `{name}`", m.scope()))
        })?;
        if target.shape() != loaded.shape() {
            return Err(Error::Manifest(format!(
                "buffer `{}.{name}`: shape {:?} in file, {:?} in target",
                m.scope(),
                loaded.shape(),
                target.shape()
            )));
        }
        target.set_data(&loaded.to_vec());
    }

    for rrec in &rec.rvs {
        let prior = load_dist(dir, &rrec.prior)?;
        let value = read_tensor(dir, &rrec.value, false)?;
        let key =
            SlotKey { leaf: rrec.name.clone(), fingerprint: parse_fp(&rrec.fingerprint)? };
        m.restore_rv(&rrec.name, prior, value, rrec.observed, rrec.stale, key);
    }

    let state = u64::from_str_radix(&rec.rng, 16)
        .map_err(|_| Error::Manifest(format!("bad rng state `{}`", rec.rng)))?;
    m.rng = RngState::new(state);
    Ok(())
}

/// Loads saved state into `m`, which must have the same module-tree shape
/// (same names and nesting, e.g. rebuilt by the same constructor). RVs are
/// recreated from records; parameter tensors keep their identity.
pub fn load_state(m: &mut Module, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let manifest: Manifest = load_json(dir.join("manifest.json"))?;
    if manifest.format != FORMAT {
        return Err(Error::Manifest(format!("unsupported format {}", manifest.format)));
    }

    let mut target_paths = Vec::new();
    {
        let mut flat = Vec::new();
        walk(m, String::new(), &mut flat);
        for (path, _) in flat {
            target_paths.push(path);
        }
    }
    for path in &target_paths {
        if !manifest.modules.contains_key(path) {
            return Err(Error::Manifest(format!("manifest has no record for module `{path}`")));
        }
    }
    for path in manifest.modules.keys() {
        if !target_paths.contains(path) {
            return Err(Error::Manifest(format!("target has no module at `{path}`")));
        }
    }

    for (path, rec) in &manifest.modules {
        let target = m.module_at_mut(path)?;
        restore_module(target, rec, dir)?;
    }
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}
