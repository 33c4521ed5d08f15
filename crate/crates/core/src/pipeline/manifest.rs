//! Declarative pipeline documents (JSON).
//!
//! ```json
//! {
//!   "executors": {"pool": {"inproc": 4, "outproc": 0, "remote": ["host:9000#2"], "stride": 1}},
//!   "pipers": {
//!     "where": {"chain": [{"fn": "where"}], "executor": "pool", "ordered": true},
//!     "print": {"chain": [{"fn": "io.print"}]}
//!   },
//!   "pipes": [["where", "print"]],
//!   "inputs": {"where": [0, 1, 2]}
//! }
//! ```
//!
//! An input given as `"@path"` is read from a file holding one value per
//! line; lines that parse as JSON are taken as JSON, others as strings.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::{json, Map, Value as J};

use super::{Pipeline, PipelineError, PiperSpec};
use crate::executor::ExecutorConfig;
use crate::log::Logger;
use crate::registry::{FunctionRef, WorkerChain, WorkerRegistry};
use crate::value::Value;
use crate::workers_arg::RemoteWorker;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("piper `{piper}`: unknown worker function `{function}`")]
    UnknownFunction { piper: String, function: String },
    #[error("piper `{piper}`: unknown executor `{executor}`")]
    UnknownExecutor { piper: String, executor: String },
    #[error("no input collection for input piper `{0}`")]
    MissingInput(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn malformed(msg: impl Into<String>) -> ManifestError {
    ManifestError::Malformed(msg.into())
}

/// A loaded manifest: the pipeline (in state Created) and its inputs.
#[derive(Debug)]
pub struct Manifest {
    pub pipeline: Pipeline,
    pub inputs: IndexMap<String, Vec<Value>>,
}

impl Manifest {
    /// Input collections in the order [`Pipeline::start`] expects.
    pub fn ordered_inputs(&self) -> Result<Vec<Vec<Value>>, ManifestError> {
        self.pipeline
            .input_pipers()
            .into_iter()
            .map(|root| self.inputs.get(&root).cloned().ok_or(ManifestError::MissingInput(root)))
            .collect()
    }
}

pub fn load_manifest_file(
    path: &Path,
    registry: Arc<WorkerRegistry>,
    logger: Logger,
) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ManifestError::Io { path: path.to_owned(), reason: e.to_string() })?;
    load_manifest(&text, path.parent(), registry, logger)
}

pub fn load_manifest(
    text: &str,
    base_dir: Option<&Path>,
    registry: Arc<WorkerRegistry>,
    logger: Logger,
) -> Result<Manifest, ManifestError> {
    let doc: J = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let doc = doc.as_object().ok_or_else(|| malformed("top level must be an object"))?;
    for key in doc.keys() {
        if !["executors", "pipers", "pipes", "inputs"].contains(&key.as_str()) {
            return Err(malformed(format!("unknown top-level key `{key}`")));
        }
    }
    let mut pipeline = Pipeline::with_logger(registry.clone(), logger);

    for (name, cfg) in object(doc.get("executors"), "executors")? {
        pipeline.add_executor(executor_config(name, cfg)?)?;
    }

    let pipers = object(doc.get("pipers"), "pipers")?;
    for &(name, p) in &pipers {
        let spec = piper_spec(name, p)?;
        if let Some(function) = registry.missing(&spec.chain).into_iter().next() {
            return Err(ManifestError::UnknownFunction { piper: name.clone(), function });
        }
        if let Some(ex) = &spec.executor {
            if !pipeline.executors().contains_key(ex) {
                return Err(ManifestError::UnknownExecutor { piper: name.clone(), executor: ex.clone() });
            }
        }
        pipeline.add_piper(spec)?;
    }

    let pipes = match doc.get("pipes") {
        None => Vec::new(),
        Some(J::Array(a)) => a.clone(),
        Some(_) => return Err(malformed("`pipes` must be a list of [from, to] pairs")),
    };
    for pipe in &pipes {
        let pair = pipe.as_array().filter(|a| a.len() == 2).ok_or_else(|| malformed("each pipe must be [from, to]"))?;
        let (Some(from), Some(to)) = (pair[0].as_str(), pair[1].as_str()) else {
            return Err(malformed("pipe ends must be piper names"));
        };
        pipeline.add_pipe(from, to)?;
    }

    let mut inputs = IndexMap::new();
    for (root, v) in object(doc.get("inputs"), "inputs")? {
        if !pipers.iter().any(|(n, _)| *n == root) {
            return Err(malformed(format!("input for unknown piper `{root}`")));
        }
        let values = match v {
            J::Array(items) => items
                .iter()
                .map(|j| Value::from_json(j).map_err(|e| malformed(format!("input `{root}`: {e}"))))
                .collect::<Result<_, _>>()?,
            J::String(s) if s.starts_with('@') => read_input_file(&s[1..], base_dir)?,
            _ => return Err(malformed(format!("input `{root}` must be a list or \"@file\""))),
        };
        inputs.insert(root.clone(), values);
    }
    Ok(Manifest { pipeline, inputs })
}

fn object<'a>(v: Option<&'a J>, what: &str) -> Result<Vec<(&'a String, &'a J)>, ManifestError> {
    match v {
        None => Ok(Vec::new()),
        Some(J::Object(m)) => Ok(m.iter().collect()),
        Some(_) => Err(malformed(format!("`{what}` must be an object"))),
    }
}

fn check_keys(m: &Map<String, J>, allowed: &[&str], what: &str) -> Result<(), ManifestError> {
    match m.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(malformed(format!("{what}: unknown key `{k}`"))),
        None => Ok(()),
    }
}

fn uint(m: &Map<String, J>, key: &str, what: &str) -> Result<Option<u64>, ManifestError> {
    match m.get(key) {
        None | Some(J::Null) => Ok(None),
        Some(v) => {
            v.as_u64().map(Some).ok_or_else(|| malformed(format!("{what}: `{key}` must be a non-negative integer")))
        }
    }
}

fn small(n: Option<u64>, key: &str, what: &str) -> Result<Option<u32>, ManifestError> {
    n.map(|n| u32::try_from(n).map_err(|_| malformed(format!("{what}: `{key}` is too large")))).transpose()
}

fn executor_config(name: &str, v: &J) -> Result<ExecutorConfig, ManifestError> {
    let what = format!("executor `{name}`");
    let m = v.as_object().ok_or_else(|| malformed(format!("{what} must be an object")))?;
    check_keys(m, &["inproc", "outproc", "remote", "stride"], &what)?;
    let lanes = |key| Ok::<_, ManifestError>(small(uint(m, key, &what)?, key, &what)?.unwrap_or(0) as usize);
    let mut cfg = ExecutorConfig::new(name).inproc(lanes("inproc")?).outproc(lanes("outproc")?);
    if let Some(s) = small(uint(m, "stride", &what)?, "stride", &what)? {
        cfg = cfg.stride(s as usize);
    }
    let remote = match m.get("remote") {
        None | Some(J::Null) => Vec::new(),
        Some(J::Array(a)) => a
            .iter()
            .map(|w| {
                let s = w
                    .as_str()
                    .ok_or_else(|| malformed(format!("{what}: remote entries must be \"host:port#slots\"")))?;
                s.parse::<RemoteWorker>().map_err(|e| malformed(format!("{what}: {e}")))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(malformed(format!("{what}: `remote` must be a list"))),
    };
    Ok(cfg.remote(remote))
}

fn piper_spec(name: &str, v: &J) -> Result<PiperSpec, ManifestError> {
    let what = format!("piper `{name}`");
    let m = v.as_object().ok_or_else(|| malformed(format!("{what} must be an object")))?;
    check_keys(
        m,
        &["chain", "executor", "ordered", "produce", "spawn", "consume", "timeout_ms", "handles_faults"],
        &what,
    )?;
    let stages = match m.get("chain") {
        Some(J::Array(a)) if !a.is_empty() => a
            .iter()
            .map(|s| {
                let v = Value::from_json(s).map_err(|e| malformed(format!("{what}: {e}")))?;
                FunctionRef::from_value(&v).map_err(|e| malformed(format!("{what}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(malformed(format!("{what}: `chain` must be a non-empty list"))),
    };
    let flag = |key: &str, default: bool| match m.get(key) {
        None | Some(J::Null) => Ok(default),
        Some(J::Bool(b)) => Ok(*b),
        Some(_) => Err(malformed(format!("{what}: `{key}` must be a boolean"))),
    };
    let chain = WorkerChain::new(stages)
        .map_err(|e| malformed(format!("{what}: {e}")))?
        .handling_faults(flag("handles_faults", false)?);
    let mut spec = PiperSpec::new(name, chain).ordered(flag("ordered", true)?);
    spec.executor = match m.get("executor") {
        None | Some(J::Null) => None,
        Some(J::String(s)) => Some(s.clone()),
        Some(_) => return Err(malformed(format!("{what}: `executor` must be a name"))),
    };
    spec.produce = small(uint(m, "produce", &what)?, "produce", &what)?;
    spec.spawn = small(uint(m, "spawn", &what)?, "spawn", &what)?;
    spec.consume = small(uint(m, "consume", &what)?, "consume", &what)?;
    spec.timeout = uint(m, "timeout_ms", &what)?.map(Duration::from_millis);
    Ok(spec)
}

fn read_input_file(path: &str, base_dir: Option<&Path>) -> Result<Vec<Value>, ManifestError> {
    let path = match base_dir {
        Some(base) if Path::new(path).is_relative() => base.join(path),
        _ => PathBuf::from(path),
    };
    let text =
        std::fs::read_to_string(&path).map_err(|e| ManifestError::Io { path: path.clone(), reason: e.to_string() })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<J>(l).ok().and_then(|j| Value::from_json(&j).ok()) {
            Some(v) => v,
            None => Value::Str(l.to_owned()),
        })
        .collect())
}

/// Writes a pipeline (and optionally its inputs) as a manifest document.
/// Run state is not recorded.
pub fn save_manifest(pipeline: &Pipeline, inputs: Option<&IndexMap<String, Vec<Value>>>) -> String {
    let mut executors = Map::new();
    for (name, cfg) in pipeline.executors() {
        let remote: Vec<J> = cfg.remote.iter().map(|w| J::String(w.to_string())).collect();
        executors.insert(
            name.clone(),
            json!({"inproc": cfg.lanes_inproc, "outproc": cfg.lanes_outproc, "remote": remote, "stride": cfg.stride}),
        );
    }
    let mut pipers = Map::new();
    for (name, spec) in pipeline.pipers() {
        let chain: Vec<J> = spec.chain.stages().iter().map(|s| lossy_json(&s.to_value())).collect();
        let mut p = Map::new();
        p.insert("chain".into(), J::Array(chain));
        if let Some(ex) = &spec.executor {
            p.insert("executor".into(), J::String(ex.clone()));
        }
        p.insert("ordered".into(), J::Bool(spec.ordered));
        for (key, n) in [("produce", spec.produce), ("spawn", spec.spawn), ("consume", spec.consume)] {
            if let Some(n) = n {
                p.insert(key.into(), J::from(n));
            }
        }
        if let Some(t) = spec.timeout {
            p.insert("timeout_ms".into(), J::from(t.as_millis() as u64));
        }
        if spec.chain.handles_faults {
            p.insert("handles_faults".into(), J::Bool(true));
        }
        pipers.insert(name.clone(), J::Object(p));
    }
    // Grouped by consumer so each inbox keeps its slot order on reload.
    let dag = pipeline.dag();
    let pipes: Vec<J> = dag
        .topo_sort()
        .iter()
        .flat_map(|to| {
            let preds = dag.predecessors(to.name()).unwrap_or_default();
            preds.into_iter().map(move |from| json!([from.name(), to.name()]))
        })
        .collect();
    let mut doc = Map::new();
    doc.insert("executors".into(), J::Object(executors));
    doc.insert("pipers".into(), J::Object(pipers));
    doc.insert("pipes".into(), J::Array(pipes));
    if let Some(inputs) = inputs {
        let inputs: Map<String, J> =
            inputs.iter().map(|(k, vs)| (k.clone(), J::Array(vs.iter().map(lossy_json).collect()))).collect();
        doc.insert("inputs".into(), J::Object(inputs));
    }
    serde_json::to_string_pretty(&J::Object(doc)).expect("JSON tree serializes")
}

/// Non-finite floats have no JSON form; they are written as null.
fn lossy_json(v: &Value) -> J {
    v.to_json().unwrap_or(J::Null)
}
