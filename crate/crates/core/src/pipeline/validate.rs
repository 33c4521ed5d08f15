//! Whole-pipeline checks run before a pipeline may start.

use std::fmt;

use indexmap::IndexMap;

use super::PiperSpec;
use crate::dag::Dag;
use crate::executor::ExecutorConfig;
use crate::log::Logger;
use crate::registry::WorkerRegistry;
use crate::remote::RemoteSlotPool;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyPipeline,
    UnknownFunction { piper: String, function: String },
    UnknownExecutor { piper: String, executor: String },
    BadExecutor { executor: String, reason: String },
    RemoteUnreachable { executor: String, server: String, reason: String },
    RemoteMissing { piper: String, server: String, function: String },
    CountTooSmall { piper: String, what: &'static str, n: u32 },
    ProduceAndConsume { piper: String },
    SpawnCombined { piper: String },
    NestedScatter { piper: String, producer: String },
    MixedScatter { piper: String },
    SpawnMismatch { piper: String, spawn: u32, producer: String, produce: u32 },
    SpawnOutsideScatter { piper: String },
    ConsumeMismatch { piper: String, consume: u32, producer: String, produce: u32 },
    ConsumeWithoutProduce { piper: String },
    ScatterNotGathered { piper: String, producer: String },
    RootScattered { piper: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            EmptyPipeline => write!(f, "pipeline has no pipers"),
            UnknownFunction { piper, function } => write!(f, "piper `{piper}`: unknown worker function `{function}`"),
            UnknownExecutor { piper, executor } => write!(f, "piper `{piper}`: unknown executor `{executor}`"),
            BadExecutor { executor, reason } => write!(f, "executor `{executor}`: {reason}"),
            RemoteUnreachable { executor, server, reason } => {
                write!(f, "executor `{executor}`: worker server {server} unreachable: {reason}")
            }
            RemoteMissing { piper, server, function } => {
                write!(f, "piper `{piper}`: worker function `{function}` not served by {server}")
            }
            CountTooSmall { piper, what, n } => write!(f, "piper `{piper}`: {what}={n}, must be at least 2"),
            ProduceAndConsume { piper } => write!(f, "piper `{piper}` sets both produce and consume"),
            SpawnCombined { piper } => write!(f, "piper `{piper}` combines spawn with produce or consume"),
            NestedScatter { piper, producer } => {
                write!(
                    f,
                    "piper `{piper}` produces inside the scatter region of `{producer}`; nesting is not supported"
                )
            }
            MixedScatter { piper } => write!(f, "piper `{piper}` joins scattered and unscattered inputs"),
            SpawnMismatch { piper, spawn, producer, produce } => {
                write!(f, "piper `{piper}` has spawn={spawn} but `{producer}` has produce={produce}")
            }
            SpawnOutsideScatter { piper } => write!(f, "piper `{piper}` sets spawn but no upstream piper produces"),
            ConsumeMismatch { piper, consume, producer, produce } => {
                write!(f, "piper `{piper}` has consume={consume} but `{producer}` has produce={produce}")
            }
            ConsumeWithoutProduce { piper } => write!(f, "piper `{piper}` sets consume but no upstream piper produces"),
            ScatterNotGathered { piper, producer } => {
                write!(f, "output piper `{piper}` emits sub-items of `{producer}` that are never consumed")
            }
            RootScattered { piper } => write!(f, "input piper `{piper}` sets spawn or consume"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Scatter level of a piper's output: the producer and its fan-out.
pub(crate) type Level = Option<(String, u32)>;

/// Scatter level of each piper's input and output, in topological order.
/// Violations found on the way are appended to `out`.
pub(crate) fn scatter_levels(
    dag: &Dag,
    pipers: &IndexMap<String, PiperSpec>,
    out: &mut Vec<Violation>,
) -> IndexMap<String, (Level, Level)> {
    let mut levels: IndexMap<String, (Level, Level)> = IndexMap::new();
    for node in dag.topo_sort() {
        let name = node.name().to_owned();
        let Some(spec) = pipers.get(&name) else { continue };
        let preds = dag.predecessors(node.name()).unwrap_or_default();
        let inputs: Vec<Level> = preds.iter().filter_map(|p| levels.get(p.name()).map(|l| l.1.clone())).collect();
        let input = match inputs.split_first() {
            None => None,
            Some((first, rest)) => {
                if rest.iter().any(|l| l != first) {
                    out.push(Violation::MixedScatter { piper: name.clone() });
                }
                first.clone()
            }
        };
        for (what, n) in [("produce", spec.produce), ("spawn", spec.spawn), ("consume", spec.consume)] {
            if let Some(n) = n.filter(|&n| n < 2) {
                out.push(Violation::CountTooSmall { piper: name.clone(), what, n });
            }
        }
        if spec.produce.is_some() && spec.consume.is_some() {
            out.push(Violation::ProduceAndConsume { piper: name.clone() });
        }
        if spec.spawn.is_some() && (spec.produce.is_some() || spec.consume.is_some()) {
            out.push(Violation::SpawnCombined { piper: name.clone() });
        }
        if preds.is_empty() && (spec.spawn.is_some() || spec.consume.is_some()) {
            out.push(Violation::RootScattered { piper: name.clone() });
        }
        if let Some(spawn) = spec.spawn {
            match &input {
                Some((producer, produce)) if *produce != spawn => out.push(Violation::SpawnMismatch {
                    piper: name.clone(),
                    spawn,
                    producer: producer.clone(),
                    produce: *produce,
                }),
                None if !preds.is_empty() => out.push(Violation::SpawnOutsideScatter { piper: name.clone() }),
                _ => {}
            }
        }
        let output = if let Some(consume) = spec.consume {
            match &input {
                Some((producer, produce)) if *produce != consume => out.push(Violation::ConsumeMismatch {
                    piper: name.clone(),
                    consume,
                    producer: producer.clone(),
                    produce: *produce,
                }),
                None if !preds.is_empty() => out.push(Violation::ConsumeWithoutProduce { piper: name.clone() }),
                _ => {}
            }
            None
        } else if let Some(produce) = spec.produce {
            if let Some((producer, _)) = &input {
                out.push(Violation::NestedScatter { piper: name.clone(), producer: producer.clone() });
            }
            Some((name.clone(), produce))
        } else {
            input.clone()
        };
        if dag.successors(node.name()).is_ok_and(|s| s.is_empty()) {
            if let Some((producer, _)) = &output {
                out.push(Violation::ScatterNotGathered { piper: name.clone(), producer: producer.clone() });
            }
        }
        levels.insert(name, (input, output));
    }
    levels
}

/// Runs every check. Remote servers named by executors are contacted for
/// their advertised worker names.
pub(crate) fn check(
    dag: &Dag,
    pipers: &IndexMap<String, PiperSpec>,
    executors: &IndexMap<String, ExecutorConfig>,
    registry: &WorkerRegistry,
    logger: &Logger,
) -> ValidationReport {
    let mut v = Vec::new();
    if pipers.is_empty() {
        v.push(Violation::EmptyPipeline);
    }
    for (name, cfg) in executors {
        if cfg.total_lanes() == 0 {
            v.push(Violation::BadExecutor { executor: name.clone(), reason: "needs at least one lane".into() });
        }
        if cfg.stride == 0 {
            v.push(Violation::BadExecutor { executor: name.clone(), reason: "stride must be at least 1".into() });
        }
    }
    let mut advertised: IndexMap<String, Vec<(String, Vec<String>)>> = IndexMap::new();
    for (name, cfg) in executors {
        let mut servers = Vec::new();
        for w in &cfg.remote {
            match RemoteSlotPool::connect(&w.host, w.port, logger.clone()) {
                Ok(pool) => {
                    servers.push((w.addr(), pool.worker_names().to_vec()));
                    pool.close();
                }
                Err(e) => v.push(Violation::RemoteUnreachable {
                    executor: name.clone(),
                    server: w.addr(),
                    reason: e.to_string(),
                }),
            }
        }
        advertised.insert(name.clone(), servers);
    }
    for (name, spec) in pipers {
        for function in registry.missing(&spec.chain) {
            v.push(Violation::UnknownFunction { piper: name.clone(), function });
        }
        if let Some(ex) = &spec.executor {
            match advertised.get(ex) {
                None => v.push(Violation::UnknownExecutor { piper: name.clone(), executor: ex.clone() }),
                Some(servers) => {
                    for (server, names) in servers {
                        for stage in spec.chain.stages() {
                            if !names.contains(&stage.name) {
                                v.push(Violation::RemoteMissing {
                                    piper: name.clone(),
                                    server: server.clone(),
                                    function: stage.name.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    scatter_levels(dag, pipers, &mut v);
    ValidationReport { violations: v }
}
