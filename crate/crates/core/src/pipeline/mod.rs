//! Pipelines: pipers (worker chains bound to executors) connected by pipes,
//! driven through a start/run/wait/pause/stop lifecycle.
//!
//! Pipers without an executor are serial: the manager's pump thread
//! evaluates them one inbox at a time. A piper with `produce=n` splits each
//! result list into `n` sub-items, `spawn=n` runs one instance per sub-item
//! position and `consume=n` gathers the sub-items of each parent back into a
//! list.

pub mod manifest;
mod router;
mod stats;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use indexmap::IndexMap;

use self::router::{Input, InputIter, InstRt, NodeRt, Output, Router, SerialOut};
pub use self::stats::{quantile, PiperStats, RunStats};
pub use self::validate::{ValidationReport, Violation};
use crate::dag::{Dag, DagError};
use crate::envelope::Envelope;
use crate::executor::{DispatchRecord, Executor, ExecutorConfig, ExecutorError, Outcome, Poll, TaskSpec};
use crate::log::Logger;
use crate::registry::{apply_chain, WorkerChain, WorkerRegistry};
use crate::value::Value;

const PUMP_MIN: Duration = Duration::from_micros(100);
const PUMP_MAX: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq)]
pub struct PiperSpec {
    pub name: String,
    pub chain: WorkerChain,
    /// `None` runs the piper serially in the manager.
    pub executor: Option<String>,
    pub ordered: bool,
    pub produce: Option<u32>,
    pub spawn: Option<u32>,
    pub consume: Option<u32>,
    pub timeout: Option<Duration>,
}

impl PiperSpec {
    pub fn new(name: impl Into<String>, chain: WorkerChain) -> Self {
        PiperSpec {
            name: name.into(),
            chain,
            executor: None,
            ordered: true,
            produce: None,
            spawn: None,
            consume: None,
            timeout: None,
        }
    }

    pub fn executor(mut self, name: impl Into<String>) -> Self {
        self.executor = Some(name.into());
        self
    }

    pub fn ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }

    pub fn produce(mut self, n: u32) -> Self {
        self.produce = Some(n);
        self
    }

    pub fn spawn(mut self, n: u32) -> Self {
        self.spawn = Some(n);
        self
    }

    pub fn consume(mut self, n: u32) -> Self {
        self.consume = Some(n);
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn is_serial(&self) -> bool {
        self.executor.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunState {
    Created,
    Validated,
    Running,
    Paused,
    Finished,
    Stopped,
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunState::Created => "Created",
            RunState::Validated => "Validated",
            RunState::Running => "Running",
            RunState::Paused => "Paused",
            RunState::Finished => "Finished",
            RunState::Stopped => "Stopped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("`{op}` is not allowed in state {state}")]
    IllegalState { op: &'static str, state: RunState },
    #[error("duplicate piper `{0}`")]
    DuplicateName(String),
    #[error("duplicate executor `{0}`")]
    DuplicateExecutor(String),
    #[error("unknown piper `{0}`")]
    UnknownPiper(String),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("invalid pipeline:\n{0}")]
    Invalid(ValidationReport),
    #[error("pipeline has {expected} input piper(s) but {got} input collection(s) were given")]
    InputArityMismatch { expected: usize, got: usize },
    #[error("executor `{name}`: {error}")]
    Executor { name: String, error: ExecutorError },
}

/// Where every input item ended up after a stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accounting {
    pub total: u64,
    /// Items whose results reached output pipers.
    pub delivered: u64,
    /// Items held at internal piper boundaries.
    pub parked: u64,
    /// Input items never read.
    pub unread: u64,
}

impl Accounting {
    pub fn is_conserved(&self) -> bool {
        self.delivered + self.parked + self.unread == self.total
    }
}

#[derive(Default)]
struct CtlState {
    finished: bool,
    quit: bool,
}

#[derive(Default)]
struct Ctl {
    state: Mutex<CtlState>,
    cond: Condvar,
}

impl Ctl {
    fn lock(&self) -> MutexGuard<'_, CtlState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

struct RunRt {
    router: Arc<Mutex<Router>>,
    ctl: Arc<Ctl>,
    executors: IndexMap<String, Arc<Executor>>,
    pump: Option<JoinHandle<()>>,
    /// Executor task name to piper name.
    task_piper: HashMap<String, String>,
    started: bool,
}

impl RunRt {
    fn router(&self) -> MutexGuard<'_, Router> {
        self.router.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn halt(&mut self) {
        self.ctl.lock().quit = true;
        self.ctl.cond.notify_all();
        if let Some(pump) = self.pump.take() {
            let _ = pump.join();
        }
        for ex in self.executors.values() {
            ex.stop();
        }
    }
}

pub struct Pipeline {
    registry: Arc<WorkerRegistry>,
    logger: Logger,
    dag: Dag,
    pipers: IndexMap<String, PiperSpec>,
    executors: IndexMap<String, ExecutorConfig>,
    state: RunState,
    run: Option<RunRt>,
    accounting: Option<Accounting>,
    stats: RunStats,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("state", &self.state)
            .field("pipers", &self.pipers.keys().collect::<Vec<_>>())
            .field("executors", &self.executors.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Pipeline {
    pub fn new(registry: Arc<WorkerRegistry>) -> Self {
        Self::with_logger(registry, crate::log::global())
    }

    pub fn with_logger(registry: Arc<WorkerRegistry>, logger: Logger) -> Self {
        Pipeline {
            registry,
            logger,
            dag: Dag::new(),
            pipers: IndexMap::new(),
            executors: IndexMap::new(),
            state: RunState::Created,
            run: None,
            accounting: None,
            stats: RunStats::default(),
        }
    }

    pub fn state(&self) -> RunState {
        self.state
    }

    /// Whether `start` has bound inputs.
    pub fn is_bound(&self) -> bool {
        self.run.is_some()
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn pipers(&self) -> &IndexMap<String, PiperSpec> {
        &self.pipers
    }

    pub fn piper(&self, name: &str) -> Option<&PiperSpec> {
        self.pipers.get(name)
    }

    pub fn executors(&self) -> &IndexMap<String, ExecutorConfig> {
        &self.executors
    }

    pub fn registry(&self) -> &Arc<WorkerRegistry> {
        &self.registry
    }

    fn illegal(&self, op: &'static str) -> PipelineError {
        PipelineError::IllegalState { op, state: self.state }
    }

    /// Mutations are allowed before inputs are bound; they undo validation.
    fn begin_mutation(&mut self, op: &'static str) -> Result<(), PipelineError> {
        match self.state {
            RunState::Created => Ok(()),
            RunState::Validated if !self.is_bound() => Ok(()),
            _ => Err(self.illegal(op)),
        }
    }

    fn end_mutation(&mut self) {
        self.state = RunState::Created;
    }

    pub fn add_executor(&mut self, config: ExecutorConfig) -> Result<(), PipelineError> {
        self.begin_mutation("add_executor")?;
        if self.executors.contains_key(&config.name) {
            return Err(PipelineError::DuplicateExecutor(config.name));
        }
        self.executors.insert(config.name.clone(), config);
        self.end_mutation();
        Ok(())
    }

    /// Adds or replaces an executor configuration.
    pub fn set_executor(&mut self, config: ExecutorConfig) -> Result<(), PipelineError> {
        self.begin_mutation("set_executor")?;
        self.executors.insert(config.name.clone(), config);
        self.end_mutation();
        Ok(())
    }

    pub fn add_piper(&mut self, spec: PiperSpec) -> Result<(), PipelineError> {
        self.begin_mutation("add_piper")?;
        match self.dag.add_node(&spec.name) {
            Err(DagError::DuplicateName(n)) => return Err(PipelineError::DuplicateName(n)),
            Err(e) => return Err(e.into()),
            Ok(_) => {}
        }
        self.pipers.insert(spec.name.clone(), spec);
        self.end_mutation();
        Ok(())
    }

    /// Replaces an existing piper's definition, keeping its pipes.
    pub fn replace_piper(&mut self, spec: PiperSpec) -> Result<(), PipelineError> {
        self.begin_mutation("replace_piper")?;
        let Some(slot) = self.pipers.get_mut(&spec.name) else {
            return Err(PipelineError::UnknownPiper(spec.name));
        };
        *slot = spec;
        self.end_mutation();
        Ok(())
    }

    /// Removes a piper together with its pipes.
    pub fn del_piper(&mut self, name: &str) -> Result<(), PipelineError> {
        self.begin_mutation("del_piper")?;
        if !self.pipers.contains_key(name) {
            return Err(PipelineError::UnknownPiper(name.to_owned()));
        }
        self.dag.remove_node(name)?;
        self.pipers.shift_remove(name);
        self.end_mutation();
        Ok(())
    }

    pub fn add_pipe(&mut self, from: &str, to: &str) -> Result<(), PipelineError> {
        self.begin_mutation("add_pipe")?;
        for n in [from, to] {
            if !self.pipers.contains_key(n) {
                return Err(PipelineError::UnknownPiper(n.to_owned()));
            }
        }
        self.dag.add_edge(from, to)?;
        self.end_mutation();
        Ok(())
    }

    pub fn del_pipe(&mut self, from: &str, to: &str) -> Result<(), PipelineError> {
        self.begin_mutation("del_pipe")?;
        self.dag.remove_edge(from, to)?;
        self.end_mutation();
        Ok(())
    }

    /// Runs every check without changing state.
    pub fn check(&self) -> ValidationReport {
        validate::check(&self.dag, &self.pipers, &self.executors, &self.registry, &self.logger)
    }

    pub fn validate(&mut self) -> Result<ValidationReport, PipelineError> {
        if self.state != RunState::Created {
            return Err(self.illegal("validate"));
        }
        let report = self.check();
        if !report.is_valid() {
            return Err(PipelineError::Invalid(report));
        }
        self.state = RunState::Validated;
        Ok(report)
    }

    /// Input pipers in the order `start` expects their collections.
    pub fn input_pipers(&self) -> Vec<String> {
        self.dag.roots().iter().map(|n| n.name().to_owned()).collect()
    }

    pub fn output_pipers(&self) -> Vec<String> {
        self.dag.leaves().iter().map(|n| n.name().to_owned()).collect()
    }

    /// Binds one input collection per input piper and prepares executors.
    pub fn start(&mut self, inputs: Vec<Vec<Value>>) -> Result<(), PipelineError> {
        let iters = inputs.into_iter().map(|v| Box::new(v.into_iter()) as InputIter).collect();
        self.start_iters(iters)
    }

    /// Like [`start`](Self::start) with lazily produced inputs.
    pub fn start_iters(&mut self, inputs: Vec<Box<dyn Iterator<Item = Value> + Send>>) -> Result<(), PipelineError> {
        if self.state != RunState::Validated || self.is_bound() {
            return Err(self.illegal("start"));
        }
        let roots = self.dag.roots();
        if roots.len() != inputs.len() {
            return Err(PipelineError::InputArityMismatch { expected: roots.len(), got: inputs.len() });
        }
        let mut inputs: HashMap<String, InputIter> = roots.iter().map(|r| r.name().to_owned()).zip(inputs).collect();

        let order = self.dag.topo_sort();
        let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.name(), i)).collect();
        let mut nodes = Vec::with_capacity(order.len());
        let mut insts = Vec::new();
        for (k, node) in order.iter().enumerate() {
            let spec = &self.pipers[node.name()];
            let preds: Vec<usize> = self.dag.predecessors(node.name())?.iter().map(|p| index[p.name()]).collect();
            let n_inst = spec.spawn.unwrap_or(1) as usize;
            let mut instances = Vec::with_capacity(n_inst);
            for j in 0..n_inst {
                let name: Arc<str> = match spec.spawn {
                    Some(_) => format!("{}[{j}]", spec.name).into(),
                    None => spec.name.as_str().into(),
                };
                let input = match inputs.remove(node.name()) {
                    Some(iter) => Input::Root { iter, next: 0, done: false },
                    None => Input::Join(Default::default()),
                };
                instances.push(insts.len());
                insts.push(InstRt {
                    node: k,
                    name,
                    input,
                    output: Output::Serial(SerialOut::default()),
                    ended: false,
                    waker: None,
                    handed: 0,
                });
            }
            nodes.push(NodeRt {
                name: spec.name.as_str().into(),
                chain: Arc::new(spec.chain.clone()),
                produce: spec.produce,
                spawned: spec.spawn.is_some(),
                instances,
                preds,
                succs: Vec::new(),
                gather: spec.consume,
            });
        }
        for k in 0..nodes.len() {
            for slot in 0..nodes[k].preds.len() {
                let p = nodes[k].preds[slot];
                nodes[p].succs.push((k, slot));
            }
        }

        let mut executors: IndexMap<String, Arc<Executor>> = IndexMap::new();
        for node in &order {
            let Some(ex) = &self.pipers[node.name()].executor else { continue };
            if executors.contains_key(ex) {
                continue;
            }
            let config = self.executors.get(ex).cloned().unwrap_or_else(|| ExecutorConfig::new(ex.clone()));
            let created = Executor::new(config, self.registry.clone(), self.logger.clone())
                .map_err(|error| PipelineError::Executor { name: ex.clone(), error })?;
            executors.insert(ex.clone(), Arc::new(created));
        }

        let router = Arc::new(Mutex::new(Router::new(nodes, insts, self.logger.clone())));
        let mut task_piper = HashMap::new();
        {
            let mut r = router.lock().unwrap_or_else(|p| p.into_inner());
            for i in 0..r.insts.len() {
                let spec = &self.pipers[&*r.nodes[r.insts[i].node].name];
                let Some(ex) = &spec.executor else { continue };
                let executor = &executors[ex];
                let source_router = router.clone();
                let source = Box::new(move || {
                    let mut r = source_router.lock().unwrap_or_else(|p| p.into_inner());
                    let polled = r.poll_unit(i);
                    if matches!(polled, Poll::Ready(_)) {
                        r.insts[i].handed += 1;
                    }
                    polled
                });
                let name = r.insts[i].name.to_string();
                let task =
                    TaskSpec::new(name.clone(), spec.chain.clone(), source).ordered(spec.ordered).timeout(spec.timeout);
                let handle =
                    executor.attach_task(task).map_err(|error| PipelineError::Executor { name: ex.clone(), error })?;
                r.insts[i].output = Output::Task(handle);
                r.insts[i].waker = Some(executor.waker());
                task_piper.insert(name, spec.name.clone());
            }
        }

        self.run = Some(RunRt { router, ctl: Arc::default(), executors, pump: None, task_piper, started: false });
        Ok(())
    }

    /// Opens the flow of items (again, after a pause).
    pub fn run(&mut self) -> Result<(), PipelineError> {
        let resumable = matches!(self.state, RunState::Validated | RunState::Paused);
        let Some(rt) = self.run.as_mut().filter(|_| resumable) else {
            return Err(self.illegal("run"));
        };
        if !rt.started {
            for (name, ex) in &rt.executors {
                ex.start().map_err(|error| PipelineError::Executor { name: name.clone(), error })?;
            }
            let (router, ctl) = (rt.router.clone(), rt.ctl.clone());
            let (registry, logger) = (self.registry.clone(), self.logger.clone());
            let pump = thread::Builder::new()
                .name("pipeline-pump".into())
                .spawn(move || pump(router, ctl, registry, logger))
                .expect("spawn pump thread");
            rt.pump = Some(pump);
            rt.started = true;
            self.stats.started_at = Some(Utc::now());
        }
        {
            let mut r = rt.router();
            r.open = true;
            r.wake_all();
        }
        rt.ctl.cond.notify_all();
        self.state = RunState::Running;
        Ok(())
    }

    /// Blocks until every item reached the output pipers.
    pub fn wait(&mut self) -> Result<(), PipelineError> {
        if self.state != RunState::Running {
            return Err(self.illegal("wait"));
        }
        let rt = self.run.as_mut().expect("running pipeline is bound");
        {
            let mut st = rt.ctl.lock();
            while !st.finished {
                st = rt.ctl.cond.wait(st).unwrap_or_else(|p| p.into_inner());
            }
        }
        rt.halt();
        rt.router().drain_all();
        self.stats.finished_at = Some(Utc::now());
        self.state = RunState::Finished;
        Ok(())
    }

    /// Stops handing out new work and waits for work in progress to settle.
    pub fn pause(&mut self) -> Result<(), PipelineError> {
        if self.state != RunState::Running {
            return Err(self.illegal("pause"));
        }
        let rt = self.run.as_ref().expect("running pipeline is bound");
        let tasks: Vec<(usize, _)> = {
            let mut r = rt.router();
            r.open = false;
            r.insts
                .iter()
                .enumerate()
                .filter_map(|(i, inst)| match &inst.output {
                    Output::Task(h) => Some((i, h.clone())),
                    Output::Serial(_) => None,
                })
                .collect()
        };
        loop {
            let settled = {
                let r = rt.router();
                !r.serial_busy()
                    && tasks.iter().all(|(i, h)| h.dispatched() == r.insts[*i].handed && h.in_flight() == 0)
            };
            if settled {
                break;
            }
            thread::sleep(Duration::from_micros(200));
        }
        self.state = RunState::Paused;
        Ok(())
    }

    /// Ends a paused run for good and accounts for every input item.
    pub fn stop(&mut self) -> Result<(), PipelineError> {
        if self.state != RunState::Paused {
            return Err(self.illegal("stop"));
        }
        let rt = self.run.as_mut().expect("paused pipeline is bound");
        rt.halt();
        let mut r = rt.router();
        r.drain_all();
        let parked = r.parked_items();
        let delivered: BTreeSet<u64> =
            r.leaf_results.iter().map(|(_, e)| e.item_index).filter(|i| !parked.contains(i)).collect();
        let inputs = r.drain_inputs();
        let total = inputs.iter().map(|&(_, t)| t).max().unwrap_or(0);
        let read = inputs.iter().map(|&(r, _)| r).max().unwrap_or(0);
        drop(r);
        self.accounting = Some(Accounting {
            total,
            delivered: delivered.len() as u64,
            parked: parked.len() as u64,
            unread: total - read,
        });
        self.stats.finished_at = Some(Utc::now());
        self.state = RunState::Stopped;
        Ok(())
    }

    /// Item accounting, available once the pipeline is stopped.
    pub fn accounting(&self) -> Option<Accounting> {
        self.accounting
    }

    /// Everything that reached output pipers so far, by piper, in arrival order.
    pub fn leaf_results(&self) -> IndexMap<String, Vec<Envelope>> {
        let mut out: IndexMap<String, Vec<Envelope>> =
            self.output_pipers().into_iter().map(|n| (n, Vec::new())).collect();
        if let Some(rt) = &self.run {
            let r = rt.router();
            for (node, e) in &r.leaf_results {
                out.entry(r.nodes[*node].name.to_string()).or_default().push(e.clone());
            }
        }
        out
    }

    pub fn results(&self, leaf: &str) -> Vec<Envelope> {
        self.leaf_results().shift_remove(leaf).unwrap_or_default()
    }

    /// Number of faults among the leaf results.
    pub fn leaf_fault_count(&self) -> usize {
        self.run.as_ref().map_or(0, |rt| rt.router().leaf_results.iter().filter(|(_, e)| e.is_fault()).count())
    }

    /// Dispatch logs by executor name.
    pub fn dispatch_logs(&self) -> IndexMap<String, Vec<DispatchRecord>> {
        match &self.run {
            Some(rt) => rt.executors.iter().map(|(n, ex)| (n.clone(), ex.dispatch_log())).collect(),
            None => IndexMap::new(),
        }
    }

    /// The executors created by `start`.
    pub fn live_executors(&self) -> IndexMap<String, Arc<Executor>> {
        self.run.as_ref().map(|rt| rt.executors.clone()).unwrap_or_default()
    }

    pub fn stats(&self) -> RunStats {
        let mut stats = self.stats.clone();
        stats.pipers = self.pipers.keys().map(|n| (n.clone(), PiperStats::default())).collect();
        let Some(rt) = &self.run else { return stats };
        let mut latencies: HashMap<String, Vec<f64>> = HashMap::new();
        {
            let r = rt.router();
            for (node, c) in r.nodes.iter().zip(&r.counters) {
                let Some(s) = stats.pipers.get_mut(&*node.name) else { continue };
                s.items_in = c.items_in;
                s.items_out = c.items_out;
                s.faults_out = c.faults_out;
                s.wall_ms_total = c.wall_ms;
                latencies.entry(node.name.to_string()).or_default().extend(&c.latencies_ms);
            }
        }
        for ex in rt.executors.values() {
            for rec in ex.dispatch_log() {
                let Some(piper) = rt.task_piper.get(&*rec.task) else { continue };
                let Some(s) = stats.pipers.get_mut(piper) else { continue };
                if rec.outcome == Some(Outcome::Timeout) {
                    s.timeouts += 1;
                }
                let bytes = (rec.bytes_in + rec.bytes_out) as u64;
                s.in_band_bytes += bytes;
                s.max_item_in_band_bytes = s.max_item_in_band_bytes.max(bytes);
                if let Some(done) = rec.t_complete {
                    let ms = done.saturating_sub(rec.t_dispatch).as_secs_f64() * 1e3;
                    s.wall_ms_total += ms;
                    latencies.entry(piper.clone()).or_default().push(ms);
                }
            }
        }
        for (name, samples) in latencies {
            if let Some(s) = stats.pipers.get_mut(&name) {
                s.latency_p50_ms = quantile(&samples, 0.5);
                s.latency_p95_ms = quantile(&samples, 0.95);
            }
        }
        stats
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        if let Some(rt) = &mut self.run {
            rt.halt();
        }
    }
}

fn pump(router: Arc<Mutex<Router>>, ctl: Arc<Ctl>, registry: Arc<WorkerRegistry>, logger: Logger) {
    let lock = || router.lock().unwrap_or_else(|p| p.into_inner());
    let serial: Vec<usize> = {
        let r = lock();
        (0..r.insts.len()).filter(|&i| matches!(r.insts[i].output, Output::Serial(_))).collect()
    };
    let mut backoff = PUMP_MIN;
    loop {
        if ctl.lock().quit {
            return;
        }
        let (mut progress, jobs) = {
            let mut r = lock();
            let progress = r.drain_leaves();
            let mut jobs = Vec::new();
            for &i in &serial {
                if let Some(unit) = r.serial_take(i) {
                    let node = &r.nodes[r.insts[i].node];
                    jobs.push((i, node.chain.clone(), r.insts[i].name.clone(), unit));
                }
            }
            if r.leaves_ended() {
                ctl.lock().finished = true;
                ctl.cond.notify_all();
            }
            (progress, jobs)
        };
        for (i, chain, name, unit) in jobs {
            let t0 = Instant::now();
            let out = apply_chain(&registry, &chain, &name, &unit.inbox, &logger);
            let mut r = lock();
            r.serial_finish(i, out, t0.elapsed());
            r.wake_all();
            progress = true;
        }
        if progress {
            backoff = PUMP_MIN;
            continue;
        }
        let st = ctl.lock();
        if st.quit {
            return;
        }
        let _ = ctl.cond.wait_timeout(st, backoff);
        backoff = (backoff * 2).min(PUMP_MAX);
    }
}
