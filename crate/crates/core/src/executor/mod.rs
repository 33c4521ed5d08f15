//! Shared pools of execution lanes evaluating several item streams ("tasks")
//! interleaved in stride-sized turns.
//!
//! One scheduler thread per executor owns the task sources and the lanes; it
//! polls sources in rotation (see [`StrideCore`]), hands work to the lowest
//! numbered free lane and files completed results into per-task output
//! buffers that consumers drain through [`TaskHandle`]s.

mod core;
mod lane;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

pub use self::core::{Decision, Poll, StrideCore};
pub use self::lane::LaneKind;
use self::lane::{Completion, Event, Job, Lane};
use crate::envelope::{Envelope, ErrorClass, FaultInfo};
use crate::log::Logger;
use crate::registry::{WorkerChain, WorkerRegistry};
use crate::remote::RemoteSlotPool;
use crate::value::Value;
use crate::workers_arg::RemoteWorker;

/// Environment variable naming the program used for out-of-process lanes.
pub const LANE_PROGRAM_ENV: &str = "FLOWPIPE_LANE_PROGRAM";

const SOURCE: &str = "executor";
const POLL_MIN: Duration = Duration::from_micros(100);
const POLL_MAX: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub name: String,
    pub lanes_inproc: usize,
    pub lanes_outproc: usize,
    pub remote: Vec<RemoteWorker>,
    pub stride: usize,
    /// Program started as `<program> serve` for each out-of-process lane.
    pub lane_program: Option<PathBuf>,
}

impl ExecutorConfig {
    pub fn new(name: impl Into<String>) -> Self {
        ExecutorConfig {
            name: name.into(),
            lanes_inproc: 0,
            lanes_outproc: 0,
            remote: Vec::new(),
            stride: 1,
            lane_program: None,
        }
    }

    pub fn inproc(mut self, n: usize) -> Self {
        self.lanes_inproc = n;
        self
    }

    pub fn outproc(mut self, n: usize) -> Self {
        self.lanes_outproc = n;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn remote(mut self, workers: Vec<RemoteWorker>) -> Self {
        self.remote = workers;
        self
    }

    pub fn lane_program(mut self, program: impl Into<PathBuf>) -> Self {
        self.lane_program = Some(program.into());
        self
    }

    pub fn total_lanes(&self) -> usize {
        self.lanes_inproc + self.lanes_outproc + self.remote.iter().map(|w| w.slots as usize).sum::<usize>()
    }

    /// The configured lane program, else `$FLOWPIPE_LANE_PROGRAM`, else the
    /// running executable when it is the `flowpipe` binary.
    pub fn resolve_lane_program(&self) -> Option<PathBuf> {
        if let Some(p) = &self.lane_program {
            return Some(p.clone());
        }
        if let Some(p) = std::env::var_os(LANE_PROGRAM_ENV) {
            return Some(p.into());
        }
        let exe = std::env::current_exe().ok()?;
        (exe.file_stem()? == "flowpipe").then_some(exe)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecutorError {
    #[error("executor needs at least one lane")]
    ZeroLanes,
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("remote worker unreachable: {0}")]
    RemoteUnreachable(String),
    #[error("cannot provision lane: {0}")]
    LaneSpawn(String),
    #[error("executor already started")]
    AlreadyStarted,
    #[error("no tasks attached")]
    NoTasks,
    #[error("executor stopped")]
    ExecutorStopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Fault,
    Timeout,
}

/// One dispatch of one work unit to one lane.
#[derive(Debug, Clone)]
pub struct DispatchRecord {
    pub task_seq: u64,
    pub task: Arc<str>,
    pub item_index: u64,
    pub sub_index: Option<u32>,
    pub lane_id: usize,
    /// Offsets from the executor's creation.
    pub t_dispatch: Duration,
    pub t_complete: Option<Duration>,
    /// When the task's consumer received the result.
    pub t_delivered: Option<Duration>,
    pub outcome: Option<Outcome>,
    /// Encoded size of the inbox handed to the lane.
    pub bytes_in: usize,
    /// Encoded size of the result.
    pub bytes_out: usize,
}

/// The inbox for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkUnit {
    pub inbox: Vec<Envelope>,
}

impl WorkUnit {
    pub fn new(inbox: Vec<Envelope>) -> Self {
        WorkUnit { inbox }
    }

    pub fn single(envelope: Envelope) -> Self {
        WorkUnit { inbox: vec![envelope] }
    }

    pub fn item_index(&self) -> u64 {
        self.inbox.first().map_or(0, |e| e.item_index)
    }
}

/// A pull-based stream of work. Only the executor's scheduler thread polls it.
pub trait TaskSource: Send {
    fn poll(&mut self) -> Poll<WorkUnit>;
}

impl<F: FnMut() -> Poll<WorkUnit> + Send> TaskSource for F {
    fn poll(&mut self) -> Poll<WorkUnit> {
        self()
    }
}

/// Numbers the values of `iter` from 0 as single-payload work units.
pub fn iter_source<I>(iter: I) -> Box<dyn TaskSource>
where
    I: IntoIterator<Item = Value>,
    I::IntoIter: Send + 'static,
{
    let mut iter = iter.into_iter().enumerate();
    Box::new(move || match iter.next() {
        Some((i, v)) => Poll::Ready(WorkUnit::single(Envelope::payload(i as u64, v))),
        None => Poll::Exhausted,
    })
}

/// A source that forwards the results of another task, one envelope per unit.
pub fn upstream_source(upstream: TaskHandle) -> Box<dyn TaskSource> {
    Box::new(move || match upstream.try_next() {
        Next::Item(e) => Poll::Ready(WorkUnit::single(e)),
        Next::Pending => Poll::Pending,
        Next::End | Next::Stopped => Poll::Exhausted,
    })
}

pub struct TaskSpec {
    pub name: String,
    pub chain: WorkerChain,
    pub ordered: bool,
    pub timeout: Option<Duration>,
    pub source: Box<dyn TaskSource>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, chain: WorkerChain, source: Box<dyn TaskSource>) -> Self {
        TaskSpec { name: name.into(), chain, ordered: true, timeout: None, source }
    }

    pub fn ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }

    pub fn timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }
}

/// Non-blocking read result.
#[derive(Debug, Clone, PartialEq)]
pub enum Next {
    Item(Envelope),
    Pending,
    /// Source exhausted and every result delivered.
    End,
    /// The executor stopped before the stream ended.
    Stopped,
}

struct TaskOut {
    ordered: bool,
    dispatched: u64,
    completed: u64,
    delivered: u64,
    source_done: bool,
    next_seq: u64,
    by_seq: BTreeMap<u64, (Envelope, usize)>,
    by_completion: VecDeque<(Envelope, usize)>,
}

impl TaskOut {
    fn take(&mut self) -> Option<(Envelope, usize)> {
        if self.ordered {
            let item = self.by_seq.remove(&self.next_seq)?;
            self.next_seq += 1;
            Some(item)
        } else {
            self.by_completion.pop_front()
        }
    }

    fn buffered(&self) -> usize {
        self.by_seq.len() + self.by_completion.len()
    }
}

struct State {
    tasks: Vec<TaskOut>,
    log: Vec<DispatchRecord>,
    stopped: bool,
}

struct Shared {
    state: Mutex<State>,
    cond: Condvar,
    events: Sender<Event>,
    epoch: Instant,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn deliver(&self, st: &mut State, task: usize) -> Option<Envelope> {
        let (env, record) = st.tasks[task].take()?;
        st.tasks[task].delivered += 1;
        st.log[record].t_delivered = Some(self.now());
        let _ = self.events.send(Event::Wake);
        Some(env)
    }
}

/// Consumer side of one attached task.
#[derive(Clone)]
pub struct TaskHandle {
    shared: Arc<Shared>,
    index: usize,
    task_seq: u64,
    name: Arc<str>,
}

impl fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskHandle").field("name", &self.name).field("task_seq", &self.task_seq).finish()
    }
}

impl TaskHandle {
    pub fn task_seq(&self) -> u64 {
        self.task_seq
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Blocks for the next result. `Ok(None)` is the end of the stream.
    pub fn next_result(&self) -> Result<Option<Envelope>, ExecutorError> {
        let mut st = self.shared.lock();
        loop {
            match self.next_locked(&mut st) {
                Next::Item(e) => return Ok(Some(e)),
                Next::End => return Ok(None),
                Next::Stopped => return Err(ExecutorError::ExecutorStopped),
                Next::Pending => st = self.shared.cond.wait(st).unwrap_or_else(|p| p.into_inner()),
            }
        }
    }

    /// Like [`next_result`](Self::next_result) but gives up after `timeout`.
    pub fn next_result_timeout(&self, timeout: Duration) -> Next {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.lock();
        loop {
            let next = self.next_locked(&mut st);
            let now = Instant::now();
            if next != Next::Pending || now >= deadline {
                return next;
            }
            st = self.shared.cond.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    pub fn try_next(&self) -> Next {
        let mut st = self.shared.lock();
        self.next_locked(&mut st)
    }

    fn next_locked(&self, st: &mut State) -> Next {
        if let Some(e) = self.shared.deliver(st, self.index) {
            return Next::Item(e);
        }
        let t = &st.tasks[self.index];
        if t.source_done && t.delivered == t.dispatched {
            Next::End
        } else if st.stopped {
            Next::Stopped
        } else {
            Next::Pending
        }
    }

    /// Results completed but not yet taken.
    pub fn buffered(&self) -> usize {
        self.shared.lock().tasks[self.index].buffered()
    }

    /// Items dispatched minus items delivered.
    pub fn outstanding(&self) -> u64 {
        let st = self.shared.lock();
        let t = &st.tasks[self.index];
        t.dispatched - t.delivered
    }

    /// Items handed to lanes so far.
    pub fn dispatched(&self) -> u64 {
        self.shared.lock().tasks[self.index].dispatched
    }

    /// Items dispatched whose result has not come back yet.
    pub fn in_flight(&self) -> u64 {
        let st = self.shared.lock();
        let t = &st.tasks[self.index];
        t.dispatched - t.completed
    }

    pub fn is_source_done(&self) -> bool {
        self.shared.lock().tasks[self.index].source_done
    }
}

/// Nudges an executor's scheduler to poll its sources now.
#[derive(Clone)]
pub struct Waker(Sender<Event>);

impl Waker {
    pub fn wake(&self) {
        let _ = self.0.send(Event::Wake);
    }
}

struct Attached {
    name: Arc<str>,
    chain: Arc<WorkerChain>,
    timeout: Option<Duration>,
    source: Box<dyn TaskSource>,
}

struct Inner {
    attached: Vec<Attached>,
    lanes: Vec<Lane>,
    events: Option<Receiver<Event>>,
    scheduler: Option<JoinHandle<Vec<Lane>>>,
    started: bool,
    stopped: bool,
}

pub struct Executor {
    config: ExecutorConfig,
    shared: Arc<Shared>,
    inner: Mutex<Inner>,
    pools: Vec<Arc<RemoteSlotPool>>,
    lane_kinds: Vec<LaneKind>,
    lane_pids: Vec<Option<u32>>,
    logger: Logger,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor").field("config", &self.config).finish()
    }
}

impl Executor {
    /// Provisions every lane. Remote servers are connected and handshaken now.
    pub fn new(
        config: ExecutorConfig,
        registry: Arc<WorkerRegistry>,
        logger: Logger,
    ) -> Result<Executor, ExecutorError> {
        if config.total_lanes() == 0 {
            return Err(ExecutorError::ZeroLanes);
        }
        if config.stride == 0 {
            return Err(ExecutorError::ZeroStride);
        }
        let (tx, rx) = crossbeam_channel::unbounded();
        let mut pools = Vec::new();
        for w in &config.remote {
            let pool = RemoteSlotPool::connect(&w.host, w.port, logger.clone())
                .map_err(|e| ExecutorError::RemoteUnreachable(e.to_string()))?;
            pools.push(pool);
        }
        let mut lanes = Vec::new();
        for _ in 0..config.lanes_inproc {
            lanes.push(Lane::inproc(lanes.len(), registry.clone(), tx.clone(), logger.clone()));
        }
        if config.lanes_outproc > 0 {
            let program = config.resolve_lane_program().ok_or_else(|| {
                ExecutorError::LaneSpawn(format!("no lane program for out-of-process lanes (set {LANE_PROGRAM_ENV})"))
            })?;
            for _ in 0..config.lanes_outproc {
                let lane = Lane::outproc(lanes.len(), program.clone(), tx.clone(), logger.clone())
                    .map_err(|e| ExecutorError::LaneSpawn(e.to_string()))?;
                lanes.push(lane);
            }
        }
        for (w, pool) in config.remote.iter().zip(&pools) {
            for _ in 0..w.slots {
                lanes.push(Lane::remote(lanes.len(), pool.clone(), tx.clone(), logger.clone()));
            }
        }
        logger.debug(SOURCE, format_args!("{}: {} lane(s), stride {}", config.name, lanes.len(), config.stride));
        let lane_kinds = lanes.iter().map(|l| l.kind).collect();
        let lane_pids = lanes.iter().map(Lane::pid).collect();
        Ok(Executor {
            config,
            shared: Arc::new(Shared {
                state: Mutex::new(State { tasks: Vec::new(), log: Vec::new(), stopped: false }),
                cond: Condvar::new(),
                events: tx,
                epoch: Instant::now(),
            }),
            inner: Mutex::new(Inner {
                attached: Vec::new(),
                lanes,
                events: Some(rx),
                scheduler: None,
                started: false,
                stopped: false,
            }),
            pools,
            lane_kinds,
            lane_pids,
            logger,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn total_lanes(&self) -> usize {
        self.lane_kinds.len()
    }

    pub fn lane_kinds(&self) -> &[LaneKind] {
        &self.lane_kinds
    }

    /// Process ids of out-of-process lanes as first provisioned.
    pub fn lane_pids(&self) -> Vec<u32> {
        self.lane_pids.iter().flatten().copied().collect()
    }

    pub fn remote_pools(&self) -> &[Arc<RemoteSlotPool>] {
        &self.pools
    }

    pub fn waker(&self) -> Waker {
        Waker(self.shared.events.clone())
    }

    fn inner(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Adds a task to the rotation after those already attached.
    pub fn attach_task(&self, spec: TaskSpec) -> Result<TaskHandle, ExecutorError> {
        let mut inner = self.inner();
        if inner.started || inner.stopped {
            return Err(ExecutorError::AlreadyStarted);
        }
        let name: Arc<str> = spec.name.into();
        let mut st = self.shared.lock();
        let index = st.tasks.len();
        st.tasks.push(TaskOut {
            ordered: spec.ordered,
            dispatched: 0,
            completed: 0,
            delivered: 0,
            source_done: false,
            next_seq: 0,
            by_seq: BTreeMap::new(),
            by_completion: VecDeque::new(),
        });
        inner.attached.push(Attached {
            name: name.clone(),
            chain: Arc::new(spec.chain),
            timeout: spec.timeout,
            source: spec.source,
        });
        Ok(TaskHandle { shared: self.shared.clone(), index, task_seq: index as u64, name })
    }

    /// Starts the scheduler. Calling it again is a no-op.
    pub fn start(&self) -> Result<(), ExecutorError> {
        let mut inner = self.inner();
        if inner.started {
            return Ok(());
        }
        if inner.stopped {
            return Err(ExecutorError::ExecutorStopped);
        }
        if inner.attached.is_empty() {
            return Err(ExecutorError::NoTasks);
        }
        let attached = std::mem::take(&mut inner.attached);
        let lanes = std::mem::take(&mut inner.lanes);
        let events = inner.events.take().expect("events receiver present before start");
        let n = attached.len();
        let mut sources = Vec::with_capacity(n);
        let mut meta = Vec::with_capacity(n);
        for a in attached {
            sources.push(a.source);
            meta.push(TaskMeta { name: a.name, chain: a.chain, timeout: a.timeout });
        }
        let scheduler = Scheduler {
            core: StrideCore::new(n, self.config.stride, lanes.len()),
            shared: self.shared.clone(),
            sources,
            meta,
            lanes,
            events,
            inflight: HashMap::new(),
            next_seq: vec![0; n],
            marked_done: vec![false; n],
            stopping: false,
            logger: self.logger.clone(),
        };
        let handle = thread::Builder::new()
            .name(format!("sched-{}", self.config.name))
            .spawn(move || scheduler.run())
            .expect("spawn scheduler");
        inner.scheduler = Some(handle);
        inner.started = true;
        Ok(())
    }

    pub fn is_started(&self) -> bool {
        self.inner().started
    }

    /// Stops dispatching, waits for every in-flight item to complete and be
    /// buffered for its consumer, then releases the lanes. Idempotent.
    pub fn stop(&self) {
        let mut inner = self.inner();
        if inner.stopped {
            return;
        }
        inner.stopped = true;
        let mut lanes = std::mem::take(&mut inner.lanes);
        if let Some(handle) = inner.scheduler.take() {
            let _ = self.shared.events.send(Event::Stop);
            if let Ok(l) = handle.join() {
                lanes = l;
            }
        }
        for lane in &mut lanes {
            lane.shutdown();
        }
        for pool in &self.pools {
            pool.close();
        }
        self.shared.lock().stopped = true;
        self.shared.cond.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.inner().stopped
    }

    /// Every dispatch so far, in dispatch order.
    pub fn dispatch_log(&self) -> Vec<DispatchRecord> {
        self.shared.lock().log.clone()
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.stop();
    }
}

struct TaskMeta {
    name: Arc<str>,
    chain: Arc<WorkerChain>,
    timeout: Option<Duration>,
}

struct InFlight {
    lane: usize,
    record: usize,
    item_index: u64,
    sub_index: Option<u32>,
    deadline: Option<Instant>,
}

struct Scheduler {
    core: StrideCore,
    shared: Arc<Shared>,
    sources: Vec<Box<dyn TaskSource>>,
    meta: Vec<TaskMeta>,
    lanes: Vec<Lane>,
    events: Receiver<Event>,
    inflight: HashMap<(usize, u64), InFlight>,
    next_seq: Vec<u64>,
    marked_done: Vec<bool>,
    stopping: bool,
    logger: Logger,
}

impl Scheduler {
    fn run(mut self) -> Vec<Lane> {
        let mut idle_wait = POLL_MIN;
        loop {
            let mut active = false;
            while let Ok(ev) = self.events.try_recv() {
                active |= self.handle(ev);
            }
            active |= self.expire_timeouts();
            if !self.stopping {
                active |= self.dispatch_round();
            }
            if self.stopping && self.inflight.is_empty() {
                break;
            }
            idle_wait = if active { POLL_MIN } else { (idle_wait * 2).min(POLL_MAX) };
            let mut wait = idle_wait;
            if let Some(d) = self.inflight.values().filter_map(|f| f.deadline).min() {
                wait = wait.min(d.saturating_duration_since(Instant::now()));
            }
            match self.events.recv_timeout(wait) {
                Ok(ev) => {
                    if self.handle(ev) {
                        idle_wait = POLL_MIN;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => self.stopping = true,
            }
        }
        self.lanes
    }

    /// Returns whether anything changed.
    fn handle(&mut self, ev: Event) -> bool {
        match ev {
            Event::Done(c) => self.complete(c),
            Event::Wake => false,
            Event::Stop => {
                self.stopping = true;
                true
            }
        }
    }

    fn dispatch_round(&mut self) -> bool {
        {
            let st = self.shared.lock();
            for (k, t) in st.tasks.iter().enumerate() {
                self.core.set_delivered(k, t.delivered);
            }
        }
        let mut dispatched = false;
        loop {
            let free = self.lanes.iter().filter(|l| !l.busy).count();
            let sources = &mut self.sources;
            match self.core.schedule(free, |k| sources[k].poll()) {
                Decision::Dispatch(k, unit) => {
                    self.dispatch(k, unit);
                    dispatched = true;
                }
                Decision::NoLane | Decision::Idle => break,
            }
        }
        let newly_done: Vec<usize> =
            (0..self.sources.len()).filter(|&k| self.core.is_exhausted(k) && !self.marked_done[k]).collect();
        if !newly_done.is_empty() {
            let mut st = self.shared.lock();
            for k in newly_done {
                self.marked_done[k] = true;
                st.tasks[k].source_done = true;
            }
            drop(st);
            self.shared.cond.notify_all();
        }
        dispatched
    }

    fn dispatch(&mut self, task: usize, unit: WorkUnit) {
        let lane = self.lanes.iter().position(|l| !l.busy).expect("scheduler only dispatches with a free lane");
        let seq = self.next_seq[task];
        self.next_seq[task] += 1;
        let meta = &self.meta[task];
        let (item_index, sub_index) = unit.inbox.first().map_or((0, None), |e| (e.item_index, e.sub_index));
        let record = {
            let mut st = self.shared.lock();
            st.tasks[task].dispatched += 1;
            st.log.push(DispatchRecord {
                task_seq: task as u64,
                task: meta.name.clone(),
                item_index,
                sub_index,
                lane_id: lane,
                t_dispatch: self.shared.now(),
                t_complete: None,
                t_delivered: None,
                outcome: None,
                bytes_in: unit.inbox.iter().map(Envelope::encoded_len).sum(),
                bytes_out: 0,
            });
            st.log.len() - 1
        };
        let deadline = meta.timeout.map(|t| Instant::now() + t);
        self.inflight.insert((task, seq), InFlight { lane, record, item_index, sub_index, deadline });
        self.lanes[lane].submit(Job {
            task,
            seq,
            generation: 0,
            chain: meta.chain.clone(),
            piper: meta.name.clone(),
            inbox: unit.inbox,
        });
    }

    fn complete(&mut self, c: Completion) -> bool {
        if self.lanes[c.lane].generation != c.generation {
            self.logger.debug(SOURCE, format_args!("discarding late result on lane {}", c.lane));
            return false;
        }
        self.lanes[c.lane].busy = false;
        let Some(f) = self.inflight.remove(&(c.task, c.seq)) else { return true };
        let outcome = if c.envelope.is_fault() { Outcome::Fault } else { Outcome::Ok };
        self.file(c.task, c.seq, f.record, c.envelope, outcome);
        true
    }

    fn file(&self, task: usize, seq: u64, record: usize, envelope: Envelope, outcome: Outcome) {
        let mut st = self.shared.lock();
        let r = &mut st.log[record];
        r.t_complete = Some(self.shared.now());
        r.outcome = Some(outcome);
        r.bytes_out = envelope.encoded_len();
        let t = &mut st.tasks[task];
        t.completed += 1;
        if t.ordered {
            t.by_seq.insert(seq, (envelope, record));
        } else {
            t.by_completion.push_back((envelope, record));
        }
        drop(st);
        self.shared.cond.notify_all();
    }

    fn expire_timeouts(&mut self) -> bool {
        let now = Instant::now();
        let expired: Vec<(usize, u64)> =
            self.inflight.iter().filter(|(_, f)| f.deadline.is_some_and(|d| d <= now)).map(|(k, _)| *k).collect();
        for (task, seq) in &expired {
            let f = self.inflight.remove(&(*task, *seq)).expect("key just listed");
            self.lanes[f.lane].reclaim();
            let meta = &self.meta[*task];
            let ms = meta.timeout.unwrap_or_default().as_millis();
            let fault = FaultInfo::new(&*meta.name, 0, ErrorClass::Timeout, format!("exceeded timeout of {ms} ms"));
            self.logger.error(&meta.name, format_args!("item {}: {fault}", f.item_index));
            let env = Envelope::fault(f.item_index, fault).with_sub_index(f.sub_index);
            self.file(*task, *seq, f.record, env, Outcome::Timeout);
        }
        !expired.is_empty()
    }
}
