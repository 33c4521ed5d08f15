//! Moves envelopes between piper instances while a pipeline runs.
//!
//! Every piper instance has an input side (an input collection for roots, an
//! inbox assembler otherwise) and an output side (an executor task or, for
//! serial pipers, a queue filled by the pump thread). Sources pull lazily:
//! when an executor polls an instance for work, the instance pulls from its
//! upstream outputs until one inbox is complete.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use crate::envelope::{Body, Envelope, ErrorClass, FaultInfo, SubFault};
use crate::executor::{Next, Poll, TaskHandle, Waker, WorkUnit};
use crate::log::Logger;
use crate::registry::WorkerChain;
use crate::value::Value;

pub(crate) type InputIter = Box<dyn Iterator<Item = Value> + Send>;

pub(crate) struct NodeRt {
    pub name: Arc<str>,
    pub chain: Arc<WorkerChain>,
    pub produce: Option<u32>,
    pub spawned: bool,
    pub instances: Vec<usize>,
    /// Upstream nodes in inbox slot order.
    pub preds: Vec<usize>,
    /// Downstream (node, slot) pairs.
    pub succs: Vec<(usize, usize)>,
    /// Sub-items gathered per slot, for consume pipers.
    pub gather: Option<u32>,
}

pub(crate) enum Input {
    Root { iter: InputIter, next: u64, done: bool },
    Join(Assembler),
}

#[derive(Default)]
pub(crate) struct SerialOut {
    queue: VecDeque<Envelope>,
    busy: bool,
    ended: bool,
}

pub(crate) enum Output {
    Task(TaskHandle),
    Serial(SerialOut),
}

pub(crate) struct InstRt {
    pub node: usize,
    pub name: Arc<str>,
    pub input: Input,
    pub output: Output,
    /// The output side reported end of stream.
    pub ended: bool,
    pub waker: Option<Waker>,
    /// Inboxes handed to the executor through the task source.
    pub handed: u64,
}

enum Fill {
    Empty,
    One(Envelope),
    Gather(Vec<Option<Envelope>>),
}

struct Partial {
    slots: Vec<Fill>,
}

impl Partial {
    fn new(n_slots: usize, gather: Option<u32>) -> Self {
        let slots = (0..n_slots)
            .map(|_| match gather {
                Some(n) => Fill::Gather(vec![None; n as usize]),
                None => Fill::Empty,
            })
            .collect();
        Partial { slots }
    }

    fn is_complete(&self) -> bool {
        self.slots.iter().all(|f| match f {
            Fill::Empty => false,
            Fill::One(_) => true,
            Fill::Gather(subs) => subs.iter().all(Option::is_some),
        })
    }
}

#[derive(Default)]
pub(crate) struct Assembler {
    pending: BTreeMap<(u64, Option<u32>), Partial>,
    ready: VecDeque<WorkUnit>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Counters {
    pub items_in: u64,
    pub items_out: u64,
    pub faults_out: u64,
    pub latencies_ms: Vec<f64>,
    pub wall_ms: f64,
}

pub(crate) struct Router {
    pub open: bool,
    pub nodes: Vec<NodeRt>,
    pub insts: Vec<InstRt>,
    pub leaf_results: Vec<(usize, Envelope)>,
    pub counters: Vec<Counters>,
    logger: Logger,
}

impl Router {
    pub fn new(nodes: Vec<NodeRt>, insts: Vec<InstRt>, logger: Logger) -> Self {
        let counters = vec![Counters::default(); nodes.len()];
        Router { open: false, nodes, insts, leaf_results: Vec::new(), counters, logger }
    }

    fn fault(&self, piper: &str, item: u64, stage: u32, message: String) -> FaultInfo {
        let fault = FaultInfo::new(piper, stage, ErrorClass::User, message);
        self.logger.error(piper, format_args!("item {item}: {fault}"));
        fault
    }

    /// Next inbox for instance `i`, pulling upstream as needed.
    pub fn poll_unit(&mut self, i: usize) -> Poll<WorkUnit> {
        if !self.open {
            return Poll::Pending;
        }
        let node = self.insts[i].node;
        if let Input::Root { iter, next, done } = &mut self.insts[i].input {
            if *done {
                return Poll::Exhausted;
            }
            return match iter.next() {
                Some(v) => {
                    let unit = WorkUnit::single(Envelope::payload(*next, v));
                    *next += 1;
                    self.counters[node].items_in += 1;
                    Poll::Ready(unit)
                }
                None => {
                    *done = true;
                    Poll::Exhausted
                }
            };
        }
        loop {
            if let Some(unit) = self.take_ready(i) {
                return Poll::Ready(unit);
            }
            if !self.pump_preds(i) {
                break;
            }
        }
        if !self.preds_ended(i) {
            return Poll::Pending;
        }
        self.flush_incomplete(i);
        match self.take_ready(i) {
            Some(unit) => Poll::Ready(unit),
            None => Poll::Exhausted,
        }
    }

    fn take_ready(&mut self, i: usize) -> Option<WorkUnit> {
        let Input::Join(asm) = &mut self.insts[i].input else { return None };
        let unit = asm.ready.pop_front()?;
        self.counters[self.insts[i].node].items_in += 1;
        Some(unit)
    }

    fn upstream_instances(&self, i: usize) -> Vec<usize> {
        let node = &self.nodes[self.insts[i].node];
        node.preds.iter().flat_map(|&p| self.nodes[p].instances.iter().copied()).collect()
    }

    fn preds_ended(&self, i: usize) -> bool {
        self.upstream_instances(i).iter().all(|&q| self.insts[q].ended)
    }

    /// Pulls at most one envelope from each upstream instance.
    fn pump_preds(&mut self, i: usize) -> bool {
        let mut progress = false;
        for q in self.upstream_instances(i) {
            progress |= self.pull_one(q);
        }
        progress
    }

    /// Pulls one envelope from instance `q`'s output and routes it.
    pub fn pull_one(&mut self, q: usize) -> bool {
        if self.insts[q].ended {
            return false;
        }
        let next = match &mut self.insts[q].output {
            Output::Task(h) => h.try_next(),
            Output::Serial(s) => match s.queue.pop_front() {
                Some(e) => Next::Item(e),
                None if s.ended && !s.busy => Next::End,
                None => Next::Pending,
            },
        };
        match next {
            Next::Item(e) => {
                self.emit(self.insts[q].node, e);
                true
            }
            Next::End => {
                self.insts[q].ended = true;
                false
            }
            Next::Pending | Next::Stopped => false,
        }
    }

    fn emit(&mut self, node: usize, e: Envelope) {
        let outs = match self.nodes[node].produce {
            Some(n) => self.split(node, e, n),
            None => vec![e],
        };
        let c = &mut self.counters[node];
        c.items_out += outs.len() as u64;
        c.faults_out += outs.iter().filter(|e| e.is_fault()).count() as u64;
        if self.nodes[node].succs.is_empty() {
            self.leaf_results.extend(outs.into_iter().map(|e| (node, e)));
            return;
        }
        let succs = self.nodes[node].succs.clone();
        for e in outs {
            for &(s, slot) in &succs {
                let target = if self.nodes[s].spawned {
                    let j = e.sub_index.unwrap_or(0) as usize;
                    self.nodes[s].instances[j.min(self.nodes[s].instances.len() - 1)]
                } else {
                    self.nodes[s].instances[0]
                };
                self.add_to(target, slot, e.clone());
            }
        }
    }

    /// Turns a produce piper's list result into `n` sub-envelopes.
    fn split(&self, node: usize, e: Envelope, n: u32) -> Vec<Envelope> {
        let item = e.item_index;
        let fault = match e.body {
            Body::Payload(Value::List(items)) if items.len() == n as usize => {
                return items
                    .into_iter()
                    .enumerate()
                    .map(|(j, v)| Envelope::payload(item, v).with_sub_index(Some(j as u32)))
                    .collect();
            }
            Body::Payload(other) => {
                let got = match &other {
                    Value::List(items) => format!("a list of {}", items.len()),
                    v => format!("a {}", v.type_name()),
                };
                let stage = self.nodes[node].chain.stages().len().saturating_sub(1) as u32;
                self.fault(
                    &self.nodes[node].name,
                    item,
                    stage,
                    format!("produce expected a list of {n} items, got {got}"),
                )
            }
            Body::Fault(f) => f,
        };
        (0..n).map(|j| Envelope::fault(item, fault.clone()).with_sub_index(Some(j))).collect()
    }

    fn add_to(&mut self, target: usize, slot: usize, e: Envelope) {
        let node = self.insts[target].node;
        let (gather, n_slots) = (self.nodes[node].gather, self.nodes[node].preds.len());
        let key = (e.item_index, if gather.is_some() { None } else { e.sub_index });
        let Input::Join(asm) = &mut self.insts[target].input else { return };
        let partial = asm.pending.entry(key).or_insert_with(|| Partial::new(n_slots, gather));
        match &mut partial.slots[slot] {
            f @ Fill::Empty => *f = Fill::One(e),
            Fill::One(_) => {}
            Fill::Gather(subs) => {
                let j = e.sub_index.unwrap_or(0) as usize;
                if let Some(s) = subs.get_mut(j) {
                    *s = Some(e);
                }
            }
        }
        if !partial.is_complete() {
            return;
        }
        let partial = asm.pending.remove(&key).expect("entry exists");
        let inbox = partial.slots.into_iter().map(|f| self.slot_envelope(node, key.0, f)).collect();
        if let Input::Join(asm) = &mut self.insts[target].input {
            asm.ready.push_back(WorkUnit::new(inbox));
        }
        if let Some(w) = &self.insts[target].waker {
            w.wake();
        }
    }

    fn slot_envelope(&self, node: usize, item: u64, fill: Fill) -> Envelope {
        match fill {
            Fill::One(e) => e,
            Fill::Empty => unreachable!("only complete inboxes are built"),
            Fill::Gather(subs) => {
                let subs: Vec<Envelope> = subs.into_iter().flatten().collect();
                gather(&subs, item, self.nodes[node].chain.handles_faults)
            }
        }
    }

    /// Turns inboxes that can no longer complete into faults.
    fn flush_incomplete(&mut self, i: usize) {
        let node = self.insts[i].node;
        let Input::Join(asm) = &mut self.insts[i].input else { return };
        if asm.pending.is_empty() {
            return;
        }
        let pending = std::mem::take(&mut asm.pending);
        let name = self.nodes[node].name.clone();
        for ((item, sub), partial) in pending {
            let missing: Vec<String> = partial
                .slots
                .iter()
                .zip(&self.nodes[node].preds)
                .filter(|(f, _)| match f {
                    Fill::Empty => true,
                    Fill::One(_) => false,
                    Fill::Gather(subs) => subs.iter().any(Option::is_none),
                })
                .map(|(_, &p)| self.nodes[p].name.to_string())
                .collect();
            let fault =
                self.fault(&name, item, 0, format!("incomplete inbox: nothing arrived from {}", missing.join(", ")));
            let unit = WorkUnit::single(Envelope::fault(item, fault).with_sub_index(sub));
            if let Input::Join(asm) = &mut self.insts[i].input {
                asm.ready.push_back(unit);
            }
        }
    }

    /// Pulls everything currently available from leaf outputs.
    pub fn drain_leaves(&mut self) -> bool {
        let leaves: Vec<usize> =
            (0..self.insts.len()).filter(|&q| self.nodes[self.insts[q].node].succs.is_empty()).collect();
        let mut progress = false;
        for q in leaves {
            while self.pull_one(q) {
                progress = true;
            }
        }
        progress
    }

    /// Pulls everything available from every output; used once executors stopped.
    pub fn drain_all(&mut self) {
        loop {
            let mut progress = false;
            for q in 0..self.insts.len() {
                while self.pull_one(q) {
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
    }

    pub fn leaves_ended(&self) -> bool {
        self.insts.iter().filter(|i| self.nodes[i.node].succs.is_empty()).all(|i| i.ended)
    }

    /// Claims the next inbox of serial instance `i`.
    pub fn serial_take(&mut self, i: usize) -> Option<WorkUnit> {
        match &self.insts[i].output {
            Output::Serial(s) if !s.busy && !s.ended => {}
            _ => return None,
        }
        match self.poll_unit(i) {
            Poll::Ready(unit) => {
                if let Output::Serial(s) = &mut self.insts[i].output {
                    s.busy = true;
                }
                Some(unit)
            }
            Poll::Exhausted => {
                if let Output::Serial(s) = &mut self.insts[i].output {
                    s.ended = true;
                }
                None
            }
            Poll::Pending => None,
        }
    }

    pub fn serial_finish(&mut self, i: usize, e: Envelope, elapsed: Duration) {
        let ms = elapsed.as_secs_f64() * 1e3;
        let c = &mut self.counters[self.insts[i].node];
        c.latencies_ms.push(ms);
        c.wall_ms += ms;
        if let Output::Serial(s) = &mut self.insts[i].output {
            s.queue.push_back(e);
            s.busy = false;
        }
    }

    pub fn serial_busy(&self) -> bool {
        self.insts.iter().any(|i| matches!(&i.output, Output::Serial(s) if s.busy))
    }

    pub fn wake_all(&self) {
        for i in &self.insts {
            if let Some(w) = &i.waker {
                w.wake();
            }
        }
    }

    /// Item indices held inside the pipeline (inboxes and serial queues).
    pub fn parked_items(&self) -> BTreeSet<u64> {
        let mut out = BTreeSet::new();
        for inst in &self.insts {
            if let Input::Join(asm) = &inst.input {
                out.extend(asm.pending.keys().map(|k| k.0));
                out.extend(asm.ready.iter().map(WorkUnit::item_index));
            }
            if let Output::Serial(s) = &inst.output {
                out.extend(s.queue.iter().map(|e| e.item_index));
            }
        }
        out
    }

    /// Reads the rest of every input collection. Returns (indices read before
    /// this call, total length) per root.
    pub fn drain_inputs(&mut self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for inst in &mut self.insts {
            if let Input::Root { iter, next, done } = &mut inst.input {
                let rest = if *done { 0 } else { iter.by_ref().count() as u64 };
                *done = true;
                out.push((*next, *next + rest));
            }
        }
        out
    }
}

/// Builds the consume slot from `n` sub-results: a list of payloads, or one
/// fault standing for the whole group when any sub-result faulted (unless
/// the consumer handles faults itself, in which case faults become markers).
pub(crate) fn gather(subs: &[Envelope], item: u64, handles_faults: bool) -> Envelope {
    let faulty: Vec<(u32, &FaultInfo)> = subs
        .iter()
        .enumerate()
        .filter_map(|(j, e)| e.as_fault().map(|f| (e.sub_index.unwrap_or(j as u32), f)))
        .collect();
    if faulty.is_empty() || handles_faults {
        let values = subs
            .iter()
            .map(|e| match &e.body {
                Body::Payload(v) => v.clone(),
                Body::Fault(f) => f.to_marker(),
            })
            .collect();
        return Envelope::payload(item, Value::List(values));
    }
    let (_, first) = faulty[0];
    let indices: Vec<String> = faulty.iter().map(|(j, _)| j.to_string()).collect();
    let mut fault = FaultInfo::new(
        first.origin_piper.clone(),
        first.stage_index,
        first.error_class,
        format!("sub-item(s) {} of item {item} faulted: {}", indices.join(", "), first.message),
    );
    fault.hops = faulty.iter().map(|(_, f)| f.hops).max().unwrap_or(0);
    fault.sub_faults = faulty
        .iter()
        .map(|(j, f)| SubFault { sub_index: *j, origin_piper: f.origin_piper.clone(), stage_index: f.stage_index })
        .collect();
    Envelope::fault(item, fault)
}
