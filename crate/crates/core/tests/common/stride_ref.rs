//! Discrete-time model of a pool of lanes serving a chain of tasks, with a
//! pluggable rotation rule. `RefRotation` is a from-scratch statement of
//! dispatch-counting stride; `CoreRotation` wraps the library's `StrideCore`.
//!
//! World rules, shared by both:
//! * task 0 reads items 0..n; task k reads the results of task k-1;
//! * results leave a task in dispatch order (ordered tasks);
//! * a job occupies one lane for its tick count;
//! * the consumer of the last task takes results as soon as they are released;
//! * per tick: complete jobs, release results, then one scheduling round that
//!   reads the delivered counts once at its start and dispatches until no lane
//!   is free or nothing is dispatchable; exhaustion seen during a round becomes
//!   visible to the downstream source after the round.

use flowpipe::executor::{Decision, Poll, StrideCore};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Config {
    pub tasks: usize,
    pub stride: usize,
    pub lanes: usize,
    pub items: u64,
    /// Ticks for item `i` of task `k`, at `ticks[k][i]`.
    pub ticks: Vec<Vec<u32>>,
}

impl Config {
    pub fn random(rng: &mut impl Rng) -> Config {
        let tasks = rng.gen_range(1..=4);
        let items = rng.gen_range(1..=64);
        Config {
            tasks,
            stride: [1, 2, 4, 8][rng.gen_range(0..4)],
            lanes: rng.gen_range(1..=8),
            items,
            ticks: (0..tasks).map(|_| (0..items).map(|_| rng.gen_range(1..=3)).collect()).collect(),
        }
    }

    pub fn bound(&self) -> u64 {
        (self.stride + self.lanes) as u64
    }
}

pub enum Pull {
    Ready(u64),
    Pending,
    Exhausted,
}

pub trait Rotation {
    fn begin_round(&mut self, delivered: &[u64]);
    fn pick(&mut self, free: usize, pull: &mut dyn FnMut(usize) -> Pull) -> Option<(usize, u64)>;
    fn exhausted(&self, task: usize) -> bool;
}

pub struct RefRotation {
    stride: usize,
    bound: u64,
    turn: usize,
    used: usize,
    sent: Vec<u64>,
    seen: Vec<u64>,
    finished: Vec<bool>,
}

impl RefRotation {
    pub fn new(cfg: &Config) -> Self {
        RefRotation {
            stride: cfg.stride,
            bound: cfg.bound(),
            turn: 0,
            used: 0,
            sent: vec![0; cfg.tasks],
            seen: vec![0; cfg.tasks],
            finished: vec![false; cfg.tasks],
        }
    }

    fn pass(&mut self) {
        self.turn = (self.turn + 1) % self.sent.len();
        self.used = 0;
    }
}

impl Rotation for RefRotation {
    fn begin_round(&mut self, delivered: &[u64]) {
        self.seen.copy_from_slice(delivered);
    }

    fn pick(&mut self, free: usize, pull: &mut dyn FnMut(usize) -> Pull) -> Option<(usize, u64)> {
        if free == 0 {
            return None;
        }
        for _ in 0..self.sent.len() {
            let k = self.turn;
            if self.finished[k] || self.sent[k] - self.seen[k] >= self.bound {
                self.pass();
                continue;
            }
            match pull(k) {
                Pull::Ready(item) => {
                    self.sent[k] += 1;
                    self.used += 1;
                    if self.used == self.stride {
                        self.pass();
                    }
                    return Some((k, item));
                }
                Pull::Pending => self.pass(),
                Pull::Exhausted => {
                    self.finished[k] = true;
                    self.pass();
                }
            }
        }
        None
    }

    fn exhausted(&self, task: usize) -> bool {
        self.finished[task]
    }
}

pub struct CoreRotation(pub StrideCore);

impl CoreRotation {
    pub fn new(cfg: &Config) -> Self {
        CoreRotation(StrideCore::new(cfg.tasks, cfg.stride, cfg.lanes))
    }
}

impl Rotation for CoreRotation {
    fn begin_round(&mut self, delivered: &[u64]) {
        for (k, &d) in delivered.iter().enumerate() {
            self.0.set_delivered(k, d);
        }
    }

    fn pick(&mut self, free: usize, pull: &mut dyn FnMut(usize) -> Pull) -> Option<(usize, u64)> {
        let decision = self.0.schedule(free, |k| match pull(k) {
            Pull::Ready(i) => Poll::Ready(i),
            Pull::Pending => Poll::Pending,
            Pull::Exhausted => Poll::Exhausted,
        });
        match decision {
            Decision::Dispatch(k, i) => Some((k, i)),
            Decision::NoLane | Decision::Idle => None,
        }
    }

    fn exhausted(&self, task: usize) -> bool {
        self.0.is_exhausted(task)
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct Trace {
    /// Every dispatch as (task, item, tick).
    pub dispatches: Vec<(usize, u64, u64)>,
    /// Largest dispatched-minus-delivered seen per task.
    pub peak: Vec<u64>,
}

impl Trace {
    pub fn per_task(&self, task: usize) -> Vec<u64> {
        self.dispatches.iter().filter(|d| d.0 == task).map(|d| d.1).collect()
    }
}

pub fn simulate(cfg: &Config, rot: &mut dyn Rotation) -> Trace {
    let n = cfg.tasks;
    let mut dispatched = vec![0u64; n];
    let mut done: Vec<Vec<bool>> = vec![vec![false; cfg.items as usize]; n];
    let mut released = vec![0u64; n];
    let mut taken = vec![0u64; n];
    let mut visible_end = vec![false; n];
    let mut next_input = 0u64;
    let mut running: Vec<(u64, usize, u64)> = Vec::new();
    let mut trace = Trace { dispatches: Vec::new(), peak: vec![0; n] };
    let mut tick = 0u64;
    loop {
        running.retain(|&(end, k, seq)| {
            if end == tick {
                done[k][seq as usize] = true;
            }
            end != tick
        });
        for k in 0..n {
            while released[k] < dispatched[k] && done[k][released[k] as usize] {
                released[k] += 1;
            }
        }
        taken[n - 1] = released[n - 1];
        rot.begin_round(&taken);
        loop {
            let free = cfg.lanes - running.len();
            let picked = rot.pick(free, &mut |k| {
                if k == 0 {
                    if next_input < cfg.items {
                        next_input += 1;
                        Pull::Ready(next_input - 1)
                    } else {
                        Pull::Exhausted
                    }
                } else if taken[k - 1] < released[k - 1] {
                    taken[k - 1] += 1;
                    Pull::Ready(taken[k - 1] - 1)
                } else if visible_end[k - 1] && taken[k - 1] == dispatched[k - 1] {
                    Pull::Exhausted
                } else {
                    Pull::Pending
                }
            });
            let Some((k, item)) = picked else { break };
            running.push((tick + cfg.ticks[k][item as usize] as u64, k, dispatched[k]));
            dispatched[k] += 1;
            trace.dispatches.push((k, item, tick));
            for j in 0..n {
                trace.peak[j] = trace.peak[j].max(dispatched[j] - taken[j]);
            }
        }
        for (k, end) in visible_end.iter_mut().enumerate() {
            *end |= rot.exhausted(k);
        }
        if running.is_empty() && visible_end.iter().all(|&e| e) {
            return trace;
        }
        tick += 1;
        assert!(tick < 1_000_000, "simulation does not terminate: {cfg:?}");
    }
}
