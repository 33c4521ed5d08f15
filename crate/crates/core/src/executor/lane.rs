//! Execution lanes. Each lane is a thread that evaluates one job at a time,
//! either in this process or by calling a worker server.

use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{Receiver, Sender};

use crate::envelope::Envelope;
use crate::log::Logger;
use crate::registry::{apply_chain, WorkerChain, WorkerRegistry};
use crate::remote::{LocalWorkerProcess, RemoteError, RemoteSlotPool};

pub(crate) struct Job {
    pub task: usize,
    pub seq: u64,
    pub generation: u64,
    pub chain: Arc<WorkerChain>,
    pub piper: Arc<str>,
    pub inbox: Vec<Envelope>,
}

pub(crate) struct Completion {
    pub lane: usize,
    pub generation: u64,
    pub task: usize,
    pub seq: u64,
    pub envelope: Envelope,
}

pub(crate) enum Event {
    Done(Completion),
    Wake,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneKind {
    InProc,
    OutProc,
    Remote,
}

#[derive(Clone)]
enum Exec {
    Local(Arc<WorkerRegistry>),
    Pool(Arc<RemoteSlotPool>),
}

pub(crate) struct Lane {
    pub id: usize,
    pub kind: LaneKind,
    pub busy: bool,
    pub generation: u64,
    exec: Exec,
    tx: Option<Sender<Job>>,
    events: Sender<Event>,
    logger: Logger,
    program: Option<PathBuf>,
    process: Option<LocalWorkerProcess>,
}

impl Lane {
    pub fn inproc(id: usize, registry: Arc<WorkerRegistry>, events: Sender<Event>, logger: Logger) -> Lane {
        Self::with_exec(id, LaneKind::InProc, Exec::Local(registry), events, logger)
    }

    pub fn remote(id: usize, pool: Arc<RemoteSlotPool>, events: Sender<Event>, logger: Logger) -> Lane {
        Self::with_exec(id, LaneKind::Remote, Exec::Pool(pool), events, logger)
    }

    /// A lane backed by its own single-slot `serve` child process.
    pub fn outproc(id: usize, program: PathBuf, events: Sender<Event>, logger: Logger) -> Result<Lane, RemoteError> {
        let (process, pool) = spawn_process(&program, &logger)?;
        let mut lane = Self::with_exec(id, LaneKind::OutProc, Exec::Pool(pool), events, logger);
        lane.program = Some(program);
        lane.process = Some(process);
        Ok(lane)
    }

    fn with_exec(id: usize, kind: LaneKind, exec: Exec, events: Sender<Event>, logger: Logger) -> Lane {
        let mut lane =
            Lane { id, kind, busy: false, generation: 0, exec, tx: None, events, logger, program: None, process: None };
        lane.spawn_thread();
        lane
    }

    fn spawn_thread(&mut self) {
        let (tx, rx) = crossbeam_channel::unbounded();
        let (exec, events, logger, id) = (self.exec.clone(), self.events.clone(), self.logger.clone(), self.id);
        thread::Builder::new()
            .name(format!("lane-{id}"))
            .spawn(move || lane_loop(id, rx, exec, events, logger))
            .expect("spawn lane thread");
        self.tx = Some(tx);
    }

    pub fn pid(&self) -> Option<u32> {
        self.process.as_ref().map(LocalWorkerProcess::pid)
    }

    pub fn submit(&mut self, mut job: Job) {
        job.generation = self.generation;
        self.busy = true;
        if let Some(tx) = &self.tx {
            let _ = tx.send(job);
        }
    }

    /// Abandons the job in progress: later results from it are stale, and a
    /// fresh thread (and, out of process, a fresh child) takes over the lane.
    pub fn reclaim(&mut self) {
        self.generation += 1;
        self.busy = false;
        self.tx = None;
        if let (Some(program), Exec::Pool(old)) = (self.program.clone(), &self.exec) {
            old.close();
            if let Some(mut p) = self.process.take() {
                p.kill();
            }
            match spawn_process(&program, &self.logger) {
                Ok((process, pool)) => {
                    self.process = Some(process);
                    self.exec = Exec::Pool(pool);
                }
                Err(e) => self.logger.error("executor", format_args!("lane {} respawn failed: {e}", self.id)),
            }
        }
        self.spawn_thread();
    }

    pub fn shutdown(&mut self) {
        self.tx = None;
        if let Exec::Pool(pool) = &self.exec {
            if self.kind == LaneKind::OutProc {
                pool.close();
            }
        }
        if let Some(mut p) = self.process.take() {
            p.kill();
        }
    }
}

fn spawn_process(
    program: &std::path::Path,
    logger: &Logger,
) -> Result<(LocalWorkerProcess, Arc<RemoteSlotPool>), RemoteError> {
    let process = LocalWorkerProcess::spawn(program, 1)?;
    let pool = RemoteSlotPool::connect("127.0.0.1", process.port(), logger.clone())?;
    Ok((process, pool))
}

fn lane_loop(id: usize, jobs: Receiver<Job>, exec: Exec, events: Sender<Event>, logger: Logger) {
    for job in jobs {
        let envelope = match &exec {
            Exec::Local(registry) => apply_chain(registry, &job.chain, &job.piper, &job.inbox, &logger),
            Exec::Pool(pool) => pool.call(&job.chain, &job.piper, &job.inbox),
        };
        let done = Completion { lane: id, generation: job.generation, task: job.task, seq: job.seq, envelope };
        if events.send(Event::Done(done)).is_err() {
            return;
        }
    }
}
