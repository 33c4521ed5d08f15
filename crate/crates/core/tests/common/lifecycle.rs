//! The pipeline transition table written out as data, plus helpers to drive
//! a real pipeline through it.

use flowpipe::executor::ExecutorConfig;
use flowpipe::log::{Level, Logger};
use flowpipe::stdlib::standard_registry;
use flowpipe::{FunctionRef, Pipeline, PipelineError, PiperSpec, RunState, Value, WorkerChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum St {
    Created,
    Validated,
    Bound,
    Running,
    Paused,
    Finished,
    Stopped,
}

pub const STATES: [St; 7] = [St::Created, St::Validated, St::Bound, St::Running, St::Paused, St::Finished, St::Stopped];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LOp {
    AddPiper,
    DelPiper,
    AddPipe,
    DelPipe,
    Validate,
    Start,
    Run,
    Wait,
    Pause,
    Stop,
}

pub const OPS: [LOp; 10] = [
    LOp::AddPiper,
    LOp::DelPiper,
    LOp::AddPipe,
    LOp::DelPipe,
    LOp::Validate,
    LOp::Start,
    LOp::Run,
    LOp::Wait,
    LOp::Pause,
    LOp::Stop,
];

/// `Some(next)` if the operation is legal in `state`, `None` if it must be
/// rejected with `IllegalState`.
pub fn table(state: St, op: LOp) -> Option<St> {
    use LOp::*;
    use St::*;
    match (state, op) {
        (Created | Validated, AddPiper | DelPiper | AddPipe | DelPipe) => Some(Created),
        (Created, Validate) => Some(Validated),
        (Validated, Start) => Some(Bound),
        (Bound, Run) => Some(Running),
        (Running, Wait) => Some(Finished),
        (Running, Pause) => Some(Paused),
        (Paused, Run) => Some(Running),
        (Paused, Stop) => Some(Stopped),
        _ => None,
    }
}

pub fn observed(p: &Pipeline) -> St {
    match p.state() {
        RunState::Created => St::Created,
        RunState::Validated if p.is_bound() => St::Bound,
        RunState::Validated => St::Validated,
        RunState::Running => St::Running,
        RunState::Paused => St::Paused,
        RunState::Finished => St::Finished,
        RunState::Stopped => St::Stopped,
    }
}

/// `a -> b`, `a -> c`, with `a` on a two-lane executor.
pub fn base_pipeline() -> Pipeline {
    let mut p = Pipeline::with_logger(standard_registry().into_shared(), Logger::memory(Level::Error));
    p.add_executor(ExecutorConfig::new("pool").inproc(2)).unwrap();
    let sleep = WorkerChain::new(vec![FunctionRef::new("time.sleep").kwarg("ms", 1)]).unwrap();
    p.add_piper(PiperSpec::new("a", sleep).executor("pool")).unwrap();
    p.add_piper(PiperSpec::new("b", WorkerChain::single("math.inc"))).unwrap();
    p.add_piper(PiperSpec::new("c", WorkerChain::single("math.double")).executor("pool")).unwrap();
    p.add_pipe("a", "b").unwrap();
    p.add_pipe("a", "c").unwrap();
    p
}

/// Applies `op` with arguments that are valid whenever the state allows
/// mutation. `fresh` numbers added pipers.
pub fn apply(p: &mut Pipeline, op: LOp, items: usize, fresh: &mut usize) -> Result<(), PipelineError> {
    match op {
        LOp::AddPiper => {
            *fresh += 1;
            p.add_piper(PiperSpec::new(format!("x{fresh}"), WorkerChain::single("identity")))
        }
        LOp::DelPiper => match p.pipers().keys().rev().find(|n| *n != "a").cloned() {
            Some(victim) => p.del_piper(&victim),
            None => {
                *fresh += 1;
                let name = format!("x{fresh}");
                p.add_piper(PiperSpec::new(name.clone(), WorkerChain::single("identity")))?;
                p.del_piper(&name)
            }
        },
        LOp::AddPipe => match p.pipers().keys().find(|n| *n != "a" && !p.dag().has_edge("a", n)).cloned() {
            Some(t) => p.add_pipe("a", &t),
            None => {
                *fresh += 1;
                let name = format!("x{fresh}");
                p.add_piper(PiperSpec::new(name.clone(), WorkerChain::single("identity")))?;
                p.add_pipe("a", &name)
            }
        },
        LOp::DelPipe => match p.dag().edges().into_iter().last() {
            Some((f, t)) => p.del_pipe(f.name(), t.name()),
            None => {
                apply(p, LOp::AddPipe, items, fresh)?;
                let (f, t) = p.dag().edges().into_iter().last().expect("pipe just added");
                p.del_pipe(f.name(), t.name())
            }
        },
        LOp::Validate => p.validate().map(|_| ()),
        LOp::Start => {
            let roots = p.input_pipers().len();
            let inputs = (0..roots).map(|_| (0..items as i64).map(Value::Int).collect()).collect();
            p.start(inputs)
        }
        LOp::Run => p.run(),
        LOp::Wait => p.wait(),
        LOp::Pause => p.pause(),
        LOp::Stop => p.stop(),
    }
}

/// Shortest legal path from `Created` to `state`.
pub fn path_to(state: St) -> &'static [LOp] {
    use LOp::*;
    match state {
        St::Created => &[],
        St::Validated => &[Validate],
        St::Bound => &[Validate, Start],
        St::Running => &[Validate, Start, Run],
        St::Paused => &[Validate, Start, Run, Pause],
        St::Finished => &[Validate, Start, Run, Wait],
        St::Stopped => &[Validate, Start, Run, Pause, Stop],
    }
}

/// Drives a fresh pipeline to `state`, applies `op` and reports whether the
/// outcome agrees with the table.
pub fn check_pair(state: St, op: LOp, items: usize) -> Result<(), String> {
    let mut p = base_pipeline();
    let mut fresh = 0;
    for &step in path_to(state) {
        apply(&mut p, step, items, &mut fresh).map_err(|e| format!("reaching {state:?} via {step:?}: {e}"))?;
    }
    if observed(&p) != state {
        return Err(format!("expected to be in {state:?}, found {:?}", observed(&p)));
    }
    let outcome = apply(&mut p, op, items, &mut fresh);
    let after = observed(&p);
    let result = match (table(state, op), outcome) {
        (Some(next), Ok(())) if after == next => Ok(()),
        (None, Err(PipelineError::IllegalState { .. })) if after == state => Ok(()),
        (want, got) => Err(format!("{state:?} x {op:?}: table says {want:?}, got {got:?} and state {after:?}")),
    };
    if after == St::Running {
        let _ = p.wait();
    }
    result
}
