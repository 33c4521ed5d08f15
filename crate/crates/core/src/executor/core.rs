//! The stride rotation as a pure state machine, free of threads and clocks so
//! it can be driven step by step.

/// Outcome of polling one task's source.
#[derive(Debug)]
pub enum Poll<T> {
    Ready(T),
    /// Nothing available right now; the task yields its turn.
    Pending,
    /// The source will never produce again.
    Exhausted,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Decision<T> {
    /// Dispatch this unit of task `k`.
    Dispatch(usize, T),
    /// Every lane is busy.
    NoLane,
    /// A full rotation found nothing dispatchable.
    Idle,
}

#[derive(Debug, Clone, Default)]
struct TaskState {
    dispatched: u64,
    delivered: u64,
    exhausted: bool,
}

/// Dispatch-counting stride rotation.
///
/// Tasks take turns in registration order. The task holding the turn may
/// dispatch up to `stride` items; the turn passes on after the `stride`-th
/// dispatch, or as soon as the task cannot dispatch (source pending or
/// exhausted, or too many of its results still unconsumed). A task never has
/// more than `stride + lanes` items dispatched but not yet delivered to its
/// consumer.
#[derive(Debug, Clone)]
pub struct StrideCore {
    stride: usize,
    bound: u64,
    turn: usize,
    taken: usize,
    tasks: Vec<TaskState>,
}

impl StrideCore {
    pub fn new(tasks: usize, stride: usize, lanes: usize) -> Self {
        let stride = stride.max(1);
        StrideCore {
            stride,
            bound: (stride + lanes) as u64,
            turn: 0,
            taken: 0,
            tasks: vec![TaskState::default(); tasks],
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Largest allowed `dispatched - delivered` per task.
    pub fn bound(&self) -> u64 {
        self.bound
    }

    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn outstanding(&self, task: usize) -> u64 {
        let t = &self.tasks[task];
        t.dispatched - t.delivered
    }

    pub fn dispatched(&self, task: usize) -> u64 {
        self.tasks[task].dispatched
    }

    pub fn is_exhausted(&self, task: usize) -> bool {
        self.tasks[task].exhausted
    }

    /// Records that `task`'s consumer has received results, as a running total.
    pub fn set_delivered(&mut self, task: usize, delivered: u64) {
        let t = &mut self.tasks[task];
        t.delivered = delivered.min(t.dispatched);
    }

    pub fn add_delivered(&mut self, task: usize, n: u64) {
        let total = self.tasks[task].delivered + n;
        self.set_delivered(task, total);
    }

    fn advance(&mut self) {
        self.turn = (self.turn + 1) % self.tasks.len();
        self.taken = 0;
    }

    /// Picks the next dispatch, polling at most one full rotation of sources.
    pub fn schedule<T>(&mut self, free_lanes: usize, mut poll: impl FnMut(usize) -> Poll<T>) -> Decision<T> {
        if self.tasks.is_empty() {
            return Decision::Idle;
        }
        if free_lanes == 0 {
            return Decision::NoLane;
        }
        for _ in 0..self.tasks.len() {
            let k = self.turn;
            let t = &self.tasks[k];
            if t.exhausted || t.dispatched - t.delivered >= self.bound {
                self.advance();
                continue;
            }
            match poll(k) {
                Poll::Ready(unit) => {
                    self.tasks[k].dispatched += 1;
                    self.taken += 1;
                    if self.taken >= self.stride {
                        self.advance();
                    }
                    return Decision::Dispatch(k, unit);
                }
                Poll::Pending => self.advance(),
                Poll::Exhausted => {
                    self.tasks[k].exhausted = true;
                    self.advance();
                }
            }
        }
        Decision::Idle
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ready_until(n: u64) -> impl FnMut(usize, &mut Vec<u64>) -> Poll<u64> {
        move |k, next: &mut Vec<u64>| {
            if next[k] < n {
                next[k] += 1;
                Poll::Ready(next[k] - 1)
            } else {
                Poll::Exhausted
            }
        }
    }

    #[test]
    fn independent_tasks_alternate_in_stride_batches() {
        let mut core = StrideCore::new(2, 3, 100);
        let mut next = vec![0u64; 2];
        let mut poll = ready_until(4);
        let mut order = Vec::new();
        while let Decision::Dispatch(k, i) = core.schedule(1, |k| poll(k, &mut next)) {
            order.push((k, i));
        }
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (0, 3), (1, 3)]);
    }

    #[test]
    fn no_lane_and_idle() {
        let mut core = StrideCore::new(1, 1, 1);
        assert_eq!(core.schedule(0, |_| Poll::Ready(())), Decision::NoLane);
        assert_eq!(core.schedule::<()>(1, |_| Poll::Pending), Decision::Idle);
        assert_eq!(core.schedule::<()>(1, |_| Poll::Exhausted), Decision::Idle);
        assert!(core.is_exhausted(0));
    }

    #[test]
    fn bound_blocks_until_delivery() {
        let mut core = StrideCore::new(1, 2, 1);
        for _ in 0..3 {
            assert!(matches!(core.schedule(1, |_| Poll::Ready(())), Decision::Dispatch(0, ())));
        }
        assert_eq!(core.schedule(1, |_| Poll::Ready(())), Decision::Idle);
        core.add_delivered(0, 1);
        assert!(matches!(core.schedule(1, |_| Poll::Ready(())), Decision::Dispatch(0, ())));
        assert_eq!(core.outstanding(0), 3);
    }
}
