use std::cell::Cell;
use std::rc::Rc;

/// Shared simulated time in microseconds. Clones observe the same clock.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now_us: Rc<Cell<u64>>,
}

impl VirtualClock {
    pub fn new(start_us: u64) -> Self {
        Self { now_us: Rc::new(Cell::new(start_us)) }
    }

    pub fn now_us(&self) -> u64 {
        self.now_us.get()
    }

    pub fn now_ms(&self) -> u64 {
        self.now_us.get() / 1000
    }

    pub fn advance(&self, dt_us: u64) -> u64 {
        let t = self.now_us.get() + dt_us;
        self.now_us.set(t);
        t
    }

    /// Moves forward to `t_us`; never moves backwards.
    pub fn advance_to(&self, t_us: u64) -> u64 {
        let t = self.now_us.get().max(t_us);
        self.now_us.set(t);
        t
    }
}
