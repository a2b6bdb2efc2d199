use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use super::Envelope;

/// Bounded FIFO of envelopes for one stage copy.
///
/// A batch larger than the capacity is admitted once the queue is empty so
/// oversized flushes cannot wedge a sender.
pub(crate) struct Inbox {
    state: Mutex<InboxState>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
}

struct InboxState {
    queue: VecDeque<Envelope>,
    active: usize,
    closed: bool,
}

impl Inbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(InboxState {
                queue: VecDeque::new(),
                active: 0,
                closed: false,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Blocks while the batch does not fit. Returns false if the inbox closed.
    pub fn push_batch(&self, batch: Vec<Envelope>) -> bool {
        let n = batch.len();
        let mut st = self.state.lock().unwrap();
        while !st.closed && !st.queue.is_empty() && st.queue.len() + n > self.capacity {
            st = self.not_full.wait(st).unwrap();
        }
        if st.closed {
            return false;
        }
        st.queue.extend(batch);
        drop(st);
        if n == 1 {
            self.not_empty.notify_one();
        } else {
            self.not_empty.notify_all();
        }
        true
    }

    /// Next envelope, marking the caller active. `None` once closed and empty.
    pub fn pop(&self) -> Option<Envelope> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(env) = st.queue.pop_front() {
                st.active += 1;
                drop(st);
                self.not_full.notify_all();
                return Some(env);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).unwrap();
        }
    }

    pub fn done(&self) {
        self.state.lock().unwrap().active -= 1;
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    /// (queued, active handlers)
    pub fn load(&self) -> (usize, usize) {
        let st = self.state.lock().unwrap();
        (st.queue.len(), st.active)
    }
}
