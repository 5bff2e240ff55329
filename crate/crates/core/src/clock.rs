//! Wall and virtual time sources.
//!
//! Everything time-dependent in the gateway and the simulated fleet reads
//! time through [`Clock`], so a whole scenario can run on a
//! [`VirtualClock`] that only moves when the scenario runner advances it.

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use tokio::sync::oneshot;

pub type Sleep = Pin<Box<dyn Future<Output = ()> + Send + 'static>>;

pub trait Clock: Send + Sync + 'static {
    fn now(&self) -> DateTime<Utc>;

    /// Completes once `now() >= deadline`. Dropping the future cancels it.
    fn sleep_until(&self, deadline: DateTime<Utc>) -> Sleep;

    fn sleep(&self, d: Duration) -> Sleep {
        self.sleep_until(self.now() + d)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) -> Sleep {
        let wait = (deadline - Utc::now()).to_std().unwrap_or_default();
        Box::pin(tokio::time::sleep(wait))
    }
}

type TimerKey = (DateTime<Utc>, u64);

struct VirtualState {
    now: DateTime<Utc>,
    next_id: u64,
    timers: BTreeMap<TimerKey, oneshot::Sender<()>>,
}

/// Manually advanced clock. Sleepers are woken synchronously inside
/// [`VirtualClock::advance_to`], so right after it returns the woken timers
/// are no longer counted by [`VirtualClock::pending_timers`].
#[derive(Clone)]
pub struct VirtualClock {
    state: Arc<Mutex<VirtualState>>,
}

impl VirtualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            state: Arc::new(Mutex::new(VirtualState { now: start, next_id: 0, timers: BTreeMap::new() })),
        }
    }

    /// Number of sleepers currently waiting.
    pub fn pending_timers(&self) -> usize {
        self.state.lock().unwrap().timers.len()
    }

    pub fn next_deadline(&self) -> Option<DateTime<Utc>> {
        self.state.lock().unwrap().timers.keys().next().map(|(t, _)| *t)
    }

    /// Moves time forward (never backward) and wakes every due sleeper.
    pub fn advance_to(&self, t: DateTime<Utc>) {
        let mut st = self.state.lock().unwrap();
        if t > st.now {
            st.now = t;
        }
        let now = st.now;
        let later = st.timers.split_off(&(now, u64::MAX));
        let due = std::mem::replace(&mut st.timers, later);
        drop(st);
        for (_, tx) in due {
            let _ = tx.send(());
        }
    }

    pub fn advance(&self, d: Duration) {
        let t = self.now() + d;
        self.advance_to(t);
    }
}

struct TimerGuard {
    state: Arc<Mutex<VirtualState>>,
    key: TimerKey,
}

impl Drop for TimerGuard {
    fn drop(&mut self) {
        if let Ok(mut st) = self.state.lock() {
            st.timers.remove(&self.key);
        }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        self.state.lock().unwrap().now
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) -> Sleep {
        let mut st = self.state.lock().unwrap();
        if deadline <= st.now {
            return Box::pin(std::future::ready(()));
        }
        let key = (deadline, st.next_id);
        st.next_id += 1;
        let (tx, rx) = oneshot::channel();
        st.timers.insert(key, tx);
        let guard = TimerGuard { state: Arc::clone(&self.state), key };
        Box::pin(async move {
            let _guard = guard;
            let _ = rx.await;
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
    }

    #[tokio::test]
    async fn sleepers_wake_in_deadline_order() {
        let clock = VirtualClock::new(t0());
        let a = clock.sleep(Duration::seconds(6));
        let b = clock.sleep(Duration::seconds(12));
        assert_eq!(clock.pending_timers(), 2);
        assert_eq!(clock.next_deadline(), Some(t0() + Duration::seconds(6)));

        clock.advance(Duration::seconds(6));
        assert_eq!(clock.pending_timers(), 1);
        a.await;
        clock.advance_to(t0() + Duration::seconds(20));
        b.await;
        assert_eq!(clock.now(), t0() + Duration::seconds(20));
    }

    #[tokio::test]
    async fn dropping_a_sleep_cancels_it() {
        let clock = VirtualClock::new(t0());
        let s = clock.sleep(Duration::seconds(1));
        assert_eq!(clock.pending_timers(), 1);
        drop(s);
        assert_eq!(clock.pending_timers(), 0);
    }

    #[tokio::test]
    async fn past_deadlines_are_immediate() {
        let clock = VirtualClock::new(t0());
        clock.sleep_until(t0()).await;
        clock.advance_to(t0() - Duration::seconds(5));
        assert_eq!(clock.now(), t0());
        assert_eq!(clock.pending_timers(), 0);
    }
}
