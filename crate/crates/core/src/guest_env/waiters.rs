// SPDX-License-Identifier: Apache-2.0

//! Blocked-task bookkeeping for targeted interrupt injection.

use std::fmt;

use crate::engine::coverage::Site;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Waiter {
    pub task: TaskId,
    pub reason: &'static str,
    /// Monotone registration sequence number.
    pub order: u64,
    /// Virtual-time deadline, if the wait has a timeout.
    pub deadline: Option<u64>,
    pub site: Site,
}

#[derive(Debug, Clone, Default)]
pub struct WaiterRegistry {
    waiters: Vec<Waiter>,
    next_order: u64,
    registrations: u64,
    notifications: u64,
}

impl WaiterRegistry {
    /// Adds a waiter. Returns `None` when the task is already registered.
    pub fn register(
        &mut self,
        task: TaskId,
        reason: &'static str,
        deadline: Option<u64>,
        site: Site,
    ) -> Option<Waiter> {
        if self.contains(task) {
            return None;
        }
        let w = Waiter {
            task,
            reason,
            order: self.next_order,
            deadline,
            site,
        };
        self.next_order += 1;
        self.registrations += 1;
        self.waiters.push(w.clone());
        Some(w)
    }

    pub fn record_notification(&mut self) {
        self.notifications += 1;
    }

    pub fn deregister(&mut self, task: TaskId) -> bool {
        let before = self.waiters.len();
        self.waiters.retain(|w| w.task != task);
        before != self.waiters.len()
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.waiters.iter().any(|w| w.task == task)
    }

    pub fn is_empty(&self) -> bool {
        self.waiters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.waiters.len()
    }

    /// Waiters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Waiter> {
        self.waiters.iter()
    }

    pub fn earliest_deadline(&self) -> Option<u64> {
        self.waiters.iter().filter_map(|w| w.deadline).min()
    }

    pub fn registrations(&self) -> u64 {
        self.registrations
    }

    pub fn notifications(&self) -> u64 {
        self.notifications
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_appears_once() {
        let mut r = WaiterRegistry::default();
        assert!(r.register(TaskId(1), "a", None, Site(0)).is_some());
        assert!(r.register(TaskId(1), "b", None, Site(0)).is_none());
        assert!(r.register(TaskId(2), "c", Some(10), Site(0)).is_some());
        assert_eq!(r.len(), 2);
        assert_eq!(r.registrations(), 2);
        assert_eq!(r.earliest_deadline(), Some(10));
        assert!(r.deregister(TaskId(1)));
        assert!(!r.deregister(TaskId(1)));
        let orders: Vec<_> = r.iter().map(|w| w.order).collect();
        assert_eq!(orders, vec![1]);
    }
}
