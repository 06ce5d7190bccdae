// SPDX-License-Identifier: Apache-2.0

//! Driver-facing kernel API and the cooperative executor.
//!
//! Driver entry points are futures. The executor polls every live task once
//! per round in a fixed order (interrupt handlers first, then everything else
//! in spawn order). Tasks suspend only in `wait_event`, `delay` with delay
//! reduction off, and `yield_now`. When a whole round makes no progress the
//! clock jumps to the next timed event; if there is none the iteration is
//! deadlocked.

use std::cell::{Cell, RefCell, RefMut};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::detect::DetectorEvent;
use crate::devices::IoKind;
use crate::engine::coverage::Site;

use super::addr::GuestAddress;
use super::alloc::{AllocError, FreeError};
use super::waiters::TaskId;
use super::{AccessKind, Fault, Guest, IDLE_INJECTION_LIMIT, KResult};

pub type LocalFuture<T> = Pin<Box<dyn Future<Output = T>>>;
/// Boxed driver entry point.
pub type Task<T> = LocalFuture<KResult<T>>;

/// Returned by `alloc(0)`, mirroring the kernel's zero-size sentinel.
pub const ZERO_SIZE_PTR: GuestAddress = GuestAddress(0x10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitOutcome {
    Woken,
    TimedOut,
}

struct TaskSlot {
    id: TaskId,
    irq_line: Option<u32>,
    fut: LocalFuture<()>,
}

struct Delayed {
    ready_at: u64,
    slot: TaskSlot,
}

#[derive(Default)]
struct Sched {
    current: Option<TaskId>,
    next_id: u32,
    spawned: Vec<TaskSlot>,
    delayed: Vec<Delayed>,
    progress: bool,
}

struct Inner {
    guest: RefCell<Guest>,
    sched: RefCell<Sched>,
}

/// Cheap handle to the per-iteration guest. Clones share state.
#[derive(Clone)]
pub struct Kernel(Rc<Inner>);

/// One-shot-per-signal completion (counting semaphore semantics).
#[derive(Clone, Default, Debug)]
pub struct Completion(Rc<Cell<u32>>);

impl Completion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn complete(&self) {
        self.0.set(self.0.get().saturating_add(1));
    }

    pub fn done(&self) -> bool {
        self.0.get() > 0
    }

    pub fn reinit(&self) {
        self.0.set(0);
    }

    fn consume(&self) {
        self.0.set(self.0.get().saturating_sub(1));
    }
}

fn fault_from_free(k: &mut Guest, e: FreeError, site: Site) -> Fault {
    match e {
        FreeError::DoubleFree(p) => {
            k.warn(DetectorEvent::DoubleFree, site, format!("double free of {p}"));
            Fault::Violation
        }
        FreeError::InvalidFree(p) => {
            k.warn(
                DetectorEvent::InvalidFree,
                site,
                format!("free of {p}, which is not an allocation"),
            );
            Fault::Violation
        }
    }
}

impl Kernel {
    pub fn new(guest: Guest) -> Self {
        Kernel(Rc::new(Inner {
            guest: RefCell::new(guest),
            sched: RefCell::new(Sched::default()),
        }))
    }

    /// Direct access to guest state. Must not be held across an await.
    pub fn guest(&self) -> RefMut<'_, Guest> {
        self.0.guest.borrow_mut()
    }

    fn mark_progress(&self) {
        self.0.sched.borrow_mut().progress = true;
    }

    fn current_task(&self) -> TaskId {
        self.0.sched.borrow().current.unwrap_or(TaskId(u32::MAX))
    }

    fn new_task_id(&self) -> TaskId {
        let mut s = self.0.sched.borrow_mut();
        let id = TaskId(s.next_id);
        s.next_id += 1;
        id
    }

    pub fn aborted(&self) -> Option<Fault> {
        self.0.guest.borrow().abort
    }

    // ---- coverage, stream, diagnostics ----

    pub fn cover(&self, site: Site) {
        self.guest().cover(site);
    }

    /// Raw stream bytes for harness decisions.
    pub fn stream_bytes(&self, n: usize) -> KResult<Vec<u8>> {
        let mut g = self.guest();
        g.op()?;
        Ok(g.stream.next_bytes(n))
    }

    pub fn stream_u8(&self) -> KResult<u8> {
        let mut g = self.guest();
        g.op()?;
        Ok(g.stream.next_u8())
    }

    /// Guest `BUG()`: ends the iteration.
    pub fn bug(&self, site: Site, what: &str) -> Fault {
        self.guest()
            .fail(DetectorEvent::GuestBug, site, format!("BUG: {what}"))
    }

    /// Integer division that traps on a zero divisor.
    pub fn divide(&self, a: u64, b: u64, site: Site) -> KResult<u64> {
        let mut g = self.guest();
        g.op()?;
        if b == 0 {
            return Err(g.fail(
                DetectorEvent::DivideByZero,
                site,
                format!("division of {a} by zero"),
            ));
        }
        Ok(a / b)
    }

    // ---- private memory ----

    pub fn alloc(&self, size: u64, site: Site) -> KResult<GuestAddress> {
        let mut g = self.guest();
        g.op()?;
        if size == 0 {
            return Ok(ZERO_SIZE_PTR);
        }
        match g.slab.galloc(size, site.0) {
            Ok(p) => Ok(p),
            Err(AllocError::ZeroSize) => Ok(ZERO_SIZE_PTR),
            Err(e @ AllocError::CapExceeded { .. }) => {
                Err(g.fail(DetectorEvent::AllocationCapExceeded, site, e.to_string()))
            }
        }
    }

    /// Frees an allocation. Double and invalid frees are reported without
    /// ending the iteration.
    pub fn free(&self, ptr: GuestAddress, site: Site) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        if ptr == GuestAddress::NULL || ptr == ZERO_SIZE_PTR {
            return Ok(());
        }
        if let Err(e) = g.slab.gfree(ptr) {
            let _ = fault_from_free(&mut g, e, site);
        }
        Ok(())
    }

    pub fn read(&self, addr: GuestAddress, len: usize, site: Site) -> KResult<Vec<u8>> {
        let mut g = self.guest();
        g.op()?;
        if let Err((event, detail)) = g.access_check(addr.0, len as u64, AccessKind::Read) {
            return Err(g.fail(event, site, detail));
        }
        Ok(g.mem_read(addr.0, len))
    }

    pub fn write(&self, addr: GuestAddress, data: &[u8], site: Site) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        if let Err((event, detail)) = g.access_check(addr.0, data.len() as u64, AccessKind::Write)
        {
            return Err(g.fail(event, site, detail));
        }
        g.mem_write(addr.0, data, site);
        Ok(())
    }

    pub fn read_le(&self, addr: GuestAddress, width: usize, site: Site) -> KResult<u64> {
        let b = self.read(addr, width, site)?;
        let mut w = [0u8; 8];
        w[..width].copy_from_slice(&b);
        Ok(u64::from_le_bytes(w))
    }

    pub fn read_u16(&self, addr: GuestAddress, site: Site) -> KResult<u16> {
        Ok(self.read_le(addr, 2, site)? as u16)
    }

    pub fn read_u32(&self, addr: GuestAddress, site: Site) -> KResult<u32> {
        Ok(self.read_le(addr, 4, site)? as u32)
    }

    pub fn read_u64(&self, addr: GuestAddress, site: Site) -> KResult<u64> {
        self.read_le(addr, 8, site)
    }

    pub fn write_u16(&self, addr: GuestAddress, v: u16, site: Site) -> KResult<()> {
        self.write(addr, &v.to_le_bytes(), site)
    }

    pub fn write_u32(&self, addr: GuestAddress, v: u32, site: Site) -> KResult<()> {
        self.write(addr, &v.to_le_bytes(), site)
    }

    pub fn write_u64(&self, addr: GuestAddress, v: u64, site: Site) -> KResult<()> {
        self.write(addr, &v.to_le_bytes(), site)
    }

    // ---- device registers ----

    fn io_read(&self, kind: IoKind, region: u32, offset: u64, width: usize, site: Site) -> KResult<u64> {
        let mut g = self.guest();
        g.op()?;
        let Guest { device, stream, .. } = &mut *g;
        let Some(dev) = device.as_mut() else {
            return Err(g.env_fail("register access with no device bound"));
        };
        match dev.io_read(kind, region, offset, width, stream) {
            Ok(v) => Ok(v),
            Err(f) => Err(g.fail(DetectorEvent::UnmappedAccess, site, f.to_string())),
        }
    }

    fn io_write(
        &self,
        kind: IoKind,
        region: u32,
        offset: u64,
        width: usize,
        value: u64,
        site: Site,
    ) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        let Guest {
            device,
            stream,
            shared,
            irq,
            ..
        } = &mut *g;
        let Some(dev) = device.as_mut() else {
            return Err(g.env_fail("register access with no device bound"));
        };
        if let Err(f) = dev.io_write(kind, region, offset, width, value, shared, stream, irq) {
            return Err(g.fail(DetectorEvent::UnmappedAccess, site, f.to_string()));
        }
        if width == 8
            && let Some(v) = g.leak_scan(value, site)
        {
            g.violations.push(v);
        }
        Ok(())
    }

    pub fn mmio_read(&self, region: u32, offset: u64, width: usize, site: Site) -> KResult<u64> {
        self.io_read(IoKind::Mmio, region, offset, width, site)
    }

    pub fn mmio_write(&self, region: u32, offset: u64, width: usize, value: u64, site: Site) -> KResult<()> {
        self.io_write(IoKind::Mmio, region, offset, width, value, site)
    }

    pub fn pio_in(&self, region: u32, offset: u64, width: usize, site: Site) -> KResult<u64> {
        self.io_read(IoKind::Pio, region, offset, width, site)
    }

    pub fn pio_out(&self, region: u32, offset: u64, width: usize, value: u64, site: Site) -> KResult<()> {
        self.io_write(IoKind::Pio, region, offset, width, value, site)
    }

    // ---- interrupts ----

    /// Binds the driver's handler to `line`. Returns false for lines the
    /// device does not have.
    pub fn request_irq(&self, line: u32) -> KResult<bool> {
        let mut g = self.guest();
        g.op()?;
        Ok(g.irq.bind(line))
    }

    pub fn free_irq(&self, line: u32) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        g.irq.unbind(line);
        Ok(())
    }

    // ---- time ----

    pub fn now(&self) -> u64 {
        self.0.guest.borrow().clock.now()
    }

    /// With delay reduction every deadline counts as already passed.
    pub fn time_elapsed(&self, deadline: u64) -> bool {
        let g = self.0.guest.borrow();
        g.cfg.delay.reduction_enabled || g.clock.now() >= deadline
    }

    /// Busy-wait style delay. Elided entirely under delay reduction;
    /// otherwise advances virtual time by `ns` and yields once.
    pub async fn delay(&self, ns: u64) -> KResult<()> {
        let elided = {
            let mut g = self.guest();
            g.op()?;
            g.delays_issued += 1;
            g.delay_requested_ns = g.delay_requested_ns.saturating_add(ns);
            if g.cfg.delay.reduction_enabled {
                true
            } else {
                g.advance_clock_by(ns);
                g.delay_advanced_ns = g.delay_advanced_ns.saturating_add(ns);
                false
            }
        };
        if !elided {
            self.yield_now().await;
        }
        match self.aborted() {
            Some(f) => Err(f),
            None => Ok(()),
        }
    }

    pub fn yield_now(&self) -> YieldNow {
        YieldNow {
            k: self.clone(),
            yielded: false,
        }
    }

    /// Sleeps until `pred` holds or the timeout passes. Timeouts are honored
    /// even under delay reduction.
    pub fn wait_event<F>(
        &self,
        reason: &'static str,
        site: Site,
        timeout_ns: Option<u64>,
        pred: F,
    ) -> WaitEvent<F>
    where
        F: Fn() -> bool + Unpin,
    {
        WaitEvent {
            k: self.clone(),
            reason,
            site,
            timeout_ns,
            pred,
            registered: None,
            deadline: None,
        }
    }

    /// Waits for one signal of `c`, consuming it.
    pub async fn wait_for_completion(
        &self,
        c: &Completion,
        site: Site,
        timeout_ns: Option<u64>,
    ) -> KResult<WaitOutcome> {
        let probe = c.clone();
        let out = self
            .wait_event("completion", site, timeout_ns, move || probe.done())
            .await?;
        if out == WaitOutcome::Woken {
            c.consume();
        }
        Ok(out)
    }

    /// Starts `fut` as a new task at the next scheduling point.
    pub fn spawn(&self, fut: Task<()>) -> KResult<()> {
        self.guest().op()?;
        let id = self.new_task_id();
        let mut s = self.0.sched.borrow_mut();
        s.spawned.push(TaskSlot {
            id,
            irq_line: None,
            fut: Box::pin(async move {
                let _ = fut.await;
            }),
        });
        s.progress = true;
        Ok(())
    }

    /// Runs `fut` once `delay_ns` of virtual time has passed; under delay
    /// reduction the delay is zeroed.
    pub fn queue_delayed_work(&self, delay_ns: u64, fut: Task<()>) -> KResult<()> {
        let ready_at = {
            let mut g = self.guest();
            g.op()?;
            if g.cfg.delay.reduction_enabled {
                g.clock.now()
            } else {
                g.clock.now().saturating_add(delay_ns)
            }
        };
        let id = self.new_task_id();
        self.0.sched.borrow_mut().delayed.push(Delayed {
            ready_at,
            slot: TaskSlot {
                id,
                irq_line: None,
                fut: Box::pin(async move {
                    let _ = fut.await;
                }),
            },
        });
        Ok(())
    }

    // ---- executor ----

    /// Runs `root` to completion together with every task it spawns and
    /// every interrupt handler `irq` produces. Returns the root's result, or
    /// `None` if the iteration was cut short before it finished.
    pub fn run(&self, root: Task<()>, irq: &dyn Fn(Kernel, u32) -> Task<()>) -> Option<KResult<()>> {
        let result: Rc<Cell<Option<KResult<()>>>> = Rc::new(Cell::new(None));
        let out = result.clone();
        let mut tasks = vec![TaskSlot {
            id: self.new_task_id(),
            irq_line: None,
            fut: Box::pin(async move {
                out.set(Some(root.await));
            }),
        }];
        let mut irq_tasks: Vec<TaskSlot> = Vec::new();
        let mut cx = Context::from_waker(Waker::noop());
        let mut idle_injections = 0u32;

        loop {
            if self.aborted().is_some() {
                break;
            }
            let mut progress = self.admit(&mut tasks);

            let lines: Vec<u32> = {
                let mut g = self.guest();
                let n = g.irq.count();
                (0..n)
                    .filter(|l| {
                        g.irq.is_bound(*l)
                            && g.irq.is_pending(*l)
                            && !irq_tasks.iter().any(|t| t.irq_line == Some(*l))
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .filter(|l| g.irq.take(*l))
                    .collect()
            };
            for line in lines {
                let fut = irq(self.clone(), line);
                irq_tasks.push(TaskSlot {
                    id: self.new_task_id(),
                    irq_line: Some(line),
                    fut: Box::pin(async move {
                        let _ = fut.await;
                    }),
                });
                progress = true;
            }

            progress |= self.poll_list(&mut irq_tasks, &mut cx);
            if self.aborted().is_some() {
                break;
            }
            let main_progress = self.poll_list(&mut tasks, &mut cx);
            progress |= main_progress;
            if main_progress {
                idle_injections = 0;
            }
            if result_ready(&result) || self.aborted().is_some() {
                break;
            }
            if progress || !self.0.sched.borrow().spawned.is_empty() {
                continue;
            }
            if !self.quiescent(&mut idle_injections) {
                break;
            }
        }

        // Futures capture kernel handles; drop them while the kernel is
        // still intact so waiter deregistration runs.
        drop(irq_tasks);
        drop(tasks);
        let leftovers = {
            let mut s = self.0.sched.borrow_mut();
            (std::mem::take(&mut s.spawned), std::mem::take(&mut s.delayed))
        };
        drop(leftovers);
        result.take()
    }

    fn admit(&self, tasks: &mut Vec<TaskSlot>) -> bool {
        let now = self.now();
        let mut s = self.0.sched.borrow_mut();
        let mut admitted = !s.spawned.is_empty();
        tasks.append(&mut s.spawned);
        let mut i = 0;
        while i < s.delayed.len() {
            if s.delayed[i].ready_at <= now {
                tasks.push(s.delayed.remove(i).slot);
                admitted = true;
            } else {
                i += 1;
            }
        }
        admitted
    }

    fn poll_list(&self, list: &mut Vec<TaskSlot>, cx: &mut Context<'_>) -> bool {
        let mut progress = false;
        let mut i = 0;
        while i < list.len() {
            {
                let mut s = self.0.sched.borrow_mut();
                s.current = Some(list[i].id);
                s.progress = false;
            }
            let ready = list[i].fut.as_mut().poll(cx).is_ready();
            let mut s = self.0.sched.borrow_mut();
            s.current = None;
            progress |= s.progress || ready;
            drop(s);
            if ready {
                list.remove(i);
            } else {
                i += 1;
            }
            if self.aborted().is_some() {
                break;
            }
        }
        progress
    }

    /// Handles a round without progress. Returns false when the iteration
    /// must stop.
    fn quiescent(&self, idle_injections: &mut u32) -> bool {
        let next_delayed = self.0.sched.borrow().delayed.iter().map(|d| d.ready_at).min();
        let mut g = self.guest();
        let deadline = g.waiters.earliest_deadline();
        let injection = if g.waiters.is_empty() {
            None
        } else {
            g.injector.next_injection()
        };
        let timed = [deadline, next_delayed].into_iter().flatten().min();
        let next = match (timed, injection) {
            (Some(t), Some(i)) => Some(t.min(i)),
            (t, i) => t.or(i),
        };
        let Some(next) = next else {
            declare_deadlock(&mut g, "no pending event can wake a blocked task");
            return false;
        };
        if timed.is_none() {
            *idle_injections += 1;
            if *idle_injections > IDLE_INJECTION_LIMIT {
                declare_deadlock(&mut g, "blocked tasks ignore every injected interrupt");
                return false;
            }
        }
        let now = g.clock.now();
        g.advance_clock_to(next.max(now + 1));
        if g.elapsed_ns() > g.cfg.iteration_timeout_ns {
            g.timeout();
            return false;
        }
        true
    }
}

fn result_ready(r: &Rc<Cell<Option<KResult<()>>>>) -> bool {
    let v = r.take();
    let ready = v.is_some();
    r.set(v);
    ready
}

fn declare_deadlock(g: &mut Guest, why: &str) {
    let reasons: Vec<String> = g
        .waiters
        .iter()
        .map(|w| format!("{} in `{}`", w.task, w.reason))
        .collect();
    let site = g.first_waiter().map_or(Site::UNKNOWN, |w| w.site);
    let detail = format!("deadlock: {why}; waiting: {}", reasons.join(", "));
    g.violations.push(crate::detect::Violation {
        event: DetectorEvent::AllBlocked,
        site,
        detail,
        fatal: true,
    });
    g.abort.get_or_insert(Fault::Deadlock);
}

pub struct YieldNow {
    k: Kernel,
    yielded: bool,
}

impl Future for YieldNow {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<()> {
        if self.yielded {
            Poll::Ready(())
        } else {
            self.yielded = true;
            self.k.mark_progress();
            Poll::Pending
        }
    }
}

pub struct WaitEvent<F> {
    k: Kernel,
    reason: &'static str,
    site: Site,
    timeout_ns: Option<u64>,
    pred: F,
    registered: Option<TaskId>,
    deadline: Option<u64>,
}

impl<F> WaitEvent<F> {
    fn deregister(&mut self) {
        if let Some(t) = self.registered.take() {
            self.k.guest().waiters.deregister(t);
        }
    }
}

impl<F: Fn() -> bool + Unpin> Future for WaitEvent<F> {
    type Output = KResult<WaitOutcome>;

    fn poll(self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        if let Some(f) = this.k.aborted() {
            this.deregister();
            return Poll::Ready(Err(f));
        }
        if (this.pred)() {
            this.deregister();
            this.k.mark_progress();
            return Poll::Ready(Ok(WaitOutcome::Woken));
        }
        match this.registered {
            None => {
                let task = this.k.current_task();
                let mut g = this.k.guest();
                if let Err(f) = g.op() {
                    return Poll::Ready(Err(f));
                }
                let deadline = this.timeout_ns.map(|t| g.clock.now().saturating_add(t));
                if let Some(w) = g.waiters.register(task, this.reason, deadline, this.site) {
                    g.waiters.record_notification();
                    let Guest { injector, irq, .. } = &mut *g;
                    injector.on_waiter_registered(&w, irq);
                }
                drop(g);
                this.registered = Some(task);
                this.deadline = deadline;
                this.k.mark_progress();
                Poll::Pending
            }
            Some(_) => {
                if this.deadline.is_some_and(|d| this.k.now() >= d) {
                    this.deregister();
                    this.k.mark_progress();
                    Poll::Ready(Ok(WaitOutcome::TimedOut))
                } else {
                    Poll::Pending
                }
            }
        }
    }
}

impl<F> Drop for WaitEvent<F> {
    fn drop(&mut self) {
        if let Some(t) = self.registered.take()
            && let Ok(mut g) = self.k.0.guest.try_borrow_mut()
        {
            g.waiters.deregister(t);
        }
    }
}
