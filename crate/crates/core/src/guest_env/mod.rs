// SPDX-License-Identifier: Apache-2.0

//! Model guest kernel: split private/shared memory, the poisoning slab
//! allocator, virtual time, the waiter registry and a cooperative executor
//! for driver tasks.

pub mod addr;
pub mod alloc;
pub mod clock;
mod kernel;
pub mod shared;
pub mod waiters;

use std::time::{Duration, Instant};

use crate::detect::{DetectorEvent, Violation};
use crate::devices::irq::IrqLines;
use crate::devices::{Device, SimMode};
use crate::dma::{DmaState, SWIOTLB_SIZE};
use crate::engine::coverage::{CoverageMap, Site};
use crate::engine::stream::InputStream;

pub use kernel::{Completion, Kernel, LocalFuture, Task, WaitOutcome};

use addr::{AddressSpace, space_of, in_private_range};
use alloc::{SlabAllocator, Zone, DEFAULT_ALLOC_CAP};
use clock::{DelayPolicy, VirtualClock};
use shared::{RegionKind, SharedMemory};
use waiters::{Waiter, WaiterRegistry};

/// Modeled CPU cost of one environment operation.
pub const OP_COST_NS: u64 = 1_000;
/// Fixed per-iteration cost of loading and unloading the driver, in ops.
pub const ITERATION_OVERHEAD_OPS: u64 = 16;
/// Consecutive interrupt-only wakeups, with no finite wait pending, after
/// which the blocked tasks are declared deadlocked.
pub const IDLE_INJECTION_LIMIT: u32 = 1024;
const HOST_CHECK_INTERVAL: u64 = 4096;

/// Receives scheduler events and decides when device interrupts fire.
pub trait InterruptSource {
    fn on_waiter_registered(&mut self, waiter: &Waiter, irq: &mut IrqLines);
    fn on_time_advance(&mut self, now: u64, irq: &mut IrqLines);
    /// Virtual time of the next self-scheduled injection, if any.
    fn next_injection(&self) -> Option<u64>;
}

/// Never injects.
#[derive(Debug, Default)]
pub struct NoInterrupts;

impl InterruptSource for NoInterrupts {
    fn on_waiter_registered(&mut self, _: &Waiter, _: &mut IrqLines) {}
    fn on_time_advance(&mut self, _: u64, _: &mut IrqLines) {}
    fn next_injection(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// Why the current iteration stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// A fatal violation was recorded.
    Violation,
    /// The iteration budget ran out.
    Timeout,
    /// Every task blocked with nothing left to wake it.
    Deadlock,
    /// The environment itself failed (not a driver bug).
    Env,
}

pub type KResult<T> = Result<T, Fault>;

#[derive(Debug, Clone)]
pub struct GuestConfig {
    pub delay: DelayPolicy,
    pub alloc_cap: u64,
    /// Budget in modeled nanoseconds.
    pub iteration_timeout_ns: u64,
    pub op_cost_ns: u64,
    /// Host-side guard for runaway iterations.
    pub host_timeout: Option<Duration>,
}

impl Default for GuestConfig {
    fn default() -> Self {
        Self {
            delay: DelayPolicy::default(),
            alloc_cap: DEFAULT_ALLOC_CAP,
            iteration_timeout_ns: 5_000_000_000,
            op_cost_ns: OP_COST_NS,
            host_timeout: Some(Duration::from_secs(6)),
        }
    }
}

pub struct Guest {
    pub cfg: GuestConfig,
    pub slab: SlabAllocator,
    pub shared: SharedMemory,
    pub clock: VirtualClock,
    pub waiters: WaiterRegistry,
    pub coverage: CoverageMap,
    pub stream: InputStream,
    pub dma: DmaState,
    pub device: Option<Device>,
    pub irq: IrqLines,
    pub injector: Box<dyn InterruptSource>,
    pub violations: Vec<Violation>,
    pub abort: Option<Fault>,
    pub env_error: Option<String>,
    pub ops: u64,
    /// Delays issued by the driver, and how much virtual time they consumed.
    pub delays_issued: u64,
    pub delay_requested_ns: u64,
    pub delay_advanced_ns: u64,
    host_start: Instant,
}

impl Guest {
    pub fn new(
        cfg: GuestConfig,
        stream: InputStream,
        device: Option<Device>,
        injector: Box<dyn InterruptSource>,
    ) -> Self {
        let dma = DmaState::default();
        let mut shared = SharedMemory::default();
        shared.register(dma.pool.base(), SWIOTLB_SIZE, RegionKind::SwiotlbPool);
        let irq = IrqLines::new(device.as_ref().map_or(0, |d| d.irq_lines()));
        Self {
            slab: SlabAllocator::new(cfg.alloc_cap),
            cfg,
            shared,
            clock: VirtualClock::default(),
            waiters: WaiterRegistry::default(),
            coverage: CoverageMap::new(),
            stream,
            dma,
            device,
            irq,
            injector,
            violations: Vec::new(),
            abort: None,
            env_error: None,
            ops: 0,
            delays_issued: 0,
            delay_requested_ns: 0,
            delay_advanced_ns: 0,
            host_start: Instant::now(),
        }
    }

    /// Device-data injection happens at every coherent read and sync point
    /// unless an emulated device owns the shared state.
    pub fn injection_mode(&self) -> bool {
        self.device
            .as_ref()
            .is_none_or(|d| d.mode() == SimMode::Passthrough)
    }

    /// Modeled time spent in this iteration.
    pub fn elapsed_ns(&self) -> u64 {
        self.clock
            .now()
            .saturating_add((self.ops + ITERATION_OVERHEAD_OPS).saturating_mul(self.cfg.op_cost_ns))
    }

    /// Accounts one environment operation and enforces the budgets.
    pub fn op(&mut self) -> KResult<()> {
        if let Some(f) = self.abort {
            return Err(f);
        }
        self.ops += 1;
        if self.elapsed_ns() > self.cfg.iteration_timeout_ns {
            return Err(self.timeout());
        }
        if self.ops % HOST_CHECK_INTERVAL == 0
            && let Some(limit) = self.cfg.host_timeout
            && self.host_start.elapsed() > limit
        {
            return Err(self.timeout());
        }
        Ok(())
    }

    pub fn timeout(&mut self) -> Fault {
        self.abort.get_or_insert(Fault::Timeout);
        Fault::Timeout
    }

    pub fn cover(&mut self, site: Site) {
        self.coverage.hit(site);
    }

    /// Records a violation that ends the iteration.
    pub fn fail(&mut self, event: DetectorEvent, site: Site, detail: impl Into<String>) -> Fault {
        self.violations.push(Violation {
            event,
            site,
            detail: detail.into(),
            fatal: true,
        });
        self.abort.get_or_insert(Fault::Violation);
        Fault::Violation
    }

    /// Records a violation; execution continues.
    pub fn warn(&mut self, event: DetectorEvent, site: Site, detail: impl Into<String>) {
        self.violations.push(Violation {
            event,
            site,
            detail: detail.into(),
            fatal: false,
        });
    }

    pub fn env_fail(&mut self, msg: impl Into<String>) -> Fault {
        let msg = msg.into();
        log::debug!("environment failure: {msg}");
        self.env_error.get_or_insert(msg);
        self.abort.get_or_insert(Fault::Env);
        Fault::Env
    }

    pub fn advance_clock_to(&mut self, t: u64) {
        self.clock.advance_to(t);
        let Guest {
            injector,
            irq,
            clock,
            ..
        } = self;
        injector.on_time_advance(clock.now(), irq);
    }

    pub fn advance_clock_by(&mut self, ns: u64) {
        let t = self.clock.now().saturating_add(ns);
        self.advance_clock_to(t);
    }

    /// Verdict for touching `[addr, addr+len)`.
    pub fn access_check(
        &self,
        addr: u64,
        len: u64,
        kind: AccessKind,
    ) -> Result<(), (DetectorEvent, String)> {
        if len == 0 {
            return Ok(());
        }
        let verb = match kind {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        };
        let unmapped = |at: u64| {
            (
                DetectorEvent::UnmappedAccess,
                format!("{len}-byte {verb} at {addr:#x} hits unmapped memory at {at:#x}"),
            )
        };
        let Some(last) = addr.checked_add(len - 1) else {
            return Err(unmapped(addr));
        };
        match (space_of(addr), space_of(last)) {
            (Some(AddressSpace::Private), Some(AddressSpace::Private)) => {
                match self.slab.first_fault(addr, len) {
                    None => Ok(()),
                    Some((at, Zone::Redzone)) => Err((
                        DetectorEvent::RedzoneAccess,
                        format!("{len}-byte {verb} at {addr:#x} reaches redzone at {at:#x}"),
                    )),
                    Some((at, Zone::Freed)) => Err((
                        DetectorEvent::UseAfterFree,
                        format!("{len}-byte {verb} at {addr:#x} touches freed memory at {at:#x}"),
                    )),
                    Some((at, _)) => Err(unmapped(at)),
                }
            }
            (Some(AddressSpace::Shared), Some(AddressSpace::Shared)) => {
                match self.shared.registered_run_end(addr) {
                    Some(end) if end > last => Ok(()),
                    Some(end) => Err(unmapped(end)),
                    None => Err(unmapped(addr)),
                }
            }
            _ => Err(unmapped(addr)),
        }
    }

    /// Validated read; coherent buffers inject fresh device data in
    /// passthrough mode.
    pub fn mem_read(&mut self, addr: u64, len: usize) -> Vec<u8> {
        match space_of(addr) {
            Some(AddressSpace::Private) => self.slab.read(addr, len),
            _ => {
                let coherent = self
                    .shared
                    .region_at(addr)
                    .is_some_and(|r| r.kind == RegionKind::Coherent);
                if coherent && self.injection_mode() {
                    let bytes = self.stream.next_bytes(len);
                    self.dma.injected_bytes += len as u64;
                    self.shared.write(addr, &bytes);
                    bytes
                } else {
                    self.shared.read(addr, len)
                }
            }
        }
    }

    /// Validated write; writes to shared memory are leak-scanned.
    pub fn mem_write(&mut self, addr: u64, data: &[u8], site: Site) {
        match space_of(addr) {
            Some(AddressSpace::Private) => self.slab.write(addr, data),
            _ => {
                self.shared.write(addr, data);
                self.scan_shared(addr, data.len() as u64, site);
            }
        }
    }

    /// Leak-scans every aligned 8-byte word overlapping `[addr, addr+len)`.
    pub fn scan_shared(&mut self, addr: u64, len: u64, site: Site) {
        if len == 0 {
            return;
        }
        let mut w = addr & !7;
        while w < addr + len {
            let word = u64::from_le_bytes(self.shared.read(w, 8).try_into().unwrap());
            if let Some(v) = self.leak_scan(word, site) {
                self.violations.push(v);
            }
            w += 8;
        }
    }

    /// Warning iff `value` is a private-range address.
    pub fn leak_scan(&self, value: u64, site: Site) -> Option<Violation> {
        if !in_private_range(value) {
            return None;
        }
        let detail = match self.slab.containing(value) {
            Some(a) => format!(
                "kernel pointer {value:#x} into allocation {} ({} bytes) exposed to the device",
                a.base, a.size
            ),
            None => format!("kernel address {value:#x} exposed to the device"),
        };
        Some(Violation {
            event: DetectorEvent::KernelPointerLeak,
            site,
            detail,
            fatal: false,
        })
    }

    pub fn first_waiter(&self) -> Option<&Waiter> {
        self.waiters.iter().next()
    }
}
