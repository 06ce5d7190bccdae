// SPDX-License-Identifier: Apache-2.0

//! RTL8139-style NIC that keeps an average packet size from the device's
//! statistics counters.
//!
//! Seeded bug: the packet counter is used as a divisor without checking for
//! zero.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task, WaitOutcome};

use super::{Archetype, BugToggles, MatchRule, ModelDriver, ProbeStatus, pci_device};

const OWNER: u16 = 0x0108;
const SITE_COUNT: u16 = 15;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Pci {
    vendor: 0x10EC,
    device: 0x8139,
}];

const REG_CMD: u64 = 0x37;
const REG_ISR: u64 = 0x3E;
const REG_RX_BYTES: u64 = 0x60;
const REG_RX_PKTS: u64 = 0x64;
const LINK_TIMEOUT_NS: u64 = 1_000_000;

pub fn device() -> DeviceConfig {
    pci_device(0x10EC, 0x8139, 0x100)
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(DivDev {
        bug: t.enabled(Archetype::DivByZero),
        stats: RefCell::new(None),
        irqs: Rc::new(Cell::new(0)),
    })
}

struct DivDev {
    bug: bool,
    stats: RefCell<Option<GuestAddress>>,
    irqs: Rc<Cell<u32>>,
}

impl DivDev {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let stats = k.alloc(64, s(0))?;
        *self.stats.borrow_mut() = Some(stats);
        k.request_irq(0)?;
        k.mmio_write(0, REG_CMD, 1, 0x0c, s(1))?;
        let irqs = self.irqs.clone();
        match k
            .wait_event("link", s(2), Some(LINK_TIMEOUT_NS), move || irqs.get() > 0)
            .await?
        {
            WaitOutcome::Woken => k.cover(s(3)),
            WaitOutcome::TimedOut => k.cover(s(4)),
        }
        Ok(ProbeStatus::Ok)
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        self.irqs.set(self.irqs.get() + 1);
        let Some(stats) = *self.stats.borrow() else {
            return Ok(());
        };
        let isr = k.mmio_read(0, REG_ISR, 2, s(5))?;
        if isr & 1 == 0 {
            k.cover(s(6));
            return Ok(());
        }
        let bytes = k.mmio_read(0, REG_RX_BYTES, 4, s(7))?;
        let pkts = k.mmio_read(0, REG_RX_PKTS, 2, s(8))?;
        if pkts < 0x100 {
            // counter recently wrapped or link just came up
            k.cover(s(14));
        }
        if !self.bug && pkts == 0 {
            k.cover(s(9));
            return Ok(());
        }
        let avg = k.divide(bytes, pkts, s(10))?;
        k.cover(s(11 + (avg > 1514) as u16));
        k.write_u64(stats, avg, s(12))?;
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let Some(stats) = self.stats.borrow_mut().take() else {
            return Ok(());
        };
        k.free_irq(0)?;
        k.free(stats, s(13))?;
        Ok(())
    }
}

impl ModelDriver for DivDev {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, k: Kernel) -> Task<()> {
        Box::pin(self.remove_inner(k))
    }

    fn irq_handler(self: Rc<Self>, k: Kernel, _line: u32) -> Task<()> {
        Box::pin(self.irq_inner(k))
    }

    fn sites(&self) -> Vec<Site> {
        (0..SITE_COUNT).map(s).collect()
    }
}
