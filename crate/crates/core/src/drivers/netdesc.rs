// SPDX-License-Identifier: Apache-2.0

//! Paravirtual NIC with a receive ring in coherent memory. Each ring entry
//! names the receive buffer the device should complete.
//!
//! Seeded bug: ring entries hold raw buffer pointers, so the device can read
//! them and, on completion, hand back any value for the driver to
//! dereference. The hardened variant stores ring indices instead.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task, WaitOutcome};

use super::{Archetype, BugToggles, ENODEV, MatchRule, ModelDriver, ProbeStatus, pci_device};

const OWNER: u16 = 0x0102;
const SITE_COUNT: u16 = 20;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Pci {
    vendor: 0x15AD,
    device: 0x07B0,
}];

const REG_VERSION: u64 = 0x00;
const REG_RXRING_LO: u64 = 0x10;
const REG_RXRING_HI: u64 = 0x14;
const REG_ICR: u64 = 0x20;
const REG_CMD: u64 = 0x28;
const CMD_ACTIVATE: u64 = 0xbaba_0000;

const RING: u64 = 4;
const ENTRY: u64 = 16;
const BUF_LEN: u64 = 1536;
const LINK_TIMEOUT_NS: u64 = 1_000_000;

pub fn device() -> DeviceConfig {
    pci_device(0x15AD, 0x07B0, 0x1000)
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(NetDesc {
        bug: t.enabled(Archetype::SharedPointerDeref),
        st: RefCell::new(None),
        link_up: Rc::new(Cell::new(false)),
    })
}

#[derive(Clone, Copy)]
struct Adapter {
    adapter: GuestAddress,
    ring: GuestAddress,
    bufs: [GuestAddress; RING as usize],
}

struct NetDesc {
    bug: bool,
    st: RefCell<Option<Adapter>>,
    link_up: Rc<Cell<bool>>,
}

impl NetDesc {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let ver = k.mmio_read(0, REG_VERSION, 4, s(0))?;
        if ver & 0xff == 0 {
            k.cover(s(1));
            return Ok(ProbeStatus::Failed(ENODEV));
        }
        k.cover(s(2 + (ver & 1) as u16));
        let adapter = k.alloc(256, s(4))?;
        let ring = k.dma_alloc_coherent(RING * ENTRY, s(5))?;
        let mut bufs = [GuestAddress::NULL; RING as usize];
        for (i, b) in bufs.iter_mut().enumerate() {
            *b = k.alloc(BUF_LEN, s(4))?;
            k.write_u64(adapter.offset(8 * i as u64), b.0, s(6))?;
            let entry = ring.offset(ENTRY * i as u64);
            if self.bug {
                k.write_u64(entry, b.0, s(7))?;
            } else {
                k.write_u64(entry, i as u64, s(8))?;
            }
            k.write_u32(entry.offset(8), BUF_LEN as u32, s(8))?;
        }
        k.mmio_write(0, REG_RXRING_LO, 4, ring.0 & 0xffff_ffff, s(9))?;
        k.mmio_write(0, REG_RXRING_HI, 4, ring.0 >> 32, s(9))?;
        *self.st.borrow_mut() = Some(Adapter {
            adapter,
            ring,
            bufs,
        });
        k.request_irq(0)?;
        k.mmio_write(0, REG_CMD, 4, CMD_ACTIVATE, s(9))?;
        let link = self.link_up.clone();
        match k
            .wait_event("link", s(10), Some(LINK_TIMEOUT_NS), move || link.get())
            .await?
        {
            WaitOutcome::Woken => k.cover(s(11)),
            WaitOutcome::TimedOut => k.cover(s(12)),
        }
        Ok(ProbeStatus::Ok)
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let icr = k.mmio_read(0, REG_ICR, 4, s(13))?;
        self.link_up.set(true);
        let Some(a) = *self.st.borrow() else {
            return Ok(());
        };
        if icr & 1 == 0 {
            k.cover(s(14));
            return Ok(());
        }
        let idx = (icr >> 8) % RING;
        let cookie = k.read_u64(a.ring.offset(ENTRY * idx), s(15))?;
        let buf = if self.bug {
            GuestAddress(cookie)
        } else {
            if cookie >= RING {
                k.cover(s(16));
                return Ok(());
            }
            GuestAddress(k.read_u64(a.adapter.offset(8 * cookie), s(17))?)
        };
        let hdr = k.read(buf, 16, s(18))?;
        k.cover(s(19 - (hdr[0] & 1) as u16));
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let Some(a) = self.st.borrow_mut().take() else {
            return Ok(());
        };
        k.free_irq(0)?;
        k.mmio_write(0, REG_CMD, 4, 0, s(9))?;
        for b in a.bufs {
            k.free(b, s(4))?;
        }
        k.free(a.adapter, s(4))?;
        Ok(())
    }
}

impl ModelDriver for NetDesc {
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
