// SPDX-License-Identifier: Apache-2.0

//! e1000-style receive ring. The device reports the next completed
//! descriptor through the RDH register and the driver reads the descriptor
//! from its coherent ring.
//!
//! Seeded bug: the head index is used without a bounds check.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::dma::DmaDirection;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task, WaitOutcome};

use super::{Archetype, BugToggles, MatchRule, ModelDriver, ProbeStatus, pci_device};

const OWNER: u16 = 0x0104;
const SITE_COUNT: u16 = 22;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Pci {
    vendor: 0x8086,
    device: 0x100E,
}];

const REG_CTRL: u64 = 0x0000;
const REG_ICR: u64 = 0x00C0;
const REG_RDBAL: u64 = 0x2800;
const REG_RDLEN: u64 = 0x2808;
const REG_RDH: u64 = 0x2810;
const REG_RDT: u64 = 0x2818;

const RING: u64 = 8;
const DESC: u64 = 16;
const BUF: u64 = 2048;
const RX_TIMEOUT_NS: u64 = 1_000_000;

pub fn device() -> DeviceConfig {
    pci_device(0x8086, 0x100E, 0x20000)
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(RingIdx {
        bug: t.enabled(Archetype::UnvalidatedIndex),
        st: RefCell::new(None),
        rx_seen: Rc::new(Cell::new(false)),
    })
}

#[derive(Clone, Copy)]
struct Rx {
    ring: GuestAddress,
    bufs: [GuestAddress; RING as usize],
    dma: [GuestAddress; RING as usize],
}

struct RingIdx {
    bug: bool,
    st: RefCell<Option<Rx>>,
    rx_seen: Rc<Cell<bool>>,
}

impl RingIdx {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let ctrl = k.mmio_read(0, REG_CTRL, 4, s(0))?;
        k.cover(s(1 + (ctrl >> 31) as u16));
        let ring = k.dma_alloc_coherent(RING * DESC, s(3))?;
        let mut rx = Rx {
            ring,
            bufs: [GuestAddress::NULL; RING as usize],
            dma: [GuestAddress::NULL; RING as usize],
        };
        for i in 0..RING as usize {
            rx.bufs[i] = k.alloc(BUF, s(4))?;
            rx.dma[i] = k.dma_map_single(rx.bufs[i], BUF, DmaDirection::FromDevice, s(5))?;
            let d = ring.offset(DESC * i as u64);
            k.write_u64(d, rx.dma[i].0, s(6))?;
            k.write_u16(d.offset(8), BUF as u16, s(6))?;
        }
        *self.st.borrow_mut() = Some(rx);
        k.mmio_write(0, REG_RDBAL, 4, ring.0 & 0xffff_ffff, s(7))?;
        k.mmio_write(0, REG_RDLEN, 4, RING * DESC, s(7))?;
        k.mmio_write(0, REG_RDT, 4, RING - 1, s(7))?;
        k.request_irq(0)?;
        let seen = self.rx_seen.clone();
        match k
            .wait_event("rx", s(8), Some(RX_TIMEOUT_NS), move || seen.get())
            .await?
        {
            WaitOutcome::Woken => k.cover(s(9)),
            WaitOutcome::TimedOut => k.cover(s(10)),
        }
        Ok(ProbeStatus::Ok)
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let icr = k.mmio_read(0, REG_ICR, 4, s(11))?;
        self.rx_seen.set(true);
        let Some(rx) = *self.st.borrow() else {
            return Ok(());
        };
        if icr & 0x80 == 0 {
            k.cover(s(12));
            return Ok(());
        }
        let head = k.mmio_read(0, REG_RDH, 2, s(13))?;
        if !self.bug && head >= RING {
            k.cover(s(14));
            return Ok(());
        }
        let desc = k.read(rx.ring.offset(DESC * head), DESC as usize, s(15))?;
        let len = u16::from_le_bytes([desc[8], desc[9]]) as u64;
        let status = desc[12];
        if status & 1 == 0 {
            k.cover(s(16));
            return Ok(());
        }
        if len == 0 {
            k.cover(s(17));
            return Ok(());
        }
        let len = len.min(BUF);
        let i = head as usize;
        k.dma_sync_for_cpu(rx.dma[i], len, s(18))?;
        let eth = k.read(rx.bufs[i], 2, s(19))?;
        k.cover(s(20 + (eth[0] & 1) as u16));
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let Some(rx) = self.st.borrow_mut().take() else {
            return Ok(());
        };
        k.free_irq(0)?;
        k.mmio_write(0, REG_CTRL, 4, 1 << 26, s(7))?;
        for i in 0..RING as usize {
            k.dma_unmap_single(rx.dma[i], BUF, DmaDirection::FromDevice, s(5))?;
            k.free(rx.bufs[i], s(4))?;
        }
        Ok(())
    }
}

impl ModelDriver for RingIdx {
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
