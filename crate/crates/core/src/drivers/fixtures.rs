// SPDX-License-Identifier: Apache-2.0

//! Experiment fixtures: drivers built to exercise one engine or harness
//! feature rather than to host a seeded bug.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task, WaitOutcome};
use crate::harness::HarnessKind;

use super::{
    BugToggles, CatalogEntry, ENODEV, ETIMEDOUT, MatchRule, ModelDriver, OP_ERROR, ProbeStatus,
    pci_device, platform_device,
};

/// Value the magic-gate fixture compares its first four register reads
/// against, one byte per comparison.
pub const MAGIC: [u8; 4] = *b"VIA!";

/// Interrupt-gated initialization stages of the rocker-gate fixture.
pub const ROCKER_STAGES: u32 = 3;

/// Virtual-time window in which each rocker-gate stage expects its
/// interrupt.
pub const ROCKER_WINDOW_NS: u64 = 500;

/// Simulated delay the delay-heavy fixture issues per entry point.
pub const HEAVY_DELAY_NS: u64 = 1_000_000;

const ROCKER_CFG_MAGIC: u64 = 0xA5;

pub(super) fn entries() -> Vec<CatalogEntry> {
    let fixture = |name, matches, device, harness, factory| CatalogEntry {
        name,
        archetype: None,
        hardened: false,
        matches,
        device,
        harness,
        factory,
    };
    vec![
        fixture(
            "magic-gate",
            MAGIC_MATCHES,
            magic_device,
            HarnessKind::Default,
            magic_create,
        ),
        fixture(
            "delay-heavy",
            DELAY_MATCHES,
            delay_device,
            HarnessKind::Extended { ops: 4 },
            delay_create,
        ),
        fixture(
            "rocker-gate",
            ROCKER_MATCHES,
            rocker_device,
            HarnessKind::Default,
            rocker_create,
        ),
        fixture(
            "nop",
            NOP_MATCHES,
            nop_device,
            HarnessKind::Default,
            nop_create,
        ),
    ]
}

fn no_irq(_k: Kernel) -> Task<()> {
    Box::pin(async { Ok(()) })
}

// ---- magic-gate ----

const MAGIC_OWNER: u16 = 0x0201;
const MAGIC_MATCHES: &[MatchRule] = &[MatchRule::Platform("magic-gate")];

const fn magic_site(n: u16) -> Site {
    Site::new(MAGIC_OWNER, n)
}

fn magic_device() -> DeviceConfig {
    platform_device("magic-gate")
}

fn magic_create(_t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(MagicGate)
}

struct MagicGate;

impl MagicGate {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        for (i, want) in MAGIC.iter().enumerate() {
            let i = i as u16;
            let b = k.mmio_read(0, i as u64, 1, magic_site(2 * i))?;
            if b as u8 != *want {
                return Ok(ProbeStatus::Failed(ENODEV));
            }
            k.cover(magic_site(2 * i + 1));
        }
        Err(k.bug(magic_site(8), "magic gate passed"))
    }
}

impl ModelDriver for MagicGate {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, _k: Kernel) -> Task<()> {
        Box::pin(async { Ok(()) })
    }

    fn irq_handler(self: Rc<Self>, k: Kernel, _line: u32) -> Task<()> {
        no_irq(k)
    }

    fn sites(&self) -> Vec<Site> {
        (0..9).map(magic_site).collect()
    }
}

// ---- delay-heavy ----

const DELAY_OWNER: u16 = 0x0202;
const DELAY_MATCHES: &[MatchRule] = &[MatchRule::Platform("delay-heavy")];

const fn delay_site(n: u16) -> Site {
    Site::new(DELAY_OWNER, n)
}

fn delay_device() -> DeviceConfig {
    platform_device("delay-heavy")
}

fn delay_create(_t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(DelayHeavy {
        probed: Cell::new(false),
    })
}

struct DelayHeavy {
    probed: Cell<bool>,
}

impl DelayHeavy {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        k.mmio_write(0, 0x00, 4, 1, delay_site(0))?;
        k.delay(HEAVY_DELAY_NS).await?;
        let st = k.mmio_read(0, 0x04, 1, delay_site(1))?;
        k.cover(delay_site(2 + (st & 1) as u16));
        self.probed.set(true);
        Ok(ProbeStatus::Ok)
    }

    async fn op_inner(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> KResult<Vec<u8>> {
        if !self.probed.get() {
            return Ok(OP_ERROR.to_vec());
        }
        k.mmio_write(0, 0x08, 4, op as u64, delay_site(4))?;
        k.delay(HEAVY_DELAY_NS).await?;
        let st = k.mmio_read(0, 0x0c, 1, delay_site(5))?;
        k.cover(delay_site(6 + (st % 4) as u16));
        Ok(payload)
    }
}

impl ModelDriver for DelayHeavy {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, _k: Kernel) -> Task<()> {
        self.probed.set(false);
        Box::pin(async { Ok(()) })
    }

    fn irq_handler(self: Rc<Self>, k: Kernel, _line: u32) -> Task<()> {
        no_irq(k)
    }

    fn resource_op(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> Task<Vec<u8>> {
        Box::pin(self.op_inner(k, op, payload))
    }

    fn sites(&self) -> Vec<Site> {
        (0..10).map(delay_site).collect()
    }
}

// ---- rocker-gate ----

const ROCKER_OWNER: u16 = 0x0203;
const ROCKER_MATCHES: &[MatchRule] = &[MatchRule::Pci {
    vendor: 0x1B36,
    device: 0x0006,
}];

const fn rocker_site(n: u16) -> Site {
    Site::new(ROCKER_OWNER, n)
}

fn rocker_device() -> DeviceConfig {
    pci_device(0x1B36, 0x0006, 0x1000)
}

fn rocker_create(_t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(RockerGate {
        irqs: Rc::new(Cell::new(0)),
        state: RefCell::new(None),
    })
}

struct RockerGate {
    irqs: Rc<Cell<u32>>,
    state: RefCell<Option<GuestAddress>>,
}

impl RockerGate {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let st = k.alloc(64, rocker_site(0))?;
        k.request_irq(0)?;
        for stage in 0..ROCKER_STAGES as u16 {
            let before = self.irqs.get();
            k.mmio_write(0, 0x10, 4, stage as u64, rocker_site(1))?;
            let irqs = self.irqs.clone();
            let out = k
                .wait_event(
                    "rocker cmd",
                    rocker_site(2 + 2 * stage),
                    Some(ROCKER_WINDOW_NS),
                    move || irqs.get() > before,
                )
                .await?;
            if matches!(out, WaitOutcome::TimedOut) {
                k.free_irq(0)?;
                k.free(st, rocker_site(0))?;
                return Ok(ProbeStatus::Failed(ETIMEDOUT));
            }
            k.cover(rocker_site(3 + 2 * stage));
        }
        *self.state.borrow_mut() = Some(st);
        let cfg = k.mmio_read(0, 0x20, 1, rocker_site(8))?;
        if cfg == ROCKER_CFG_MAGIC {
            k.cover(rocker_site(9));
            k.write(st.offset(64), &[1], rocker_site(10))?;
        }
        Ok(ProbeStatus::Ok)
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let isr = k.mmio_read(0, 0x30, 4, rocker_site(11))?;
        k.cover(rocker_site(12 + (isr & 1) as u16));
        self.irqs.set(self.irqs.get() + 1);
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let Some(st) = self.state.borrow_mut().take() else {
            return Ok(());
        };
        k.free_irq(0)?;
        k.free(st, rocker_site(0))?;
        Ok(())
    }
}

impl ModelDriver for RockerGate {
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
        (0..14).map(rocker_site).collect()
    }
}

// ---- nop ----

const NOP_MATCHES: &[MatchRule] = &[MatchRule::Platform("nop")];

fn nop_device() -> DeviceConfig {
    platform_device("nop")
}

fn nop_create(_t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(Nop)
}

struct Nop;

impl ModelDriver for Nop {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(async move {
            k.cover(Site::new(0x0204, 0));
            Ok(ProbeStatus::Ok)
        })
    }

    fn remove(self: Rc<Self>, _k: Kernel) -> Task<()> {
        Box::pin(async { Ok(()) })
    }

    fn irq_handler(self: Rc<Self>, k: Kernel, _line: u32) -> Task<()> {
        no_irq(k)
    }

    fn sites(&self) -> Vec<Site> {
        vec![Site::new(0x0204, 0)]
    }
}
