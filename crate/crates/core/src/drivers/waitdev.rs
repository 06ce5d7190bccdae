// SPDX-License-Identifier: Apache-2.0

//! Command-queue device. A transfer hands a buffer to a worker task that
//! rings the doorbell and sleeps until the completion interrupt arrives.
//!
//! Seeded bug: both waits are unbounded. A device that stalls the command
//! (status 0xEE) or never interrupts leaves every task blocked for good.

use std::cell::Cell;
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::dma::DmaDirection;
use crate::engine::coverage::Site;
use crate::guest_env::{Completion, KResult, Kernel, Task, WaitOutcome};

use super::{
    BugToggles, Archetype, ETIMEDOUT, MatchRule, ModelDriver, OP_ERROR, ProbeStatus,
    platform_device,
};

const OWNER: u16 = 0x0105;
const SITE_COUNT: u16 = 24;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Platform("waitdev")];

const REG_ID: u64 = 0x00;
const REG_STATUS: u64 = 0x08;
const REG_DOORBELL: u64 = 0x10;
const REG_CTRL: u64 = 0x18;
const STATUS_STALL: u64 = 0xEE;
const CMD_TIMEOUT_NS: u64 = 1_000_000;
const JOIN_TIMEOUT_NS: u64 = 2_000_000;

pub fn device() -> DeviceConfig {
    platform_device("waitdev")
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(WaitDev {
        bug: t.enabled(Archetype::DeadlockWait),
        probed: Cell::new(false),
        cmd_pending: Cell::new(false),
        cmd_ok: Cell::new(false),
        cmd_done: Completion::new(),
        worker_done: Completion::new(),
    })
}

struct WaitDev {
    bug: bool,
    probed: Cell<bool>,
    cmd_pending: Cell<bool>,
    cmd_ok: Cell<bool>,
    cmd_done: Completion,
    worker_done: Completion,
}

impl WaitDev {
    fn timeout(&self, ns: u64) -> Option<u64> {
        (!self.bug).then_some(ns)
    }

    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let id = k.mmio_read(0, REG_ID, 4, s(0))?;
        k.cover(s(1 + (id & 1) as u16));
        k.request_irq(0)?;
        k.mmio_write(0, REG_CTRL, 4, 1, s(3))?;
        self.probed.set(true);
        Ok(ProbeStatus::Ok)
    }

    async fn worker(self: Rc<Self>, k: Kernel, dma: u64) -> KResult<()> {
        k.mmio_write(0, REG_DOORBELL, 8, dma, s(4))?;
        self.cmd_pending.set(true);
        let out = k
            .wait_for_completion(&self.cmd_done, s(5), self.timeout(CMD_TIMEOUT_NS))
            .await?;
        self.cmd_pending.set(false);
        match out {
            WaitOutcome::Woken => k.cover(s(6)),
            WaitOutcome::TimedOut => {
                k.cover(s(7));
                self.cmd_ok.set(false);
            }
        }
        self.worker_done.complete();
        Ok(())
    }

    async fn transfer(self: Rc<Self>, k: Kernel, payload: Vec<u8>) -> KResult<Vec<u8>> {
        let len = payload.len().max(1) as u64;
        let buf = k.alloc(len, s(8))?;
        k.write(buf, &payload, s(8))?;
        let dma = k.dma_map_single(buf, len, DmaDirection::ToDevice, s(9))?;
        self.cmd_done.reinit();
        self.worker_done.reinit();
        self.cmd_ok.set(false);
        k.spawn(Box::pin(self.clone().worker(k.clone(), dma.0)))?;
        let joined = k
            .wait_for_completion(&self.worker_done, s(10), self.timeout(JOIN_TIMEOUT_NS))
            .await?;
        k.dma_unmap_single(dma, len, DmaDirection::ToDevice, s(9))?;
        k.free(buf, s(8))?;
        match joined {
            WaitOutcome::Woken if self.cmd_ok.get() => {
                k.cover(s(11));
                Ok(vec![0])
            }
            WaitOutcome::Woken => {
                k.cover(s(12));
                Ok(vec![0xff, ETIMEDOUT as u8])
            }
            WaitOutcome::TimedOut => {
                k.cover(s(13));
                Ok(vec![0xff, ETIMEDOUT as u8])
            }
        }
    }

    async fn op_inner(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> KResult<Vec<u8>> {
        if !self.probed.get() {
            return Ok(OP_ERROR.to_vec());
        }
        match op {
            0 => {
                k.cover(s(14));
                Ok(payload)
            }
            1 => {
                k.cover(s(15));
                self.transfer(k, payload).await
            }
            2 => {
                let st = k.mmio_read(0, REG_STATUS, 1, s(16))?;
                k.cover(s(17 + (st == STATUS_STALL) as u16));
                Ok(vec![st as u8])
            }
            _ => {
                k.cover(s(19));
                Ok(OP_ERROR.to_vec())
            }
        }
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let st = k.mmio_read(0, REG_STATUS, 1, s(20))?;
        if !self.cmd_pending.get() {
            k.cover(s(21));
            return Ok(());
        }
        if st == STATUS_STALL {
            // stalled command: no completion is signalled
            k.cover(s(22));
            return Ok(());
        }
        k.cover(s(23));
        self.cmd_ok.set(true);
        self.cmd_done.complete();
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        if !self.probed.replace(false) {
            return Ok(());
        }
        k.mmio_write(0, REG_CTRL, 4, 0, s(3))?;
        k.free_irq(0)?;
        Ok(())
    }
}

impl ModelDriver for WaitDev {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, k: Kernel) -> Task<()> {
        Box::pin(self.remove_inner(k))
    }

    fn irq_handler(self: Rc<Self>, k: Kernel, _line: u32) -> Task<()> {
        Box::pin(self.irq_inner(k))
    }

    fn resource_op(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> Task<Vec<u8>> {
        Box::pin(self.op_inner(k, op, payload))
    }

    fn sites(&self) -> Vec<Site> {
        (0..SITE_COUNT).map(s).collect()
    }
}
