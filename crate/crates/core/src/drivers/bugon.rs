// SPDX-License-Identifier: Apache-2.0

//! State-machine device whose driver asserts on states it considers
//! impossible.
//!
//! Seeded bug: state 0xEE hits a BUG() instead of being treated as a device
//! error.

use std::cell::Cell;
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::{KResult, Kernel, Task};

use super::{
    Archetype, BugToggles, EIO, MatchRule, ModelDriver, OP_ERROR, ProbeStatus, platform_device,
};

const OWNER: u16 = 0x0107;
const SITE_COUNT: u16 = 14;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Platform("bugon")];

const REG_ID: u64 = 0x00;
const REG_STATE: u64 = 0x04;
const STATE_BAD: u64 = 0xEE;

pub fn device() -> DeviceConfig {
    platform_device("bugon")
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(BugOn {
        bug: t.enabled(Archetype::AssertionBug),
        probed: Cell::new(false),
    })
}

struct BugOn {
    bug: bool,
    probed: Cell<bool>,
}

impl BugOn {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let id = k.mmio_read(0, REG_ID, 4, s(0))?;
        k.cover(s(1 + (id & 1) as u16));
        self.probed.set(true);
        Ok(ProbeStatus::Ok)
    }

    async fn op_inner(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> KResult<Vec<u8>> {
        if !self.probed.get() {
            return Ok(OP_ERROR.to_vec());
        }
        match op {
            0 => {
                k.cover(s(3));
                Ok(payload)
            }
            1 => {
                let state = k.mmio_read(0, REG_STATE, 1, s(4))?;
                match state {
                    0 => k.cover(s(5)),
                    1..=0x7f => k.cover(s(6)),
                    STATE_BAD if self.bug => {
                        return Err(k.bug(s(7), "device in impossible state"));
                    }
                    STATE_BAD => {
                        k.cover(s(8));
                        return Ok(vec![0xff, EIO as u8]);
                    }
                    _ => k.cover(s(9)),
                }
                Ok(vec![state as u8])
            }
            _ => {
                k.cover(s(10));
                Ok(OP_ERROR.to_vec())
            }
        }
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        if self.probed.replace(false) {
            k.cover(s(11));
        }
        Ok(())
    }
}

impl ModelDriver for BugOn {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, k: Kernel) -> Task<()> {
        Box::pin(self.remove_inner(k))
    }

    fn irq_handler(self: Rc<Self>, _k: Kernel, _line: u32) -> Task<()> {
        Box::pin(async { Ok(()) })
    }

    fn resource_op(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> Task<Vec<u8>> {
        Box::pin(self.op_inner(k, op, payload))
    }

    fn sites(&self) -> Vec<Site> {
        (0..SITE_COUNT).map(s).collect()
    }
}
