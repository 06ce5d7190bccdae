// SPDX-License-Identifier: Apache-2.0

//! Firmware-loader style device: the device announces a blob length and the
//! driver allocates a buffer of that size.
//!
//! Seeded bug: the announced length is trusted, so a hostile device can make
//! the guest allocate without limit.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task};

use super::{
    Archetype, BugToggles, EINVAL, ENOMEM, MatchRule, ModelDriver, OP_ERROR, ProbeStatus,
    platform_device,
};

const OWNER: u16 = 0x0106;
const SITE_COUNT: u16 = 14;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Platform("bigalloc")];

const REG_ID: u64 = 0x00;
const REG_BLOB_LEN: u64 = 0x04;
const REG_BLOB_DATA: u64 = 0x08;
const MAX_BLOB: u64 = 64 * 1024;

pub fn device() -> DeviceConfig {
    platform_device("bigalloc")
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(BigAlloc {
        bug: t.enabled(Archetype::UnboundedAlloc),
        probed: Cell::new(false),
        blobs: RefCell::new(Vec::new()),
    })
}

struct BigAlloc {
    bug: bool,
    probed: Cell<bool>,
    blobs: RefCell<Vec<GuestAddress>>,
}

impl BigAlloc {
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
                let len = k.mmio_read(0, REG_BLOB_LEN, 4, s(4))?;
                if len == 0 {
                    k.cover(s(5));
                    return Ok(vec![0xff, EINVAL as u8]);
                }
                if !self.bug && len > MAX_BLOB {
                    k.cover(s(6));
                    return Ok(vec![0xff, ENOMEM as u8]);
                }
                k.cover(s(7 + (len > 4096) as u16));
                let blob = k.alloc(len, s(9))?;
                self.blobs.borrow_mut().push(blob);
                let head = k.mmio_read(0, REG_BLOB_DATA, 4, s(10))?;
                k.write(blob, &head.to_le_bytes()[..len.min(4) as usize], s(10))?;
                Ok(vec![0])
            }
            2 => {
                k.cover(s(11));
                Ok(vec![self.blobs.borrow().len() as u8])
            }
            _ => {
                k.cover(s(12));
                Ok(OP_ERROR.to_vec())
            }
        }
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        if !self.probed.replace(false) {
            return Ok(());
        }
        let blobs = std::mem::take(&mut *self.blobs.borrow_mut());
        for b in blobs {
            k.free(b, s(13))?;
        }
        Ok(())
    }
}

impl ModelDriver for BigAlloc {
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
