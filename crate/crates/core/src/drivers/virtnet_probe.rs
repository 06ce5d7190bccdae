// SPDX-License-Identifier: Apache-2.0

//! Virtio-net style probe that validates the device-advertised MTU.
//!
//! Seeded bug: when the MTU is below the minimum the probe frees its private
//! state but forgets to set the error code, so it reports success and the
//! later remove touches the freed state.

use std::cell::Cell;
use std::rc::Rc;

use crate::devices::DeviceConfig;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{KResult, Kernel, Task};

use super::{Archetype, BugToggles, EINVAL, MatchRule, ModelDriver, ProbeStatus, pci_device};

const OWNER: u16 = 0x0103;
const SITE_COUNT: u16 = 14;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[
    MatchRule::Pci {
        vendor: 0x1AF4,
        device: 0x1000,
    },
    MatchRule::Virtio(1),
];

const REG_FEATURES: u64 = 0x00;
const REG_MAC: u64 = 0x104;
const REG_MTU: u64 = 0x10a;
const F_MTU: u64 = 1 << 3;
const F_MAC: u64 = 1 << 5;
const MIN_MTU: u64 = 68;
const MAX_MTU: u64 = 9000;

pub fn device() -> DeviceConfig {
    pci_device(0x1AF4, 0x1000, 0x1000)
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(VirtnetProbe {
        bug: t.enabled(Archetype::ProbeErrUaf),
        vi: Cell::new(None),
    })
}

struct VirtnetProbe {
    bug: bool,
    vi: Cell<Option<GuestAddress>>,
}

impl VirtnetProbe {
    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        let vi = k.alloc(128, s(0))?;
        self.vi.set(Some(vi));
        let features = k.mmio_read(0, REG_FEATURES, 4, s(1))?;
        k.write_u64(vi, features & 0xffff_ffff, s(1))?;
        if features & F_MAC != 0 {
            k.cover(s(2));
            let mac = k.mmio_read(0, REG_MAC, 4, s(2))?;
            k.write_u32(vi.offset(16), mac as u32, s(2))?;
        }
        let mut mtu = 1500;
        if features & F_MTU != 0 {
            k.cover(s(3));
            mtu = k.mmio_read(0, REG_MTU, 2, s(4))?;
            if mtu < MIN_MTU {
                k.cover(s(5));
                k.free(vi, s(6))?;
                if self.bug {
                    // err is still 0 here
                    return Ok(ProbeStatus::Ok);
                }
                self.vi.set(None);
                return Ok(ProbeStatus::Failed(EINVAL));
            }
            if mtu > MAX_MTU {
                k.cover(s(7));
                mtu = MAX_MTU;
            }
        }
        k.write_u16(vi.offset(8), mtu as u16, s(8))?;
        k.cover(s(9));
        Ok(ProbeStatus::Ok)
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let Some(vi) = self.vi.take() else {
            return Ok(());
        };
        let mtu = k.read_u16(vi.offset(8), s(10))?;
        k.cover(s(11 + (mtu > 1500) as u16));
        k.free(vi, s(13))?;
        Ok(())
    }
}

impl ModelDriver for VirtnetProbe {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus> {
        Box::pin(self.probe_inner(k))
    }

    fn remove(self: Rc<Self>, k: Kernel) -> Task<()> {
        Box::pin(self.remove_inner(k))
    }

    fn irq_handler(self: Rc<Self>, _k: Kernel, _line: u32) -> Task<()> {
        Box::pin(async { Ok(()) })
    }

    fn sites(&self) -> Vec<Site> {
        (0..SITE_COUNT).map(s).collect()
    }
}
