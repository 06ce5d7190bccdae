// SPDX-License-Identifier: Apache-2.0

//! Model-driver ABI and the driver catalog.
//!
//! Every archetype driver carries one seeded bug behind a toggle. Its
//! `-hardened` catalog twin is the same code with the toggle off, which
//! compiles the missing validation back in.

mod bigalloc;
mod bugon;
mod divdev;
mod fixtures;
mod netdesc;
mod ringidx;
mod virtnet_probe;
mod vring_consumer;
mod waitdev;

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::devices::{Bus, DeviceConfig, IoKind, IoRegion, SimMode};
use crate::engine::coverage::Site;
use crate::guest_env::{Kernel, Task};
use crate::harness::HarnessKind;

pub use fixtures::{MAGIC, ROCKER_STAGES, ROCKER_WINDOW_NS};

pub const ENODEV: i32 = 19;
pub const EINVAL: i32 = 22;
pub const ENOMEM: i32 = 12;
pub const EIO: i32 = 5;
pub const ETIMEDOUT: i32 = 110;

/// Response of a resource operation the driver does not support.
pub const OP_ERROR: [u8; 2] = [0xff, EINVAL as u8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Archetype {
    SwiotlbLenOverflow,
    SharedPointerDeref,
    ProbeErrUaf,
    UnvalidatedIndex,
    DeadlockWait,
    UnboundedAlloc,
    AssertionBug,
    DivByZero,
}

impl Archetype {
    pub const ALL: [Archetype; 8] = [
        Archetype::SwiotlbLenOverflow,
        Archetype::SharedPointerDeref,
        Archetype::ProbeErrUaf,
        Archetype::UnvalidatedIndex,
        Archetype::DeadlockWait,
        Archetype::UnboundedAlloc,
        Archetype::AssertionBug,
        Archetype::DivByZero,
    ];

    /// Key under `[bugs]` in the config file.
    pub fn config_key(self) -> &'static str {
        match self {
            Archetype::SwiotlbLenOverflow => "swiotlb_len_overflow",
            Archetype::SharedPointerDeref => "shared_pointer_deref",
            Archetype::ProbeErrUaf => "probe_err_uaf",
            Archetype::UnvalidatedIndex => "unvalidated_index",
            Archetype::DeadlockWait => "deadlock_wait",
            Archetype::UnboundedAlloc => "unbounded_alloc",
            Archetype::AssertionBug => "assertion_bug",
            Archetype::DivByZero => "div_by_zero",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.config_key())
    }
}

impl FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.config_key() == s)
            .ok_or_else(|| format!("unknown bug archetype `{s}`"))
    }
}

/// The set of enabled seeded bugs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BugToggles(pub BTreeSet<Archetype>);

impl BugToggles {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn only(a: Archetype) -> Self {
        Self([a].into_iter().collect())
    }

    pub fn enabled(&self, a: Archetype) -> bool {
        self.0.contains(&a)
    }

    pub fn set(&mut self, a: Archetype, on: bool) {
        if on {
            self.0.insert(a);
        } else {
            self.0.remove(&a);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeStatus {
    Ok,
    Failed(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRule {
    Pci { vendor: u16, device: u16 },
    Platform(&'static str),
    Virtio(u32),
}

impl MatchRule {
    pub fn matches(&self, dev: &DeviceConfig) -> bool {
        match *self {
            MatchRule::Pci { vendor, device } => {
                dev.bus == Bus::Pci && dev.vendor_id == vendor && dev.device_id == device
            }
            MatchRule::Platform(name) => dev.bus == Bus::Platform && dev.name == name,
            MatchRule::Virtio(id) => dev.bus == Bus::Virtio && dev.virtio_device_id == id,
        }
    }
}

/// Entry points a model driver exposes to the harness and the interrupt
/// path. Drivers reach memory and devices only through the [`Kernel`].
pub trait ModelDriver {
    fn probe(self: Rc<Self>, k: Kernel) -> Task<ProbeStatus>;
    fn remove(self: Rc<Self>, k: Kernel) -> Task<()>;
    fn irq_handler(self: Rc<Self>, k: Kernel, line: u32) -> Task<()>;

    fn resource_op(self: Rc<Self>, k: Kernel, op: u8, payload: Vec<u8>) -> Task<Vec<u8>> {
        let _ = (k, op, payload);
        Box::pin(async { Ok(OP_ERROR.to_vec()) })
    }

    /// Coverage sites the driver may hit.
    fn sites(&self) -> Vec<Site>;
}

pub type DriverFactory = fn(&BugToggles) -> Rc<dyn ModelDriver>;

#[derive(Clone)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub archetype: Option<Archetype>,
    pub hardened: bool,
    pub matches: &'static [MatchRule],
    pub device: fn() -> DeviceConfig,
    pub harness: HarnessKind,
    pub factory: DriverFactory,
}

impl fmt::Debug for CatalogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CatalogEntry")
            .field("name", &self.name)
            .field("archetype", &self.archetype)
            .field("hardened", &self.hardened)
            .finish_non_exhaustive()
    }
}

impl CatalogEntry {
    pub fn default_toggles(&self) -> BugToggles {
        match (self.archetype, self.hardened) {
            (Some(a), false) => BugToggles::only(a),
            _ => BugToggles::none(),
        }
    }

    pub fn binds(&self, dev: &DeviceConfig) -> bool {
        self.matches.iter().any(|m| m.matches(dev))
    }

    pub fn instantiate(&self, toggles: &BugToggles) -> Rc<dyn ModelDriver> {
        (self.factory)(toggles)
    }
}

pub(crate) fn mmio(index: u32, size: u64) -> IoRegion {
    IoRegion {
        index,
        size,
        kind: IoKind::Mmio,
    }
}

pub(crate) fn pci_device(vendor: u16, device: u16, bar0: u64) -> DeviceConfig {
    DeviceConfig {
        bus: Bus::Pci,
        vendor_id: vendor,
        device_id: device,
        regions: vec![mmio(0, bar0)],
        ..DeviceConfig::default()
    }
}

pub(crate) fn platform_device(name: &str) -> DeviceConfig {
    DeviceConfig {
        bus: Bus::Platform,
        name: name.to_string(),
        regions: vec![mmio(0, 0x100)],
        ..DeviceConfig::default()
    }
}

pub(crate) fn virtio_device(virtio_id: u32) -> DeviceConfig {
    DeviceConfig {
        bus: Bus::Virtio,
        vendor_id: 0x1AF4,
        regions: vec![mmio(0, 0x200)],
        mode: SimMode::Emulated,
        virtio_device_id: virtio_id,
        ..DeviceConfig::default()
    }
}

fn archetype_pair(
    name: &'static str,
    hardened_name: &'static str,
    archetype: Archetype,
    matches: &'static [MatchRule],
    device: fn() -> DeviceConfig,
    harness: HarnessKind,
    factory: DriverFactory,
) -> [CatalogEntry; 2] {
    let base = CatalogEntry {
        name,
        archetype: Some(archetype),
        hardened: false,
        matches,
        device,
        harness,
        factory,
    };
    let hardened = CatalogEntry {
        name: hardened_name,
        hardened: true,
        ..base.clone()
    };
    [base, hardened]
}

const EXTENDED: HarnessKind = HarnessKind::Extended { ops: 4 };

/// All drivers: the eight archetype hosts, their hardened twins and the
/// experiment fixtures. Names are stable.
pub fn register_catalog() -> Vec<CatalogEntry> {
    let mut out = Vec::new();
    out.extend(archetype_pair(
        "vring-consumer",
        "vring-consumer-hardened",
        Archetype::SwiotlbLenOverflow,
        vring_consumer::MATCHES,
        vring_consumer::device,
        HarnessKind::Default,
        vring_consumer::create,
    ));
    out.extend(archetype_pair(
        "netdesc",
        "netdesc-hardened",
        Archetype::SharedPointerDeref,
        netdesc::MATCHES,
        netdesc::device,
        HarnessKind::Default,
        netdesc::create,
    ));
    out.extend(archetype_pair(
        "virtnet-probe",
        "virtnet-probe-hardened",
        Archetype::ProbeErrUaf,
        virtnet_probe::MATCHES,
        virtnet_probe::device,
        HarnessKind::Default,
        virtnet_probe::create,
    ));
    out.extend(archetype_pair(
        "ringidx",
        "ringidx-hardened",
        Archetype::UnvalidatedIndex,
        ringidx::MATCHES,
        ringidx::device,
        HarnessKind::Default,
        ringidx::create,
    ));
    out.extend(archetype_pair(
        "waitdev",
        "waitdev-hardened",
        Archetype::DeadlockWait,
        waitdev::MATCHES,
        waitdev::device,
        EXTENDED,
        waitdev::create,
    ));
    out.extend(archetype_pair(
        "bigalloc",
        "bigalloc-hardened",
        Archetype::UnboundedAlloc,
        bigalloc::MATCHES,
        bigalloc::device,
        EXTENDED,
        bigalloc::create,
    ));
    out.extend(archetype_pair(
        "bugon",
        "bugon-hardened",
        Archetype::AssertionBug,
        bugon::MATCHES,
        bugon::device,
        EXTENDED,
        bugon::create,
    ));
    out.extend(archetype_pair(
        "divdev",
        "divdev-hardened",
        Archetype::DivByZero,
        divdev::MATCHES,
        divdev::device,
        HarnessKind::Default,
        divdev::create,
    ));
    out.extend(fixtures::entries());
    out
}

pub fn find_driver(name: &str) -> Option<CatalogEntry> {
    register_catalog().into_iter().find(|e| e.name == name)
}

/// Catalog name of the driver hosting `a`.
pub fn archetype_host(a: Archetype) -> &'static str {
    register_catalog()
        .into_iter()
        .find(|e| e.archetype == Some(a) && !e.hardened)
        .map(|e| e.name)
        .expect("every archetype has a host driver")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_names_are_unique_and_complete() {
        let cat = register_catalog();
        let mut names: Vec<_> = cat.iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cat.len());
        for a in Archetype::ALL {
            let hosts: Vec<_> = cat.iter().filter(|e| e.archetype == Some(a)).collect();
            assert_eq!(hosts.len(), 2, "{a}");
            assert!(hosts.iter().any(|e| e.hardened));
        }
        for n in ["vring-consumer", "netdesc", "magic-gate", "delay-heavy", "rocker-gate", "nop"] {
            assert!(find_driver(n).is_some(), "{n}");
        }
    }

    #[test]
    fn default_devices_are_valid_and_bind() {
        for e in register_catalog() {
            let dev = (e.device)();
            dev.validate().unwrap_or_else(|err| panic!("{}: {err}", e.name));
            assert!(e.binds(&dev), "{}", e.name);
        }
    }

    #[test]
    fn toggles_follow_variant() {
        let e = find_driver("netdesc").unwrap();
        assert!(e.default_toggles().enabled(Archetype::SharedPointerDeref));
        let h = find_driver("netdesc-hardened").unwrap();
        assert_eq!(h.default_toggles(), BugToggles::none());
    }

    #[test]
    fn pci_ids_match_virtio_net_model() {
        let dev = pci_device(0x1AF4, 0x1000, 0x1000);
        assert!(find_driver("virtnet-probe").unwrap().binds(&dev));
        let mut other = platform_device("waitdev");
        assert!(!find_driver("virtnet-probe").unwrap().binds(&other));
        other.name = "waitdev2".into();
        assert!(!find_driver("waitdev").unwrap().binds(&other));
    }

    #[test]
    fn archetype_keys_round_trip() {
        for a in Archetype::ALL {
            assert_eq!(a.config_key().parse::<Archetype>(), Ok(a));
        }
    }
}
