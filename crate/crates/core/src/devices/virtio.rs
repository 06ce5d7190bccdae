// SPDX-License-Identifier: Apache-2.0

//! Emulated virtio device on the MMIO transport (version 2 register layout)
//! with split virtqueues.
//!
//! Ring layout in shared memory, all little endian:
//!
//! ```text
//! desc:  num x { addr u64, len u32, flags u16, next u16 }
//! avail: flags u16, idx u16, ring[num] u16
//! used:  flags u16, idx u16, ring[num] { id u32, len u32 }
//! ```

use crate::engine::stream::InputStream;
use crate::guest_env::addr::in_shared_range;
use crate::guest_env::shared::SharedMemory;

use super::irq::IrqLines;

pub const VIRTIO_MMIO_MAGIC: u32 = 0x7472_6976;
pub const VIRTIO_MMIO_VERSION: u32 = 2;
pub const QUEUE_NUM_MAX: u32 = 256;
pub const NUM_QUEUES: usize = 2;
pub const VIRTIO_F_VERSION_1: u64 = 1 << 32;
/// Upper bound on bytes the device writes for one descriptor.
pub const MAX_PAYLOAD: u64 = 1 << 20;

pub const VRING_DESC_F_NEXT: u16 = 1;
pub const VRING_DESC_F_WRITE: u16 = 2;

pub const STATUS_ACKNOWLEDGE: u32 = 1;
pub const STATUS_DRIVER: u32 = 2;
pub const STATUS_DRIVER_OK: u32 = 4;
pub const STATUS_FEATURES_OK: u32 = 8;

pub mod reg {
    pub const MAGIC: u64 = 0x000;
    pub const VERSION: u64 = 0x004;
    pub const DEVICE_ID: u64 = 0x008;
    pub const VENDOR_ID: u64 = 0x00c;
    pub const DEVICE_FEATURES: u64 = 0x010;
    pub const DEVICE_FEATURES_SEL: u64 = 0x014;
    pub const DRIVER_FEATURES: u64 = 0x020;
    pub const DRIVER_FEATURES_SEL: u64 = 0x024;
    pub const QUEUE_SEL: u64 = 0x030;
    pub const QUEUE_NUM_MAX: u64 = 0x034;
    pub const QUEUE_NUM: u64 = 0x038;
    pub const QUEUE_READY: u64 = 0x044;
    pub const QUEUE_NOTIFY: u64 = 0x050;
    pub const INTERRUPT_STATUS: u64 = 0x060;
    pub const INTERRUPT_ACK: u64 = 0x064;
    pub const STATUS: u64 = 0x070;
    pub const QUEUE_DESC_LOW: u64 = 0x080;
    pub const QUEUE_DESC_HIGH: u64 = 0x084;
    pub const QUEUE_DRIVER_LOW: u64 = 0x090;
    pub const QUEUE_DRIVER_HIGH: u64 = 0x094;
    pub const QUEUE_DEVICE_LOW: u64 = 0x0a0;
    pub const QUEUE_DEVICE_HIGH: u64 = 0x0a4;
    pub const CONFIG_GENERATION: u64 = 0x0fc;
    pub const CONFIG: u64 = 0x100;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VringDesc {
    pub addr: u64,
    pub len: u32,
    pub flags: u16,
    pub next: u16,
}

impl VringDesc {
    pub const SIZE: usize = 16;

    pub fn encode(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..12].copy_from_slice(&self.len.to_le_bytes());
        b[12..14].copy_from_slice(&self.flags.to_le_bytes());
        b[14..16].copy_from_slice(&self.next.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; 16]) -> Self {
        Self {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            len: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            flags: u16::from_le_bytes(b[12..14].try_into().unwrap()),
            next: u16::from_le_bytes(b[14..16].try_into().unwrap()),
        }
    }
}

/// Byte sizes of the three ring areas for a queue of `num` entries.
pub fn ring_sizes(num: u32) -> (u64, u64, u64) {
    let n = num as u64;
    (16 * n, 4 + 2 * n, 4 + 8 * n)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueState {
    pub num: u32,
    pub ready: bool,
    pub desc: u64,
    pub avail: u64,
    pub used: u64,
    pub last_avail: u16,
    pub used_idx: u16,
}

impl QueueState {
    fn configured(&self) -> bool {
        self.ready
            && self.num.is_power_of_two()
            && self.num <= QUEUE_NUM_MAX
            && self.desc != 0
            && self.avail != 0
            && self.used != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NotifyOutcome {
    /// Avail entries turned into used entries.
    pub produced: u32,
    pub payload_bytes: u64,
}

fn set_lo(v: &mut u64, lo: u32) {
    *v = (*v & !0xffff_ffff) | lo as u64;
}

fn set_hi(v: &mut u64, hi: u32) {
    *v = (*v & 0xffff_ffff) | ((hi as u64) << 32);
}

#[derive(Debug, Clone)]
pub struct VirtioMmio {
    pub device_id: u32,
    pub vendor_id: u32,
    pub features: u64,
    pub features_sel: u32,
    pub driver_features: u64,
    pub driver_features_sel: u32,
    pub queue_sel: u32,
    pub queues: [QueueState; NUM_QUEUES],
    pub status: u32,
    pub isr: u32,
    /// Report used.len as a raw stream word instead of the bytes written.
    pub adversarial_used_len: bool,
    pub anomalies: Vec<String>,
    pub notifications: u64,
}

impl VirtioMmio {
    pub fn new(device_id: u32, vendor_id: u32, features: u64, adversarial_used_len: bool) -> Self {
        Self {
            device_id,
            vendor_id,
            features: features | VIRTIO_F_VERSION_1,
            features_sel: 0,
            driver_features: 0,
            driver_features_sel: 0,
            queue_sel: 0,
            queues: Default::default(),
            status: 0,
            isr: 0,
            adversarial_used_len,
            anomalies: Vec::new(),
            notifications: 0,
        }
    }

    fn selected(&mut self) -> Option<&mut QueueState> {
        self.queues.get_mut(self.queue_sel as usize)
    }

    /// Register value, or `None` for offsets the device leaves to the stream
    /// (config space and undefined registers).
    pub fn read_reg(&self, offset: u64, width: usize) -> Option<u64> {
        if width != 4 {
            return None;
        }
        let q = self.queues.get(self.queue_sel as usize);
        let v = match offset {
            reg::MAGIC => VIRTIO_MMIO_MAGIC,
            reg::VERSION => VIRTIO_MMIO_VERSION,
            reg::DEVICE_ID => self.device_id,
            reg::VENDOR_ID => self.vendor_id,
            reg::DEVICE_FEATURES => match self.features_sel {
                0 => self.features as u32,
                1 => (self.features >> 32) as u32,
                _ => 0,
            },
            reg::QUEUE_NUM_MAX => q.map_or(0, |_| QUEUE_NUM_MAX),
            reg::QUEUE_READY => q.map_or(0, |q| q.ready as u32),
            reg::INTERRUPT_STATUS => self.isr,
            reg::STATUS => self.status,
            reg::CONFIG_GENERATION => 0,
            _ => return None,
        };
        Some(v as u64)
    }

    pub fn write_reg(
        &mut self,
        offset: u64,
        width: usize,
        value: u64,
        mem: &mut SharedMemory,
        stream: &mut InputStream,
        irq: &mut IrqLines,
    ) {
        if width != 4 {
            self.anomalies
                .push(format!("{width}-byte write to register {offset:#x} ignored"));
            return;
        }
        let v = value as u32;
        match offset {
            reg::DEVICE_FEATURES_SEL => self.features_sel = v,
            reg::DRIVER_FEATURES => match self.driver_features_sel {
                0 => set_lo(&mut self.driver_features, v),
                1 => set_hi(&mut self.driver_features, v),
                _ => {}
            },
            reg::DRIVER_FEATURES_SEL => self.driver_features_sel = v,
            reg::QUEUE_SEL => self.queue_sel = v,
            reg::QUEUE_NUM => {
                if let Some(q) = self.selected() {
                    q.num = v;
                }
            }
            reg::QUEUE_READY => {
                if let Some(q) = self.selected() {
                    q.ready = v & 1 == 1;
                }
            }
            reg::QUEUE_NOTIFY => {
                self.queue_notify(v as usize, mem, stream, irq);
            }
            reg::INTERRUPT_ACK => self.isr &= !v,
            reg::STATUS => {
                if v == 0 {
                    self.reset();
                } else {
                    self.status = v;
                }
            }
            reg::QUEUE_DESC_LOW => {
                if let Some(q) = self.selected() {
                    set_lo(&mut q.desc, v)
                }
            }
            reg::QUEUE_DESC_HIGH => {
                if let Some(q) = self.selected() {
                    set_hi(&mut q.desc, v)
                }
            }
            reg::QUEUE_DRIVER_LOW => {
                if let Some(q) = self.selected() {
                    set_lo(&mut q.avail, v)
                }
            }
            reg::QUEUE_DRIVER_HIGH => {
                if let Some(q) = self.selected() {
                    set_hi(&mut q.avail, v)
                }
            }
            reg::QUEUE_DEVICE_LOW => {
                if let Some(q) = self.selected() {
                    set_lo(&mut q.used, v)
                }
            }
            reg::QUEUE_DEVICE_HIGH => {
                if let Some(q) = self.selected() {
                    set_hi(&mut q.used, v)
                }
            }
            _ => {}
        }
    }

    fn reset(&mut self) {
        self.status = 0;
        self.isr = 0;
        self.driver_features = 0;
        self.queue_sel = 0;
        self.queues = Default::default();
    }

    fn mem_read(&mut self, mem: &SharedMemory, addr: u64, len: usize) -> Option<Vec<u8>> {
        if in_shared_range(addr) && in_shared_range(addr + len as u64 - 1) {
            Some(mem.read(addr, len))
        } else {
            self.anomalies
                .push(format!("device read outside shared memory at {addr:#x}"));
            None
        }
    }

    fn mem_write(&mut self, mem: &mut SharedMemory, addr: u64, data: &[u8]) -> bool {
        if data.is_empty() {
            return true;
        }
        if in_shared_range(addr) && in_shared_range(addr + data.len() as u64 - 1) {
            mem.write(addr, data);
            true
        } else {
            self.anomalies
                .push(format!("device write outside shared memory at {addr:#x}"));
            false
        }
    }

    /// Processes every new avail entry of queue `idx`.
    pub fn queue_notify(
        &mut self,
        idx: usize,
        mem: &mut SharedMemory,
        stream: &mut InputStream,
        irq: &mut IrqLines,
    ) -> NotifyOutcome {
        self.notifications += 1;
        let mut out = NotifyOutcome::default();
        let Some(q) = self.queues.get(idx).cloned() else {
            self.anomalies.push(format!("notify on missing queue {idx}"));
            return out;
        };
        if !q.configured() {
            self.anomalies.push(format!("notify on unconfigured queue {idx}"));
            return out;
        }
        let num = q.num as u64;
        let Some(b) = self.mem_read(mem, q.avail + 2, 2) else {
            return out;
        };
        let avail_idx = u16::from_le_bytes([b[0], b[1]]);
        let mut last = q.last_avail;
        let mut used_idx = q.used_idx;
        'entries: while last != avail_idx {
            let slot = q.avail + 4 + 2 * (last as u64 % num);
            let Some(b) = self.mem_read(mem, slot, 2) else {
                break;
            };
            let head = u16::from_le_bytes([b[0], b[1]]);
            let mut i = head as u64;
            let mut hops = 0u64;
            let mut total = 0u64;
            loop {
                if i >= num {
                    self.anomalies
                        .push(format!("descriptor index {i} out of range on queue {idx}"));
                    break 'entries;
                }
                let Some(raw) = self.mem_read(mem, q.desc + 16 * i, 16) else {
                    break 'entries;
                };
                let d = VringDesc::decode(raw.as_slice().try_into().unwrap());
                if d.flags & VRING_DESC_F_WRITE != 0 {
                    let v = stream.next_u32() as u64;
                    let n = (v % (d.len as u64 + 1)).min(MAX_PAYLOAD);
                    let payload = stream.next_bytes(n as usize);
                    self.mem_write(mem, d.addr, &payload);
                    total += n;
                }
                hops += 1;
                if d.flags & VRING_DESC_F_NEXT == 0 {
                    break;
                }
                if hops >= num {
                    self.anomalies
                        .push(format!("descriptor chain loop on queue {idx}"));
                    break 'entries;
                }
                i = d.next as u64;
            }
            let used_len = if self.adversarial_used_len {
                stream.next_u32()
            } else {
                total.min(u32::MAX as u64) as u32
            };
            let elem = q.used + 4 + 8 * (used_idx as u64 % num);
            let mut e = [0u8; 8];
            e[0..4].copy_from_slice(&(head as u32).to_le_bytes());
            e[4..8].copy_from_slice(&used_len.to_le_bytes());
            self.mem_write(mem, elem, &e);
            used_idx = used_idx.wrapping_add(1);
            self.mem_write(mem, q.used + 2, &used_idx.to_le_bytes());
            last = last.wrapping_add(1);
            out.produced += 1;
            out.payload_bytes += total;
        }
        let qs = &mut self.queues[idx];
        qs.last_avail = last;
        qs.used_idx = used_idx;
        if out.produced > 0 {
            self.isr |= 1;
            irq.raise(0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn desc_round_trip(addr: u64, len: u32, flags: u16, next: u16) {
            let d = VringDesc { addr, len, flags, next };
            let e = d.encode();
            prop_assert_eq!(e.len(), 16);
            prop_assert_eq!(VringDesc::decode(&e), d);
        }
    }

    #[test]
    fn desc_field_order() {
        let d = VringDesc {
            addr: 0x0102_0304_0506_0708,
            len: 0x0a0b_0c0d,
            flags: 0x0e0f,
            next: 0x1011,
        };
        assert_eq!(
            d.encode(),
            [8, 7, 6, 5, 4, 3, 2, 1, 0x0d, 0x0c, 0x0b, 0x0a, 0x0f, 0x0e, 0x11, 0x10]
        );
    }

    #[test]
    fn identity_registers() {
        let v = VirtioMmio::new(3, 0x554d_4551, 0, false);
        assert_eq!(v.read_reg(reg::MAGIC, 4), Some(0x7472_6976));
        assert_eq!(v.read_reg(reg::VERSION, 4), Some(2));
        assert_eq!(v.read_reg(reg::DEVICE_ID, 4), Some(3));
        assert_eq!(v.read_reg(reg::QUEUE_NUM_MAX, 4), Some(256));
        assert_eq!(v.read_reg(reg::CONFIG, 4), None);
        assert_eq!(v.read_reg(0x0e0, 4), None);
        assert_eq!(v.read_reg(reg::MAGIC, 2), None);
    }
}
