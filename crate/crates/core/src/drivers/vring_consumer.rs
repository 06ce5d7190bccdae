// SPDX-License-Identifier: Apache-2.0

//! Receive path of a virtio driver over the MMIO transport. One 4 KiB
//! receive buffer is streamed through the bounce pool; the interrupt handler
//! syncs as many bytes as the used ring claims were written.
//!
//! Seeded bug: the used-ring length is passed to the sync call unchecked, so
//! a device reporting more than the buffer size overflows the bounce.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::devices::virtio::{
    STATUS_ACKNOWLEDGE, STATUS_DRIVER, STATUS_DRIVER_OK, STATUS_FEATURES_OK, VIRTIO_MMIO_MAGIC,
    VRING_DESC_F_WRITE, VringDesc, reg, ring_sizes,
};
use crate::devices::DeviceConfig;
use crate::dma::DmaDirection;
use crate::engine::coverage::Site;
use crate::guest_env::addr::GuestAddress;
use crate::guest_env::{Completion, KResult, Kernel, Task, WaitOutcome};

use super::{
    Archetype, BugToggles, ENODEV, MatchRule, ModelDriver, ProbeStatus, virtio_device,
};

const OWNER: u16 = 0x0101;
const SITE_COUNT: u16 = 24;

const fn s(n: u16) -> Site {
    Site::new(OWNER, n)
}

pub const MATCHES: &[MatchRule] = &[MatchRule::Virtio(3)];
const RX_LEN: u64 = 0x1000;
const QSIZE: u32 = 8;
const RX_TIMEOUT_NS: u64 = 1_000_000;

pub fn device() -> DeviceConfig {
    DeviceConfig {
        adversarial_used_len: true,
        ..virtio_device(3)
    }
}

pub fn create(t: &BugToggles) -> Rc<dyn ModelDriver> {
    Rc::new(VringConsumer {
        bug: t.enabled(Archetype::SwiotlbLenOverflow),
        st: RefCell::new(State::default()),
        rx_done: Completion::new(),
        last_used: Cell::new(0),
    })
}

#[derive(Default, Clone, Copy)]
struct State {
    probed: bool,
    priv_: GuestAddress,
    used: GuestAddress,
    num: u32,
    rx_buf: GuestAddress,
    rx_dma: GuestAddress,
}

struct VringConsumer {
    bug: bool,
    st: RefCell<State>,
    rx_done: Completion,
    last_used: Cell<u16>,
}

impl VringConsumer {
    fn write_reg(&self, k: &Kernel, off: u64, v: u32) -> KResult<()> {
        k.mmio_write(0, off, 4, v as u64, s(0))
    }

    fn setup_queue(&self, k: &Kernel) -> KResult<Option<State>> {
        self.write_reg(k, reg::QUEUE_SEL, 0)?;
        let max = k.mmio_read(0, reg::QUEUE_NUM_MAX, 4, s(5))? as u32;
        if max == 0 {
            k.cover(s(6));
            return Ok(None);
        }
        let num = max.min(QSIZE);
        let (dsz, asz, usz) = ring_sizes(num);
        let desc = k.dma_alloc_coherent(dsz, s(7))?;
        let avail = k.dma_alloc_coherent(asz, s(7))?;
        let used = k.dma_alloc_coherent(usz, s(7))?;
        self.write_reg(k, reg::QUEUE_NUM, num)?;
        for (lo, a) in [
            (reg::QUEUE_DESC_LOW, desc),
            (reg::QUEUE_DRIVER_LOW, avail),
            (reg::QUEUE_DEVICE_LOW, used),
        ] {
            self.write_reg(k, lo, a.0 as u32)?;
            self.write_reg(k, lo + 4, (a.0 >> 32) as u32)?;
        }
        self.write_reg(k, reg::QUEUE_READY, 1)?;

        let priv_ = k.alloc(64, s(8))?;
        let rx_buf = k.alloc(RX_LEN, s(8))?;
        let rx_dma = k.dma_map_single(rx_buf, RX_LEN, DmaDirection::FromDevice, s(9))?;
        let d = VringDesc {
            addr: rx_dma.0,
            len: RX_LEN as u32,
            flags: VRING_DESC_F_WRITE,
            next: 0,
        };
        k.write(desc, &d.encode(), s(10))?;
        k.write_u16(avail.offset(4), 0, s(10))?;
        k.write_u16(avail.offset(2), 1, s(10))?;
        Ok(Some(State {
            probed: true,
            priv_,
            used,
            num,
            rx_buf,
            rx_dma,
        }))
    }

    async fn probe_inner(self: Rc<Self>, k: Kernel) -> KResult<ProbeStatus> {
        k.cover(s(1));
        if k.mmio_read(0, reg::MAGIC, 4, s(1))? as u32 != VIRTIO_MMIO_MAGIC {
            k.cover(s(2));
            return Ok(ProbeStatus::Failed(ENODEV));
        }
        if k.mmio_read(0, reg::VERSION, 4, s(1))? != 2 {
            k.cover(s(3));
            return Ok(ProbeStatus::Failed(ENODEV));
        }
        self.write_reg(&k, reg::STATUS, STATUS_ACKNOWLEDGE)?;
        self.write_reg(&k, reg::STATUS, STATUS_ACKNOWLEDGE | STATUS_DRIVER)?;
        self.write_reg(&k, reg::DEVICE_FEATURES_SEL, 1)?;
        let hi = k.mmio_read(0, reg::DEVICE_FEATURES, 4, s(4))?;
        if hi & 1 == 0 {
            k.cover(s(11));
            return Ok(ProbeStatus::Failed(ENODEV));
        }
        self.write_reg(&k, reg::DRIVER_FEATURES_SEL, 1)?;
        self.write_reg(&k, reg::DRIVER_FEATURES, 1)?;
        let status = STATUS_ACKNOWLEDGE | STATUS_DRIVER | STATUS_FEATURES_OK;
        self.write_reg(&k, reg::STATUS, status)?;
        if k.mmio_read(0, reg::STATUS, 4, s(4))? as u32 & STATUS_FEATURES_OK == 0 {
            k.cover(s(12));
            return Ok(ProbeStatus::Failed(ENODEV));
        }
        let Some(st) = self.setup_queue(&k)? else {
            self.write_reg(&k, reg::STATUS, 0)?;
            return Ok(ProbeStatus::Failed(ENODEV));
        };
        *self.st.borrow_mut() = st;
        k.request_irq(0)?;
        self.write_reg(&k, reg::STATUS, status | STATUS_DRIVER_OK)?;
        self.write_reg(&k, reg::QUEUE_NOTIFY, 0)?;
        match k
            .wait_for_completion(&self.rx_done, s(13), Some(RX_TIMEOUT_NS))
            .await?
        {
            WaitOutcome::Woken => k.cover(s(14)),
            WaitOutcome::TimedOut => k.cover(s(15)),
        }
        Ok(ProbeStatus::Ok)
    }

    async fn irq_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let isr = k.mmio_read(0, reg::INTERRUPT_STATUS, 4, s(16))?;
        k.mmio_write(0, reg::INTERRUPT_ACK, 4, isr, s(16))?;
        if isr & 1 == 0 {
            k.cover(s(17));
            return Ok(());
        }
        let st = *self.st.borrow();
        if !st.probed {
            return Ok(());
        }
        let used_idx = k.read_u16(st.used.offset(2), s(18))?;
        while self.last_used.get() != used_idx {
            let slot = st.used.offset(4 + 8 * (self.last_used.get() as u64 % st.num as u64));
            let id = k.read_u32(slot, s(18))?;
            let len = k.read_u32(slot.offset(4), s(18))? as u64;
            self.last_used.set(self.last_used.get().wrapping_add(1));
            if id != 0 {
                k.cover(s(19));
                continue;
            }
            if !self.bug && len > RX_LEN {
                k.cover(s(20));
                continue;
            }
            k.dma_sync_for_cpu(st.rx_dma, len, s(21))?;
            if len >= 4 {
                let hdr = k.read_u32(st.rx_buf, s(22))?;
                k.cover(s(22 + (hdr & 1) as u16));
            }
        }
        self.rx_done.complete();
        Ok(())
    }

    async fn remove_inner(self: Rc<Self>, k: Kernel) -> KResult<()> {
        let st = *self.st.borrow();
        if !st.probed {
            return Ok(());
        }
        self.write_reg(&k, reg::STATUS, 0)?;
        k.free_irq(0)?;
        k.dma_unmap_single(st.rx_dma, RX_LEN, DmaDirection::FromDevice, s(9))?;
        k.free(st.rx_buf, s(8))?;
        k.free(st.priv_, s(8))?;
        Ok(())
    }
}

impl ModelDriver for VringConsumer {
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
