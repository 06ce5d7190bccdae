// SPDX-License-Identifier: Apache-2.0

//! Reference interpreter for the split virtqueue and an exhaustive
//! comparison against the emulated virtio-mmio device.
//!
//! The interpreter never reads guest memory. It keeps the driver's own view
//! of the descriptor table and the avail ring and computes, for each notify,
//! what the used ring, the receive buffers and the interrupt count must be.

use devfuzz_core::devices::irq::IrqLines;
use devfuzz_core::devices::virtio::{VRING_DESC_F_NEXT, VRING_DESC_F_WRITE, VirtioMmio, VringDesc, reg};
use devfuzz_core::engine::stream::InputStream;
use devfuzz_core::guest_env::addr::SHARED_BASE;
use devfuzz_core::guest_env::shared::{RegionKind, SharedMemory};
use devfuzz_core::rng::XorShift64Star;

const DESC: u64 = SHARED_BASE + 0x10_0000;
const AVAIL: u64 = SHARED_BASE + 0x10_1000;
const USED: u64 = SHARED_BASE + 0x10_2000;
const BUFS: u64 = SHARED_BASE + 0x11_0000;
const BUF_STRIDE: u64 = 0x100;

/// One buffer of a chain: device-writable or not, and its length.
type Part = (bool, u32);

/// Transaction shapes the generator draws from.
pub const SHAPES: &[&[Part]] = &[
    &[(true, 8)],
    &[(false, 4)],
    &[(false, 4), (true, 16)],
    &[(true, 1), (true, 3)],
    &[(false, 2), (false, 2), (true, 5)],
];

/// A transaction and whether the driver notifies right after posting it.
pub type Txn = (usize, bool);

struct Reference {
    num: u16,
    stream: InputStream,
    used: Vec<(u32, u32)>,
    used_idx: u16,
    irqs: u64,
    bufs: Vec<Vec<u8>>,
}

impl Reference {
    fn process(&mut self, chains: &[Vec<(u16, Part)>]) {
        for chain in chains {
            let mut total = 0u32;
            for &(d, (write, len)) in chain {
                if write {
                    let n = self.stream.next_u32() % (len + 1);
                    let data = self.stream.next_bytes(n as usize);
                    self.bufs[d as usize][..n as usize].copy_from_slice(&data);
                    total += n;
                }
            }
            let slot = (self.used_idx % self.num) as usize;
            self.used[slot] = (chain[0].0 as u32, total);
            self.used_idx = self.used_idx.wrapping_add(1);
        }
        if !chains.is_empty() {
            self.irqs += 1;
        }
    }
}

/// Runs `script` on a queue of `num` entries through both the device and
/// the reference. `None` when the script needs more descriptors than free.
pub fn compare(num: u16, script: &[Txn], stream_seed: u64) -> Option<Result<(), String>> {
    let mut rng = XorShift64Star::new(stream_seed);
    let mut data = Vec::new();
    rng.fill_append(&mut data, 512);

    let mut mem = SharedMemory::default();
    for (a, l) in [(DESC, 0x1000), (AVAIL, 0x1000), (USED, 0x1000), (BUFS, 0x1000)] {
        mem.register(a, l, RegionKind::Coherent);
    }
    let mut dev = VirtioMmio::new(1, 0x1af4, 0, false);
    let mut stream = InputStream::new(data.clone(), 7);
    let mut irq = IrqLines::new(1);
    irq.bind(0);
    let w = |dev: &mut VirtioMmio, mem: &mut SharedMemory, stream: &mut InputStream, irq: &mut IrqLines, off, v: u64| {
        dev.write_reg(off, 4, v, mem, stream, irq)
    };
    w(&mut dev, &mut mem, &mut stream, &mut irq, reg::QUEUE_SEL, 0);
    w(&mut dev, &mut mem, &mut stream, &mut irq, reg::QUEUE_NUM, num as u64);
    for (lo, a) in [(reg::QUEUE_DESC_LOW, DESC), (reg::QUEUE_DRIVER_LOW, AVAIL), (reg::QUEUE_DEVICE_LOW, USED)] {
        w(&mut dev, &mut mem, &mut stream, &mut irq, lo, a & 0xffff_ffff);
        w(&mut dev, &mut mem, &mut stream, &mut irq, lo + 4, a >> 32);
    }
    w(&mut dev, &mut mem, &mut stream, &mut irq, reg::QUEUE_READY, 1);

    let mut rf = Reference {
        num,
        stream: InputStream::new(data, 7),
        used: vec![(0, 0); num as usize],
        used_idx: 0,
        irqs: 0,
        bufs: vec![vec![0; BUF_STRIDE as usize]; num as usize],
    };
    let mut free: Vec<u16> = (0..num).rev().collect();
    let mut pending: Vec<Vec<(u16, Part)>> = Vec::new();
    let mut avail_idx: u16 = 0;

    for (step, &(shape, notify)) in script.iter().enumerate() {
        let parts = SHAPES[shape];
        if parts.len() > free.len() {
            return None;
        }
        let chain: Vec<(u16, Part)> = parts.iter().map(|p| (free.pop().unwrap(), *p)).collect();
        for (i, &(d, (write, len))) in chain.iter().enumerate() {
            let last = i + 1 == chain.len();
            let desc = VringDesc {
                addr: BUFS + BUF_STRIDE * d as u64,
                len,
                flags: if write { VRING_DESC_F_WRITE } else { 0 } | if last { 0 } else { VRING_DESC_F_NEXT },
                next: if last { 0 } else { chain[i + 1].0 },
            };
            mem.write(DESC + 16 * d as u64, &desc.encode());
        }
        mem.write(AVAIL + 4 + 2 * (avail_idx % num) as u64, &chain[0].0.to_le_bytes());
        avail_idx = avail_idx.wrapping_add(1);
        mem.write(AVAIL + 2, &avail_idx.to_le_bytes());
        pending.push(chain);

        if notify || step + 1 == script.len() {
            w(&mut dev, &mut mem, &mut stream, &mut irq, reg::QUEUE_NOTIFY, 0);
            rf.process(&pending);
            for chain in pending.drain(..) {
                free.extend(chain.iter().map(|(d, _)| *d));
            }
            if let Err(e) = agree(&mem, &rf, &dev, &irq) {
                return Some(Err(format!("num {num} script {script:?} step {step}: {e}")));
            }
        }
    }
    Some(Ok(()))
}

fn agree(mem: &SharedMemory, rf: &Reference, dev: &VirtioMmio, irq: &IrqLines) -> Result<(), String> {
    let idx = u16::from_le_bytes(mem.read(USED + 2, 2).try_into().unwrap());
    if idx != rf.used_idx {
        return Err(format!("used.idx {idx}, reference {}", rf.used_idx));
    }
    for (slot, &(id, len)) in rf.used.iter().enumerate() {
        let e = mem.read(USED + 4 + 8 * slot as u64, 8);
        let got = (
            u32::from_le_bytes(e[0..4].try_into().unwrap()),
            u32::from_le_bytes(e[4..8].try_into().unwrap()),
        );
        if got != (id, len) {
            return Err(format!("used[{slot}] = {got:?}, reference {:?}", (id, len)));
        }
    }
    for (d, want) in rf.bufs.iter().enumerate() {
        if mem.read(BUFS + BUF_STRIDE * d as u64, want.len()) != *want {
            return Err(format!("buffer of descriptor {d} differs"));
        }
    }
    if irq.requests() != rf.irqs {
        return Err(format!("{} interrupts, reference {}", irq.requests(), rf.irqs));
    }
    if !dev.anomalies.is_empty() {
        return Err(format!("device anomalies on a benign script: {:?}", dev.anomalies));
    }
    Ok(())
}

/// All scripts of 1..=`max_len` transactions over `SHAPES` x notify flag.
pub fn scripts(max_len: usize) -> Vec<Vec<Txn>> {
    let alphabet: Vec<Txn> = (0..SHAPES.len())
        .flat_map(|s| [(s, false), (s, true)])
        .collect();
    let mut out = Vec::new();
    let mut layer: Vec<Vec<Txn>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|p| {
                alphabet.iter().map(move |t| {
                    let mut q = p.clone();
                    q.push(*t);
                    q
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub scripts: u64,
    pub skipped: u64,
    pub mismatches: u64,
}

pub fn exhaustive(sizes: &[u16], max_len: usize) -> (Tally, Option<String>) {
    let mut t = Tally::default();
    let mut first = None;
    let all = scripts(max_len);
    for &num in sizes {
        for (i, s) in all.iter().enumerate() {
            match compare(num, s, i as u64 + 1) {
                None => t.skipped += 1,
                Some(Ok(())) => t.scripts += 1,
                Some(Err(e)) => {
                    t.scripts += 1;
                    t.mismatches += 1;
                    first.get_or_insert(e);
                }
            }
        }
    }
    (t, first)
}
