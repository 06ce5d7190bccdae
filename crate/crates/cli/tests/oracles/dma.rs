// SPDX-License-Identifier: Apache-2.0

//! Bounce-buffer validation properties: rejected unmaps and over-length
//! bounces.

use devfuzz_core::detect::{BugClass, DetectorEvent, class_of};
use devfuzz_core::dma::{DmaDirection, SWIOTLB_SIZE};
use devfuzz_core::engine::coverage::Site;
use devfuzz_core::engine::stream::InputStream;
use devfuzz_core::guest_env::addr::{GuestAddress, SHARED_BASE};
use devfuzz_core::guest_env::{Guest, GuestConfig, Kernel, NoInterrupts};
use devfuzz_core::rng::{XorShift64Star, fnv1a64};

const SITE: Site = Site::new(0x7e57, 1);

fn kernel(stream_seed: u64) -> Kernel {
    let mut data = Vec::new();
    XorShift64Star::new(stream_seed).fill_append(&mut data, 1 << 14);
    Kernel::new(Guest::new(
        GuestConfig::default(),
        InputStream::new(data, stream_seed),
        None,
        Box::new(NoInterrupts),
    ))
}

fn violations(k: &Kernel) -> Vec<DetectorEvent> {
    k.guest().violations.iter().map(|v| v.event.clone()).collect()
}

/// Unmaps of `n` random addresses that were never mapped. Returns how many
/// were rejected (reported, with every live mapping left in place).
pub fn rejected_unmaps(n: u32, seed: u64) -> u32 {
    let k = kernel(seed);
    let mut rng = XorShift64Star::new(seed);
    let mut mapped = Vec::new();
    for i in 0..8u64 {
        let len = 64 << i;
        let p = k.alloc(len, SITE).unwrap();
        mapped.push(k.dma_map_single(p, len, DmaDirection::FromDevice, SITE).unwrap());
    }
    let live = k.guest().dma.pool.mapped_count();
    let mut rejected = 0;
    let mut drawn = 0;
    while drawn < n {
        let a = match rng.below(3) {
            0 => rng.next_u64(),
            1 => SHARED_BASE + rng.below(SWIOTLB_SIZE),
            // Near a live mapping, but not its start.
            _ => mapped[rng.below(8) as usize].0 + rng.range_inclusive(1, 2047),
        };
        if mapped.iter().any(|m| m.0 == a) {
            continue;
        }
        drawn += 1;
        let before = k.guest().violations.len();
        let ok = k
            .dma_unmap_single(GuestAddress(a), 16, DmaDirection::FromDevice, SITE)
            .is_ok();
        let g = k.guest();
        let new = &g.violations[before..];
        if ok
            && new.len() == 1
            && new[0].event == DetectorEvent::RejectedUnmap
            && g.dma.pool.mapped_count() == live
        {
            rejected += 1;
        }
    }
    rejected
}

/// Checksum of every private byte outside `[base, base+len)`.
fn outside_checksum(k: &Kernel, base: u64, len: u64) -> u64 {
    let g = k.guest();
    let mut bytes = Vec::new();
    for a in g.slab.allocations() {
        for (i, b) in a.footprint().iter().enumerate() {
            let addr = a.start() + i as u64;
            if addr < base || addr >= base + len {
                bytes.push(*b);
            }
        }
    }
    fnv1a64(&bytes)
}

#[derive(Debug, Clone, Copy)]
pub struct Overlong {
    pub cases: u32,
    /// Cases with exactly one out-of-bounds report and nothing else.
    pub one_report: u32,
    /// Cases where memory outside the private buffer was untouched and the
    /// buffer holds the first `len` bytes of the device data.
    pub contained: u32,
}

/// Over-length bounces through both unmap and sync, with random buffer
/// lengths and claimed lengths.
pub fn overlong_bounces(cases: u32, seed: u64) -> Overlong {
    let mut rng = XorShift64Star::new(seed);
    let mut r = Overlong {
        cases: 0,
        one_report: 0,
        contained: 0,
    };
    for c in 0..cases {
        let k = kernel(seed ^ c as u64);
        let len = rng.range_inclusive(1, 4096);
        let claimed = len + rng.range_inclusive(1, 4096);
        let left = k.alloc(rng.range_inclusive(1, 64), SITE).unwrap();
        let buf = k.alloc(len, SITE).unwrap();
        let right = k.alloc(rng.range_inclusive(1, 64), SITE).unwrap();
        for p in [left, right] {
            let n = k.guest().slab.find_base(p).unwrap().size;
            k.write(p, &vec![0x5a; n as usize], SITE).unwrap();
        }
        k.write(buf, &vec![0xc3; len as usize], SITE).unwrap();
        let dma = k.dma_map_single(buf, len, DmaDirection::FromDevice, SITE).unwrap();
        let via_sync = c % 2 == 1;
        let mut device = Vec::new();
        rng.fill_append(&mut device, claimed as usize);
        if !via_sync {
            k.guest().shared.write(dma.0, &device);
        }
        let sum = outside_checksum(&k, buf.0, len);
        let before = k.guest().violations.len();
        let res = if via_sync {
            k.dma_sync_for_cpu(dma, claimed, SITE)
        } else {
            k.dma_unmap_single(dma, claimed, DmaDirection::FromDevice, SITE)
        };
        r.cases += 1;
        let events = violations(&k)[before..].to_vec();
        let oob = events
            .iter()
            .filter(|e| class_of(e).0 == BugClass::OutOfBounds)
            .count();
        if res.is_ok() && oob == 1 && events.len() == 1 {
            r.one_report += 1;
        }
        let shared_now = k.guest().shared.read(dma.0, len as usize);
        let private = k.read(buf, len as usize, SITE);
        let expect = if via_sync { Some(shared_now) } else { Some(device[..len as usize].to_vec()) };
        if outside_checksum(&k, buf.0, len) == sum && private.ok() == expect {
            r.contained += 1;
        }
    }
    r
}
