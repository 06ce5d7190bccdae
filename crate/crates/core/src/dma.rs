// SPDX-License-Identifier: Apache-2.0

//! Streaming and coherent DMA on top of a swiotlb-style bounce pool.
//!
//! Streaming mappings get slots in a fixed shared pool; data moves between the
//! private buffer and its slot only at map, sync and unmap time. Coherent
//! buffers live in their own shared regions and are never bounced.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::detect::DetectorEvent;
use crate::engine::coverage::Site;
use crate::guest_env::addr::{GuestAddress, SHARED_BASE, SHARED_END};
use crate::guest_env::shared::RegionKind;
use crate::guest_env::{AccessKind, Guest, KResult, Kernel};

pub const SWIOTLB_SIZE: u64 = 1 << 20;
pub const SWIOTLB_SLOT: u64 = 2048;
/// Coherent buffers are carved from here upwards, page aligned.
pub const COHERENT_BASE: u64 = SHARED_BASE + (16 << 20);
const PAGE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DmaDirection {
    ToDevice,
    FromDevice,
    Bidirectional,
}

impl DmaDirection {
    pub fn to_device(self) -> bool {
        matches!(self, DmaDirection::ToDevice | DmaDirection::Bidirectional)
    }

    pub fn from_device(self) -> bool {
        matches!(self, DmaDirection::FromDevice | DmaDirection::Bidirectional)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingKind {
    Streaming,
    Coherent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingState {
    Mapped,
    Unmapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaMapping {
    pub dma_addr: GuestAddress,
    pub private_base: GuestAddress,
    pub len: u64,
    pub direction: DmaDirection,
    pub kind: MappingKind,
    pub state: MappingState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DmaError {
    #[error("zero-length mapping")]
    ZeroLength,
    #[error("swiotlb pool exhausted: need {needed} contiguous slots")]
    PoolExhausted { needed: u64 },
    #[error("shared address space exhausted allocating {size} coherent bytes")]
    SharedExhausted { size: u64 },
}

/// Bounce-buffer pool with first-fit contiguous slot allocation.
#[derive(Debug, Clone)]
pub struct SwiotlbPool {
    base: u64,
    slot_size: u64,
    used: Vec<bool>,
    registry: BTreeMap<u64, DmaMapping>,
}

impl Default for SwiotlbPool {
    fn default() -> Self {
        Self::new(SHARED_BASE, SWIOTLB_SIZE, SWIOTLB_SLOT)
    }
}

impl SwiotlbPool {
    pub fn new(base: u64, size: u64, slot_size: u64) -> Self {
        Self {
            base,
            slot_size,
            used: vec![false; (size / slot_size) as usize],
            registry: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.used.len() as u64 * self.slot_size
    }

    pub fn slot_size(&self) -> u64 {
        self.slot_size
    }

    pub fn free_slots(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }

    /// Reserves slots and records the mapping. Does not copy data.
    pub fn map(
        &mut self,
        private_base: GuestAddress,
        len: u64,
        direction: DmaDirection,
    ) -> Result<GuestAddress, DmaError> {
        if len == 0 {
            return Err(DmaError::ZeroLength);
        }
        let needed = len.div_ceil(self.slot_size);
        let n = needed as usize;
        let mut run = 0usize;
        let mut found = None;
        for (i, u) in self.used.iter().enumerate() {
            if *u {
                run = 0;
            } else {
                run += 1;
                if run == n {
                    found = Some(i + 1 - n);
                    break;
                }
            }
        }
        let first = found.ok_or(DmaError::PoolExhausted { needed })?;
        self.used[first..first + n].fill(true);
        let dma_addr = GuestAddress(self.base + first as u64 * self.slot_size);
        self.registry.insert(
            dma_addr.0,
            DmaMapping {
                dma_addr,
                private_base,
                len,
                direction,
                kind: MappingKind::Streaming,
                state: MappingState::Mapped,
            },
        );
        Ok(dma_addr)
    }

    pub fn lookup(&self, dma_addr: GuestAddress) -> Option<&DmaMapping> {
        self.registry.get(&dma_addr.0)
    }

    /// Drops the mapping and recycles its slots.
    pub fn release(&mut self, dma_addr: GuestAddress) -> Option<DmaMapping> {
        let mut m = self.registry.remove(&dma_addr.0)?;
        let first = ((m.dma_addr.0 - self.base) / self.slot_size) as usize;
        let n = m.len.div_ceil(self.slot_size) as usize;
        self.used[first..first + n].fill(false);
        m.state = MappingState::Unmapped;
        Some(m)
    }

    pub fn mapped(&self) -> impl Iterator<Item = &DmaMapping> {
        self.registry.values()
    }

    pub fn mapped_count(&self) -> usize {
        self.registry.len()
    }
}

/// Bump allocator for coherent buffers; a guard page separates buffers.
#[derive(Debug, Clone)]
pub struct CoherentArena {
    next: u64,
    end: u64,
    mappings: Vec<DmaMapping>,
}

impl Default for CoherentArena {
    fn default() -> Self {
        Self {
            next: COHERENT_BASE,
            end: SHARED_END,
            mappings: Vec::new(),
        }
    }
}

impl CoherentArena {
    pub fn alloc(&mut self, size: u64) -> Result<GuestAddress, DmaError> {
        if size == 0 {
            return Err(DmaError::ZeroLength);
        }
        let start = self.next;
        let next = size
            .div_ceil(PAGE)
            .checked_add(1)
            .and_then(|pages| pages.checked_mul(PAGE))
            .and_then(|span| start.checked_add(span))
            .filter(|n| *n <= self.end)
            .ok_or(DmaError::SharedExhausted { size })?;
        self.next = next;
        self.mappings.push(DmaMapping {
            dma_addr: GuestAddress(start),
            private_base: GuestAddress::NULL,
            len: size,
            direction: DmaDirection::Bidirectional,
            kind: MappingKind::Coherent,
            state: MappingState::Mapped,
        });
        Ok(GuestAddress(start))
    }

    pub fn mappings(&self) -> &[DmaMapping] {
        &self.mappings
    }
}

/// Per-iteration DMA state owned by the guest.
#[derive(Debug, Clone, Default)]
pub struct DmaState {
    pub pool: SwiotlbPool,
    pub coherent: CoherentArena,
    /// Stream bytes injected at sync and coherent-read points.
    pub injected_bytes: u64,
}

/// Copies `n` bytes of the mapping's shared slot back to its private buffer.
fn bounce_to_private(g: &mut Guest, m: &DmaMapping, n: u64, site: Site) -> KResult<()> {
    if let Err((event, detail)) = g.access_check(m.private_base.0, n, AccessKind::Write) {
        return Err(g.fail(event, site, format!("bounce into private buffer: {detail}")));
    }
    let bytes = g.shared.read(m.dma_addr.0, n as usize);
    g.slab.write(m.private_base.0, &bytes);
    Ok(())
}

impl Kernel {
    /// Maps a private buffer for streaming DMA and returns its bounce address.
    pub fn dma_map_single(
        &self,
        private: GuestAddress,
        len: u64,
        direction: DmaDirection,
        site: Site,
    ) -> KResult<GuestAddress> {
        let mut g = self.guest();
        g.op()?;
        if let Err((event, detail)) = g.access_check(private.0, len, AccessKind::Read) {
            return Err(g.fail(event, site, format!("dma map: {detail}")));
        }
        let dma = match g.dma.pool.map(private, len, direction) {
            Ok(a) => a,
            Err(e) => return Err(g.env_fail(e.to_string())),
        };
        if direction.to_device() {
            let bytes = g.slab.read(private.0, len as usize);
            g.shared.write(dma.0, &bytes);
        }
        Ok(dma)
    }

    /// Tears down a streaming mapping, bouncing device data back first.
    ///
    /// Unknown addresses are rejected. A claimed length beyond the mapping is
    /// reported, then clamped.
    pub fn dma_unmap_single(
        &self,
        dma: GuestAddress,
        claimed_len: u64,
        _direction: DmaDirection,
        site: Site,
    ) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        let Some(m) = g.dma.pool.lookup(dma).copied() else {
            g.warn(
                DetectorEvent::RejectedUnmap,
                site,
                format!("unmap of {dma}, which has not been mapped"),
            );
            return Ok(());
        };
        if claimed_len > m.len {
            g.warn(
                DetectorEvent::OverlongBounce,
                site,
                format!("unmap bounces {claimed_len} bytes from a {}-byte mapping", m.len),
            );
        }
        let n = claimed_len.min(m.len);
        if m.direction.from_device() && n > 0 {
            bounce_to_private(&mut g, &m, n, site)?;
        }
        g.dma.pool.release(dma);
        Ok(())
    }

    /// CPU synchronization point: the device's side of the buffer is filled
    /// with fresh input (in passthrough mode) and bounced to the private
    /// buffer.
    pub fn dma_sync_for_cpu(&self, dma: GuestAddress, len: u64, site: Site) -> KResult<()> {
        let mut g = self.guest();
        g.op()?;
        let Some(m) = g.dma.pool.lookup(dma).copied() else {
            g.warn(
                DetectorEvent::RejectedUnmap,
                site,
                format!("sync of {dma}, which has not been mapped"),
            );
            return Ok(());
        };
        let n = len.min(m.len);
        if g.injection_mode() {
            let bytes = g.stream.next_bytes(len as usize);
            g.dma.injected_bytes += len;
            g.shared.write(dma.0, &bytes[..n as usize]);
        }
        if len > m.len {
            g.warn(
                DetectorEvent::OverlongBounce,
                site,
                format!("sync bounces {len} bytes from a {}-byte mapping", m.len),
            );
        }
        if m.direction.from_device() && n > 0 {
            bounce_to_private(&mut g, &m, n, site)?;
        }
        Ok(())
    }

    /// Allocates a buffer shared with the device without bouncing.
    pub fn dma_alloc_coherent(&self, size: u64, _site: Site) -> KResult<GuestAddress> {
        let mut g = self.guest();
        g.op()?;
        match g.dma.coherent.alloc(size) {
            Ok(a) => {
                g.shared.register(a.0, size, RegionKind::Coherent);
                Ok(a)
            }
            Err(e) => Err(g.env_fail(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: GuestAddress = GuestAddress(0xFFFF_8000_0000_0010);

    #[test]
    fn maps_are_disjoint_and_registered() {
        let mut pool = SwiotlbPool::default();
        let a = pool.map(P, 256, DmaDirection::FromDevice).unwrap();
        let b = pool.map(P, 4096, DmaDirection::ToDevice).unwrap();
        let c = pool.map(P, 1, DmaDirection::ToDevice).unwrap();
        assert_eq!(a.0, SHARED_BASE);
        assert_eq!(b.0, SHARED_BASE + 2048);
        assert_eq!(c.0, SHARED_BASE + 3 * 2048);
        assert_eq!(pool.mapped_count(), 3);
        pool.release(b).unwrap();
        // First fit reuses the hole.
        let d = pool.map(P, 2048, DmaDirection::ToDevice).unwrap();
        assert_eq!(d, b);
    }

    #[test]
    fn pool_geometry_limits() {
        let mut pool = SwiotlbPool::default();
        assert_eq!(pool.size(), SWIOTLB_SIZE);
        assert_eq!(
            pool.map(P, SWIOTLB_SIZE + 1, DmaDirection::ToDevice),
            Err(DmaError::PoolExhausted { needed: 513 })
        );
        assert!(pool.map(P, SWIOTLB_SIZE, DmaDirection::ToDevice).is_ok());
        assert!(pool.map(P, 1, DmaDirection::ToDevice).is_err());
        assert_eq!(pool.map(P, 0, DmaDirection::ToDevice), Err(DmaError::ZeroLength));
    }

    #[test]
    fn release_unknown_is_none() {
        let mut pool = SwiotlbPool::default();
        assert!(pool.release(GuestAddress(SHARED_BASE)).is_none());
    }

    #[test]
    fn coherent_buffers_have_guard_gaps() {
        let mut c = CoherentArena::default();
        let a = c.alloc(128).unwrap();
        let b = c.alloc(4096).unwrap();
        assert_eq!(a.0, COHERENT_BASE);
        assert_eq!(b.0, COHERENT_BASE + 2 * PAGE);
        assert_eq!(c.mappings().len(), 2);
        assert!(matches!(c.alloc(SHARED_END), Err(DmaError::SharedExhausted { .. })));
    }
}
