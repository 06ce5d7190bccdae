// SPDX-License-Identifier: Apache-2.0

//! Brute-force interval model of the private allocator, and an exhaustive
//! comparison against `SlabAllocator`.
//!
//! Layout rules the model encodes: chunks are laid end to end from the
//! private base; each chunk is a 16-byte left redzone, the data, then
//! padding to a 16-byte boundary plus a 16-byte right redzone. Freed chunks
//! stay in place (nothing is evicted within 12 operations).

use devfuzz_core::guest_env::addr::{GuestAddress, PRIVATE_BASE};
use devfuzz_core::guest_env::alloc::{FreeError, SlabAllocator, Zone};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Redzone,
    Freed,
    Unmapped,
    DoubleFree,
    InvalidFree,
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    lo: u64,
    base: u64,
    size: u64,
    hi: u64,
    freed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Model {
    chunks: Vec<Chunk>,
}

impl Model {
    fn next_lo(&self) -> u64 {
        self.chunks.last().map_or(PRIVATE_BASE, |c| c.hi)
    }

    pub fn alloc(&mut self, size: u64) -> u64 {
        let lo = self.next_lo();
        let base = lo + 16;
        let mut hi = base + size;
        while hi % 16 != 0 {
            hi += 1;
        }
        hi += 16;
        self.chunks.push(Chunk {
            lo,
            base,
            size,
            hi,
            freed: false,
        });
        base
    }

    pub fn free(&mut self, ptr: u64) -> Verdict {
        match self.chunks.iter_mut().find(|c| c.base == ptr) {
            None => Verdict::InvalidFree,
            Some(c) if c.freed => Verdict::DoubleFree,
            Some(c) => {
                c.freed = true;
                Verdict::Ok
            }
        }
    }

    fn byte(&self, a: u64) -> Verdict {
        for c in &self.chunks {
            if a >= c.lo && a < c.hi {
                return if c.freed {
                    Verdict::Freed
                } else if a >= c.base && a < c.base + c.size {
                    Verdict::Ok
                } else {
                    Verdict::Redzone
                };
            }
        }
        Verdict::Unmapped
    }

    pub fn access(&self, addr: u64, len: u64) -> Verdict {
        for a in addr..addr + len {
            let v = self.byte(a);
            if v != Verdict::Ok {
                return v;
            }
        }
        Verdict::Ok
    }
}

fn zone_verdict(z: Option<(u64, Zone)>) -> Verdict {
    match z {
        None => Verdict::Ok,
        Some((_, Zone::Redzone)) => Verdict::Redzone,
        Some((_, Zone::Freed)) => Verdict::Freed,
        Some((_, Zone::Unmapped)) => Verdict::Unmapped,
        Some((_, Zone::Data)) => unreachable!("data is not a fault"),
    }
}

fn free_verdict(r: Result<(), FreeError>) -> Verdict {
    match r {
        Ok(()) => Verdict::Ok,
        Err(FreeError::DoubleFree(_)) => Verdict::DoubleFree,
        Err(FreeError::InvalidFree(_)) => Verdict::InvalidFree,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Alloc,
    FreeRecent,
    FreeFirst,
}

const OPS: [Op; 3] = [Op::Alloc, Op::FreeRecent, Op::FreeFirst];
const ACCESS_LENS: [u64; 3] = [1, 2, 8];

/// Size of the `k`-th allocation under size rotation `r`; across the eight
/// rotations every position sees every size in 1..=8.
pub fn size_for(r: u64, k: u64) -> u64 {
    (r + 3 * k) % 8 + 1
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Tally {
    pub sequences: u64,
    pub checks: u64,
    pub mismatches: u64,
}

struct Search<'a> {
    rotation: u64,
    max_len: usize,
    tally: &'a mut Tally,
    first_mismatch: &'a mut Option<String>,
}

impl Search<'_> {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.tally.checks += 1;
        if !ok {
            self.tally.mismatches += 1;
            if self.first_mismatch.is_none() {
                *self.first_mismatch = Some(what());
            }
        }
    }

    /// Every access an operation could make at this point: each handle,
    /// every offset from one byte before its chunk to one byte past it, and
    /// three lengths. Invalid frees of interior pointers are checked on a
    /// copy, since they must leave the state unchanged.
    fn probe(&mut self, slab: &SlabAllocator, model: &Model, handles: &[u64], path: &[Op]) {
        let mut starts: Vec<u64> = vec![PRIVATE_BASE.saturating_sub(1)];
        for &h in handles {
            let end = model
                .chunks
                .iter()
                .find(|c| c.base == h)
                .map(|c| c.hi)
                .unwrap();
            starts.extend(h - 17..=end);
        }
        let rot = self.rotation;
        starts.sort_unstable();
        starts.dedup();
        for a in starts {
            for len in ACCESS_LENS {
                let got = zone_verdict(slab.first_fault(a, len));
                let want = model.access(a, len);
                self.check(got == want, || {
                    format!("{path:?} rot {rot}: access {a:#x}+{len}: got {got:?} want {want:?}")
                });
            }
        }
        if let Some(&h) = handles.last() {
            for d in [1u64, 8] {
                let mut s = slab.clone();
                let got = free_verdict(s.gfree(GuestAddress(h + d)));
                self.check(got == Verdict::InvalidFree && s.live_count() == slab.live_count(), || {
                    format!("{path:?}: free of {:#x} gave {got:?}", h + d)
                });
            }
        }
    }

    fn dfs(&mut self, slab: SlabAllocator, model: Model, handles: Vec<u64>, path: &mut Vec<Op>) {
        self.tally.sequences += 1;
        if path.len() < self.max_len {
            self.probe(&slab, &model, &handles, path);
        } else {
            return;
        }
        for op in OPS {
            let (mut s, mut m, mut h) = (slab.clone(), model.clone(), handles.clone());
            path.push(op);
            match op {
                Op::Alloc => {
                    let size = size_for(self.rotation, h.len() as u64);
                    let got = s.galloc(size, 0).map(|p| p.0);
                    let want = m.alloc(size);
                    self.check(got == Ok(want), || format!("{path:?}: alloc({size}) gave {got:?} want {want:#x}"));
                    h.push(want);
                }
                Op::FreeRecent | Op::FreeFirst => {
                    let target = if op == Op::FreeRecent { h.last() } else { h.first() };
                    let ptr = target.copied().unwrap_or(PRIVATE_BASE + 16);
                    let got = free_verdict(s.gfree(GuestAddress(ptr)));
                    let want = m.free(ptr);
                    self.check(got == want, || format!("{path:?}: free({ptr:#x}) gave {got:?} want {want:?}"));
                }
            }
            self.dfs(s, m, h, path);
            path.pop();
        }
    }
}

/// Compares allocator and model over every operation sequence up to
/// `max_len` (an access counts as one operation, so accesses are probed at
/// every prefix shorter than `max_len`).
pub fn exhaustive(max_len: usize) -> (Tally, Option<String>) {
    let mut tally = Tally::default();
    let mut first = None;
    for rotation in 0..8 {
        let mut s = Search {
            rotation,
            max_len,
            tally: &mut tally,
            first_mismatch: &mut first,
        };
        s.dfs(SlabAllocator::default(), Model::default(), Vec::new(), &mut Vec::new());
    }
    (tally, first)
}

/// The model agrees with the allocator contract's own examples.
pub fn self_check() {
    let mut m = Model::default();
    let p = m.alloc(64);
    assert_eq!(m.access(p, 64), Verdict::Ok);
    assert_eq!(m.access(p + 64, 1), Verdict::Redzone);
    assert_eq!(m.free(p), Verdict::Ok);
    assert_eq!(m.free(p), Verdict::DoubleFree);
    assert_eq!(m.access(p, 1), Verdict::Freed);
    assert_eq!(m.access(p + 4096, 1), Verdict::Unmapped);
}
