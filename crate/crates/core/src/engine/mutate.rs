// SPDX-License-Identifier: Apache-2.0

//! Single-step byte mutations over the corpus.

use crate::rng::{XorShift64Star, mix64};

use super::corpus::{Corpus, CorpusEntry};

/// Length bound for inputs generated from an empty corpus.
pub const FRESH_MAX_LEN: usize = 4096;
/// Bytes appended by one extend step, at most.
pub const EXTEND_MAX: usize = 64;

const INTERESTING: [u8; 10] = [0x00, 0x01, 0x02, 0x7f, 0x80, 0xfe, 0xff, 0x10, 0x20, 0x40];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    BitFlip,
    ByteReplace,
    Splice,
    Truncate,
    Extend,
}

impl MutationOp {
    pub const ALL: [MutationOp; 5] = [
        MutationOp::BitFlip,
        MutationOp::ByteReplace,
        MutationOp::Splice,
        MutationOp::Truncate,
        MutationOp::Extend,
    ];
}

#[derive(Debug, Clone)]
pub struct Mutator {
    rng: XorShift64Star,
    max_size: usize,
}

impl Mutator {
    pub fn new(seed: u64, max_size: usize) -> Self {
        Self {
            rng: XorShift64Star::new(mix64(seed ^ 0x6d75_7461_7465_7221)),
            max_size,
        }
    }

    /// Next candidate input: fresh random bytes while the corpus is empty,
    /// otherwise one mutation of a corpus entry.
    pub fn mutate(&mut self, corpus: &Corpus) -> Vec<u8> {
        if corpus.is_empty() {
            return self.fresh();
        }
        let op = MutationOp::ALL[self.rng.below(MutationOp::ALL.len() as u64) as usize];
        self.mutate_with(corpus, op)
    }

    /// Random bytes of random length in `[1, min(4096, max_size)]`.
    pub fn fresh(&mut self) -> Vec<u8> {
        let hi = FRESH_MAX_LEN.min(self.max_size).max(1) as u64;
        let len = self.rng.range_inclusive(1, hi) as usize;
        let mut out = Vec::with_capacity(len);
        self.rng.fill_append(&mut out, len);
        out.truncate(self.max_size);
        out
    }

    /// Applies `op` to a chosen entry of a non-empty corpus.
    pub fn mutate_with(&mut self, corpus: &Corpus, op: MutationOp) -> Vec<u8> {
        let entry = self.pick(corpus);
        let mut data = entry.data.clone();
        match op {
            MutationOp::BitFlip => {
                if data.is_empty() {
                    data.push(0);
                }
                let pos = self.position(entry, data.len());
                data[pos] ^= 1 << self.rng.below(8);
            }
            MutationOp::ByteReplace => {
                if data.is_empty() {
                    data.push(0);
                }
                let pos = self.position(entry, data.len());
                data[pos] = if self.rng.chance(1, 4) {
                    INTERESTING[self.rng.below(INTERESTING.len() as u64) as usize]
                } else {
                    self.rng.next_u8()
                };
            }
            MutationOp::Splice => {
                let other = &corpus.entries()[self.rng.below(corpus.len() as u64) as usize];
                let cut_a = self.rng.range_inclusive(0, data.len() as u64) as usize;
                let cut_b = self.rng.range_inclusive(0, other.data.len() as u64) as usize;
                data.truncate(cut_a);
                data.extend_from_slice(&other.data[cut_b..]);
            }
            MutationOp::Truncate => {
                let new_len = if data.is_empty() {
                    0
                } else {
                    self.rng.below(data.len() as u64) as usize
                };
                data.truncate(new_len);
            }
            MutationOp::Extend => {
                let n = self.rng.range_inclusive(1, EXTEND_MAX as u64) as usize;
                self.rng.fill_append(&mut data, n);
            }
        }
        data.truncate(self.max_size);
        data
    }

    /// Half the time the newest entry, otherwise uniform.
    fn pick<'c>(&mut self, corpus: &'c Corpus) -> &'c CorpusEntry {
        let entries = corpus.entries();
        if self.rng.chance(1, 2) {
            entries.last().unwrap()
        } else {
            &entries[self.rng.below(entries.len() as u64) as usize]
        }
    }

    /// Mutation offset, biased into the prefix the entry actually consumed.
    fn position(&mut self, entry: &CorpusEntry, len: usize) -> usize {
        let prefix = entry.consumed.min(len);
        if prefix > 0 && self.rng.chance(3, 4) {
            self.rng.below(prefix as u64) as usize
        } else {
            self.rng.below(len as u64) as usize
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_with(data: &[u8]) -> Corpus {
        let mut c = Corpus::default();
        c.admit(data, &[1], 0, data.len());
        c
    }

    #[test]
    fn empty_corpus_is_seeded() {
        let a = Mutator::new(7, 10240).mutate(&Corpus::default());
        let b = Mutator::new(7, 10240).mutate(&Corpus::default());
        assert_eq!(a, b);
        assert!((1..=4096).contains(&a.len()));
        assert_ne!(a, Mutator::new(8, 10240).mutate(&Corpus::default()));
    }

    #[test]
    fn truncate_shortens() {
        let c = corpus_with(&[1, 2, 3, 4]);
        let mut m = Mutator::new(1, 10240);
        for _ in 0..100 {
            assert!(m.mutate_with(&c, MutationOp::Truncate).len() < 4);
        }
    }

    #[test]
    fn single_byte_ops_keep_length() {
        let c = corpus_with(&[9; 16]);
        let mut m = Mutator::new(2, 10240);
        for _ in 0..100 {
            let f = m.mutate_with(&c, MutationOp::BitFlip);
            assert_eq!(f.len(), 16);
            assert_eq!(f.iter().zip([9u8; 16]).filter(|(a, b)| a != &b).count(), 1);
            assert_eq!(m.mutate_with(&c, MutationOp::ByteReplace).len(), 16);
            let e = m.mutate_with(&c, MutationOp::Extend);
            assert!((17..=16 + EXTEND_MAX).contains(&e.len()));
            assert_eq!(&e[..16], &[9; 16]);
        }
    }

    #[test]
    fn outputs_respect_max_size() {
        let c = corpus_with(&[0; 100]);
        let mut m = Mutator::new(3, 100);
        for _ in 0..1000 {
            assert!(m.mutate(&c).len() <= 100);
        }
        let mut small = Mutator::new(3, 8);
        for _ in 0..100 {
            let f = small.mutate(&Corpus::default());
            assert!((1..=8).contains(&f.len()));
        }
    }
}
