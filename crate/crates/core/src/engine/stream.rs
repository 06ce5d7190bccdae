// SPDX-License-Identifier: Apache-2.0

//! Fuzzer input viewed as a serialized sequence of device-to-driver transfers.

use crate::rng::XorShift64Star;

/// Byte source for every device-controlled value in an iteration.
///
/// Reads past the end of the input are served from an xorshift64* generator
/// seeded with `prng_seed`; the generated bytes are appended to `data` so a
/// replay with the same seed sees exactly the same bytes.
#[derive(Debug, Clone)]
pub struct InputStream {
    data: Vec<u8>,
    cursor: usize,
    original_len: usize,
    prng_seed: u64,
    prng: XorShift64Star,
}

impl InputStream {
    pub fn new(data: impl Into<Vec<u8>>, prng_seed: u64) -> Self {
        let data = data.into();
        Self {
            original_len: data.len(),
            data,
            cursor: 0,
            prng_seed,
            prng: XorShift64Star::new(prng_seed),
        }
    }

    /// Returns exactly `n` bytes and advances the cursor by `n`.
    pub fn next_bytes(&mut self, n: usize) -> Vec<u8> {
        let end = self.cursor + n;
        if end > self.data.len() {
            let shortfall = end - self.data.len();
            self.prng.fill_append(&mut self.data, shortfall);
        }
        let out = self.data[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    pub fn next_u8(&mut self) -> u8 {
        self.next_bytes(1)[0]
    }

    pub fn next_u16(&mut self) -> u16 {
        let b = self.next_bytes(2);
        u16::from_le_bytes([b[0], b[1]])
    }

    pub fn next_u32(&mut self) -> u32 {
        let b = self.next_bytes(4);
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    /// Little-endian value of `width` bytes (1..=8).
    pub fn next_le(&mut self, width: usize) -> u64 {
        debug_assert!((1..=8).contains(&width));
        let mut buf = [0u8; 8];
        buf[..width].copy_from_slice(&self.next_bytes(width));
        u64::from_le_bytes(buf)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn prng_seed(&self) -> u64 {
        self.prng_seed
    }

    pub fn prng_state(&self) -> u64 {
        self.prng.state()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Bytes of the original input consumed so far.
    pub fn consumed_input(&self) -> usize {
        self.cursor.min(self.original_len)
    }

    /// True once any read has been served from the generator.
    pub fn underrun(&self) -> bool {
        self.data.len() > self.original_len
    }
}
