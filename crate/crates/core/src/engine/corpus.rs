// SPDX-License-Identifier: Apache-2.0

//! Inputs kept for mutation because they reached new coverage.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::coverage::{EdgeSet, fingerprint};

/// Default cap on a single corpus input.
pub const DEFAULT_MAX_ENTRY_SIZE: usize = 10 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub data: Vec<u8>,
    pub fingerprint: u64,
    /// Campaign iteration that discovered the entry.
    pub iteration: u64,
    /// Input bytes the iteration actually consumed.
    pub consumed: usize,
}

impl CorpusEntry {
    /// `<16 hex digit fingerprint>.bin`
    pub fn file_name(&self) -> String {
        format!("{:016x}.bin", self.fingerprint)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    max_entry_size: usize,
    union: EdgeSet,
}

impl Default for Corpus {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ENTRY_SIZE)
    }
}

impl Corpus {
    pub fn new(max_entry_size: usize) -> Self {
        Self {
            entries: Vec::new(),
            max_entry_size,
            union: EdgeSet::new(),
        }
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_entry_size(&self) -> usize {
        self.max_entry_size
    }

    /// Edges covered by the union of all entries.
    pub fn covered(&self) -> &EdgeSet {
        &self.union
    }

    /// Admits `data` iff it fits and `edges` (sorted) holds an edge no
    /// earlier entry covered.
    pub fn admit(&mut self, data: &[u8], edges: &[u16], iteration: u64, consumed: usize) -> bool {
        if data.len() > self.max_entry_size || self.union.novel(edges).is_empty() {
            return false;
        }
        self.union.insert_all(edges);
        self.entries.push(CorpusEntry {
            data: data.to_vec(),
            fingerprint: fingerprint(edges),
            iteration,
            consumed: consumed.min(data.len()),
        });
        true
    }

    /// Writes every entry into `dir`, creating it if needed. Returns the
    /// written paths.
    pub fn save(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let p = dir.join(e.file_name());
            fs::write(&p, &e.data)?;
            out.push(p);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admits_only_novel_coverage() {
        let mut c = Corpus::new(8);
        assert!(c.admit(b"a", &[1, 2], 0, 1));
        assert!(!c.admit(b"b", &[1], 1, 1));
        assert!(!c.admit(b"c", &[2, 1], 2, 1));
        assert!(c.admit(b"d", &[2, 3], 3, 1));
        assert!(!c.admit(b"e", &[], 4, 0));
        assert!(!c.admit(&[0; 9], &[9], 5, 9));
        assert_eq!(c.len(), 2);
        assert_eq!(c.covered().len(), 3);
    }

    #[test]
    fn file_names_are_fingerprints() {
        let mut c = Corpus::default();
        c.admit(b"xyz", &[7], 0, 3);
        let name = c.entries()[0].file_name();
        assert_eq!(name.len(), 16 + 4);
        assert_eq!(name, format!("{:016x}.bin", fingerprint(&[7])));
        let dir = std::env::temp_dir().join(format!("devfuzz-corpus-{}", std::process::id()));
        let paths = c.save(&dir).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), b"xyz");
        fs::remove_dir_all(&dir).unwrap();
    }
}
