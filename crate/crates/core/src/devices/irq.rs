// SPDX-License-Identifier: Apache-2.0

//! Level-triggered interrupt lines.

#[derive(Debug, Clone, Default)]
pub struct IrqLines {
    pending: Vec<bool>,
    bound: Vec<bool>,
    requests: u64,
    raised: u64,
    coalesced: u64,
    delivered: u64,
    diagnostics: Vec<String>,
}

impl IrqLines {
    pub fn new(lines: u32) -> Self {
        Self {
            pending: vec![false; lines as usize],
            bound: vec![false; lines as usize],
            ..Self::default()
        }
    }

    pub fn count(&self) -> u32 {
        self.pending.len() as u32
    }

    /// Marks `line` pending. Raising an already pending line coalesces.
    pub fn raise(&mut self, line: u32) {
        self.requests += 1;
        let l = line as usize;
        if l >= self.pending.len() || !self.bound[l] {
            self.diagnostics
                .push(format!("interrupt on unbound line {line} dropped"));
            return;
        }
        self.raised += 1;
        if self.pending[l] {
            self.coalesced += 1;
        }
        self.pending[l] = true;
    }

    pub fn bind(&mut self, line: u32) -> bool {
        match self.bound.get_mut(line as usize) {
            Some(b) => {
                *b = true;
                true
            }
            None => false,
        }
    }

    pub fn unbind(&mut self, line: u32) {
        if let Some(b) = self.bound.get_mut(line as usize) {
            *b = false;
            self.pending[line as usize] = false;
        }
    }

    pub fn is_bound(&self, line: u32) -> bool {
        self.bound.get(line as usize).copied().unwrap_or(false)
    }

    pub fn is_pending(&self, line: u32) -> bool {
        self.pending.get(line as usize).copied().unwrap_or(false)
    }

    /// Clears and returns the pending flag; called right before the handler
    /// is scheduled.
    pub fn take(&mut self, line: u32) -> bool {
        match self.pending.get_mut(line as usize) {
            Some(p) if *p => {
                *p = false;
                self.delivered += 1;
                true
            }
            _ => false,
        }
    }

    pub fn any_pending(&self) -> bool {
        self.pending.iter().any(|p| *p)
    }

    /// Raise requests, including ones dropped on unbound lines.
    pub fn requests(&self) -> u64 {
        self.requests
    }

    pub fn raised(&self) -> u64 {
        self.raised
    }

    pub fn coalesced(&self) -> u64 {
        self.coalesced
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalesces_while_pending() {
        let mut l = IrqLines::new(2);
        l.bind(0);
        l.raise(0);
        l.raise(0);
        assert_eq!(l.raised(), 2);
        assert_eq!(l.coalesced(), 1);
        assert!(l.take(0));
        assert!(!l.take(0));
        assert_eq!(l.delivered(), 1);
    }

    #[test]
    fn unbound_line_is_diagnostic_only() {
        let mut l = IrqLines::new(1);
        l.raise(0);
        l.raise(5);
        assert!(!l.any_pending());
        assert_eq!(l.diagnostics().len(), 2);
        assert_eq!(l.raised(), 0);
    }
}
