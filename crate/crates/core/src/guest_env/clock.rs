// SPDX-License-Identifier: Apache-2.0

/// Monotone virtual time in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Moves time forward to `t`; earlier targets are ignored.
    pub fn advance_to(&mut self, t: u64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn advance_by(&mut self, ns: u64) {
        self.now = self.now.saturating_add(ns);
    }
}

/// Whether driver-issued delays are elided. Fixed for a campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayPolicy {
    pub reduction_enabled: bool,
}

impl Default for DelayPolicy {
    fn default() -> Self {
        Self {
            reduction_enabled: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_goes_backwards() {
        let mut c = VirtualClock::default();
        c.advance_by(500);
        c.advance_to(100);
        assert_eq!(c.now(), 500);
        c.advance_to(700);
        assert_eq!(c.now(), 700);
    }
}
