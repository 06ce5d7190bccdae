// SPDX-License-Identifier: Apache-2.0

use std::fmt;

/// First guest-private (encrypted) address: canonical upper-half kernel space.
pub const PRIVATE_BASE: u64 = 0xFFFF_8000_0000_0000;
/// Exclusive end of the private range.
pub const PRIVATE_END: u64 = 0xFFFF_FFFF_FFFF_FFFF;
/// First shared (decrypted) address.
pub const SHARED_BASE: u64 = 0x0000_0000_1000_0000;
/// Exclusive end of the shared range.
pub const SHARED_END: u64 = 0x0000_0000_2000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddressSpace {
    Shared,
    Private,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GuestAddress(pub u64);

impl GuestAddress {
    pub const NULL: GuestAddress = GuestAddress(0);

    pub fn space(self) -> Option<AddressSpace> {
        space_of(self.0)
    }

    pub fn offset(self, off: u64) -> GuestAddress {
        GuestAddress(self.0.wrapping_add(off))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for GuestAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

pub fn in_private_range(v: u64) -> bool {
    (PRIVATE_BASE..PRIVATE_END).contains(&v)
}

pub fn in_shared_range(v: u64) -> bool {
    (SHARED_BASE..SHARED_END).contains(&v)
}

pub fn space_of(v: u64) -> Option<AddressSpace> {
    if in_private_range(v) {
        Some(AddressSpace::Private)
    } else if in_shared_range(v) {
        Some(AddressSpace::Shared)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_edges() {
        assert_eq!(space_of(PRIVATE_BASE - 1), None);
        assert_eq!(space_of(PRIVATE_BASE), Some(AddressSpace::Private));
        assert_eq!(space_of(PRIVATE_END - 1), Some(AddressSpace::Private));
        assert_eq!(space_of(PRIVATE_END), None);
        assert_eq!(space_of(SHARED_BASE - 1), None);
        assert_eq!(space_of(SHARED_BASE), Some(AddressSpace::Shared));
        assert_eq!(space_of(SHARED_END - 1), Some(AddressSpace::Shared));
        assert_eq!(space_of(SHARED_END), None);
        assert_eq!(space_of(0), None);
    }
}
