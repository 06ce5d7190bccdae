// SPDX-License-Identifier: Apache-2.0

pub mod alloc;
pub mod dma;
pub mod ring;
