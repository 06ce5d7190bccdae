// SPDX-License-Identifier: Apache-2.0

//! Coverage-guided fuzzing of model device drivers through a simulated
//! virtual device interface: MMIO/PIO registers, DMA and interrupts.

pub mod detect;
pub mod devices;
pub mod dma;
pub mod drivers;
pub mod engine;
pub mod guest_env;
pub mod harness;
pub mod rng;
