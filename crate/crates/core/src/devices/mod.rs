// SPDX-License-Identifier: Apache-2.0

//! Simulated devices. A passthrough device answers every read with stream
//! bytes and discards writes; the emulated virtio device keeps a register
//! model and processes split virtqueues.

pub mod irq;
pub mod virtio;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::stream::InputStream;
use crate::guest_env::shared::SharedMemory;

use irq::IrqLines;
use virtio::VirtioMmio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bus {
    Pci,
    Platform,
    Virtio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoKind {
    Mmio,
    Pio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimMode {
    Passthrough,
    Emulated,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl $ty {
            pub fn keyword(self) -> &'static str {
                match self { $($ty::$variant => $kw),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.keyword())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($ty).to_lowercase())),
                }
            }
        }
    };
}

keyword_enum!(Bus { Pci => "pci", Platform => "platform", Virtio => "virtio" });
keyword_enum!(IoKind { Mmio => "mmio", Pio => "pio" });
keyword_enum!(SimMode { Passthrough => "passthrough", Emulated => "emulated" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IoRegion {
    pub index: u32,
    pub size: u64,
    pub kind: IoKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeviceConfig {
    pub bus: Bus,
    pub vendor_id: u16,
    pub device_id: u16,
    pub name: String,
    pub regions: Vec<IoRegion>,
    pub irq_lines: u32,
    pub mode: SimMode,
    pub virtio_device_id: u32,
    pub feature_bits: u64,
    pub adversarial_used_len: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            bus: Bus::Platform,
            vendor_id: 0,
            device_id: 0,
            name: String::new(),
            regions: vec![IoRegion {
                index: 0,
                size: 0x1000,
                kind: IoKind::Mmio,
            }],
            irq_lines: 1,
            mode: SimMode::Passthrough,
            virtio_device_id: 0,
            feature_bits: 0,
            adversarial_used_len: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid device configuration: {}", .0.join("; "))]
pub struct DeviceConfigError(pub Vec<String>);

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceConfigError> {
        let mut errs = Vec::new();
        if self.mode == SimMode::Emulated && self.bus != Bus::Virtio {
            errs.push("emulated mode requires bus = virtio".to_string());
        }
        if self.bus == Bus::Platform && self.name.is_empty() {
            errs.push("platform devices need a name".to_string());
        }
        if self.regions.is_empty() {
            errs.push("device has no regions".to_string());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.size == 0 {
                errs.push(format!("region {} has size 0", r.index));
            }
            if self.regions[..i].iter().any(|o| o.index == r.index) {
                errs.push(format!("region index {} declared twice", r.index));
            }
        }
        if self.mode == SimMode::Emulated
            && !self
                .regions
                .iter()
                .any(|r| r.index == 0 && r.kind == IoKind::Mmio && r.size >= 0x200)
        {
            errs.push("emulated virtio needs MMIO region 0 of at least 0x200 bytes".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DeviceConfigError(errs))
        }
    }
}

#[derive(Debug, Clone)]
pub enum DeviceModel {
    Passthrough,
    Virtio(Box<VirtioMmio>),
}

/// Why a register access did not reach the device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoFault {
    NoRegion { kind: IoKind, region: u32 },
    OutOfRegion { region: u32, offset: u64, width: usize, size: u64 },
    BadWidth(usize),
}

impl fmt::Display for IoFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoFault::NoRegion { kind, region } => write!(f, "no {kind} region {region}"),
            IoFault::OutOfRegion {
                region,
                offset,
                width,
                size,
            } => write!(
                f,
                "{width}-byte access at offset {offset:#x} outside region {region} of {size:#x} bytes"
            ),
            IoFault::BadWidth(w) => write!(f, "unsupported access width {w}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Device {
    pub config: DeviceConfig,
    pub model: DeviceModel,
}

pub fn create_device(config: &DeviceConfig) -> Result<Device, DeviceConfigError> {
    config.validate()?;
    let model = match config.mode {
        SimMode::Passthrough => DeviceModel::Passthrough,
        SimMode::Emulated => DeviceModel::Virtio(Box::new(VirtioMmio::new(
            config.virtio_device_id,
            config.vendor_id as u32,
            config.feature_bits,
            config.adversarial_used_len,
        ))),
    };
    Ok(Device {
        config: config.clone(),
        model,
    })
}

impl Device {
    pub fn mode(&self) -> SimMode {
        self.config.mode
    }

    pub fn irq_lines(&self) -> u32 {
        self.config.irq_lines
    }

    fn check(&self, kind: IoKind, region: u32, offset: u64, width: usize) -> Result<(), IoFault> {
        if !matches!(width, 1 | 2 | 4 | 8) {
            return Err(IoFault::BadWidth(width));
        }
        let r = self
            .config
            .regions
            .iter()
            .find(|r| r.index == region && r.kind == kind)
            .ok_or(IoFault::NoRegion { kind, region })?;
        match offset.checked_add(width as u64) {
            Some(end) if end <= r.size => Ok(()),
            _ => Err(IoFault::OutOfRegion {
                region,
                offset,
                width,
                size: r.size,
            }),
        }
    }

    pub fn io_read(
        &mut self,
        kind: IoKind,
        region: u32,
        offset: u64,
        width: usize,
        stream: &mut InputStream,
    ) -> Result<u64, IoFault> {
        self.check(kind, region, offset, width)?;
        let defined = match &self.model {
            DeviceModel::Virtio(v) if kind == IoKind::Mmio && region == 0 => {
                v.read_reg(offset, width)
            }
            _ => None,
        };
        Ok(defined.unwrap_or_else(|| stream.next_le(width)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn io_write(
        &mut self,
        kind: IoKind,
        region: u32,
        offset: u64,
        width: usize,
        value: u64,
        mem: &mut SharedMemory,
        stream: &mut InputStream,
        irq: &mut IrqLines,
    ) -> Result<(), IoFault> {
        self.check(kind, region, offset, width)?;
        if let DeviceModel::Virtio(v) = &mut self.model
            && kind == IoKind::Mmio
            && region == 0
        {
            v.write_reg(offset, width, value, mem, stream, irq);
        }
        Ok(())
    }

    pub fn virtio(&self) -> Option<&VirtioMmio> {
        match &self.model {
            DeviceModel::Virtio(v) => Some(v),
            DeviceModel::Passthrough => None,
        }
    }

    pub fn anomalies(&self) -> &[String] {
        match &self.model {
            DeviceModel::Virtio(v) => &v.anomalies,
            DeviceModel::Passthrough => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pci() -> DeviceConfig {
        DeviceConfig {
            bus: Bus::Pci,
            vendor_id: 0x1AF4,
            device_id: 0x1000,
            regions: vec![
                IoRegion {
                    index: 0,
                    size: 0x100,
                    kind: IoKind::Mmio,
                },
                IoRegion {
                    index: 1,
                    size: 0x20,
                    kind: IoKind::Pio,
                },
            ],
            ..DeviceConfig::default()
        }
    }

    #[test]
    fn validation_lists_every_failure() {
        let mut c = pci();
        c.mode = SimMode::Emulated;
        c.regions[1].size = 0;
        let err = c.validate().unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
    }

    #[test]
    fn passthrough_reads_stream_and_ignores_writes() {
        let mut d = create_device(&pci()).unwrap();
        let mut s = InputStream::new(vec![0x78, 0x56, 0x34, 0x12, 0xaa], 1);
        assert_eq!(d.io_read(IoKind::Mmio, 0, 0, 4, &mut s), Ok(0x1234_5678));
        assert_eq!(d.io_read(IoKind::Pio, 1, 0, 1, &mut s), Ok(0xaa));
        let mut mem = SharedMemory::default();
        let mut irq = IrqLines::new(1);
        d.io_write(IoKind::Mmio, 0, 8, 8, u64::MAX, &mut mem, &mut s, &mut irq)
            .unwrap();
        assert_eq!(s.cursor(), 5);
        assert!(mem.regions().next().is_none());
    }

    #[test]
    fn out_of_region_and_wrong_kind() {
        let mut d = create_device(&pci()).unwrap();
        let mut s = InputStream::new(vec![], 1);
        assert!(matches!(
            d.io_read(IoKind::Mmio, 0, 0xfe, 4, &mut s),
            Err(IoFault::OutOfRegion { .. })
        ));
        assert!(matches!(
            d.io_read(IoKind::Pio, 0, 0, 4, &mut s),
            Err(IoFault::NoRegion { .. })
        ));
        assert_eq!(s.cursor(), 0);
    }

    #[test]
    fn keywords_round_trip() {
        for b in [Bus::Pci, Bus::Platform, Bus::Virtio] {
            assert_eq!(b.keyword().parse::<Bus>(), Ok(b));
        }
        assert!("isa".parse::<Bus>().is_err());
        assert_eq!("pio".parse::<IoKind>(), Ok(IoKind::Pio));
        assert_eq!("emulated".parse::<SimMode>(), Ok(SimMode::Emulated));
    }
}
