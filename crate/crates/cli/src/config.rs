// SPDX-License-Identifier: Apache-2.0

//! Campaign config files.
//!
//! Line-based `key = value` with optional `[device]`, `[engine]`,
//! `[harness]` and `[bugs]` sections. `#` starts a comment. Keys not set
//! keep their defaults; the device defaults to the one the selected
//! driver's catalog entry declares.
//!
//! ```text
//! driver = vring-consumer
//! seed = 1
//!
//! [engine]
//! max_iterations = 10000
//! delay_reduction = on
//!
//! [harness]
//! irq = random 1 1000
//!
//! [bugs]
//! swiotlb_len_overflow = off
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use devfuzz_core::devices::{Bus, IoKind, IoRegion, SimMode};
use devfuzz_core::drivers::{Archetype, BugToggles, find_driver};
use devfuzz_core::engine::CampaignConfig;
use devfuzz_core::harness::{HarnessKind, IrqPolicy};

/// Driver used when the file names none.
pub const DEFAULT_DRIVER: &str = "nop";
/// Resource operations per iteration when `kind = extended` sets no count.
pub const DEFAULT_OPS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Top,
    Device,
    Engine,
    Harness,
    Bugs,
}

impl Section {
    fn keys(self) -> &'static [&'static str] {
        match self {
            Section::Top => &["driver", "seed", "irq"],
            Section::Device => &[
                "bus",
                "vendor_id",
                "device_id",
                "name",
                "regions",
                "irq_lines",
                "mode",
                "virtio_device_id",
                "feature_bits",
                "adversarial_used_len",
            ],
            Section::Engine => &[
                "max_iterations",
                "budget_seconds",
                "iteration_timeout",
                "max_input_size",
                "corpus_dir",
                "corpus_admission",
                "stop_on_first_bug",
                "alloc_cap",
                "delay_reduction",
            ],
            Section::Harness => &["kind", "ops", "irq"],
            Section::Bugs => &[],
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

type Raw = BTreeMap<(Section, String), Entry>;

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    r.map_err(|_| format!("`{s}` is not an unsigned integer"))
}

fn parse_int<T: TryFrom<u64>>(s: &str) -> Result<T, String> {
    let v = parse_u64(s)?;
    T::try_from(v).map_err(|_| format!("`{s}` is out of range"))
}

fn parse_secs(s: &str) -> Result<f64, String> {
    s.parse::<f64>()
        .map_err(|_| format!("`{s}` is not a number of seconds"))
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{s}`")),
    }
}

fn switch(b: bool) -> &'static str {
    if b { "on" } else { "off" }
}

/// `kind:index:size`, comma separated, e.g. `mmio:0:0x1000, pio:1:0x20`.
fn parse_regions(s: &str) -> Result<Vec<IoRegion>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            let parts: Vec<&str> = r.split(':').collect();
            let [kind, index, size] = parts.as_slice() else {
                return Err(format!("region `{r}` is not kind:index:size"));
            };
            Ok(IoRegion {
                kind: kind.parse::<IoKind>()?,
                index: parse_int(index)?,
                size: parse_u64(size)?,
            })
        })
        .collect()
}

fn lex(text: &str) -> Result<Raw, ConfigError> {
    let mut raw = Raw::new();
    let mut section = Section::Top;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(n, format!("malformed section header `{line}`")))?;
            section = match name.trim() {
                "device" => Section::Device,
                "engine" => Section::Engine,
                "harness" => Section::Harness,
                "bugs" => Section::Bugs,
                other => return Err(err(n, format!("unknown section `[{other}]`"))),
            };
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(n, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let (sec, key) = match key.strip_prefix("bug.") {
            Some(a) if section == Section::Top => (Section::Bugs, a),
            _ => (section, key),
        };
        let known = if sec == Section::Bugs {
            key.parse::<Archetype>().is_ok()
        } else {
            sec.keys().contains(&key)
        };
        if !known {
            return Err(err(n, format!("unknown key `{key}`")));
        }
        // `irq` may sit at top level or under [harness]; both name one key.
        let sec = if key == "irq" { Section::Harness } else { sec };
        let slot = (sec, key.to_string());
        if let Some(prev) = raw.get(&slot) {
            return Err(err(
                n,
                format!("`{key}` already set on line {}", prev.line),
            ));
        }
        raw.insert(
            slot,
            Entry {
                line: n,
                value: value.to_string(),
            },
        );
    }
    Ok(raw)
}

/// Parses and validates a config file.
pub fn parse_config(text: &str) -> Result<CampaignConfig, ConfigError> {
    let cfg = parse_unvalidated(text)?;
    cfg.validate().map_err(ConfigError::Invalid)?;
    Ok(cfg)
}

/// Parses without the semantic checks, so callers can layer overrides
/// before validating.
pub fn parse_unvalidated(text: &str) -> Result<CampaignConfig, ConfigError> {
    parse_with_driver(text, None)
}

/// Like [`parse_unvalidated`], with `driver` replacing the file's `driver`
/// key so the defaults come from the right catalog entry.
pub fn parse_with_driver(text: &str, driver: Option<&str>) -> Result<CampaignConfig, ConfigError> {
    let raw = lex(text)?;
    let get = |sec: Section, key: &str| raw.get(&(sec, key.to_string()));

    let driver = driver
        .or_else(|| get(Section::Top, "driver").map(|e| e.value.as_str()))
        .unwrap_or(DEFAULT_DRIVER);
    let mut cfg = base_config(driver);

    for ((sec, key), e) in &raw {
        let v = e.value.as_str();
        let r: Result<(), String> = (|| {
            match (*sec, key.as_str()) {
                (Section::Top, "driver") => {}
                (Section::Top, "seed") => cfg.seed = parse_u64(v)?,
                (Section::Harness, "irq") => cfg.irq = v.parse().map_err(|e| format!("{e}"))?,
                (Section::Harness, "kind") => {
                    cfg.harness = match v {
                        "default" => HarnessKind::Default,
                        "extended" => match cfg.harness {
                            HarnessKind::Extended { ops } => HarnessKind::Extended { ops },
                            HarnessKind::Default => HarnessKind::Extended { ops: DEFAULT_OPS },
                        },
                        _ => return Err(format!("harness kind must be default or extended, got `{v}`")),
                    }
                }
                (Section::Harness, "ops") => {}
                (Section::Device, "bus") => cfg.device.bus = v.parse::<Bus>()?,
                (Section::Device, "vendor_id") => cfg.device.vendor_id = parse_int(v)?,
                (Section::Device, "device_id") => cfg.device.device_id = parse_int(v)?,
                (Section::Device, "name") => cfg.device.name = v.to_string(),
                (Section::Device, "regions") => cfg.device.regions = parse_regions(v)?,
                (Section::Device, "irq_lines") => cfg.device.irq_lines = parse_int(v)?,
                (Section::Device, "mode") => cfg.device.mode = v.parse::<SimMode>()?,
                (Section::Device, "virtio_device_id") => {
                    cfg.device.virtio_device_id = parse_int(v)?
                }
                (Section::Device, "feature_bits") => cfg.device.feature_bits = parse_u64(v)?,
                (Section::Device, "adversarial_used_len") => {
                    cfg.device.adversarial_used_len = parse_switch(v)?
                }
                (Section::Engine, "max_iterations") => cfg.max_iterations = parse_u64(v)?,
                (Section::Engine, "budget_seconds") => cfg.wall_budget_secs = parse_secs(v)?,
                (Section::Engine, "iteration_timeout") => {
                    cfg.iteration_timeout_secs = parse_secs(v)?
                }
                (Section::Engine, "max_input_size") => cfg.max_input_size = parse_int(v)?,
                (Section::Engine, "corpus_dir") => {
                    cfg.corpus_dir = (!v.is_empty()).then(|| v.to_string())
                }
                (Section::Engine, "corpus_admission") => cfg.corpus_admission = parse_switch(v)?,
                (Section::Engine, "stop_on_first_bug") => cfg.stop_on_first_bug = parse_switch(v)?,
                (Section::Engine, "alloc_cap") => cfg.alloc_cap = parse_u64(v)?,
                (Section::Engine, "delay_reduction") => cfg.delay_reduction = parse_switch(v)?,
                (Section::Bugs, a) => {
                    let a: Archetype = a.parse()?;
                    cfg.bugs.set(a, parse_switch(v)?);
                }
                (s, k) => unreachable!("unhandled key {k} in {s:?}"),
            }
            Ok(())
        })();
        r.map_err(|m| err(e.line, m))?;
    }
    // `ops` applies after `kind` regardless of order in the file.
    if let Some(e) = get(Section::Harness, "ops") {
        let ops: u32 = parse_int(&e.value).map_err(|m| err(e.line, m))?;
        cfg.harness = HarnessKind::Extended { ops };
        if get(Section::Harness, "kind").is_some_and(|k| k.value == "default") {
            return Err(err(e.line, "`ops` needs `kind = extended`"));
        }
    }
    Ok(cfg)
}

/// Defaults for `driver`: its catalog device, harness and bug toggles. An
/// unknown driver gets generic defaults and fails validation later.
pub fn base_config(driver: &str) -> CampaignConfig {
    CampaignConfig::for_driver(driver).unwrap_or_else(|| {
        let mut c = CampaignConfig::for_driver(DEFAULT_DRIVER).expect("nop is in the catalog");
        c.driver = driver.to_string();
        c.bugs = BugToggles::none();
        c
    })
}

/// Writes every key, so the output parses back to an equal config.
pub fn serialize_config(c: &CampaignConfig) -> String {
    let mut s = String::new();
    let d = &c.device;
    let regions: Vec<String> = d
        .regions
        .iter()
        .map(|r| format!("{}:{}:{:#x}", r.kind, r.index, r.size))
        .collect();
    let _ = writeln!(s, "driver = {}", c.driver);
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "\n[device]");
    let _ = writeln!(s, "bus = {}", d.bus);
    let _ = writeln!(s, "vendor_id = {:#06x}", d.vendor_id);
    let _ = writeln!(s, "device_id = {:#06x}", d.device_id);
    let _ = writeln!(s, "name = {}", d.name);
    let _ = writeln!(s, "regions = {}", regions.join(", "));
    let _ = writeln!(s, "irq_lines = {}", d.irq_lines);
    let _ = writeln!(s, "mode = {}", d.mode);
    let _ = writeln!(s, "virtio_device_id = {}", d.virtio_device_id);
    let _ = writeln!(s, "feature_bits = {:#x}", d.feature_bits);
    let _ = writeln!(s, "adversarial_used_len = {}", switch(d.adversarial_used_len));
    let _ = writeln!(s, "\n[engine]");
    let _ = writeln!(s, "max_iterations = {}", c.max_iterations);
    let _ = writeln!(s, "budget_seconds = {:?}", c.wall_budget_secs);
    let _ = writeln!(s, "iteration_timeout = {:?}", c.iteration_timeout_secs);
    let _ = writeln!(s, "max_input_size = {}", c.max_input_size);
    let _ = writeln!(s, "corpus_dir = {}", c.corpus_dir.as_deref().unwrap_or(""));
    let _ = writeln!(s, "corpus_admission = {}", switch(c.corpus_admission));
    let _ = writeln!(s, "stop_on_first_bug = {}", switch(c.stop_on_first_bug));
    let _ = writeln!(s, "alloc_cap = {}", c.alloc_cap);
    let _ = writeln!(s, "delay_reduction = {}", switch(c.delay_reduction));
    let _ = writeln!(s, "\n[harness]");
    match c.harness {
        HarnessKind::Default => {
            let _ = writeln!(s, "kind = default");
        }
        HarnessKind::Extended { ops } => {
            let _ = writeln!(s, "kind = extended");
            let _ = writeln!(s, "ops = {ops}");
        }
    }
    let _ = writeln!(s, "irq = {}", c.irq);
    let _ = writeln!(s, "\n[bugs]");
    for a in Archetype::ALL {
        let _ = writeln!(s, "{} = {}", a.config_key(), switch(c.bugs.enabled(a)));
    }
    s
}

/// Parses an `--irq` style value.
pub fn parse_irq(s: &str) -> Result<IrqPolicy, String> {
    s.parse().map_err(|e| format!("{e}"))
}

/// True when `name` is a catalog driver.
pub fn driver_exists(name: &str) -> bool {
    find_driver(name).is_some()
}
