// SPDX-License-Identifier: Apache-2.0

//! Violation classification, severity, deduplication and execution statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::coverage::Site;

/// Raw event produced by a detector in the guest environment, the DMA layer
/// or the device models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorEvent {
    RedzoneAccess,
    OverlongBounce,
    UnmappedAccess,
    RejectedUnmap,
    UseAfterFree,
    DoubleFree,
    InvalidFree,
    KernelPointerLeak,
    GuestBug,
    AllocationCapExceeded,
    AllBlocked,
    DivideByZero,
    Other(String),
}

impl DetectorEvent {
    /// Every non-catch-all kind, for exhaustiveness checks.
    pub const KNOWN: [DetectorEvent; 12] = [
        DetectorEvent::RedzoneAccess,
        DetectorEvent::OverlongBounce,
        DetectorEvent::UnmappedAccess,
        DetectorEvent::RejectedUnmap,
        DetectorEvent::UseAfterFree,
        DetectorEvent::DoubleFree,
        DetectorEvent::InvalidFree,
        DetectorEvent::KernelPointerLeak,
        DetectorEvent::GuestBug,
        DetectorEvent::AllocationCapExceeded,
        DetectorEvent::AllBlocked,
        DetectorEvent::DivideByZero,
    ];
}

/// A detector firing at a site. `fatal` violations end the iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub event: DetectorEvent,
    pub site: Site,
    pub detail: String,
    pub fatal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BugClass {
    OutOfBounds,
    InvalidMemoryAccess,
    SlabManagement,
    DeviceSharedPointer,
    Miscellaneous,
    AssertionFailure,
    UnboundedAllocation,
    Deadlock,
}

impl BugClass {
    pub const ALL: [BugClass; 8] = [
        BugClass::OutOfBounds,
        BugClass::InvalidMemoryAccess,
        BugClass::SlabManagement,
        BugClass::DeviceSharedPointer,
        BugClass::Miscellaneous,
        BugClass::AssertionFailure,
        BugClass::UnboundedAllocation,
        BugClass::Deadlock,
    ];

    /// High for classes that can leak or corrupt guest memory.
    pub fn severity(self) -> Severity {
        match self {
            BugClass::OutOfBounds | BugClass::DeviceSharedPointer | BugClass::SlabManagement => {
                Severity::High
            }
            _ => Severity::Low,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BugClass::OutOfBounds => "OutOfBounds",
            BugClass::InvalidMemoryAccess => "InvalidMemoryAccess",
            BugClass::SlabManagement => "SlabManagement",
            BugClass::DeviceSharedPointer => "DeviceSharedPointer",
            BugClass::Miscellaneous => "Miscellaneous",
            BugClass::AssertionFailure => "AssertionFailure",
            BugClass::UnboundedAllocation => "UnboundedAllocation",
            BugClass::Deadlock => "Deadlock",
        }
    }
}

impl fmt::Display for BugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BugClass {
    type Err = ReportParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ReportParseError::Field("class", s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    High,
    Low,
}

impl Severity {
    pub fn code(self) -> char {
        match self {
            Severity::High => 'h',
            Severity::Low => 'l',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub class: BugClass,
    pub site: Site,
}

impl fmt::Display for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.class, self.site)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BugReport {
    pub class: BugClass,
    pub severity: Severity,
    pub site: Site,
    pub driver: String,
    pub trigger: Vec<u8>,
    pub iteration: u64,
    pub detail: String,
    /// Set when the event kind was not recognised by the classifier.
    pub diagnostic: bool,
}

impl BugReport {
    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            class: self.class,
            site: self.site,
        }
    }

    /// `class=<name> severity=<h|l> driver=<name> site=<n> iter=<n> input=<hex>`
    pub fn to_line(&self) -> String {
        format!(
            "class={} severity={} driver={} site={} iter={} input={}",
            self.class,
            self.severity.code(),
            self.driver,
            self.site.0,
            self.iteration,
            hex::encode(&self.trigger)
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, ReportParseError> {
        let mut fields = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| ReportParseError::Token(tok.to_string()))?;
            fields.insert(k, v);
        }
        let get = |k: &'static str| {
            fields
                .get(k)
                .copied()
                .ok_or(ReportParseError::Missing(k))
        };
        let class: BugClass = get("class")?.parse()?;
        let severity = match get("severity")? {
            "h" => Severity::High,
            "l" => Severity::Low,
            other => return Err(ReportParseError::Field("severity", other.to_string())),
        };
        let site = get("site")?
            .parse::<u32>()
            .map_err(|_| ReportParseError::Field("site", get("site").unwrap_or("").to_string()))?;
        let iteration = get("iter")?
            .parse::<u64>()
            .map_err(|_| ReportParseError::Field("iter", get("iter").unwrap_or("").to_string()))?;
        let trigger = hex::decode(get("input")?)
            .map_err(|_| ReportParseError::Field("input", get("input").unwrap_or("").to_string()))?;
        Ok(BugReport {
            class,
            severity,
            site: Site(site),
            driver: get("driver")?.to_string(),
            trigger,
            iteration,
            detail: String::new(),
            diagnostic: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error("malformed token `{0}`")]
    Token(String),
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{0}`: `{1}`")]
    Field(&'static str, String),
}

/// Event kind to bug class. Total: unknown kinds land in Miscellaneous with
/// the diagnostic flag raised.
pub fn class_of(event: &DetectorEvent) -> (BugClass, bool) {
    use DetectorEvent::*;
    match event {
        RedzoneAccess | OverlongBounce => (BugClass::OutOfBounds, false),
        UnmappedAccess | RejectedUnmap => (BugClass::InvalidMemoryAccess, false),
        UseAfterFree | DoubleFree | InvalidFree => (BugClass::SlabManagement, false),
        KernelPointerLeak => (BugClass::DeviceSharedPointer, false),
        GuestBug => (BugClass::AssertionFailure, false),
        AllocationCapExceeded => (BugClass::UnboundedAllocation, false),
        AllBlocked => (BugClass::Deadlock, false),
        DivideByZero => (BugClass::Miscellaneous, false),
        Other(_) => (BugClass::Miscellaneous, true),
    }
}

pub fn classify(v: &Violation, driver: &str, trigger: &[u8], iteration: u64) -> BugReport {
    let (class, diagnostic) = class_of(&v.event);
    if diagnostic {
        log::warn!("unclassified detector event {:?} at site {}", v.event, v.site);
    }
    BugReport {
        class,
        severity: class.severity(),
        site: v.site,
        driver: driver.to_string(),
        trigger: trigger.to_vec(),
        iteration,
        detail: v.detail.clone(),
        diagnostic,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DedupVerdict {
    New,
    Duplicate,
}

/// Campaign-wide duplicate filter keyed on (class, site).
#[derive(Debug, Clone, Default)]
pub struct Deduplicator {
    seen: BTreeMap<DedupKey, u64>,
    duplicates: u64,
}

impl Deduplicator {
    pub fn dedup(&mut self, report: &BugReport) -> DedupVerdict {
        let count = self.seen.entry(report.dedup_key()).or_insert(0);
        *count += 1;
        if *count == 1 {
            DedupVerdict::New
        } else {
            self.duplicates += 1;
            DedupVerdict::Duplicate
        }
    }

    pub fn unique(&self) -> usize {
        self.seen.len()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn hits(&self, key: &DedupKey) -> u64 {
        self.seen.get(key).copied().unwrap_or(0)
    }
}

/// First trigger of a deduplicated bug.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstTrigger {
    pub seconds: f64,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecStats {
    pub executions: u64,
    /// Campaign time in seconds (virtual time plus modeled execution cost).
    pub elapsed: f64,
    pub execs_per_s: f64,
    pub covered_edges: usize,
    pub unique_bugs: usize,
    pub ttb: BTreeMap<DedupKey, FirstTrigger>,
}

pub fn emit_stats(
    executions: u64,
    elapsed_secs: f64,
    covered_edges: usize,
    ttb: &BTreeMap<DedupKey, FirstTrigger>,
) -> ExecStats {
    let execs_per_s = if elapsed_secs > 0.0 {
        executions as f64 / elapsed_secs
    } else {
        0.0
    };
    ExecStats {
        executions,
        elapsed: elapsed_secs,
        execs_per_s,
        covered_edges,
        unique_bugs: ttb.len(),
        ttb: ttb.clone(),
    }
}

impl ExecStats {
    /// Stable text form: one `key=value` line per scalar, one `ttb ...`
    /// line per bug.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "executions={}\nelapsed_s={:.9}\nexecs_per_s={:.3}\ncovered_edges={}\nunique_bugs={}\n",
            self.executions, self.elapsed, self.execs_per_s, self.covered_edges, self.unique_bugs
        );
        for (k, t) in &self.ttb {
            s.push_str(&format!(
                "ttb class={} site={} seconds={:.9} iter={}\n",
                k.class, k.site.0, t.seconds, t.iteration
            ));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self, ReportParseError> {
        let mut st = ExecStats::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("ttb ") {
                let mut f = BTreeMap::new();
                for tok in rest.split_whitespace() {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| ReportParseError::Token(tok.to_string()))?;
                    f.insert(k, v);
                }
                let field = |k: &'static str| f.get(k).copied().ok_or(ReportParseError::Missing(k));
                let class: BugClass = field("class")?.parse()?;
                let bad = |k: &'static str| ReportParseError::Field(k, line.to_string());
                let site: u32 = field("site")?.parse().map_err(|_| bad("site"))?;
                let seconds: f64 = field("seconds")?.parse().map_err(|_| bad("seconds"))?;
                let iteration: u64 = field("iter")?.parse().map_err(|_| bad("iter"))?;
                st.ttb.insert(
                    DedupKey {
                        class,
                        site: Site(site),
                    },
                    FirstTrigger { seconds, iteration },
                );
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ReportParseError::Token(line.to_string()))?;
            let bad = || ReportParseError::Field("stats", line.to_string());
            match k {
                "executions" => st.executions = v.parse().map_err(|_| bad())?,
                "elapsed_s" => st.elapsed = v.parse().map_err(|_| bad())?,
                "execs_per_s" => st.execs_per_s = v.parse().map_err(|_| bad())?,
                "covered_edges" => st.covered_edges = v.parse().map_err(|_| bad())?,
                "unique_bugs" => st.unique_bugs = v.parse().map_err(|_| bad())?,
                _ => return Err(ReportParseError::Token(line.to_string())),
            }
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(event: DetectorEvent, site: u32) -> Violation {
        Violation {
            event,
            site: Site(site),
            detail: String::new(),
            fatal: false,
        }
    }

    #[test]
    fn classification_is_total_and_matches_table() {
        use DetectorEvent::*;
        let expected = [
            (RedzoneAccess, BugClass::OutOfBounds),
            (OverlongBounce, BugClass::OutOfBounds),
            (UnmappedAccess, BugClass::InvalidMemoryAccess),
            (RejectedUnmap, BugClass::InvalidMemoryAccess),
            (UseAfterFree, BugClass::SlabManagement),
            (DoubleFree, BugClass::SlabManagement),
            (InvalidFree, BugClass::SlabManagement),
            (KernelPointerLeak, BugClass::DeviceSharedPointer),
            (GuestBug, BugClass::AssertionFailure),
            (AllocationCapExceeded, BugClass::UnboundedAllocation),
            (AllBlocked, BugClass::Deadlock),
            (DivideByZero, BugClass::Miscellaneous),
        ];
        assert_eq!(expected.len(), DetectorEvent::KNOWN.len());
        for (ev, class) in expected {
            assert_eq!(class_of(&ev), (class, false), "{ev:?}");
        }
        let (c, diag) = class_of(&Other("weird".into()));
        assert_eq!((c, diag), (BugClass::Miscellaneous, true));
        // Every class is reachable from some event.
        for class in BugClass::ALL {
            assert!(DetectorEvent::KNOWN.iter().any(|e| class_of(e).0 == class));
        }
    }

    #[test]
    fn severity_rule() {
        let high = [
            BugClass::OutOfBounds,
            BugClass::DeviceSharedPointer,
            BugClass::SlabManagement,
        ];
        for c in BugClass::ALL {
            let want = if high.contains(&c) {
                Severity::High
            } else {
                Severity::Low
            };
            assert_eq!(c.severity(), want, "{c}");
        }
    }

    #[test]
    fn classify_examples() {
        let r = classify(&v(DetectorEvent::OverlongBounce, 3), "d", &[1], 0);
        assert_eq!((r.class, r.severity), (BugClass::OutOfBounds, Severity::High));
        let r = classify(&v(DetectorEvent::AllBlocked, 3), "d", &[], 0);
        assert_eq!((r.class, r.severity), (BugClass::Deadlock, Severity::Low));
        let r = classify(&v(DetectorEvent::KernelPointerLeak, 3), "d", &[], 0);
        assert_eq!(
            (r.class, r.severity),
            (BugClass::DeviceSharedPointer, Severity::High)
        );
    }

    #[test]
    fn dedup_key_is_class_and_site() {
        let mut d = Deduplicator::default();
        let a = classify(&v(DetectorEvent::RedzoneAccess, 1), "d", &[], 0);
        let b = classify(&v(DetectorEvent::RedzoneAccess, 1), "d", &[9], 5);
        let c = classify(&v(DetectorEvent::RedzoneAccess, 2), "d", &[], 0);
        let e = classify(&v(DetectorEvent::UseAfterFree, 1), "d", &[], 0);
        assert_eq!(d.dedup(&a), DedupVerdict::New);
        assert_eq!(d.dedup(&b), DedupVerdict::Duplicate);
        assert_eq!(d.dedup(&c), DedupVerdict::New);
        assert_eq!(d.dedup(&e), DedupVerdict::New);
        assert_eq!(d.unique(), 3);
        assert_eq!(d.duplicates(), 1);
    }

    #[test]
    fn report_line_round_trip() {
        let r = BugReport {
            class: BugClass::SlabManagement,
            severity: Severity::High,
            site: Site(77),
            driver: "virtnet-probe".into(),
            trigger: vec![0xde, 0xad, 0x00],
            iteration: 12,
            detail: String::new(),
            diagnostic: false,
        };
        let line = r.to_line();
        assert_eq!(
            line,
            "class=SlabManagement severity=h driver=virtnet-probe site=77 iter=12 input=dead00"
        );
        assert_eq!(BugReport::parse_line(&line).unwrap(), r);
        assert!(BugReport::parse_line("class=Nope").is_err());
    }

    #[test]
    fn stats_arithmetic() {
        let s = emit_stats(1000, 2.0, 5, &BTreeMap::new());
        assert_eq!(s.execs_per_s, 500.0);
        assert!(s.ttb.is_empty());
        assert_eq!(s.unique_bugs, 0);
        let z = emit_stats(0, 0.0, 0, &BTreeMap::new());
        assert_eq!(z.execs_per_s, 0.0);
    }

    #[test]
    fn stats_text_round_trip() {
        let mut ttb = BTreeMap::new();
        ttb.insert(
            DedupKey {
                class: BugClass::Deadlock,
                site: Site(4),
            },
            FirstTrigger {
                seconds: 0.25,
                iteration: 9,
            },
        );
        let s = emit_stats(10, 0.5, 3, &ttb);
        let parsed = ExecStats::parse_text(&s.to_text()).unwrap();
        assert_eq!(parsed.to_text(), s.to_text());
        assert_eq!(parsed.ttb, s.ttb);
    }
}
