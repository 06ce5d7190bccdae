// SPDX-License-Identifier: Apache-2.0

//! Iteration scripts and interrupt-injection policies.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::devices::irq::IrqLines;
use crate::drivers::{ModelDriver, ProbeStatus};
use crate::guest_env::waiters::Waiter;
use crate::guest_env::{InterruptSource, KResult, Kernel, NoInterrupts, Task};
use crate::rng::XorShift64Star;

/// When the harness raises device interrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IrqPolicy {
    /// One interrupt each time a driver task blocks.
    #[default]
    Targeted,
    /// Interrupts at uniformly drawn virtual-time intervals.
    Random { min_ns: u64, max_ns: u64 },
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IrqPolicyError {
    #[error("expected `targeted`, `none` or `random MIN MAX`, got `{0}`")]
    Syntax(String),
    #[error("random interval needs 1 <= MIN <= MAX, got {0}..{1}")]
    Interval(u64, u64),
}

impl IrqPolicy {
    pub fn validate(&self) -> Result<(), IrqPolicyError> {
        match *self {
            IrqPolicy::Random { min_ns, max_ns } if min_ns == 0 || min_ns > max_ns => {
                Err(IrqPolicyError::Interval(min_ns, max_ns))
            }
            _ => Ok(()),
        }
    }

    /// Builds the interrupt source for one iteration.
    pub fn injector(&self, seed: u64) -> Box<dyn InterruptSource> {
        match *self {
            IrqPolicy::Targeted => Box::new(TargetedInjector::default()),
            IrqPolicy::Random { min_ns, max_ns } => {
                Box::new(RandomInjector::new(seed, min_ns, max_ns))
            }
            IrqPolicy::None => Box::new(NoInterrupts),
        }
    }
}

impl fmt::Display for IrqPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrqPolicy::Targeted => f.write_str("targeted"),
            IrqPolicy::Random { min_ns, max_ns } => write!(f, "random {min_ns} {max_ns}"),
            IrqPolicy::None => f.write_str("none"),
        }
    }
}

impl FromStr for IrqPolicy {
    type Err = IrqPolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let p = match words.as_slice() {
            ["targeted"] => IrqPolicy::Targeted,
            ["none"] => IrqPolicy::None,
            ["random", lo, hi] => {
                let num = |w: &str| w.parse::<u64>().map_err(|_| IrqPolicyError::Syntax(s.into()));
                IrqPolicy::Random {
                    min_ns: num(lo)?,
                    max_ns: num(hi)?,
                }
            }
            _ => return Err(IrqPolicyError::Syntax(s.into())),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Raises one interrupt per waiter registration, rotating across lines.
#[derive(Debug, Default)]
pub struct TargetedInjector {
    next_line: u32,
}

impl InterruptSource for TargetedInjector {
    fn on_waiter_registered(&mut self, _waiter: &Waiter, irq: &mut IrqLines) {
        let n = irq.count();
        if n == 0 {
            return;
        }
        irq.raise(self.next_line % n);
        self.next_line = (self.next_line + 1) % n;
    }

    fn on_time_advance(&mut self, _now: u64, _irq: &mut IrqLines) {}

    fn next_injection(&self) -> Option<u64> {
        None
    }
}

/// Raises an interrupt whenever virtual time passes the next scheduled
/// injection, then schedules another one `U[min, max]` ns later.
#[derive(Debug)]
pub struct RandomInjector {
    rng: XorShift64Star,
    min_ns: u64,
    max_ns: u64,
    next_at: u64,
    next_line: u32,
}

impl RandomInjector {
    pub fn new(seed: u64, min_ns: u64, max_ns: u64) -> Self {
        let mut rng = XorShift64Star::new(seed);
        let next_at = rng.range_inclusive(min_ns, max_ns);
        Self {
            rng,
            min_ns,
            max_ns,
            next_at,
            next_line: 0,
        }
    }
}

impl InterruptSource for RandomInjector {
    fn on_waiter_registered(&mut self, _waiter: &Waiter, _irq: &mut IrqLines) {}

    fn on_time_advance(&mut self, now: u64, irq: &mut IrqLines) {
        if now < self.next_at {
            return;
        }
        let n = irq.count();
        if n > 0 {
            irq.raise(self.next_line % n);
            self.next_line = (self.next_line + 1) % n;
        }
        self.next_at = now + self.rng.range_inclusive(self.min_ns, self.max_ns);
    }

    fn next_injection(&self) -> Option<u64> {
        Some(self.next_at)
    }
}

/// Shape of one fuzzing iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HarnessKind {
    /// Probe, then remove if the probe succeeded.
    #[default]
    Default,
    /// Probe, `ops` resource operations, remove.
    Extended { ops: u32 },
}

impl fmt::Display for HarnessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessKind::Default => f.write_str("default"),
            HarnessKind::Extended { .. } => f.write_str("extended"),
        }
    }
}

/// What the harness observed, for tests and replay output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HarnessTrace {
    pub probe: Option<ProbeStatus>,
    pub ops: Vec<(u8, Vec<u8>)>,
    pub responses: Vec<Vec<u8>>,
    pub removed: bool,
}

/// Payloads of extended-harness operations are at most this long.
pub const MAX_OP_PAYLOAD: u8 = 32;

/// Probe, then remove only if the probe succeeded.
pub async fn run_default(
    driver: Rc<dyn ModelDriver>,
    k: Kernel,
    trace: Rc<RefCell<HarnessTrace>>,
) -> KResult<()> {
    let status = driver.clone().probe(k.clone()).await?;
    trace.borrow_mut().probe = Some(status);
    if status == ProbeStatus::Ok {
        driver.remove(k).await?;
        trace.borrow_mut().removed = true;
    }
    Ok(())
}

/// Probe, `ops` stream-chosen resource operations, remove.
pub async fn run_extended(
    driver: Rc<dyn ModelDriver>,
    k: Kernel,
    ops: u32,
    trace: Rc<RefCell<HarnessTrace>>,
) -> KResult<()> {
    let status = driver.clone().probe(k.clone()).await?;
    trace.borrow_mut().probe = Some(status);
    if status != ProbeStatus::Ok {
        return Ok(());
    }
    for _ in 0..ops {
        let op = k.stream_u8()?;
        let len = k.stream_u8()? % MAX_OP_PAYLOAD;
        let payload = k.stream_bytes(len as usize)?;
        trace.borrow_mut().ops.push((op, payload.clone()));
        let resp = driver.clone().resource_op(k.clone(), op, payload).await?;
        trace.borrow_mut().responses.push(resp);
    }
    driver.remove(k).await?;
    trace.borrow_mut().removed = true;
    Ok(())
}

/// Root task for one iteration of `kind`.
pub fn harness_task(
    kind: HarnessKind,
    driver: Rc<dyn ModelDriver>,
    k: Kernel,
    trace: Rc<RefCell<HarnessTrace>>,
) -> Task<()> {
    match kind {
        HarnessKind::Default => Box::pin(run_default(driver, k, trace)),
        HarnessKind::Extended { ops } => Box::pin(run_extended(driver, k, ops, trace)),
    }
}
