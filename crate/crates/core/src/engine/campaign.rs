// SPDX-License-Identifier: Apache-2.0

//! The fuzzing loop: run one iteration, feed coverage back, report bugs.

use std::cell::RefCell;
use std::rc::Rc;
use std::time::Duration;

use thiserror::Error;

use crate::detect::{
    BugReport, DedupVerdict, Deduplicator, ExecStats, FirstTrigger, classify, emit_stats,
};
use crate::devices::{DeviceConfig, create_device};
use crate::drivers::{BugToggles, CatalogEntry, find_driver};
use crate::guest_env::alloc::DEFAULT_ALLOC_CAP;
use crate::guest_env::clock::DelayPolicy;
use crate::guest_env::{Fault, Guest, GuestConfig, Kernel};
use crate::harness::{HarnessKind, HarnessTrace, IrqPolicy, harness_task};
use crate::rng::{fnv1a64, mix64};

use super::corpus::{Corpus, DEFAULT_MAX_ENTRY_SIZE};
use super::coverage::EdgeSet;
use super::mutate::Mutator;
use super::stream::InputStream;

/// Iterations between two progress lines.
pub const STATS_INTERVAL: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub driver: String,
    pub device: DeviceConfig,
    pub harness: HarnessKind,
    pub irq: IrqPolicy,
    pub delay_reduction: bool,
    pub seed: u64,
    pub max_iterations: u64,
    /// Campaign-time budget in seconds.
    pub wall_budget_secs: f64,
    /// Per-iteration budget in seconds.
    pub iteration_timeout_secs: f64,
    pub max_input_size: usize,
    pub corpus_dir: Option<String>,
    pub bugs: BugToggles,
    /// Keep inputs that reach new coverage. Off means pure random search.
    pub corpus_admission: bool,
    pub stop_on_first_bug: bool,
    pub alloc_cap: u64,
}

impl CampaignConfig {
    /// Defaults for a catalog driver: its device, harness and bug toggles.
    pub fn for_driver(name: &str) -> Option<Self> {
        let e = find_driver(name)?;
        Some(Self {
            driver: e.name.to_string(),
            device: (e.device)(),
            harness: e.harness,
            irq: IrqPolicy::Targeted,
            delay_reduction: true,
            seed: 1,
            max_iterations: 100_000,
            wall_budget_secs: 3600.0,
            iteration_timeout_secs: 5.0,
            max_input_size: DEFAULT_MAX_ENTRY_SIZE,
            corpus_dir: None,
            bugs: e.default_toggles(),
            corpus_admission: true,
            stop_on_first_bug: false,
            alloc_cap: DEFAULT_ALLOC_CAP,
        })
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if find_driver(&self.driver).is_none() {
            errs.push(format!("unknown driver `{}`", self.driver));
        }
        if let Err(e) = self.device.validate() {
            errs.extend(e.0);
        }
        if let HarnessKind::Extended { ops: 0 } = self.harness {
            errs.push("harness ops must be positive".into());
        }
        if let Err(e) = self.irq.validate() {
            errs.push(e.to_string());
        }
        if !(self.wall_budget_secs.is_finite() && self.wall_budget_secs > 0.0) {
            errs.push(format!("budget_seconds must be positive, got {}", self.wall_budget_secs));
        }
        if !(self.iteration_timeout_secs.is_finite() && self.iteration_timeout_secs > 0.0) {
            errs.push(format!(
                "iteration_timeout must be positive, got {}",
                self.iteration_timeout_secs
            ));
        }
        if self.max_input_size == 0 {
            errs.push("max_input_size must be positive".into());
        }
        if self.alloc_cap == 0 {
            errs.push("alloc_cap must be positive".into());
        }
        if errs.is_empty() { Ok(()) } else { Err(errs) }
    }

    /// Stable hash used to warn when a replay runs under a different config.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.corpus_dir = None;
        fnv1a64(format!("{c:?}").as_bytes())
    }

    fn guest_config(&self) -> GuestConfig {
        let timeout = Duration::from_secs_f64(self.iteration_timeout_secs);
        GuestConfig {
            delay: DelayPolicy {
                reduction_enabled: self.delay_reduction,
            },
            alloc_cap: self.alloc_cap,
            iteration_timeout_ns: timeout.as_nanos() as u64,
            host_timeout: Some(timeout + Duration::from_secs(1)),
            ..GuestConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("environment failure at iteration {iteration}: {message}")]
    Environment { iteration: u64, message: String },
    #[error("corpus write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IterationStatus {
    Clean,
    Violation(BugReport),
    Timeout,
    /// The simulation itself failed; not attributable to the driver.
    Failed(String),
}

/// Per-iteration event counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IterationCounters {
    pub ops: u64,
    pub waiter_registrations: u64,
    pub waiter_notifications: u64,
    pub irq_requests: u64,
    pub irq_raised: u64,
    pub irq_delivered: u64,
    pub delays_issued: u64,
    pub delay_requested_ns: u64,
    pub delay_advanced_ns: u64,
    pub injected_dma_bytes: u64,
    pub virtual_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationResult {
    pub status: IterationStatus,
    /// Every classified violation, in detection order.
    pub reports: Vec<BugReport>,
    /// Sorted edges hit by this iteration.
    pub edges: Vec<u16>,
    /// Edges absent from the baseline passed to `run_iteration`.
    pub coverage_delta: Vec<u16>,
    pub execution_time_ns: u64,
    pub bytes_consumed: usize,
    /// The driver read past the input and got generated bytes.
    pub underrun: bool,
    pub counters: IterationCounters,
    pub registry_empty: bool,
    pub live_allocations: usize,
    pub trace: HarnessTrace,
}

/// Everything needed to run iterations of one campaign.
#[derive(Debug, Clone)]
pub struct IterationContext {
    pub entry: CatalogEntry,
    pub config: CampaignConfig,
    guest: GuestConfig,
}

impl IterationContext {
    pub fn new(config: &CampaignConfig) -> Result<Self, CampaignError> {
        config.validate().map_err(CampaignError::Config)?;
        let entry = find_driver(&config.driver).expect("validated");
        Ok(Self {
            entry,
            guest: config.guest_config(),
            config: config.clone(),
        })
    }
}

/// Runs `input` through one fresh guest: load the driver, drive the
/// harness, unload.
pub fn run_iteration(
    ctx: &IterationContext,
    input: &[u8],
    iteration: u64,
    baseline: &EdgeSet,
) -> IterationResult {
    let cfg = &ctx.config;
    let stream = InputStream::new(input, cfg.seed);
    let device = match create_device(&cfg.device) {
        Ok(d) => d,
        Err(e) => return failed(e.to_string()),
    };
    let injector = cfg.irq.injector(mix64(cfg.seed ^ fnv1a64(input)));
    let bound = ctx.entry.binds(&cfg.device);
    let guest = Guest::new(ctx.guest.clone(), stream, Some(device), injector);
    let k = Kernel::new(guest);
    let trace = Rc::new(RefCell::new(HarnessTrace::default()));

    if bound {
        let driver = ctx.entry.instantiate(&cfg.bugs);
        let root = harness_task(cfg.harness, driver.clone(), k.clone(), trace.clone());
        let irq = move |k: Kernel, line: u32| driver.clone().irq_handler(k, line);
        k.run(root, &irq);
    }

    let mut g = k.guest();
    let reports: Vec<BugReport> = g
        .violations
        .iter()
        .map(|v| classify(v, &cfg.driver, input, iteration))
        .collect();
    let elapsed = g.elapsed_ns();
    let (status, execution_time_ns) = match (&g.env_error, g.abort) {
        (Some(msg), _) => (IterationStatus::Failed(msg.clone()), elapsed),
        (None, Some(Fault::Timeout | Fault::Deadlock)) => (
            IterationStatus::Timeout,
            elapsed.max(g.cfg.iteration_timeout_ns),
        ),
        _ => match reports.first() {
            Some(r) => (IterationStatus::Violation(r.clone()), elapsed),
            None => (IterationStatus::Clean, elapsed),
        },
    };
    let edges = g.coverage.edges();
    let coverage_delta = baseline.novel(&edges);
    let counters = IterationCounters {
        ops: g.ops,
        waiter_registrations: g.waiters.registrations(),
        waiter_notifications: g.waiters.notifications(),
        irq_requests: g.irq.requests(),
        irq_raised: g.irq.raised(),
        irq_delivered: g.irq.delivered(),
        delays_issued: g.delays_issued,
        delay_requested_ns: g.delay_requested_ns,
        delay_advanced_ns: g.delay_advanced_ns,
        injected_dma_bytes: g.dma.injected_bytes,
        virtual_ns: g.clock.now(),
    };
    let result = IterationResult {
        status,
        reports,
        edges,
        coverage_delta,
        execution_time_ns,
        bytes_consumed: g.stream.cursor(),
        underrun: g.stream.underrun(),
        counters,
        registry_empty: g.waiters.is_empty(),
        live_allocations: g.slab.live_count(),
        trace: trace.borrow().clone(),
    };
    g.slab.sweep();
    result
}

fn failed(msg: String) -> IterationResult {
    IterationResult {
        status: IterationStatus::Failed(msg),
        reports: Vec::new(),
        edges: Vec::new(),
        coverage_delta: Vec::new(),
        execution_time_ns: 0,
        bytes_consumed: 0,
        underrun: false,
        counters: IterationCounters::default(),
        registry_empty: true,
        live_allocations: 0,
        trace: HarnessTrace::default(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Budget,
    FirstBug,
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub stats: ExecStats,
    /// First report of every deduplicated bug, in discovery order.
    pub reports: Vec<BugReport>,
    pub corpus: Corpus,
    /// Progress lines, one per `STATS_INTERVAL` iterations plus a final one.
    pub stats_lines: Vec<String>,
    pub stop: StopReason,
    pub duplicates: u64,
    pub timeouts: u64,
    pub config_hash: u64,
}

impl CampaignOutcome {
    pub fn reports_text(&self) -> String {
        self.reports.iter().map(|r| r.to_line() + "\n").collect()
    }
}

fn stats_line(iter: u64, elapsed_ns: u64, edges: usize, corpus: usize, bugs: usize) -> String {
    let secs = elapsed_ns as f64 / 1e9;
    let eps = if secs > 0.0 { iter as f64 / secs } else { 0.0 };
    format!("iter={iter} execs_per_s={eps:.3} edges={edges} corpus={corpus} bugs={bugs}")
}

/// Runs a whole campaign. Time is campaign time: the sum of the modeled
/// execution times of all iterations, so results do not depend on the host.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutcome, CampaignError> {
    let ctx = IterationContext::new(cfg)?;
    let mut corpus = Corpus::new(cfg.max_input_size);
    let scratch = Corpus::new(cfg.max_input_size);
    let mut mutator = Mutator::new(cfg.seed, cfg.max_input_size);
    let mut covered = EdgeSet::new();
    let mut dedup = Deduplicator::default();
    let mut reports = Vec::new();
    let mut ttb = std::collections::BTreeMap::new();
    let mut stats_lines = Vec::new();
    let mut elapsed_ns: u64 = 0;
    let mut timeouts = 0;
    let budget_ns = (cfg.wall_budget_secs * 1e9) as u64;
    let mut executions = 0;
    let mut stop = StopReason::MaxIterations;

    while executions < cfg.max_iterations {
        if elapsed_ns >= budget_ns {
            stop = StopReason::Budget;
            break;
        }
        let iter = executions;
        let input = if cfg.corpus_admission {
            mutator.mutate(&corpus)
        } else {
            mutator.mutate(&scratch)
        };
        let r = run_iteration(&ctx, &input, iter, &covered);
        executions += 1;
        elapsed_ns = elapsed_ns.saturating_add(r.execution_time_ns);
        if let IterationStatus::Failed(message) = r.status {
            return Err(CampaignError::Environment {
                iteration: iter,
                message,
            });
        }
        covered.insert_all(&r.edges);
        if r.status == IterationStatus::Timeout {
            timeouts += 1;
        }
        let mut new_bug = false;
        for rep in r.reports {
            if dedup.dedup(&rep) == DedupVerdict::New {
                log::info!("new bug: {}", rep.to_line());
                ttb.insert(
                    rep.dedup_key(),
                    FirstTrigger {
                        seconds: elapsed_ns as f64 / 1e9,
                        iteration: iter,
                    },
                );
                reports.push(rep);
                new_bug = true;
            }
        }
        if cfg.corpus_admission && r.status == IterationStatus::Clean {
            corpus.admit(&input, &r.edges, iter, r.bytes_consumed);
        }
        if executions % STATS_INTERVAL == 0 {
            let line = stats_line(executions, elapsed_ns, covered.len(), corpus.len(), reports.len());
            log::info!("{line}");
            stats_lines.push(line);
        }
        if new_bug && cfg.stop_on_first_bug {
            stop = StopReason::FirstBug;
            break;
        }
    }
    stats_lines.push(stats_line(
        executions,
        elapsed_ns,
        covered.len(),
        corpus.len(),
        reports.len(),
    ));
    if let Some(dir) = &cfg.corpus_dir {
        corpus.save(std::path::Path::new(dir))?;
    }
    Ok(CampaignOutcome {
        stats: emit_stats(executions, elapsed_ns as f64 / 1e9, covered.len(), &ttb),
        reports,
        corpus,
        stats_lines,
        stop,
        duplicates: dedup.duplicates(),
        timeouts,
        config_hash: cfg.hash(),
    })
}

/// Reruns one input under `cfg` against empty baseline coverage.
pub fn replay(cfg: &CampaignConfig, input: &[u8]) -> Result<IterationResult, CampaignError> {
    let ctx = IterationContext::new(cfg)?;
    Ok(run_iteration(&ctx, input, 0, &EdgeSet::new()))
}
