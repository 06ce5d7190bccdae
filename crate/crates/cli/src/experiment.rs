// SPDX-License-Identifier: Apache-2.0

//! Paired campaign runs for the throughput and time-to-bug comparisons.

use devfuzz_core::detect::{BugClass, Severity};
use devfuzz_core::drivers::{Archetype, archetype_host};
use devfuzz_core::engine::{CampaignConfig, CampaignError, run_campaign};
use devfuzz_core::harness::IrqPolicy;

use crate::config::base_config;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Delay,
    Irq,
    Ttb,
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delay" => Ok(Experiment::Delay),
            "irq" => Ok(Experiment::Irq),
            "ttb" => Ok(Experiment::Ttb),
            _ => Err(format!("unknown experiment `{s}` (delay, irq, ttb)")),
        }
    }
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Delay => "delay",
            Experiment::Irq => "irq",
            Experiment::Ttb => "ttb",
        }
    }

    pub fn default_runs(self) -> u32 {
        match self {
            Experiment::Irq => 30,
            _ => 1,
        }
    }
}

/// Knobs shared by all experiments. `None` keeps the experiment default.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    pub runs: Option<u32>,
    pub seed: u64,
    pub budget_secs: Option<f64>,
    pub max_iterations: Option<u64>,
}

/// Budget of each delay-experiment campaign, in campaign seconds.
pub const DELAY_BUDGET_SECS: f64 = 60.0;
/// Iteration cap of each irq-experiment campaign; unsolved runs count as
/// infinite time-to-bug.
pub const IRQ_MAX_ITERATIONS: u64 = 1_000_000;
/// Iteration cap of each ttb-experiment campaign.
pub const TTB_MAX_ITERATIONS: u64 = 200_000;

pub const RANDOM_IRQ: IrqPolicy = IrqPolicy::Random {
    min_ns: 1,
    max_ns: 1000,
};

/// A printed table plus its CSV form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<String>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let fmt_row = |cells: &[String]| {
            let cols: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            cols.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = fmt_row(&self.headers);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out += &fmt_row(&rule);
        for r in &self.rows {
            out += &fmt_row(r);
        }
        for s in &self.summary {
            out += s;
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn secs(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9}")
    } else {
        "inf".to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayRun {
    pub seed: u64,
    pub execs_per_s_on: f64,
    pub execs_per_s_off: f64,
}

impl DelayRun {
    pub fn ratio(&self) -> f64 {
        self.execs_per_s_on / self.execs_per_s_off
    }
}

/// Throughput of the delay-heavy fixture with delay reduction on and off.
pub fn run_delay(opts: &ExperimentOptions) -> Result<Vec<DelayRun>, CampaignError> {
    let runs = opts.runs.unwrap_or(Experiment::Delay.default_runs());
    (0..runs as u64)
        .map(|i| {
            let seed = opts.seed + i;
            let eps = |reduction: bool| -> Result<f64, CampaignError> {
                let mut c = base_config("delay-heavy");
                c.seed = seed;
                c.delay_reduction = reduction;
                c.wall_budget_secs = opts.budget_secs.unwrap_or(DELAY_BUDGET_SECS);
                c.max_iterations = opts.max_iterations.unwrap_or(u64::MAX);
                Ok(run_campaign(&c)?.stats.execs_per_s)
            };
            Ok(DelayRun {
                seed,
                execs_per_s_on: eps(true)?,
                execs_per_s_off: eps(false)?,
            })
        })
        .collect()
}

pub fn delay_table(runs: &[DelayRun]) -> Table {
    let ratios: Vec<f64> = runs.iter().map(DelayRun::ratio).collect();
    Table {
        headers: ["seed", "execs_per_s_reduced", "execs_per_s_full", "ratio"]
            .map(String::from)
            .to_vec(),
        rows: runs
            .iter()
            .map(|r| {
                vec![
                    r.seed.to_string(),
                    format!("{:.3}", r.execs_per_s_on),
                    format!("{:.3}", r.execs_per_s_off),
                    format!("{:.3}", r.ratio()),
                ]
            })
            .collect(),
        summary: vec![format!(
            "ratio median={:.3} mean={:.3}",
            median(&ratios),
            mean(&ratios)
        )],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrqRun {
    pub seed: u64,
    /// Time to first bug; infinite when the run did not find it.
    pub targeted: f64,
    pub random: f64,
}

fn first_bug_secs(c: &CampaignConfig) -> Result<f64, CampaignError> {
    let o = run_campaign(c)?;
    Ok(o
        .reports
        .first()
        .and_then(|r| o.stats.ttb.get(&r.dedup_key()))
        .map_or(f64::INFINITY, |t| t.seconds))
}

/// Time to first bug on the rocker-gate fixture, targeted vs random
/// injection.
pub fn run_irq(opts: &ExperimentOptions) -> Result<Vec<IrqRun>, CampaignError> {
    let runs = opts.runs.unwrap_or(Experiment::Irq.default_runs());
    (0..runs as u64)
        .map(|i| {
            let seed = opts.seed + i;
            let ttb = |irq: IrqPolicy| {
                let mut c = base_config("rocker-gate");
                c.seed = seed;
                c.irq = irq;
                c.stop_on_first_bug = true;
                c.max_iterations = opts.max_iterations.unwrap_or(IRQ_MAX_ITERATIONS);
                if let Some(b) = opts.budget_secs {
                    c.wall_budget_secs = b;
                }
                first_bug_secs(&c)
            };
            Ok(IrqRun {
                seed,
                targeted: ttb(IrqPolicy::Targeted)?,
                random: ttb(RANDOM_IRQ)?,
            })
        })
        .collect()
}

pub fn irq_medians(runs: &[IrqRun]) -> (f64, f64) {
    let t: Vec<f64> = runs.iter().map(|r| r.targeted).collect();
    let r: Vec<f64> = runs.iter().map(|r| r.random).collect();
    (median(&t), median(&r))
}

pub fn irq_table(runs: &[IrqRun]) -> Table {
    let t: Vec<f64> = runs.iter().map(|r| r.targeted).collect();
    let r: Vec<f64> = runs.iter().map(|r| r.random).collect();
    let (mt, mr) = (median(&t), median(&r));
    Table {
        headers: ["seed", "ttb_targeted_s", "ttb_random_s"]
            .map(String::from)
            .to_vec(),
        rows: runs
            .iter()
            .map(|x| vec![x.seed.to_string(), secs(x.targeted), secs(x.random)])
            .collect(),
        summary: vec![
            format!("targeted median={} mean={}", secs(mt), secs(mean(&t))),
            format!("random   median={} mean={}", secs(mr), secs(mean(&r))),
            format!("median ratio targeted/random={:.3}", mt / mr),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtbRow {
    pub driver: String,
    pub archetype: Archetype,
    pub seed: u64,
    pub class: Option<BugClass>,
    pub severity: Option<Severity>,
    pub iteration: Option<u64>,
    pub seconds: f64,
}

/// Each archetype host run to its first bug.
pub fn run_ttb(opts: &ExperimentOptions) -> Result<Vec<TtbRow>, CampaignError> {
    let runs = opts.runs.unwrap_or(Experiment::Ttb.default_runs());
    let mut out = Vec::new();
    for a in Archetype::ALL {
        let driver = archetype_host(a);
        for i in 0..runs as u64 {
            let mut c = base_config(driver);
            c.seed = opts.seed + i;
            c.stop_on_first_bug = true;
            c.max_iterations = opts.max_iterations.unwrap_or(TTB_MAX_ITERATIONS);
            if let Some(b) = opts.budget_secs {
                c.wall_budget_secs = b;
            }
            let o = run_campaign(&c)?;
            let first = o.reports.first();
            let t = first.and_then(|r| o.stats.ttb.get(&r.dedup_key()));
            out.push(TtbRow {
                driver: driver.to_string(),
                archetype: a,
                seed: c.seed,
                class: first.map(|r| r.class),
                severity: first.map(|r| r.severity),
                iteration: t.map(|t| t.iteration),
                seconds: t.map_or(f64::INFINITY, |t| t.seconds),
            });
        }
    }
    Ok(out)
}

pub fn ttb_table(rows: &[TtbRow]) -> Table {
    let dash = || "-".to_string();
    Table {
        headers: ["driver", "archetype", "seed", "class", "severity", "iteration", "ttb_s"]
            .map(String::from)
            .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.driver.clone(),
                    r.archetype.to_string(),
                    r.seed.to_string(),
                    r.class.map_or_else(dash, |c| c.to_string()),
                    r.severity.map_or_else(dash, |s| s.code().to_string()),
                    r.iteration.map_or_else(dash, |i| i.to_string()),
                    secs(r.seconds),
                ]
            })
            .collect(),
        summary: Vec::new(),
    }
}

/// Runs `e` and renders its table.
pub fn run(e: Experiment, opts: &ExperimentOptions) -> Result<Table, CampaignError> {
    Ok(match e {
        Experiment::Delay => delay_table(&run_delay(opts)?),
        Experiment::Irq => irq_table(&run_irq(opts)?),
        Experiment::Ttb => ttb_table(&run_ttb(opts)?),
    })
}
