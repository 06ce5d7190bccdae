// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result, anyhow, bail};

use devfuzz_core::detect::{BugReport, DedupKey, ExecStats};
use devfuzz_core::drivers::register_catalog;
use devfuzz_core::engine::{CampaignConfig, IterationResult, IterationStatus, replay, run_campaign};
use devfuzz_core::harness::HarnessKind;

use crate::config::{self, DEFAULT_OPS, parse_irq, parse_switch, serialize_config};
use crate::experiment::{self, ExperimentOptions};
use crate::{CampaignArgs, Cli, Command, ExperimentArgs, ReplayArgs};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_BUGS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Runs `cli`, writing normal output to `out` and diagnostics to `err`.
/// Returns the process exit status.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let r = match cli.command {
        Command::Fuzz(a) => cmd_fuzz(&a, out),
        Command::Replay(a) => cmd_replay(&a, out, err),
        Command::Triage { reports } => cmd_triage(&reports, out),
        Command::Stats { stats } => cmd_stats(&stats, out),
        Command::Experiment(a) => cmd_experiment(&a, out),
        Command::List => cmd_list(out),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_USAGE
        }
    }
}

/// Config file (if any) with command-line overrides applied, validated.
pub fn build_config(a: &CampaignArgs) -> Result<CampaignConfig> {
    build_config_for(a, None)
}

fn build_config_for(a: &CampaignArgs, fallback_driver: Option<&str>) -> Result<CampaignConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let driver = a.driver.as_deref().or(match a.config {
        Some(_) => None,
        None => fallback_driver,
    });
    let mut c = config::parse_with_driver(&text, driver)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(irq) = &a.irq {
        c.irq = parse_irq(irq).map_err(|e| anyhow!("--irq: {e}"))?;
    }
    if let Some(d) = &a.delay_reduction {
        c.delay_reduction = parse_switch(d).map_err(|e| anyhow!("--delay-reduction: {e}"))?;
    }
    if let Some(n) = a.max_iterations {
        c.max_iterations = n;
    }
    if let Some(b) = a.budget_seconds {
        c.wall_budget_secs = b;
    }
    match a.harness.as_deref() {
        None => {}
        Some("default") => c.harness = HarnessKind::Default,
        Some("extended") => {
            if c.harness == HarnessKind::Default {
                c.harness = HarnessKind::Extended { ops: DEFAULT_OPS };
            }
        }
        Some(other) => bail!("--harness must be default or extended, got `{other}`"),
    }
    if let Some(ops) = a.ops {
        if a.harness.as_deref() == Some("default") {
            bail!("--ops needs --harness extended");
        }
        c.harness = HarnessKind::Extended { ops };
    }
    if a.stop_on_first_bug {
        c.stop_on_first_bug = true;
    }
    if let Some(p) = &a.corpus {
        c.corpus_dir = Some(p.to_string_lossy().into_owned());
    }
    c.validate().map_err(config::ConfigError::Invalid)?;
    Ok(c)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn cmd_fuzz(a: &CampaignArgs, out: &mut dyn Write) -> Result<i32> {
    let mut c = build_config(a)?;
    if c.corpus_dir.is_none() {
        c.corpus_dir = Some(a.out.join("corpus").to_string_lossy().into_owned());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let o = run_campaign(&c)?;
    write_file(&a.out, "reports.txt", &o.reports_text())?;
    write_file(&a.out, "stats.txt", &o.stats.to_text())?;
    write_file(&a.out, "progress.log", &(o.stats_lines.join("\n") + "\n"))?;
    write_file(&a.out, "config.cfg", &serialize_config(&c))?;
    write_file(&a.out, "config_hash", &format!("{:016x}\n", o.config_hash))?;
    writeln!(out, "{}", o.stats_lines.last().map_or("", String::as_str))?;
    writeln!(
        out,
        "stop={:?} executions={} elapsed_s={:.3} corpus={} timeouts={} duplicates={}",
        o.stop,
        o.stats.executions,
        o.stats.elapsed,
        o.corpus.len(),
        o.timeouts,
        o.duplicates
    )?;
    for r in &o.reports {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(if o.reports.is_empty() { EXIT_CLEAN } else { EXIT_BUGS })
}

fn status_text(s: &IterationStatus) -> String {
    match s {
        IterationStatus::Clean => "clean".into(),
        IterationStatus::Violation(r) => format!("violation {}", r.dedup_key()),
        IterationStatus::Timeout => "timeout".into(),
        IterationStatus::Failed(m) => format!("failed: {m}"),
    }
}

fn print_result(r: &IterationResult, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    writeln!(out, "status={}", status_text(&r.status))?;
    writeln!(
        out,
        "bytes_consumed={} edges={} time_ns={}",
        r.bytes_consumed,
        r.edges.len(),
        r.execution_time_ns
    )?;
    for rep in &r.reports {
        writeln!(out, "{}", rep.to_line())?;
    }
    if r.underrun {
        writeln!(
            err,
            "warning: input underruns stream; the result depends on the seed that generated the missing bytes"
        )?;
    }
    Ok(())
}

fn check_hash(c: &CampaignConfig, expect: Option<&str>, err: &mut dyn Write) -> Result<()> {
    let Some(e) = expect else { return Ok(()) };
    let want = u64::from_str_radix(e.trim().trim_start_matches("0x"), 16)
        .map_err(|_| anyhow!("--expect-hash: `{e}` is not a hex hash"))?;
    if want != c.hash() {
        writeln!(
            err,
            "warning: config hash {:016x} differs from expected {want:016x}; replaying anyway",
            c.hash()
        )?;
    }
    Ok(())
}

fn result_code(r: &IterationResult) -> Result<i32> {
    match &r.status {
        IterationStatus::Clean => Ok(EXIT_CLEAN),
        IterationStatus::Violation(_) | IterationStatus::Timeout => Ok(EXIT_BUGS),
        IterationStatus::Failed(m) => bail!("environment failure: {m}"),
    }
}

fn cmd_replay(a: &ReplayArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if let Some(reports) = &a.reports {
        return replay_reports(a, reports, out, err);
    }
    let input = a.input.as_ref().expect("clap requires input or --reports");
    let data = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let c = build_config(&a.campaign)?;
    check_hash(&c, a.expect_hash.as_deref(), err)?;
    let r = replay(&c, &data)?;
    print_result(&r, out, err)?;
    result_code(&r)
}

fn read_reports(p: &Path) -> Result<Vec<BugReport>> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            BugReport::parse_line(l).with_context(|| format!("{}:{}", p.display(), i + 1))
        })
        .collect()
}

fn replay_reports(
    a: &ReplayArgs,
    path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let reports = read_reports(path)?;
    let mut code = EXIT_CLEAN;
    for rep in &reports {
        let c = build_config_for(&a.campaign, Some(&rep.driver))?;
        check_hash(&c, a.expect_hash.as_deref(), err)?;
        let r = replay(&c, &rep.trigger)?;
        let key = rep.dedup_key();
        let hit = r.reports.iter().any(|x| x.dedup_key() == key);
        writeln!(
            out,
            "{} {key} driver={}",
            if hit { "reproduced" } else { "not-reproduced" },
            rep.driver
        )?;
        if r.underrun {
            writeln!(err, "warning: input for {key} underruns stream")?;
        }
        code = code.max(result_code(&r)?);
    }
    Ok(code)
}

fn cmd_triage(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let reports = read_reports(path)?;
    let mut groups: BTreeMap<DedupKey, (u64, &BugReport)> = BTreeMap::new();
    for r in &reports {
        groups.entry(r.dedup_key()).or_insert((0, r)).0 += 1;
    }
    for (key, (hits, first)) in &groups {
        writeln!(
            out,
            "{key} severity={} hits={hits} driver={} first_iter={} input_len={}",
            first.severity.code(),
            first.driver,
            first.iteration,
            first.trigger.len()
        )?;
    }
    writeln!(out, "{} reports, {} unique", reports.len(), groups.len())?;
    Ok(if groups.is_empty() { EXIT_CLEAN } else { EXIT_BUGS })
}

fn cmd_stats(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let st = ExecStats::parse_text(&text).with_context(|| format!("parsing {}", path.display()))?;
    write!(out, "{}", st.to_text())?;
    Ok(if st.unique_bugs == 0 { EXIT_CLEAN } else { EXIT_BUGS })
}

fn cmd_experiment(a: &ExperimentArgs, out: &mut dyn Write) -> Result<i32> {
    let opts = ExperimentOptions {
        runs: a.runs,
        seed: a.seed,
        budget_secs: a.budget_seconds,
        max_iterations: a.max_iterations,
    };
    let table = experiment::run(a.name, &opts)?;
    write!(out, "{}", table.to_text())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let csv = table.to_csv()?;
    let name = format!("{}.csv", a.name.name());
    write_file(&a.out, &name, &csv)?;
    writeln!(out, "csv: {}", a.out.join(name).display())?;
    Ok(EXIT_CLEAN)
}

fn cmd_list(out: &mut dyn Write) -> Result<i32> {
    for e in register_catalog() {
        let arch = e.archetype.map_or_else(|| "fixture".to_string(), |a| a.to_string());
        let variant = if e.hardened { "hardened" } else { "seeded" };
        writeln!(out, "{:<24} {:<24} {variant}", e.name, arch)?;
    }
    Ok(EXIT_CLEAN)
}
