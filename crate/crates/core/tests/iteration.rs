// SPDX-License-Identifier: Apache-2.0

//! Per-iteration invariants over random inputs, and replay determinism.

use proptest::prelude::*;

use devfuzz_core::drivers::register_catalog;
use devfuzz_core::engine::coverage::EdgeSet;
use devfuzz_core::engine::{
    CampaignConfig, IterationContext, IterationStatus, replay, run_campaign, run_iteration,
};
use devfuzz_core::harness::{HarnessKind, IrqPolicy};

fn run(cfg: &CampaignConfig, input: &[u8]) -> devfuzz_core::engine::IterationResult {
    let ctx = IterationContext::new(cfg).unwrap();
    run_iteration(&ctx, input, 0, &EdgeSet::new())
}

fn driver_names() -> Vec<&'static str> {
    register_catalog().iter().map(|e| e.name).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn waiters_are_notified_once_and_cleaned_up(
        d in 0usize..20,
        input in proptest::collection::vec(any::<u8>(), 0..256),
    ) {
        let names = driver_names();
        let cfg = CampaignConfig::for_driver(names[d % names.len()]).unwrap();
        let r = run(&cfg, &input);
        prop_assert!(r.registry_empty);
        prop_assert_eq!(r.counters.waiter_notifications, r.counters.waiter_registrations);
    }

    #[test]
    fn targeted_raises_one_interrupt_per_registration(
        d in 0usize..3,
        input in proptest::collection::vec(any::<u8>(), 0..256),
    ) {
        // Passthrough devices never raise interrupts themselves.
        let name = ["netdesc-hardened", "ringidx-hardened", "rocker-gate"][d];
        let cfg = CampaignConfig::for_driver(name).unwrap();
        let r = run(&cfg, &input);
        prop_assert_eq!(r.counters.irq_requests, r.counters.waiter_registrations);
    }

    #[test]
    fn delay_accounting_matches_policy(
        reduction: bool,
        input in proptest::collection::vec(any::<u8>(), 0..256),
    ) {
        let mut cfg = CampaignConfig::for_driver("delay-heavy").unwrap();
        cfg.delay_reduction = reduction;
        let r = run(&cfg, &input);
        prop_assert!(r.counters.delays_issued >= 1);
        if reduction {
            prop_assert_eq!(r.counters.delay_advanced_ns, 0);
            prop_assert_eq!(r.counters.virtual_ns, 0);
        } else {
            prop_assert_eq!(r.counters.delay_advanced_ns, r.counters.delay_requested_ns);
        }
    }

    #[test]
    fn iterations_are_deterministic(
        d in 0usize..20,
        irq in 0u8..3,
        input in proptest::collection::vec(any::<u8>(), 0..512),
    ) {
        let names = driver_names();
        let mut cfg = CampaignConfig::for_driver(names[d % names.len()]).unwrap();
        cfg.irq = match irq {
            0 => IrqPolicy::Targeted,
            1 => IrqPolicy::None,
            _ => IrqPolicy::Random { min_ns: 1, max_ns: 1000 },
        };
        prop_assert_eq!(run(&cfg, &input), run(&cfg, &input));
    }

    #[test]
    fn clean_default_runs_free_everything(
        d in 0usize..20,
        input in proptest::collection::vec(any::<u8>(), 0..256),
    ) {
        let cat = register_catalog();
        let e = &cat[d % cat.len()];
        prop_assume!(e.harness == HarnessKind::Default && (e.hardened || e.archetype.is_none()));
        let cfg = CampaignConfig::for_driver(e.name).unwrap();
        let r = run(&cfg, &input);
        if r.status == IterationStatus::Clean {
            prop_assert_eq!(r.live_allocations, 0, "{}", e.name);
        }
    }
}

#[test]
fn replay_of_corpus_entries_is_clean_and_stable() {
    for name in ["vring-consumer-hardened", "netdesc-hardened", "waitdev-hardened"] {
        let mut cfg = CampaignConfig::for_driver(name).unwrap();
        cfg.max_iterations = 3_000;
        let o = run_campaign(&cfg).unwrap();
        assert!(!o.corpus.is_empty(), "{name}");
        for e in o.corpus.entries() {
            let a = replay(&cfg, &e.data).unwrap();
            let b = replay(&cfg, &e.data).unwrap();
            assert_eq!(a.status, IterationStatus::Clean, "{name}");
            assert_eq!(a.coverage_delta, b.coverage_delta);
            assert_eq!(a.edges, a.coverage_delta);
        }
    }
}

#[test]
fn replayed_violations_keep_their_dedup_key() {
    for name in ["vring-consumer", "netdesc", "ringidx"] {
        let mut cfg = CampaignConfig::for_driver(name).unwrap();
        cfg.max_iterations = 2_000;
        let o = run_campaign(&cfg).unwrap();
        assert!(!o.reports.is_empty(), "{name}");
        for rep in &o.reports {
            let r = replay(&cfg, &rep.trigger).unwrap();
            assert!(r.reports.iter().any(|x| x.dedup_key() == rep.dedup_key()));
        }
    }
}

#[test]
fn short_input_underruns_and_depends_on_seed() {
    let cfg = CampaignConfig::for_driver("netdesc").unwrap();
    let r = replay(&cfg, &[]).unwrap();
    assert!(r.underrun);
    assert!(r.bytes_consumed > 0);
    let differs = (2..20).any(|seed| {
        let mut c = cfg.clone();
        c.seed = seed;
        replay(&c, &[]).unwrap().trace != r.trace
    });
    assert!(differs);
}

#[test]
fn campaigns_are_reproducible() {
    let mut cfg = CampaignConfig::for_driver("bugon").unwrap();
    cfg.max_iterations = 5_000;
    let a = run_campaign(&cfg).unwrap();
    let b = run_campaign(&cfg).unwrap();
    assert_eq!(a.reports_text(), b.reports_text());
    assert_eq!(a.stats.to_text(), b.stats.to_text());
    assert_eq!(a.stats_lines, b.stats_lines);
    assert_eq!(a.corpus.len(), b.corpus.len());
}
