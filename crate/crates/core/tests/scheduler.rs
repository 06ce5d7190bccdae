// SPDX-License-Identifier: Apache-2.0

//! Executor, wait, delay and deadlock semantics of the guest kernel.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use devfuzz_core::detect::DetectorEvent;
use devfuzz_core::devices::create_device;
use devfuzz_core::drivers::find_driver;
use devfuzz_core::engine::coverage::Site;
use devfuzz_core::engine::stream::InputStream;
use devfuzz_core::guest_env::{
    Fault, Guest, GuestConfig, InterruptSource, Kernel, NoInterrupts, Task, WaitOutcome,
};
use devfuzz_core::harness::{IrqPolicy, RandomInjector, TargetedInjector};

const S: Site = Site::new(0x7e57, 0);

fn kernel(reduction: bool, injector: Box<dyn InterruptSource>) -> Kernel {
    let mut cfg = GuestConfig::default();
    cfg.delay.reduction_enabled = reduction;
    let dev = create_device(&(find_driver("waitdev").unwrap().device)()).unwrap();
    Kernel::new(Guest::new(cfg, InputStream::new(vec![0; 64], 1), Some(dev), injector))
}

fn no_irq(_: Kernel, _: u32) -> Task<()> {
    Box::pin(async { Ok(()) })
}

#[test]
fn delay_is_elided_under_reduction() {
    let k = kernel(true, Box::new(NoInterrupts));
    let k2 = k.clone();
    let r = k.run(Box::pin(async move { k2.delay(1_000_000).await }), &no_irq);
    assert_eq!(r, Some(Ok(())));
    let g = k.guest();
    assert_eq!(g.clock.now(), 0);
    assert_eq!(g.delay_requested_ns, 1_000_000);
    assert_eq!(g.delay_advanced_ns, 0);
}

#[test]
fn delay_advances_clock_without_reduction() {
    let k = kernel(false, Box::new(NoInterrupts));
    let k2 = k.clone();
    k.run(
        Box::pin(async move {
            k2.delay(500).await?;
            k2.delay(250).await
        }),
        &no_irq,
    );
    let g = k.guest();
    assert_eq!(g.clock.now(), 750);
    assert_eq!(g.delay_advanced_ns, g.delay_requested_ns);
}

#[test]
fn time_elapsed_follows_policy() {
    let on = kernel(true, Box::new(NoInterrupts));
    assert!(on.time_elapsed(1_000_000_000));
    let off = kernel(false, Box::new(NoInterrupts));
    assert!(!off.time_elapsed(10));
    off.guest().advance_clock_to(10);
    assert!(off.time_elapsed(10));
}

#[test]
fn wait_timeout_is_honored_under_reduction() {
    let k = kernel(true, Box::new(NoInterrupts));
    let k2 = k.clone();
    let out = Rc::new(Cell::new(None));
    let o = out.clone();
    k.run(
        Box::pin(async move {
            o.set(Some(k2.wait_event("never", S, Some(1_000_000), || false).await?));
            Ok(())
        }),
        &no_irq,
    );
    assert_eq!(out.get(), Some(WaitOutcome::TimedOut));
    let g = k.guest();
    assert!(g.clock.now() >= 1_000_000);
    assert!(g.waiters.is_empty());
    assert!(g.violations.is_empty());
}

#[test]
fn targeted_interrupt_wakes_waiter() {
    let k = kernel(true, Box::new(TargetedInjector::default()));
    let flag = Rc::new(Cell::new(false));
    let (k2, f) = (k.clone(), flag.clone());
    let out = Rc::new(Cell::new(None));
    let o = out.clone();
    let root: Task<()> = Box::pin(async move {
        k2.request_irq(0)?;
        o.set(Some(k2.wait_event("irq", S, None, move || f.get()).await?));
        Ok(())
    });
    let f = flag.clone();
    let handler = move |_: Kernel, _: u32| -> Task<()> {
        f.set(true);
        Box::pin(async { Ok(()) })
    };
    k.run(root, &handler);
    assert_eq!(out.get(), Some(WaitOutcome::Woken));
    let g = k.guest();
    assert_eq!(g.waiters.registrations(), 1);
    assert_eq!(g.waiters.notifications(), 1);
    assert_eq!(g.irq.requests(), 1);
    assert_eq!(g.irq.delivered(), 1);
    assert!(g.waiters.is_empty());
}

#[test]
fn blocked_without_interrupts_is_deadlock() {
    let k = kernel(true, Box::new(NoInterrupts));
    let k2 = k.clone();
    let r = k.run(
        Box::pin(async move {
            k2.wait_event("forever", S, None, || false).await?;
            Ok(())
        }),
        &no_irq,
    );
    assert_eq!(r, None);
    let g = k.guest();
    assert_eq!(g.abort, Some(Fault::Deadlock));
    assert_eq!(g.violations.len(), 1);
    assert_eq!(g.violations[0].event, DetectorEvent::AllBlocked);
    assert_eq!(g.violations[0].site, S);
}

#[test]
fn ignored_random_interrupts_end_in_deadlock() {
    let k = kernel(true, Box::new(RandomInjector::new(3, 1, 10)));
    let k2 = k.clone();
    let root: Task<()> = Box::pin(async move {
        k2.request_irq(0)?;
        k2.wait_event("deaf", S, None, || false).await?;
        Ok(())
    });
    k.run(root, &no_irq);
    let g = k.guest();
    assert_eq!(g.abort, Some(Fault::Deadlock));
    assert!(g.irq.delivered() > 1000);
}

#[test]
fn delayed_work_honors_delay_only_without_reduction() {
    for (reduction, expect) in [(true, 0), (false, 7_000)] {
        let k = kernel(reduction, Box::new(NoInterrupts));
        let ran_at = Rc::new(Cell::new(None));
        let (k2, r) = (k.clone(), ran_at.clone());
        let root: Task<()> = Box::pin(async move {
            let (k3, w) = (k2.clone(), r.clone());
            k2.queue_delayed_work(
                7_000,
                Box::pin(async move {
                    w.set(Some(k3.now()));
                    Ok(())
                }),
            )?;
            let r2 = r.clone();
            k2.wait_event("work", S, Some(1_000_000), move || r2.get().is_some())
                .await?;
            Ok(())
        });
        k.run(root, &no_irq);
        assert_eq!(ran_at.get(), Some(expect), "reduction {reduction}");
    }
}

#[test]
fn spawned_tasks_run_in_spawn_order() {
    let k = kernel(true, Box::new(NoInterrupts));
    let log = Rc::new(RefCell::new(Vec::new()));
    let (k2, l) = (k.clone(), log.clone());
    let root: Task<()> = Box::pin(async move {
        for i in 0..4 {
            let (k3, l2) = (k2.clone(), l.clone());
            k2.spawn(Box::pin(async move {
                l2.borrow_mut().push(i);
                k3.yield_now().await;
                l2.borrow_mut().push(10 + i);
                Ok(())
            }))?;
        }
        let l3 = l.clone();
        k2.wait_event("children", S, Some(1_000), move || l3.borrow().len() == 8)
            .await?;
        Ok(())
    });
    k.run(root, &no_irq);
    assert_eq!(*log.borrow(), [0, 1, 2, 3, 10, 11, 12, 13]);
}

#[test]
fn injector_policies_build() {
    assert!(IrqPolicy::Targeted.injector(1).next_injection().is_none());
    assert!(IrqPolicy::None.injector(1).next_injection().is_none());
    let r = IrqPolicy::Random { min_ns: 5, max_ns: 5 }.injector(1);
    assert_eq!(r.next_injection(), Some(5));
}
