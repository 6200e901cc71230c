use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};
use std::sync::Arc;

use versiontree::hook::Event;
use versiontree::{InfoState, OrderedSet};

#[test]
fn threads_on_disjoint_keys_agree_with_union() {
    let mut set = OrderedSet::new();
    std::thread::scope(|s| {
        for t in 0..4i64 {
            let set = &set;
            s.spawn(move || {
                for i in 0..500 {
                    let k = t * 10_000 + i;
                    assert!(set.add(k).unwrap());
                    if i % 3 == 0 {
                        assert!(set.remove(k).unwrap());
                    }
                    let _ = set.range(t * 10_000, t * 10_000 + 50).unwrap();
                }
            });
        }
    });
    let expect: BTreeSet<i64> = (0..4i64)
        .flat_map(|t| (0..500).filter(|i| i % 3 != 0).map(move |i| t * 10_000 + i))
        .collect();
    let got: BTreeSet<i64> = set.range(i64::MIN, 100_000).unwrap().into_iter().collect();
    assert_eq!(got, expect);
    for phase in 0..=set.phase() {
        set.reconstruct_version_tree(phase).unwrap().check_bst().unwrap();
    }
}

#[test]
fn contended_keys_end_consistent() {
    let set = OrderedSet::new();
    let adds: Vec<_> = (0..4).map(|_| AtomicUsize::new(0)).collect();
    let removes: Vec<_> = (0..4).map(|_| AtomicUsize::new(0)).collect();
    std::thread::scope(|s| {
        for t in 0..4u64 {
            let (set, adds, removes) = (&set, &adds, &removes);
            s.spawn(move || {
                let mut x = t + 1;
                for _ in 0..3000 {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let k = (x >> 33) % 4;
                    match (x >> 40) % 3 {
                        0 => {
                            if set.add(k as i64).unwrap() {
                                adds[k as usize].fetch_add(1, Relaxed);
                            }
                        }
                        1 => {
                            if set.remove(k as i64).unwrap() {
                                removes[k as usize].fetch_add(1, Relaxed);
                            }
                        }
                        _ => {
                            let r = set.range(0, 3).unwrap();
                            assert!(r.windows(2).all(|w| w[0] < w[1]));
                        }
                    }
                }
            });
        }
    });
    for k in 0..4 {
        let (a, r) = (adds[k].load(Relaxed), removes[k].load(Relaxed));
        let present = set.contains(k as i64).unwrap();
        assert!(a == r || a == r + 1, "key {k}: {a} adds, {r} removes");
        assert_eq!(present, a == r + 1, "key {k}");
    }
    // descriptors that never got past their first freeze stay at bottom;
    // nothing may be left half-done once every thread has returned
    for info in set.tree().infos() {
        assert_ne!(info.state(), InfoState::Try);
    }
}

#[test]
fn hook_sees_every_help_paired_with_done() {
    let entered = Arc::new(AtomicUsize::new(0));
    let done = Arc::new(AtomicUsize::new(0));
    let (e2, d2) = (entered.clone(), done.clone());
    let set = OrderedSet::with_hook(Arc::new(move |e: &Event| match e {
        Event::Help { .. } => {
            e2.fetch_add(1, Relaxed);
        }
        Event::HelpDone { .. } => {
            d2.fetch_add(1, Relaxed);
        }
        _ => {}
    }));
    std::thread::scope(|s| {
        for t in 0..3i64 {
            let set = &set;
            s.spawn(move || {
                for i in 0..300 {
                    let k = (i * 7 + t) % 5;
                    set.add(k).unwrap();
                    set.range(0, 4).unwrap();
                    set.remove(k).unwrap();
                }
            });
        }
    });
    assert!(entered.load(Relaxed) >= 1);
    assert_eq!(entered.load(Relaxed), done.load(Relaxed));
}
