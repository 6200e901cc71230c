//! Multi-threaded stress runs with history recording and a progress watchdog.

use std::cell::Cell;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use serde::Serialize;
use versiontree::hook::{Event, Hook, Label};
use versiontree::{Key, OrderedSet};

use crate::history::{History, HistoryError, Recorder, ThreadLog};
use crate::lincheck::{check_linearizable_from, CheckConfig, Verdict};
use crate::workload::WorkloadConfig;

thread_local! {
    static SLOT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload used to unwind workers once the watchdog fires.
struct Abandon;

/// Counts helping and remembers the last step each worker reached.
pub struct StressHook {
    abort: AtomicBool,
    last: Vec<AtomicUsize>,
    helps: AtomicU64,
    foreign_helps: AtomicU64,
}

impl StressHook {
    pub fn new(threads: usize) -> Self {
        StressHook {
            abort: AtomicBool::new(false),
            last: (0..threads).map(|_| AtomicUsize::new(usize::MAX)).collect(),
            helps: AtomicU64::new(0),
            foreign_helps: AtomicU64::new(0),
        }
    }

    pub fn foreign_helps(&self) -> u64 {
        self.foreign_helps.load(SeqCst)
    }

    pub fn helps(&self) -> u64 {
        self.helps.load(SeqCst)
    }

    fn last_labels(&self) -> Vec<Option<&'static str>> {
        self.last
            .iter()
            .map(|l| Label::ALL.get(l.load(SeqCst)).map(|l| l.name()))
            .collect()
    }
}

impl Hook for StressHook {
    fn on_event(&self, event: &Event) {
        match *event {
            Event::Shared { label, .. } => {
                if self.abort.load(SeqCst) {
                    panic::resume_unwind(Box::new(Abandon));
                }
                if let Some(t) = SLOT.with(Cell::get) {
                    let idx = Label::ALL.iter().position(|&l| l == label).unwrap_or(usize::MAX);
                    self.last[t].store(idx, SeqCst);
                }
            }
            Event::Help { origin, .. } => {
                self.helps.fetch_add(1, SeqCst);
                if origin.is_foreign() {
                    self.foreign_helps.fetch_add(1, SeqCst);
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressOptions {
    /// The run fails if no operation completes within this long.
    pub watchdog: Duration,
    /// Rebuild and check every version tree once the run is over.
    pub check_version_trees: bool,
}

impl Default for StressOptions {
    fn default() -> Self {
        StressOptions {
            watchdog: Duration::from_secs(10),
            check_version_trees: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WatchdogReport {
    pub completed_ops: u64,
    /// Last step label each worker reached.
    pub last_labels: Vec<Option<&'static str>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StressStats {
    pub threads: usize,
    pub completed_ops: u64,
    pub helps: u64,
    pub foreign_helps: u64,
    pub phases: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug)]
pub struct StressReport {
    /// Keys inserted before the workers started.
    pub initial: Vec<Key>,
    pub history: History,
    pub stats: StressStats,
    /// One entry per version tree that failed to rebuild or is not a BST.
    pub version_tree_errors: Vec<String>,
    pub version_trees_checked: u64,
    pub watchdog: Option<WatchdogReport>,
    /// Panics other than watchdog aborts.
    pub panics: Vec<String>,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.watchdog.is_none() && self.panics.is_empty() && self.version_tree_errors.is_empty()
    }

    pub fn linearizability(&self, cfg: CheckConfig) -> Result<Verdict, HistoryError> {
        check_linearizable_from(&self.history, &self.initial.iter().copied().collect(), cfg)
    }
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic".into())
}

pub fn run_stress(cfg: &WorkloadConfig, opts: &StressOptions) -> StressReport {
    let hook = Arc::new(StressHook::new(cfg.threads));
    let mut set = OrderedSet::with_hook(hook.clone());
    let initial = cfg.permanent_keys();
    for &k in &initial {
        set.add(k).expect("permanent keys are real");
    }
    let recorder = Recorder::new();
    let completed = AtomicU64::new(0);
    let finished = AtomicUsize::new(0);
    let barrier = Barrier::new(cfg.threads + 1);
    let scripts: Vec<_> = (0..cfg.threads).map(|t| cfg.script(t)).collect();
    let start = Instant::now();
    let mut watchdog = None;
    let mut logs = Vec::new();
    let mut panics = Vec::new();
    std::thread::scope(|s| {
        let workers: Vec<_> = scripts
            .iter()
            .enumerate()
            .map(|(t, script)| {
                let (set, recorder, completed, finished, barrier) =
                    (&set, &recorder, &completed, &finished, &barrier);
                s.spawn(move || {
                    SLOT.with(|c| c.set(Some(t)));
                    let mut log = ThreadLog { thread: t, events: vec![] };
                    barrier.wait();
                    let r = panic::catch_unwind(AssertUnwindSafe(|| {
                        for &call in script {
                            recorder.run(&mut log, set, call);
                            completed.fetch_add(1, SeqCst);
                        }
                    }));
                    finished.fetch_add(1, SeqCst);
                    let err = match r {
                        Ok(()) => None,
                        Err(e) if e.is::<Abandon>() => None,
                        Err(e) => Some(panic_message(&*e)),
                    };
                    (log, err)
                })
            })
            .collect();
        barrier.wait();
        let mut seen = 0;
        let tick = opts.watchdog.min(Duration::from_millis(50));
        let mut last_progress = Instant::now();
        while finished.load(SeqCst) < cfg.threads {
            std::thread::sleep(tick);
            let now = completed.load(SeqCst);
            if now > seen {
                seen = now;
                last_progress = Instant::now();
            } else if last_progress.elapsed() >= opts.watchdog {
                watchdog = Some(WatchdogReport {
                    completed_ops: now,
                    last_labels: hook.last_labels(),
                });
                hook.abort.store(true, SeqCst);
                break;
            }
        }
        for w in workers {
            let (log, err) = w.join().expect("worker panics are caught");
            logs.push(log);
            panics.extend(err);
        }
    });
    let elapsed = start.elapsed();
    let phases = set.phase();
    let mut version_tree_errors = Vec::new();
    let mut checked = 0;
    if opts.check_version_trees && watchdog.is_none() {
        for i in 0..=phases {
            checked += 1;
            match set.reconstruct_version_tree(i) {
                Ok(t) => {
                    if let Err(e) = t.check_bst() {
                        version_tree_errors.push(format!("phase {i}: {e}"));
                    }
                }
                Err(e) => version_tree_errors.push(format!("phase {i}: {e}")),
            }
        }
    }
    StressReport {
        initial,
        history: Recorder::merge(logs),
        stats: StressStats {
            threads: cfg.threads,
            completed_ops: completed.load(SeqCst),
            helps: hook.helps(),
            foreign_helps: hook.foreign_helps(),
            phases,
            elapsed_secs: elapsed.as_secs_f64(),
        },
        version_tree_errors,
        version_trees_checked: checked,
        watchdog,
        panics,
    }
}
