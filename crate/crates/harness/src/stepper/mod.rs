//! Deterministic stepper.
//!
//! Each logical thread of a [`Scenario`] runs on its own OS thread, but only
//! one of them is ever running: every shared-memory access reported by the
//! tree's hook, and every operation invocation and response, is a yield
//! point at which the thread parks until the scheduling policy picks it
//! again. A schedule (the sequence of picks) therefore determines the whole
//! execution, which makes executions replayable, enumerable and checkable
//! step by step.

mod dpor;
mod monitor;
mod policy;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};

use serde::{Deserialize, Serialize};
use versiontree::hook::{Access, Event, Hook, InfoId, Label, UnknownLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versiontree::{Key, OrderedSet, Tree};

use crate::history::{History, HistoryEvent, OpCall, Ret};
use crate::lincheck::{check_linearizable_from, CheckConfig, Verdict};

pub use dpor::{explore, ExploreOptions, ExploreReport};
pub use monitor::{CommittedUpdate, MonitorStats, OpRecord, Violation};
pub use policy::{Choice, ChoiceCtx, CrashPolicy, Policy, RandomPolicy, ReplayPolicy, SuspendPolicy};

/// Threads and their operation scripts, plus keys inserted before any thread
/// starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub initial: Vec<Key>,
    pub threads: Vec<Vec<OpCall>>,
    /// Ordering constraints that narrow the schedules considered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<Gate>,
}

impl Scenario {
    pub fn new(initial: Vec<Key>, threads: Vec<Vec<OpCall>>) -> Self {
        Scenario {
            initial,
            threads,
            gates: Vec::new(),
        }
    }

    pub fn total_ops(&self) -> usize {
        self.threads.iter().map(Vec::len).sum()
    }
}

/// Holds `thread` before its first step labelled `label` until `after_thread`
/// has taken a step labelled `after_label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    pub thread: usize,
    pub label: String,
    pub after_thread: usize,
    pub after_label: String,
}

impl Gate {
    /// Whether `executed[..upto]` holds `thread` back at a step labelled
    /// `label`: the source has not run and neither has an earlier step of
    /// the same label.
    fn holds(&self, executed: &[Step], thread: usize, label: StepLabel) -> bool {
        self.thread == thread
            && label.name() == self.label
            && !executed.iter().any(|s| {
                (s.thread == self.after_thread && s.label.name() == self.after_label)
                    || (s.thread == thread && s.label == label)
            })
    }

    /// Index of the step that opened the gate for `executed[at]`, if the
    /// gate applied to it.
    pub(crate) fn opened_by(&self, executed: &[Step], at: usize) -> Option<usize> {
        let s = executed[at];
        if s.thread != self.thread
            || s.label.name() != self.label
            || executed[..at].iter().any(|e| e.thread == s.thread && e.label == s.label)
        {
            return None;
        }
        executed[..at]
            .iter()
            .position(|e| e.thread == self.after_thread && e.label.name() == self.after_label)
    }
}

/// What a step does. Invocations and responses are pseudo-steps on a shared
/// history cell so that their relative order is part of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepLabel {
    Invoke,
    Respond,
    Shared(Label),
}

impl StepLabel {
    pub fn name(self) -> &'static str {
        match self {
            StepLabel::Invoke => "op.invoke",
            StepLabel::Respond => "op.respond",
            StepLabel::Shared(l) => l.name(),
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            StepLabel::Shared(l) => Some(l),
            _ => None,
        }
    }
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StepLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "op.invoke" => Ok(StepLabel::Invoke),
            "op.respond" => Ok(StepLabel::Respond),
            _ => s.parse().map(StepLabel::Shared),
        }
    }
}

/// A step a thread is about to take, or has taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Step {
    pub thread: usize,
    pub label: StepLabel,
    pub access: Access,
    /// Cell index, numbered by first appearance within the execution so that
    /// equal schedules give equal numbers.
    pub cell: u32,
    pub(crate) raw_cell: usize,
    pub(crate) info: Option<InfoId>,
    /// Whether the step changed a shared value; `None` until it has run.
    pub changed: Option<bool>,
}

impl Step {
    /// Same thread, or same cell with at least one side writing.
    ///
    /// Among invocations and responses only an invocation and a response of
    /// different threads conflict: their order is the real-time order the
    /// checker sees. Neither conflicts with a shared step.
    pub fn dependent(&self, other: &Step) -> bool {
        if self.thread == other.thread {
            return true;
        }
        match (self.is_history(), other.is_history()) {
            (true, true) => self.label != other.label,
            (false, false) => self.cell == other.cell && !(self.reads_only() && other.reads_only()),
            _ => false,
        }
    }

    /// A read, or a step that ran and left every value as it was (a failed
    /// CAS, a write of the value already there). Either kind commutes with
    /// reads of the same cell.
    pub fn reads_only(&self) -> bool {
        self.access.is_read() || self.changed == Some(false)
    }

    pub fn is_history(&self) -> bool {
        matches!(self.label, StepLabel::Invoke | StepLabel::Respond)
    }

    /// What identifies a step across executions.
    pub(crate) fn sig(&self) -> (usize, StepLabel, u32) {
        (self.thread, self.label, self.cell)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub thread: usize,
    pub label: String,
}

/// A replayable schedule: the scenario and every pick made while running it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepperSchedule {
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub steps: Vec<ScheduleStep>,
}

/// Why an execution ended before every thread finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    /// Every enabled thread was asleep: the execution is redundant.
    SleepBlocked,
    Violation,
    StepLimit { steps: usize },
    /// The policy ended the run with the remaining threads suspended.
    Suspended,
    ScheduleMismatch {
        depth: usize,
        expected: String,
        found: String,
    },
    ScheduleExhausted,
    Nondeterminism { depth: usize },
    /// Every unfinished thread was held by a gate.
    Gated,
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub schedule: StepperSchedule,
    pub history: History,
    pub violations: Vec<Violation>,
    /// `None` when every thread ran its whole script.
    pub stop: Option<StopReason>,
    pub finished: Vec<bool>,
    pub ops: Vec<OpRecord>,
    pub committed: Vec<CommittedUpdate>,
    pub stats: MonitorStats,
    /// Hash of the final current tree; independent of node addresses.
    pub final_hash: u64,
    /// Executed steps with their cells, parallel to `schedule.steps`.
    pub executed: Vec<Step>,
}

impl Execution {
    pub fn completed(&self) -> bool {
        self.stop.is_none()
    }

    /// Linearizability of the history, starting from the scenario's initial
    /// keys.
    pub fn linearizability(&self, cfg: CheckConfig) -> Verdict {
        let initial = self.schedule.scenario.initial.iter().copied().collect();
        check_linearizable_from(&self.history, &initial, cfg)
            .expect("stepped histories are well formed")
    }

    /// Steps in execution order, one `t<thread> <label>` line each.
    pub fn trace(&self) -> Vec<String> {
        self.schedule
            .steps
            .iter()
            .map(|s| format!("t{} {}", s.thread, s.label))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepperOptions {
    /// Hard cap on steps per execution.
    pub max_steps: usize,
}

impl Default for StepperOptions {
    fn default() -> Self {
        StepperOptions { max_steps: 200_000 }
    }
}

thread_local! {
    static CURRENT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload for threads that are unwound when an execution stops.
struct Abandon;

const HISTORY_CELL: usize = 0;

struct Inner<P> {
    registered: Vec<bool>,
    finished: Vec<bool>,
    pending: Vec<Option<Step>>,
    running: Option<usize>,
    over: bool,
    stop: Option<StopReason>,
    canon: HashMap<usize, u32>,
    executed: Vec<Step>,
    history: Vec<HistoryEvent>,
    op_slot: Vec<Option<(OpCall, Option<Ret>)>>,
    unchecked: bool,
    policy: Option<P>,
    monitor: monitor::Monitor,
    tree: *const Tree,
    max_steps: usize,
    gates: Vec<Gate>,
}

// SAFETY: `tree` is only dereferenced while the execution's scope keeps the
// tree alive; everything else is owned data.
unsafe impl<P: Send> Send for Inner<P> {}

impl<P> Inner<P> {
    /// Runs the deferred checks of the last step and notes whether it wrote.
    fn check_last(&mut self, tree: &Tree) {
        if self.unchecked {
            self.unchecked = false;
            let idx = self.executed.len() - 1;
            let last = self.executed[idx];
            let changed = self.monitor.post_step(tree, &last, idx);
            self.executed[idx].changed = Some(changed);
        }
    }
}

struct Controller<P> {
    inner: Mutex<Inner<P>>,
    cv: Condvar,
}

impl<P: Policy> Controller<P> {
    fn lock(&self) -> MutexGuard<'_, Inner<P>> {
        self.inner.lock().unwrap_or_else(PoisonError::into_inner)
    }

    fn abandon() -> ! {
        panic::resume_unwind(Box::new(Abandon))
    }

    fn yield_step(&self, thread: usize, label: StepLabel, access: Access, raw: usize, info: Option<InfoId>) {
        let mut g = self.lock();
        if g.over {
            drop(g);
            Self::abandon();
        }
        let next = g.canon.len() as u32;
        let cell = *g.canon.entry(raw).or_insert(next);
        g.pending[thread] = Some(Step {
            thread,
            label,
            access,
            cell,
            raw_cell: raw,
            info,
            changed: None,
        });
        g.registered[thread] = true;
        self.advance(&mut g);
        while g.running != Some(thread) && !g.over {
            g = self.cv.wait(g).unwrap_or_else(PoisonError::into_inner);
        }
        if g.over {
            drop(g);
            Self::abandon();
        }
    }

    fn yield_op(&self, thread: usize, label: StepLabel, call: OpCall, ret: Option<Ret>) {
        self.lock().op_slot[thread] = Some((call, ret));
        self.yield_step(thread, label, Access::Write, HISTORY_CELL, None);
    }

    fn finish(&self, thread: usize, panic: Option<String>) {
        let mut g = self.lock();
        g.finished[thread] = true;
        g.registered[thread] = true;
        g.pending[thread] = None;
        if g.running == Some(thread) {
            g.running = None;
        }
        if let Some(msg) = panic {
            let step = g.executed.len();
            g.monitor.report(step, Some(thread), "panic", msg);
        }
        self.advance(&mut g);
    }

    fn marker(&self, thread: usize, event: &Event) {
        let mut g = self.lock();
        if g.over {
            return;
        }
        let g = &mut *g;
        // SAFETY: see `Inner`.
        let tree = unsafe { &*g.tree };
        g.check_last(tree);
        g.monitor.on_marker(tree, thread, event, g.executed.len());
    }

    fn stop(&self, g: &mut Inner<P>, reason: Option<StopReason>) {
        g.over = true;
        g.stop = reason;
        g.running = None;
        self.cv.notify_all();
    }

    fn advance(&self, g: &mut Inner<P>) {
        if g.over || g.registered.iter().any(|r| !r) {
            return;
        }
        // SAFETY: see `Inner`.
        let tree = unsafe { &*g.tree };
        g.check_last(tree);
        if !g.monitor.violations.is_empty() {
            return self.stop(g, Some(StopReason::Violation));
        }
        if g.finished.iter().all(|f| *f) {
            return self.stop(g, None);
        }
        if g.executed.len() >= g.max_steps {
            let steps = g.executed.len();
            return self.stop(g, Some(StopReason::StepLimit { steps }));
        }
        let mut enabled = g.pending.clone();
        for (t, p) in enabled.iter_mut().enumerate() {
            if p.is_some_and(|s| g.gates.iter().any(|gate| gate.holds(&g.executed, t, s.label))) {
                *p = None;
            }
        }
        if enabled.iter().all(Option::is_none) {
            return self.stop(g, Some(StopReason::Gated));
        }
        let choice = {
            let ctx = ChoiceCtx {
                pending: &enabled,
                executed: &g.executed,
            };
            g.policy.as_mut().expect("policy present").choose(&ctx)
        };
        match choice {
            Choice::Run(t) => {
                assert!(enabled[t].is_some(), "policy picked a held thread");
                let step = g.pending[t].take().expect("policy picked an enabled thread");
                let idx = g.executed.len();
                g.monitor.pre_step(tree, &step, idx);
                if matches!(step.label, StepLabel::Invoke | StepLabel::Respond) {
                    let (call, ret) = g.op_slot[t].take().expect("operation slot filled");
                    g.monitor.on_op(tree, t, call, ret.as_ref(), idx);
                    g.history.push(match ret {
                        None => HistoryEvent::invoke(t, call, idx as u64),
                        Some(r) => HistoryEvent::respond(t, call, r, idx as u64),
                    });
                }
                g.executed.push(step);
                g.unchecked = true;
                g.running = Some(t);
                self.cv.notify_all();
            }
            Choice::Stop(reason) => self.stop(g, Some(reason)),
        }
    }

    fn wait_over(&self) {
        let mut g = self.lock();
        while !g.over {
            g = self.cv.wait(g).unwrap_or_else(PoisonError::into_inner);
        }
    }
}

impl<P: Policy> Hook for Controller<P> {
    fn on_event(&self, event: &Event) {
        let Some(thread) = CURRENT.with(Cell::get) else {
            return;
        };
        match *event {
            Event::Shared {
                label,
                access,
                cell,
                info,
            } => self.yield_step(thread, StepLabel::Shared(label), access, cell.as_usize(), info),
            _ => self.marker(thread, event),
        }
    }
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic".into())
}

/// Runs `scenario` once under `policy`.
pub fn run_execution<P: Policy>(scenario: &Scenario, policy: P, opts: StepperOptions) -> (Execution, P) {
    let n = scenario.threads.len();
    let ctrl = Arc::new(Controller {
        inner: Mutex::new(Inner {
            registered: vec![false; n],
            finished: vec![false; n],
            pending: vec![None; n],
            running: None,
            over: false,
            stop: None,
            canon: HashMap::from([(HISTORY_CELL, 0)]),
            executed: Vec::new(),
            history: Vec::new(),
            op_slot: vec![None; n],
            unchecked: false,
            policy: Some(policy),
            monitor: monitor::Monitor::new(n),
            tree: std::ptr::null(),
            max_steps: opts.max_steps,
            gates: scenario.gates.clone(),
        }),
        cv: Condvar::new(),
    });
    let mut set = OrderedSet::with_hook(ctrl.clone());
    for &k in &scenario.initial {
        set.add(k).expect("initial keys are real");
    }
    {
        let mut g = ctrl.lock();
        g.tree = set.tree() as *const Tree;
        let g = &mut *g;
        g.monitor.init(set.tree());
    }
    std::thread::scope(|s| {
        for (t, script) in scenario.threads.iter().enumerate() {
            let (ctrl, set) = (&ctrl, &set);
            s.spawn(move || {
                CURRENT.with(|c| c.set(Some(t)));
                let r = panic::catch_unwind(AssertUnwindSafe(|| {
                    for &call in script {
                        ctrl.yield_op(t, StepLabel::Invoke, call, None);
                        let ret = call.apply(set);
                        ctrl.yield_op(t, StepLabel::Respond, call, Some(ret));
                    }
                }));
                match r {
                    Ok(()) => ctrl.finish(t, None),
                    Err(e) if e.is::<Abandon>() => {}
                    Err(e) => ctrl.finish(t, Some(panic_message(&*e))),
                }
            });
        }
        ctrl.wait_over();
    });
    let mut guard = ctrl.lock();
    guard.tree = std::ptr::null();
    let g = &mut *guard;
    let tree = set.tree();
    g.check_last(tree);
    if g.stop.is_none() {
        g.monitor.finish(tree);
    }
    let committed = g.monitor.committed(tree);
    let steps = g
        .executed
        .iter()
        .map(|s| ScheduleStep {
            thread: s.thread,
            label: s.label.name().into(),
        })
        .collect();
    let monitor = std::mem::replace(&mut g.monitor, monitor::Monitor::new(0));
    let (violations, ops, stats) = monitor.into_parts();
    let stop = if violations.is_empty() || g.stop.is_some() {
        g.stop.clone()
    } else {
        Some(StopReason::Violation)
    };
    let execution = Execution {
        schedule: StepperSchedule {
            scenario: scenario.clone(),
            seed: None,
            steps,
        },
        history: History::new(std::mem::take(&mut g.history)),
        violations,
        stop,
        finished: g.finished.clone(),
        ops,
        committed,
        stats,
        final_hash: 0,
        executed: std::mem::take(&mut g.executed),
    };
    let policy = g.policy.take().expect("policy present");
    drop(guard);
    drop(ctrl);
    let phase = set.phase();
    let final_hash = set
        .reconstruct_version_tree(phase)
        .map(|t| t.structure_hash())
        .unwrap_or(0);
    (Execution { final_hash, ..execution }, policy)
}

pub fn run_random(scenario: &Scenario, seed: u64, opts: StepperOptions) -> Execution {
    let (mut e, _) = run_execution(scenario, RandomPolicy::new(seed), opts);
    e.schedule.seed = Some(seed);
    e
}

pub fn replay(schedule: &StepperSchedule, opts: StepperOptions) -> Execution {
    let (mut e, _) = run_execution(&schedule.scenario, ReplayPolicy::new(schedule), opts);
    e.schedule.seed = schedule.seed;
    e
}

/// Outcome of a run that suspends one thread for good after its first
/// successful freeze.
#[derive(Debug, Clone)]
pub struct CrashRun {
    pub execution: Execution,
    /// Whether the victim reached the suspension point.
    pub crashed: bool,
    /// Whether every other thread finished its script.
    pub others_finished: bool,
}

pub fn run_crash(scenario: &Scenario, victim: usize, seed: u64, opts: StepperOptions) -> CrashRun {
    let (mut e, p) = run_execution(scenario, CrashPolicy::new(victim, seed), opts);
    e.schedule.seed = Some(seed);
    let others_finished = e
        .finished
        .iter()
        .enumerate()
        .all(|(t, &f)| f || t == victim);
    CrashRun {
        crashed: p.crashed(),
        others_finished,
        execution: e,
    }
}

/// Runs the non-scanner threads for `pause_after` random steps, suspends
/// them, then lets `scanner` run alone until it finishes.
pub fn run_suspended(scenario: &Scenario, scanner: usize, pause_after: usize, seed: u64, opts: StepperOptions) -> Execution {
    let (mut e, _) = run_execution(scenario, SuspendPolicy::new(scanner, pause_after, seed), opts);
    e.schedule.seed = Some(seed);
    e
}

/// Random scenario: `threads` scripts of `ops` operations over keys in
/// `[0, keys)`, with about a third of the keys present initially.
pub fn random_scenario(seed: u64, threads: usize, ops: usize, keys: Key) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = (0..keys).filter(|_| rng.gen_bool(0.35)).collect();
    let threads = (0..threads)
        .map(|_| {
            (0..ops)
                .map(|_| {
                    let k = rng.gen_range(0..keys);
                    match rng.gen_range(0..10) {
                        0..=2 => OpCall::Contains(k),
                        3..=5 => OpCall::Add(k),
                        6..=8 => OpCall::Remove(k),
                        _ => {
                            let b = rng.gen_range(k..keys);
                            OpCall::Range(k, b)
                        }
                    }
                })
                .collect()
        })
        .collect();
    Scenario::new(initial, threads)
}
