//! Exhaustive exploration with dynamic partial-order reduction.
//!
//! Stateless search over schedules: every execution replays a prefix of the
//! previous one and then diverges at the deepest point with an unexplored
//! backtrack choice. Each newly executed step is checked for races with
//! earlier dependent steps of other threads that are not ordered through a
//! third step (happens-before is tracked with vector clocks). For a race, the
//! steps after the earlier one that do not depend on it, followed by the
//! later step, form a sequence that would reverse the race; some thread that
//! can start that sequence is scheduled at the earlier point unless one
//! already is (source sets). Sleep sets prune schedules that only reorder
//! independent steps of ones already explored.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use super::policy::{Choice, ChoiceCtx, Policy};
use super::{run_execution, Execution, Gate, Scenario, Step, StepLabel, StepperOptions, StopReason};

#[derive(Debug, Clone, Copy)]
pub struct ExploreOptions {
    pub max_executions: usize,
    pub max_steps: usize,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            max_executions: 10_000_000,
            max_steps: StepperOptions::default().max_steps,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExploreReport {
    pub executions: usize,
    /// Executions in which every thread finished.
    pub complete: usize,
    /// Executions cut short because every enabled thread was asleep.
    pub sleep_blocked: usize,
    /// Executions that ended on a violation, step limit or replay divergence.
    pub other_stops: usize,
    /// True when the whole reduced space was explored.
    pub exhausted: bool,
    pub max_depth: usize,
}

struct Entry {
    pending: Vec<Option<Step>>,
    chosen: usize,
    backtrack: BTreeSet<usize>,
    done: BTreeSet<usize>,
    sleep: Vec<Step>,
}

type Clock = Vec<usize>;

fn join(into: &mut Clock, other: &Clock) {
    for (a, b) in into.iter_mut().zip(other) {
        *a = (*a).max(*b);
    }
}

pub(crate) struct DporPolicy {
    threads: usize,
    gates: Vec<Gate>,
    stack: Vec<Entry>,
    // Per-execution happens-before tracking. Clock component `t` is one past
    // the index of the latest step of thread `t` that happens before.
    processed: usize,
    /// Steps from this index on are new in the current execution.
    fresh_from: usize,
    thread_clock: Vec<Clock>,
    step_clock: Vec<Clock>,
    last_write: HashMap<u32, Clock>,
    reads: HashMap<u32, Clock>,
    invokes: Clock,
    responds: Clock,
    by_cell: HashMap<u32, Vec<usize>>,
}

impl DporPolicy {
    pub fn new(threads: usize, gates: Vec<Gate>) -> Self {
        DporPolicy {
            threads,
            gates,
            stack: Vec::new(),
            processed: 0,
            fresh_from: 0,
            thread_clock: vec![vec![0; threads]; threads],
            step_clock: Vec::new(),
            last_write: HashMap::new(),
            reads: HashMap::new(),
            invokes: vec![0; threads],
            responds: vec![0; threads],
            by_cell: HashMap::new(),
        }
    }

    fn reset_clocks(&mut self) {
        self.processed = 0;
        self.thread_clock = vec![vec![0; self.threads]; self.threads];
        self.step_clock.clear();
        self.last_write.clear();
        self.reads.clear();
        self.invokes = vec![0; self.threads];
        self.responds = vec![0; self.threads];
        self.by_cell.clear();
    }

    fn absorb(&mut self, executed: &[Step]) {
        let zero = vec![0; self.threads];
        for (i, s) in executed.iter().enumerate().skip(self.processed) {
            let mut vc = self.thread_clock[s.thread].clone();
            // a gated step comes after the step that opened its gate in
            // every schedule
            for g in &self.gates {
                if let Some(j) = g.opened_by(executed, i) {
                    join(&mut vc, &self.step_clock[j]);
                }
            }
            match s.label {
                StepLabel::Invoke => join(&mut vc, &self.responds),
                StepLabel::Respond => join(&mut vc, &self.invokes),
                StepLabel::Shared(_) => {
                    join(&mut vc, self.last_write.get(&s.cell).unwrap_or(&zero));
                    if !s.reads_only() {
                        join(&mut vc, self.reads.get(&s.cell).unwrap_or(&zero));
                    }
                }
            }
            vc[s.thread] = i + 1;
            match s.label {
                StepLabel::Invoke => join(&mut self.invokes, &vc),
                StepLabel::Respond => join(&mut self.responds, &vc),
                StepLabel::Shared(_) if s.reads_only() => {
                    join(self.reads.entry(s.cell).or_insert_with(|| zero.clone()), &vc);
                }
                StepLabel::Shared(_) => {
                    self.last_write.insert(s.cell, vc.clone());
                    self.reads.insert(s.cell, vc.clone());
                }
            }
            self.by_cell.entry(s.cell).or_default().push(i);
            self.step_clock.push(vc.clone());
            self.thread_clock[s.thread] = vc;
            if i >= self.fresh_from {
                self.add_backtracks(executed, i);
            }
        }
        self.processed = executed.len();
    }

    /// Whether step `a` happens before step `b`.
    fn hb(&self, executed: &[Step], a: usize, b: usize) -> bool {
        a < b && self.step_clock[b][executed[a].thread] > a
    }

    /// Schedules a reversal of every race between step `n` and an earlier
    /// step.
    fn add_backtracks(&mut self, executed: &[Step], n: usize) {
        let s = executed[n];
        let Some(cands) = self.by_cell.get(&s.cell) else {
            return;
        };
        let races: Vec<usize> = cands
            .iter()
            .copied()
            .filter(|&i| i < n)
            .filter(|&i| {
                let e = executed[i];
                e.thread != s.thread
                    && e.dependent(&s)
                    && !(i + 1..n).any(|j| self.hb(executed, i, j) && self.hb(executed, j, n))
            })
            .collect();
        for i in races {
            // steps after i that do not depend on it, then step n
            let v: Vec<usize> = (i + 1..n)
                .filter(|&j| !self.hb(executed, i, j))
                .chain([n])
                .collect();
            let mut initials = BTreeSet::new();
            let mut seen = BTreeSet::new();
            for (k, &j) in v.iter().enumerate() {
                let t = executed[j].thread;
                if seen.insert(t) && !v[..k].iter().any(|&a| self.hb(executed, a, j)) {
                    initials.insert(t);
                }
            }
            let entry = &mut self.stack[i];
            initials.retain(|&t| entry.pending[t].is_some());
            if initials.is_empty() || !initials.is_disjoint(&entry.backtrack) {
                continue;
            }
            let q = if initials.contains(&s.thread) {
                s.thread
            } else {
                *initials.first().expect("not empty")
            };
            entry.backtrack.insert(q);
        }
    }

    /// Moves to the next unexplored schedule. False when none is left.
    pub fn backtrack(&mut self) -> bool {
        self.reset_clocks();
        while let Some(e) = self.stack.last_mut() {
            let asleep: BTreeSet<usize> = e.sleep.iter().map(|s| s.thread).collect();
            let next = e
                .backtrack
                .iter()
                .copied()
                .find(|t| !e.done.contains(t) && !asleep.contains(t) && e.pending[*t].is_some());
            if let Some(t) = next {
                e.chosen = t;
                e.done.insert(t);
                self.fresh_from = self.stack.len() - 1;
                return true;
            }
            self.stack.pop();
        }
        false
    }
}

impl Policy for DporPolicy {
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice {
        self.absorb(ctx.executed);
        let depth = ctx.executed.len();
        if let Some(e) = self.stack.get(depth) {
            let same = e.pending.len() == ctx.pending.len()
                && e
                    .pending
                    .iter()
                    .zip(ctx.pending)
                    .all(|(a, b)| a.map(|s| s.sig()) == b.map(|s| s.sig()));
            return if same {
                Choice::Run(e.chosen)
            } else {
                Choice::Stop(StopReason::Nondeterminism { depth })
            };
        }
        let sleep: Vec<Step> = match self.stack.last() {
            None => Vec::new(),
            Some(parent) => {
                // the step as it ran, so its effect is known
                let ran = *ctx.executed.last().expect("parent step ran");
                parent
                    .sleep
                    .iter()
                    .copied()
                    .chain(
                        parent
                            .done
                            .iter()
                            .filter(|&&t| t != parent.chosen)
                            .filter_map(|&t| parent.pending[t]),
                    )
                    .filter(|s| !s.dependent(&ran))
                    .collect()
            }
        };
        let awake = |t: &usize| !sleep.iter().any(|s| s.thread == *t);
        let last = ctx.executed.last().map(|s| s.thread);
        let chosen = last
            .filter(|&t| ctx.pending[t].is_some() && awake(&t))
            .or_else(|| ctx.enabled().find(awake));
        let Some(chosen) = chosen else {
            return Choice::Stop(StopReason::SleepBlocked);
        };
        self.stack.push(Entry {
            pending: ctx.pending.to_vec(),
            chosen,
            backtrack: [chosen].into(),
            done: [chosen].into(),
            sleep,
        });
        Choice::Run(chosen)
    }
}

/// Runs every schedule of `scenario` up to partial-order equivalence, calling
/// `visit` on each execution. `visit` returns false to stop early.
pub fn explore(
    scenario: &Scenario,
    opts: ExploreOptions,
    mut visit: impl FnMut(&Execution) -> bool,
) -> ExploreReport {
    let mut report = ExploreReport::default();
    let mut policy = DporPolicy::new(scenario.threads.len(), scenario.gates.clone());
    let step_opts = StepperOptions {
        max_steps: opts.max_steps,
    };
    while report.executions < opts.max_executions {
        let (execution, p) = run_execution(scenario, policy, step_opts);
        policy = p;
        // the last step never reached a choice point
        policy.absorb(&execution.executed);
        report.executions += 1;
        report.max_depth = report.max_depth.max(execution.schedule.steps.len());
        match execution.stop {
            None => report.complete += 1,
            Some(StopReason::SleepBlocked) => report.sleep_blocked += 1,
            Some(_) => report.other_stops += 1,
        }
        if !visit(&execution) {
            return report;
        }
        if !policy.backtrack() {
            report.exhausted = true;
            return report;
        }
    }
    report
}
