//! Scheduling policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versiontree::hook::Label;

use super::{ScheduleStep, Step, StepLabel, StepperSchedule, StopReason};

/// What the scheduler sees when it has to pick the next thread.
pub struct ChoiceCtx<'a> {
    /// Next step of every thread; `None` once a thread finished.
    pub pending: &'a [Option<Step>],
    pub executed: &'a [Step],
}

impl ChoiceCtx<'_> {
    pub fn enabled(&self) -> impl Iterator<Item = usize> + '_ {
        self.pending
            .iter()
            .enumerate()
            .filter_map(|(t, s)| s.map(|_| t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Choice {
    Run(usize),
    Stop(StopReason),
}

pub trait Policy: Send + 'static {
    /// Called with at least one enabled thread.
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice;
}

/// Uniformly random among enabled threads.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick(&mut self, ctx: &ChoiceCtx<'_>, exclude: Option<usize>) -> Option<usize> {
        let enabled: Vec<usize> = ctx.enabled().filter(|&t| Some(t) != exclude).collect();
        if enabled.is_empty() {
            None
        } else {
            Some(enabled[self.rng.gen_range(0..enabled.len())])
        }
    }
}

impl Policy for RandomPolicy {
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice {
        Choice::Run(self.pick(ctx, None).expect("some thread is enabled"))
    }
}

/// Follows a recorded schedule step by step.
pub struct ReplayPolicy {
    steps: Vec<ScheduleStep>,
}

impl ReplayPolicy {
    pub fn new(schedule: &StepperSchedule) -> Self {
        ReplayPolicy {
            steps: schedule.steps.clone(),
        }
    }
}

impl Policy for ReplayPolicy {
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice {
        let depth = ctx.executed.len();
        let Some(want) = self.steps.get(depth) else {
            return Choice::Stop(StopReason::ScheduleExhausted);
        };
        let found = ctx.pending.get(want.thread).copied().flatten();
        match found {
            Some(step) if step.label.name() == want.label => Choice::Run(want.thread),
            _ => Choice::Stop(StopReason::ScheduleMismatch {
                depth,
                expected: format!("t{} {}", want.thread, want.label),
                found: found.map_or_else(|| format!("t{} finished", want.thread), |s| format!("t{} {}", s.thread, s.label)),
            }),
        }
    }
}

/// Random schedule in which `victim` stops for good right after its first
/// successful freeze, before it starts helping its own update.
pub struct CrashPolicy {
    victim: usize,
    crashed: bool,
    random: RandomPolicy,
}

impl CrashPolicy {
    pub fn new(victim: usize, seed: u64) -> Self {
        CrashPolicy {
            victim,
            crashed: false,
            random: RandomPolicy::new(seed),
        }
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }
}

impl Policy for CrashPolicy {
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice {
        if !self.crashed {
            let last = ctx.executed.iter().rev().find(|s| s.thread == self.victim);
            let next = ctx.pending[self.victim];
            self.crashed = last.is_some_and(|s| s.label == StepLabel::Shared(Label::ExecuteFreezeFirst))
                && next.is_some_and(|s| s.label == StepLabel::Shared(Label::HelpReadCounter));
        }
        let exclude = self.crashed.then_some(self.victim);
        match self.random.pick(ctx, exclude) {
            Some(t) => Choice::Run(t),
            None => Choice::Stop(StopReason::Suspended),
        }
    }
}

/// Random schedule for the first `pause_after` steps, then `scanner` alone
/// until it finishes, with every other thread suspended wherever it was.
pub struct SuspendPolicy {
    scanner: usize,
    pause_after: usize,
    random: RandomPolicy,
}

impl SuspendPolicy {
    pub fn new(scanner: usize, pause_after: usize, seed: u64) -> Self {
        SuspendPolicy {
            scanner,
            pause_after,
            random: RandomPolicy::new(seed),
        }
    }
}

impl Policy for SuspendPolicy {
    fn choose(&mut self, ctx: &ChoiceCtx<'_>) -> Choice {
        if ctx.executed.len() < self.pause_after {
            return self.random.choose(ctx);
        }
        if ctx.pending[self.scanner].is_some() {
            Choice::Run(self.scanner)
        } else {
            Choice::Stop(StopReason::Suspended)
        }
    }
}
