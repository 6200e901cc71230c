use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use versiontree::Key;
use versiontree_harness::bench::run_bench;
use versiontree_harness::history::History;
use versiontree_harness::lincheck::{check_linearizable_from, CheckConfig, Verdict};
use versiontree_harness::stepper::{
    explore, replay, run_random, Execution, ExploreOptions, Scenario, StepperOptions,
    StepperSchedule,
};
use versiontree_harness::stress::{run_stress, StressOptions};
use versiontree_harness::workload::{KeySpace, Mix, WorkloadConfig};

const PASS: u8 = 0;
const VIOLATION: u8 = 1;
const INCONCLUSIVE: u8 = 2;
const USAGE: u8 = 3;

#[derive(Parser)]
#[command(version, about = "Stress, check, step through and benchmark the versiontree set")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Mode {
    /// Run threads against one set, record the history and check it.
    Stress {
        #[command(flatten)]
        work: WorkArgs,
        /// Also run the linearizability checker on the history.
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 10)]
        watchdog_secs: u64,
    },
    /// Check a recorded history for linearizability.
    Lincheck {
        #[arg(long)]
        history: PathBuf,
        /// Keys present before the history started, comma separated.
        #[arg(long, value_delimiter = ',')]
        initial: Vec<Key>,
        #[arg(long, default_value_t = CheckConfig::default().max_nodes)]
        max_nodes: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run logical threads one shared-memory step at a time.
    Stepper {
        #[command(flatten)]
        work: WorkArgs,
        /// Replay this schedule instead of generating one.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Random schedules to try.
        #[arg(long, default_value_t = 1)]
        schedules: u64,
        /// Enumerate every schedule up to partial-order equivalence.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Measure throughput and latency for 1, 2, 4, ... threads.
    Bench {
        #[command(flatten)]
        work: WorkArgs,
    },
}

#[derive(Args)]
struct WorkArgs {
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Operations per thread.
    #[arg(long, default_value_t = 1000)]
    ops: usize,
    /// Half-open key range LO:HI.
    #[arg(long, default_value = "0:1000")]
    keys: KeySpace,
    /// Percentages of contains, add, remove and range operations.
    #[arg(long, default_value = "40:30:25:5")]
    mix: Mix,
    #[arg(long, default_value_t = 10)]
    range_width: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Give every thread its own slice of the key space.
    #[arg(long)]
    disjoint: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl WorkArgs {
    fn config(&self) -> Result<WorkloadConfig, String> {
        let cfg = WorkloadConfig {
            threads: self.threads,
            ops_per_thread: self.ops,
            keys: self.keys,
            mix: self.mix,
            range_width: self.range_width,
            seed: self.seed,
            disjoint: self.disjoint,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

enum Failure {
    Usage(String),
    Io(PathBuf, std::io::Error),
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Io(p.to_path_buf(), e)),
        None => Ok(()),
    }
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn verdict_code(v: &Verdict) -> u8 {
    match v {
        Verdict::Linearizable { .. } => PASS,
        Verdict::NotLinearizable { .. } => VIOLATION,
        Verdict::Inconclusive { .. } => INCONCLUSIVE,
    }
}

fn stress(work: &WorkArgs, check: bool, watchdog_secs: u64) -> Result<u8, Failure> {
    let cfg = work.config().map_err(Failure::Usage)?;
    let opts = StressOptions {
        watchdog: std::time::Duration::from_secs(watchdog_secs.max(1)),
        ..StressOptions::default()
    };
    let report = run_stress(&cfg, &opts);
    write_out(work.out.as_deref(), &report.history.to_jsonl())?;
    let verdict = if check {
        Some(report.linearizability(CheckConfig::default()).map_err(|e| Failure::Usage(e.to_string()))?)
    } else {
        None
    };
    #[derive(Serialize)]
    struct Summary<'a> {
        passed: bool,
        stats: &'a versiontree_harness::stress::StressStats,
        version_trees_checked: u64,
        version_tree_errors: &'a [String],
        watchdog: &'a Option<versiontree_harness::stress::WatchdogReport>,
        panics: &'a [String],
        verdict: Option<&'a Verdict>,
    }
    print_json(&Summary {
        passed: report.passed(),
        stats: &report.stats,
        version_trees_checked: report.version_trees_checked,
        version_tree_errors: &report.version_tree_errors,
        watchdog: &report.watchdog,
        panics: &report.panics,
        verdict: verdict.as_ref(),
    });
    if !report.passed() {
        return Ok(VIOLATION);
    }
    Ok(verdict.as_ref().map_or(PASS, verdict_code))
}

fn lincheck(history: &Path, initial: &[Key], max_nodes: u64, out: Option<&Path>) -> Result<u8, Failure> {
    let h = History::read_jsonl(history).map_err(|e| Failure::Usage(format!("{}: {e}", history.display())))?;
    let initial: BTreeSet<Key> = initial.iter().copied().collect();
    let v = check_linearizable_from(&h, &initial, CheckConfig { max_nodes })
        .map_err(|e| Failure::Usage(format!("{}: {e}", history.display())))?;
    let text = serde_json::to_string_pretty(&v).expect("serializable");
    write_out(out, &text)?;
    println!("{text}");
    Ok(verdict_code(&v))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: Option<u64>,
    steps: usize,
    completed: bool,
    stop: &'a Option<versiontree_harness::stepper::StopReason>,
    violations: &'a [versiontree_harness::stepper::Violation],
    verdict: &'a Verdict,
    final_hash: String,
}

fn judge(e: &Execution) -> (u8, Verdict) {
    let v = e.linearizability(CheckConfig::default());
    let code = if !e.violations.is_empty() || !e.completed() {
        VIOLATION
    } else {
        verdict_code(&v)
    };
    (code, v)
}

fn summarize(e: &Execution, v: &Verdict) {
    print_json(&RunSummary {
        seed: e.schedule.seed,
        steps: e.schedule.steps.len(),
        completed: e.completed(),
        stop: &e.stop,
        violations: &e.violations,
        verdict: v,
        final_hash: format!("{:016x}", e.final_hash),
    });
}

fn stepper(work: &WorkArgs, schedule: Option<&Path>, schedules: u64, exhaustive: bool) -> Result<u8, Failure> {
    let opts = StepperOptions::default();
    let save = |e: &Execution| {
        write_out(
            work.out.as_deref(),
            &serde_json::to_string_pretty(&e.schedule).expect("serializable"),
        )
    };
    if let Some(path) = schedule {
        let text = fs::read_to_string(path).map_err(|e| Failure::Io(path.to_path_buf(), e))?;
        let sched: StepperSchedule = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let e = replay(&sched, opts);
        let (code, v) = judge(&e);
        summarize(&e, &v);
        save(&e)?;
        return Ok(code);
    }
    let cfg = work.config().map_err(Failure::Usage)?;
    if !(1..=3).contains(&cfg.threads) {
        return Err(Failure::Usage("the stepper runs 1 to 3 threads".into()));
    }
    let scenario = Scenario::new(cfg.permanent_keys(), (0..cfg.threads).map(|t| cfg.script(t)).collect());
    if exhaustive {
        let mut worst: Option<(u8, Execution, Verdict)> = None;
        let report = explore(&scenario, ExploreOptions::default(), |e| {
            if e.stop == Some(versiontree_harness::stepper::StopReason::SleepBlocked) {
                return true;
            }
            let (code, v) = judge(e);
            if code != PASS {
                worst = Some((code, e.clone(), v));
                return false;
            }
            true
        });
        print_json(&report);
        return Ok(match worst {
            Some((code, e, v)) => {
                summarize(&e, &v);
                save(&e)?;
                code
            }
            None if report.exhausted => PASS,
            None => INCONCLUSIVE,
        });
    }
    let mut last = None;
    for i in 0..schedules.max(1) {
        let seed = cfg.seed.wrapping_add(i);
        let e = run_random(&scenario, seed, opts);
        let (code, v) = judge(&e);
        if code != PASS {
            summarize(&e, &v);
            save(&e)?;
            return Ok(code);
        }
        last = Some((e, v));
    }
    let (e, v) = last.expect("at least one schedule ran");
    summarize(&e, &v);
    save(&e)?;
    Ok(PASS)
}

fn bench(work: &WorkArgs) -> Result<u8, Failure> {
    let cfg = work.config().map_err(Failure::Usage)?;
    let report = run_bench(&cfg);
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    write_out(work.out.as_deref(), &text)?;
    println!("{text}");
    Ok(if report.validate().is_ok() { PASS } else { VIOLATION })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { PASS });
        }
    };
    let result = match &cli.mode {
        Mode::Stress {
            work,
            check,
            watchdog_secs,
        } => stress(work, *check, *watchdog_secs),
        Mode::Lincheck {
            history,
            initial,
            max_nodes,
            out,
        } => lincheck(history, initial, *max_nodes, out.as_deref()),
        Mode::Stepper {
            work,
            schedule,
            schedules,
            exhaustive,
        } => stepper(work, schedule.as_deref(), *schedules, *exhaustive),
        Mode::Bench { work } => bench(work),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(USAGE)
        }
    }
}
