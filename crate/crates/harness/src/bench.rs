//! Throughput and latency measurement without instrumentation hooks.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use versiontree::OrderedSet;

use crate::history::{OpCall, OpName};
use crate::workload::WorkloadConfig;

pub const SCHEMA: &str = "versiontree-bench/1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpStats {
    pub count: u64,
    pub ops_per_sec: f64,
    pub mean_latency_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub threads: usize,
    pub elapsed_secs: f64,
    pub total_ops: u64,
    pub ops_per_sec: f64,
    /// Keyed by operation name.
    pub per_op: BTreeMap<String, OpStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub config: WorkloadConfig,
    pub runs: Vec<BenchRun>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("unknown schema `{0}`")]
    Schema(String),
    #[error("report has no runs")]
    NoRuns,
    #[error("run with {threads} threads: {what}")]
    BadRun { threads: usize, what: &'static str },
}

impl BenchReport {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.schema != SCHEMA {
            return Err(SchemaError::Schema(self.schema.clone()));
        }
        if self.runs.is_empty() {
            return Err(SchemaError::NoRuns);
        }
        for r in &self.runs {
            let bad = |what| SchemaError::BadRun {
                threads: r.threads,
                what,
            };
            if r.threads == 0 {
                return Err(bad("zero threads"));
            }
            if !(r.elapsed_secs.is_finite() && r.elapsed_secs > 0.0) {
                return Err(bad("elapsed time not positive"));
            }
            if !r.ops_per_sec.is_finite() || r.ops_per_sec < 0.0 {
                return Err(bad("throughput not finite"));
            }
            if r.per_op.values().map(|s| s.count).sum::<u64>() != r.total_ops {
                return Err(bad("per-operation counts do not add up"));
            }
            for s in r.per_op.values() {
                if !s.ops_per_sec.is_finite() || !s.mean_latency_ns.is_finite() {
                    return Err(bad("per-operation figures not finite"));
                }
            }
        }
        Ok(())
    }
}

fn op_key(name: OpName) -> &'static str {
    match name {
        OpName::Contains => "contains",
        OpName::Add => "add",
        OpName::Remove => "remove",
        OpName::Range => "range",
    }
}

/// Thread counts 1, 2, 4, ... up to and including `cfg.threads`.
pub fn thread_counts(max: usize) -> Vec<usize> {
    let mut v: Vec<usize> = std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|&n| n < max)
        .collect();
    v.push(max.max(1));
    v
}

pub fn run_once(cfg: &WorkloadConfig) -> BenchRun {
    let set = OrderedSet::new();
    for k in cfg.permanent_keys() {
        set.add(k).expect("permanent keys are real");
    }
    // warm the tree with about half of the key space
    let warm = cfg.keys.len().min(100_000) as i64;
    for k in (cfg.keys.lo..cfg.keys.lo + warm).step_by(2) {
        let _ = set.add(k);
    }
    let scripts: Vec<Vec<OpCall>> = (0..cfg.threads).map(|t| cfg.script(t)).collect();
    let start = Instant::now();
    let per_thread: Vec<[(u64, u128); 4]> = std::thread::scope(|s| {
        let handles: Vec<_> = scripts
            .iter()
            .map(|script| {
                let set = &set;
                s.spawn(move || {
                    let mut acc = [(0u64, 0u128); 4];
                    for &call in script {
                        let t0 = Instant::now();
                        std::hint::black_box(call.apply(set));
                        let slot = &mut acc[call.name() as usize];
                        slot.0 += 1;
                        slot.1 += t0.elapsed().as_nanos();
                    }
                    acc
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker")).collect()
    });
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    let mut per_op = BTreeMap::new();
    let mut total = 0;
    for name in [OpName::Contains, OpName::Add, OpName::Remove, OpName::Range] {
        let (count, nanos) = per_thread
            .iter()
            .map(|a| a[name as usize])
            .fold((0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
        total += count;
        per_op.insert(
            op_key(name).to_string(),
            OpStats {
                count,
                ops_per_sec: count as f64 / elapsed,
                mean_latency_ns: if count == 0 {
                    0.0
                } else {
                    nanos as f64 / count as f64
                },
            },
        );
    }
    BenchRun {
        threads: cfg.threads,
        elapsed_secs: elapsed,
        total_ops: total,
        ops_per_sec: total as f64 / elapsed,
        per_op,
    }
}

pub fn run_bench(cfg: &WorkloadConfig) -> BenchReport {
    let runs = thread_counts(cfg.threads)
        .into_iter()
        .map(|threads| {
            run_once(&WorkloadConfig {
                threads,
                ..cfg.clone()
            })
        })
        .collect();
    BenchReport {
        schema: SCHEMA.into(),
        config: cfg.clone(),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_ladder() {
        assert_eq!(thread_counts(1), vec![1]);
        assert_eq!(thread_counts(4), vec![1, 2, 4]);
        assert_eq!(thread_counts(6), vec![1, 2, 4, 6]);
    }

    #[test]
    fn single_thread_has_throughput_and_valid_schema() {
        let cfg = WorkloadConfig {
            threads: 1,
            ops_per_thread: 2000,
            ..Default::default()
        };
        let report = run_bench(&cfg);
        report.validate().unwrap();
        assert!(report.runs[0].ops_per_sec > 0.0);
        assert_eq!(report.runs[0].total_ops, 2000);
        let json = serde_json::to_string(&report).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert!(json.contains(SCHEMA));
    }

    #[test]
    fn validate_rejects_bad_reports() {
        let cfg = WorkloadConfig {
            threads: 1,
            ops_per_thread: 10,
            ..Default::default()
        };
        let good = run_bench(&cfg);
        let mut r = good.clone();
        r.schema = "other/1".into();
        assert!(matches!(r.validate(), Err(SchemaError::Schema(_))));
        let mut r = good.clone();
        r.runs.clear();
        assert_eq!(r.validate(), Err(SchemaError::NoRuns));
        let mut r = good;
        r.runs[0].total_ops += 1;
        assert!(matches!(r.validate(), Err(SchemaError::BadRun { .. })));
    }
}
