//! Linearizability checking against a sequential sorted set.
//!
//! Depth-first search over linearization orders in the style of Wing and
//! Gong, with Lowe's memoization of (linearized operations, set state)
//! pairs. An operation may be linearized next if it was invoked before every
//! not-yet-linearized completed operation responded. Pending updates may be
//! linearized with any result or left out; pending lookups and range queries
//! are always left out since they have no visible effect.

use std::collections::{BTreeSet, HashSet};

use fixedbitset::FixedBitSet;
use serde::Serialize;
use versiontree::Key;

use crate::history::{History, HistoryError, HistoryEvent, OpCall, Operation, Ret};

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Search nodes to expand before giving up.
    pub max_nodes: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            max_nodes: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// `order` lists indices into [`History::operations`].
    Linearizable { order: Vec<usize> },
    /// The shortest prefix of the history that already has no linearization.
    NotLinearizable { prefix: Vec<HistoryEvent> },
    Inconclusive { explored: u64 },
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable { .. })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Linearizable { .. } => 0,
            Verdict::NotLinearizable { .. } => 1,
            Verdict::Inconclusive { .. } => 2,
        }
    }
}

/// Sequential specification.
pub fn oracle(state: &BTreeSet<Key>, call: OpCall) -> (Ret, Option<BTreeSet<Key>>) {
    match call {
        OpCall::Contains(k) => (Ret::Bool(state.contains(&k)), None),
        OpCall::Add(k) => {
            if state.contains(&k) {
                (Ret::Bool(false), None)
            } else {
                let mut s = state.clone();
                s.insert(k);
                (Ret::Bool(true), Some(s))
            }
        }
        OpCall::Remove(k) => {
            if state.contains(&k) {
                let mut s = state.clone();
                s.remove(&k);
                (Ret::Bool(true), Some(s))
            } else {
                (Ret::Bool(false), None)
            }
        }
        OpCall::Range(a, b) => {
            let keys = if a <= b {
                state.range(a..=b).copied().collect()
            } else {
                vec![]
            };
            (Ret::Keys(keys), None)
        }
    }
}

enum Search {
    Found(Vec<usize>),
    Exhausted,
    OutOfBudget(u64),
}

struct Frame {
    lin: FixedBitSet,
    state: BTreeSet<Key>,
    cands: Vec<usize>,
    next: usize,
}

fn candidates(ops: &[Operation], lin: &FixedBitSet) -> Option<Vec<usize>> {
    let horizon = ops
        .iter()
        .enumerate()
        .filter(|(i, _)| !lin.contains(*i))
        .filter_map(|(_, op)| op.respond.as_ref().map(|r| r.0))
        .min()?;
    Some(
        ops.iter()
            .enumerate()
            .filter(|(i, op)| {
                !lin.contains(*i)
                    && op.invoke < horizon
                    && (op.respond.is_some() || op.call.is_update())
            })
            .map(|(i, _)| i)
            .collect(),
    )
}

fn search(ops: &[Operation], initial: &BTreeSet<Key>, cfg: CheckConfig) -> Search {
    let n = ops.len();
    let mut seen: HashSet<(FixedBitSet, BTreeSet<Key>)> = HashSet::new();
    let mut order = Vec::new();
    let root_lin = FixedBitSet::with_capacity(n);
    let Some(cands) = candidates(ops, &root_lin) else {
        return Search::Found(vec![]);
    };
    let mut stack = vec![Frame {
        lin: root_lin,
        state: initial.clone(),
        cands,
        next: 0,
    }];
    let mut explored = 0u64;
    while let Some(top) = stack.last_mut() {
        let Some(&i) = top.cands.get(top.next) else {
            stack.pop();
            order.pop();
            continue;
        };
        top.next += 1;
        let op = &ops[i];
        let (ret, next_state) = oracle(&top.state, op.call);
        if op.respond.as_ref().is_some_and(|(_, r)| *r != ret) {
            continue;
        }
        let state = next_state.unwrap_or_else(|| top.state.clone());
        let mut lin = top.lin.clone();
        lin.insert(i);
        if !seen.insert((lin.clone(), state.clone())) {
            continue;
        }
        explored += 1;
        if explored > cfg.max_nodes {
            return Search::OutOfBudget(explored);
        }
        order.push(i);
        match candidates(ops, &lin) {
            None => return Search::Found(order),
            Some(cands) => stack.push(Frame {
                lin,
                state,
                cands,
                next: 0,
            }),
        }
    }
    Search::Exhausted
}

/// Checks already-paired operations. On failure the result carries an empty
/// prefix; use [`check_linearizable`] to get the minimal one.
pub fn check_operations(ops: &[Operation], initial: &BTreeSet<Key>, cfg: CheckConfig) -> Verdict {
    match search(ops, initial, cfg) {
        Search::Found(order) => Verdict::Linearizable { order },
        Search::Exhausted => Verdict::NotLinearizable { prefix: vec![] },
        Search::OutOfBudget(explored) => Verdict::Inconclusive { explored },
    }
}

pub fn check_linearizable(h: &History, cfg: CheckConfig) -> Result<Verdict, HistoryError> {
    check_linearizable_from(h, &BTreeSet::new(), cfg)
}

/// Like [`check_linearizable`], for a set that held `initial` before the
/// history started.
pub fn check_linearizable_from(
    h: &History,
    initial: &BTreeSet<Key>,
    cfg: CheckConfig,
) -> Result<Verdict, HistoryError> {
    let ops = h.operations()?;
    Ok(match search(&ops, initial, cfg) {
        Search::Found(order) => Verdict::Linearizable { order },
        Search::OutOfBudget(explored) => Verdict::Inconclusive { explored },
        Search::Exhausted => {
            // prefixes of a linearizable history are linearizable, so the
            // shortest violating prefix can be found by bisection
            let (mut lo, mut hi) = (0, h.len());
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let p = h.prefix(mid).operations()?;
                if matches!(search(&p, initial, cfg), Search::Exhausted) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Verdict::NotLinearizable {
                prefix: h.prefix(hi).events,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::HistoryEvent as E;
    use OpCall::*;

    fn inv(t: usize, c: OpCall, i: u64) -> E {
        E::invoke(t, c, i)
    }

    fn res(t: usize, c: OpCall, r: Ret, i: u64) -> E {
        E::respond(t, c, r, i)
    }

    fn b(v: bool) -> Ret {
        Ret::Bool(v)
    }

    fn check(events: Vec<E>) -> Verdict {
        check_linearizable(&History::new(events), CheckConfig::default()).unwrap()
    }

    #[test]
    fn initial_keys_are_visible() {
        let h = History::new(vec![
            inv(1, Contains(3), 0),
            res(1, Contains(3), b(true), 1),
            inv(1, Add(3), 2),
            res(1, Add(3), b(false), 3),
        ]);
        let cfg = CheckConfig::default();
        assert!(!check_linearizable(&h, cfg).unwrap().is_linearizable());
        let initial = BTreeSet::from([3]);
        assert!(check_linearizable_from(&h, &initial, cfg).unwrap().is_linearizable());
    }

    #[test]
    fn sequential_add_then_contains() {
        let v = check(vec![
            inv(1, Add(1), 0),
            res(1, Add(1), b(true), 1),
            inv(2, Contains(1), 2),
            res(2, Contains(1), b(true), 3),
        ]);
        assert_eq!(v, Verdict::Linearizable { order: vec![0, 1] });
    }

    #[test]
    fn response_before_any_add_is_rejected() {
        let events = vec![
            inv(2, Contains(1), 0),
            res(2, Contains(1), b(true), 1),
            inv(1, Add(1), 2),
            res(1, Add(1), b(true), 3),
        ];
        match check(events.clone()) {
            Verdict::NotLinearizable { prefix } => assert_eq!(prefix, events[..2].to_vec()),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn overlapping_operations_may_reorder() {
        // contains overlaps add, so it may go either side
        let v = check(vec![
            inv(1, Add(1), 0),
            inv(2, Contains(1), 1),
            res(2, Contains(1), b(false), 2),
            res(1, Add(1), b(true), 3),
            inv(2, Contains(1), 4),
            res(2, Contains(1), b(true), 5),
        ]);
        assert!(v.is_linearizable());
        let v = check(vec![
            inv(1, Add(1), 0),
            inv(2, Contains(1), 1),
            res(1, Add(1), b(true), 2),
            res(2, Contains(1), b(true), 3),
        ]);
        assert!(v.is_linearizable());
    }

    #[test]
    fn stale_read_after_completed_add_is_rejected() {
        let v = check(vec![
            inv(1, Add(1), 0),
            res(1, Add(1), b(true), 1),
            inv(2, Contains(1), 2),
            res(2, Contains(1), b(false), 3),
        ]);
        assert!(matches!(v, Verdict::NotLinearizable { .. }));
    }

    #[test]
    fn pending_update_may_take_effect_or_not() {
        let took = check(vec![
            inv(1, Add(7), 0),
            inv(2, Contains(7), 1),
            res(2, Contains(7), b(true), 2),
        ]);
        assert!(took.is_linearizable());
        let dropped = check(vec![
            inv(1, Add(7), 0),
            inv(2, Contains(7), 1),
            res(2, Contains(7), b(false), 2),
        ]);
        assert_eq!(dropped, Verdict::Linearizable { order: vec![1] });
    }

    #[test]
    fn pending_scan_is_dropped() {
        let v = check(vec![inv(1, Range(0, 9), 0), inv(2, Add(3), 1), res(2, Add(3), b(true), 2)]);
        assert_eq!(v, Verdict::Linearizable { order: vec![1] });
    }

    #[test]
    fn scans_are_snapshots() {
        // add(1) then add(2) in sequence; a scan that overlaps both may see
        // {}, {1} or {1,2} but never {2}
        let base = |seen: Vec<Key>| {
            vec![
                inv(3, Range(0, 9), 0),
                inv(1, Add(1), 1),
                res(1, Add(1), b(true), 2),
                inv(2, Add(2), 3),
                res(2, Add(2), b(true), 4),
                res(3, Range(0, 9), Ret::Keys(seen), 5),
            ]
        };
        for ok in [vec![], vec![1], vec![1, 2]] {
            assert!(check(base(ok)).is_linearizable());
        }
        assert!(!check(base(vec![2])).is_linearizable());
    }

    #[test]
    fn same_phase_scans_any_tie_order() {
        // two concurrent scans straddling an add see different results
        let v = check(vec![
            inv(1, Range(0, 5), 0),
            inv(2, Range(0, 5), 1),
            inv(3, Add(4), 2),
            res(1, Range(0, 5), Ret::Keys(vec![4]), 3),
            res(2, Range(0, 5), Ret::Keys(vec![]), 4),
            res(3, Add(4), b(true), 5),
        ]);
        assert!(v.is_linearizable());
    }

    #[test]
    fn minimal_prefix_is_shortest() {
        let events = vec![
            inv(1, Add(1), 0),
            res(1, Add(1), b(true), 1),
            inv(1, Remove(1), 2),
            res(1, Remove(1), b(false), 3),
            inv(2, Contains(5), 4),
            res(2, Contains(5), b(false), 5),
        ];
        match check(events.clone()) {
            Verdict::NotLinearizable { prefix } => assert_eq!(prefix, events[..4].to_vec()),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn budget_exhaustion_is_inconclusive() {
        let mut events = vec![];
        for t in 0..8 {
            events.push(inv(t, Add(t as Key), t as u64));
        }
        for t in 0..8 {
            events.push(res(t, Add(t as Key), b(true), 8 + t as u64));
        }
        events.push(inv(9, Contains(100), 16));
        events.push(res(9, Contains(100), b(true), 17));
        let h = History::new(events);
        let v = check_linearizable(&h, CheckConfig { max_nodes: 50 }).unwrap();
        assert!(matches!(v, Verdict::Inconclusive { .. }));
        assert_eq!(v.exit_code(), 2);
    }

    #[test]
    fn empty_history() {
        assert_eq!(check(vec![]), Verdict::Linearizable { order: vec![] });
    }
}
