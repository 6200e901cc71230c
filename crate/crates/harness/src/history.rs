//! Operation histories and their JSON Lines encoding.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use serde::{Deserialize, Serialize};
use versiontree::{Key, OrderedSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Invoke,
    Respond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpName {
    Contains = 0,
    Add = 1,
    Remove = 2,
    Range = 3,
}

/// An operation on the set together with its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpCall {
    Contains(Key),
    Add(Key),
    Remove(Key),
    Range(Key, Key),
}

/// A response: a boolean for point operations, sorted keys for ranges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ret {
    Bool(bool),
    Keys(Vec<Key>),
}

impl OpCall {
    pub fn name(self) -> OpName {
        match self {
            OpCall::Contains(_) => OpName::Contains,
            OpCall::Add(_) => OpName::Add,
            OpCall::Remove(_) => OpName::Remove,
            OpCall::Range(..) => OpName::Range,
        }
    }

    pub fn args(self) -> Vec<Key> {
        match self {
            OpCall::Contains(k) | OpCall::Add(k) | OpCall::Remove(k) => vec![k],
            OpCall::Range(a, b) => vec![a, b],
        }
    }

    pub fn from_parts(op: OpName, args: &[Key]) -> Option<Self> {
        Some(match (op, args) {
            (OpName::Contains, &[k]) => OpCall::Contains(k),
            (OpName::Add, &[k]) => OpCall::Add(k),
            (OpName::Remove, &[k]) => OpCall::Remove(k),
            (OpName::Range, &[a, b]) => OpCall::Range(a, b),
            _ => return None,
        })
    }

    pub fn is_update(self) -> bool {
        matches!(self, OpCall::Add(_) | OpCall::Remove(_))
    }

    /// Runs the operation. Keys must be real keys.
    pub fn apply(self, set: &OrderedSet) -> Ret {
        let r = match self {
            OpCall::Contains(k) => set.contains(k).map(Ret::Bool),
            OpCall::Add(k) => set.add(k).map(Ret::Bool),
            OpCall::Remove(k) => set.remove(k).map(Ret::Bool),
            OpCall::Range(a, b) => set.range(a, b).map(Ret::Keys),
        };
        r.expect("workload keys are never reserved")
    }

    fn ret_fits(self, ret: &Ret) -> bool {
        match (self, ret) {
            (OpCall::Range(..), Ret::Keys(keys)) => keys.windows(2).all(|w| w[0] < w[1]),
            (OpCall::Range(..), Ret::Bool(_)) => false,
            (_, r) => matches!(r, Ret::Bool(_)),
        }
    }
}

/// One line of a history file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub kind: EventKind,
    pub thread: usize,
    pub op: OpName,
    pub args: Vec<Key>,
    /// Present on responses only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Ret>,
    /// Position in the recorder's global order.
    pub index: u64,
}

impl HistoryEvent {
    pub fn invoke(thread: usize, call: OpCall, index: u64) -> Self {
        HistoryEvent {
            kind: EventKind::Invoke,
            thread,
            op: call.name(),
            args: call.args(),
            result: None,
            index,
        }
    }

    pub fn respond(thread: usize, call: OpCall, ret: Ret, index: u64) -> Self {
        HistoryEvent {
            kind: EventKind::Respond,
            thread,
            op: call.name(),
            args: call.args(),
            result: Some(ret),
            index,
        }
    }

    pub fn call(&self) -> Option<OpCall> {
        OpCall::from_parts(self.op, &self.args)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("event {index}: indices must strictly increase")]
    Order { index: u64 },
    #[error("event {index}: thread {thread} invoked while an operation was pending")]
    NestedInvoke { index: u64, thread: usize },
    #[error("event {index}: thread {thread} responded without a pending invocation")]
    StrayResponse { index: u64, thread: usize },
    #[error("event {index}: response does not match the pending invocation")]
    Mismatch { index: u64 },
    #[error("event {index}: malformed arguments or result")]
    Malformed { index: u64 },
}

/// A completed or pending operation extracted from a history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operation {
    pub thread: usize,
    pub call: OpCall,
    pub invoke: u64,
    pub respond: Option<(u64, Ret)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new(mut events: Vec<HistoryEvent>) -> Self {
        events.sort_by_key(|e| e.index);
        History { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HistoryError> {
        let events = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| HistoryError::Parse { line: i + 1, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(History { events })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), HistoryError> {
        Ok(fs::write(path, self.to_jsonl())?)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, HistoryError> {
        History::from_jsonl(&fs::read_to_string(path)?)
    }

    /// Pairs invocations with responses, checking well-formedness on the way.
    pub fn operations(&self) -> Result<Vec<Operation>, HistoryError> {
        let mut ops: Vec<Operation> = Vec::new();
        let mut open: Vec<Option<usize>> = Vec::new();
        let mut last = None;
        for e in &self.events {
            if last.is_some_and(|l| e.index <= l) {
                return Err(HistoryError::Order { index: e.index });
            }
            last = Some(e.index);
            let call = e.call().ok_or(HistoryError::Malformed { index: e.index })?;
            if open.len() <= e.thread {
                open.resize(e.thread + 1, None);
            }
            match e.kind {
                EventKind::Invoke => {
                    if open[e.thread].is_some() {
                        return Err(HistoryError::NestedInvoke {
                            index: e.index,
                            thread: e.thread,
                        });
                    }
                    if e.result.is_some() {
                        return Err(HistoryError::Malformed { index: e.index });
                    }
                    open[e.thread] = Some(ops.len());
                    ops.push(Operation {
                        thread: e.thread,
                        call,
                        invoke: e.index,
                        respond: None,
                    });
                }
                EventKind::Respond => {
                    let i = open[e.thread].take().ok_or(HistoryError::StrayResponse {
                        index: e.index,
                        thread: e.thread,
                    })?;
                    if ops[i].call != call {
                        return Err(HistoryError::Mismatch { index: e.index });
                    }
                    let ret = e.result.clone().ok_or(HistoryError::Malformed { index: e.index })?;
                    if !call.ret_fits(&ret) {
                        return Err(HistoryError::Malformed { index: e.index });
                    }
                    ops[i].respond = Some((e.index, ret));
                }
            }
        }
        Ok(ops)
    }

    pub fn check_well_formed(&self) -> Result<(), HistoryError> {
        self.operations().map(|_| ())
    }

    /// The first `n` events.
    pub fn prefix(&self, n: usize) -> History {
        History {
            events: self.events[..n].to_vec(),
        }
    }
}

/// Hands out global event indices. Threads take an index immediately before
/// invoking and immediately after the operation returns, so recorder order
/// is consistent with real time.
#[derive(Debug, Default)]
pub struct Recorder {
    next: AtomicU64,
}

/// Events of one thread, merged into a [`History`] afterwards.
#[derive(Debug, Default)]
pub struct ThreadLog {
    pub thread: usize,
    pub events: Vec<HistoryEvent>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn run(&self, log: &mut ThreadLog, set: &OrderedSet, call: OpCall) -> Ret {
        let i = self.next.fetch_add(1, SeqCst);
        log.events.push(HistoryEvent::invoke(log.thread, call, i));
        let ret = call.apply(set);
        let j = self.next.fetch_add(1, SeqCst);
        log.events.push(HistoryEvent::respond(log.thread, call, ret.clone(), j));
        ret
    }

    pub fn merge(logs: impl IntoIterator<Item = ThreadLog>) -> History {
        History::new(logs.into_iter().flat_map(|l| l.events).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> History {
        History::new(vec![
            HistoryEvent::invoke(0, OpCall::Add(1), 0),
            HistoryEvent::invoke(1, OpCall::Range(0, 5), 1),
            HistoryEvent::respond(0, OpCall::Add(1), Ret::Bool(true), 2),
            HistoryEvent::respond(1, OpCall::Range(0, 5), Ret::Keys(vec![1]), 3),
            HistoryEvent::invoke(1, OpCall::Remove(-3), 4),
        ])
    }

    #[test]
    fn jsonl_shape() {
        let text = sample().to_jsonl();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"kind":"invoke","thread":0,"op":"add","args":[1],"index":0}"#
        );
        assert_eq!(
            lines[3],
            r#"{"kind":"respond","thread":1,"op":"range","args":[0,5],"result":[1],"index":3}"#
        );
        assert_eq!(
            lines[2],
            r#"{"kind":"respond","thread":0,"op":"add","args":[1],"result":true,"index":2}"#
        );
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let h = sample();
        let text = h.to_jsonl();
        let back = History::from_jsonl(&text).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn operations_pair_events() {
        let ops = sample().operations().unwrap();
        assert_eq!(ops.len(), 3);
        assert_eq!(ops[0].respond, Some((2, Ret::Bool(true))));
        assert_eq!(ops[1].respond, Some((3, Ret::Keys(vec![1]))));
        assert_eq!(ops[2].respond, None);
    }

    #[test]
    fn ill_formed_histories() {
        let nested = History::new(vec![
            HistoryEvent::invoke(0, OpCall::Add(1), 0),
            HistoryEvent::invoke(0, OpCall::Add(2), 1),
        ]);
        assert!(matches!(nested.check_well_formed(), Err(HistoryError::NestedInvoke { .. })));
        let stray = History::new(vec![HistoryEvent::respond(0, OpCall::Add(1), Ret::Bool(true), 0)]);
        assert!(matches!(stray.check_well_formed(), Err(HistoryError::StrayResponse { .. })));
        let mismatch = History::new(vec![
            HistoryEvent::invoke(0, OpCall::Add(1), 0),
            HistoryEvent::respond(0, OpCall::Add(2), Ret::Bool(true), 1),
        ]);
        assert!(matches!(mismatch.check_well_formed(), Err(HistoryError::Mismatch { .. })));
        let wrong_ret = History::new(vec![
            HistoryEvent::invoke(0, OpCall::Range(0, 1), 0),
            HistoryEvent::respond(0, OpCall::Range(0, 1), Ret::Bool(true), 1),
        ]);
        assert!(matches!(wrong_ret.check_well_formed(), Err(HistoryError::Malformed { .. })));
        let dup = History {
            events: vec![
                HistoryEvent::invoke(0, OpCall::Add(1), 3),
                HistoryEvent::invoke(1, OpCall::Add(1), 3),
            ],
        };
        assert!(matches!(dup.check_well_formed(), Err(HistoryError::Order { .. })));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = History::from_jsonl("\n{\"kind\":\"invoke\"}\n").unwrap_err();
        assert!(matches!(err, HistoryError::Parse { line: 2, .. }));
    }

    #[test]
    fn recorder_orders_by_real_time() {
        let set = OrderedSet::new();
        let rec = Recorder::new();
        let mut a = ThreadLog { thread: 0, events: vec![] };
        let mut b = ThreadLog { thread: 1, events: vec![] };
        rec.run(&mut a, &set, OpCall::Add(3));
        rec.run(&mut b, &set, OpCall::Contains(3));
        let h = Recorder::merge([b, a]);
        let idx: Vec<_> = h.events.iter().map(|e| (e.thread, e.index)).collect();
        assert_eq!(idx, vec![(0, 0), (0, 1), (1, 2), (1, 3)]);
        assert_eq!(h.events[3].result, Some(Ret::Bool(true)));
    }
}
