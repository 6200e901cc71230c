//! Invariant checks run between steps.
//!
//! After every step the monitor diffs the shared state (update words, child
//! pointers, descriptor states and the phase counter) against the previous
//! configuration and checks that each change is one the algorithm allows, made
//! by the step that claims it. Markers emitted by the running thread are
//! checked against the configuration they are emitted in.

use std::collections::{HashMap, HashSet};

use serde::Serialize;
use versiontree::hook::{Event, InfoId, Label, NodeId};
use versiontree::{
    frozen_with, InfoRef, InfoState, Key, NodeRef, Tree, UpdateTag, UpdateWord, VersionTree,
};

use super::{Step, StepLabel};
use crate::history::{OpCall, Ret};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Index of the step after which the violation was detected.
    pub step: usize,
    pub thread: Option<usize>,
    pub kind: String,
    pub detail: String,
}

/// One operation of a stepped execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpRecord {
    pub thread: usize,
    pub call: OpCall,
    pub ret: Option<Ret>,
    pub invoke_step: usize,
    pub respond_step: Option<usize>,
    /// Phase read by each attempt, in order.
    pub seqs: Vec<u64>,
    /// Shared-memory steps taken, helping included.
    pub steps: usize,
    pub prev_hops: usize,
    pub own_helps: usize,
    pub foreign_helps: usize,
    /// Size of the version tree a range scan traversed, taken at its response.
    pub scan_nodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommittedUpdate {
    pub key: Key,
    pub insert: bool,
    pub seq: u64,
    /// Steps of the first freeze and of the child swing. `None` for updates
    /// that ran before the schedule started.
    pub first_freeze: Option<usize>,
    pub swing: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MonitorStats {
    pub steps: usize,
    pub freezes: usize,
    pub swings: usize,
    pub transitions: usize,
    pub isolation_checks: usize,
    pub trees_checked: usize,
    pub helps: usize,
    pub foreign_helps: usize,
    pub validations: usize,
    pub visits_confirmed: usize,
}

#[derive(Default)]
struct Snapshot {
    counter: u64,
    updates: HashMap<NodeId, UpdateWord>,
    children: HashMap<(NodeId, bool), NodeId>,
    states: HashMap<InfoId, InfoState>,
}

#[derive(Default)]
struct InfoLog {
    /// (node index, step) of each successful freeze.
    freezes: Vec<(usize, usize)>,
    swing: Option<usize>,
    help_result: Option<bool>,
}

struct Search {
    key: Key,
    seq: u64,
    /// Root first.
    trail: Vec<NodeId>,
    /// Configuration at which the last trail node was seen on the search path.
    confirmed: usize,
    /// Search path for `key` in the version-`seq` tree, recorded at every
    /// configuration where it changed.
    paths: Vec<(usize, Vec<NodeId>)>,
    done: bool,
    reread_p: Option<Result<(), String>>,
    reread_gp: Option<Result<(), String>>,
}

struct View<'t> {
    nodes: HashMap<NodeId, NodeRef<'t>>,
    infos: HashMap<InfoId, InfoRef<'t>>,
}

impl<'t> View<'t> {
    fn new(tree: &'t Tree) -> Self {
        View {
            nodes: tree.nodes().into_iter().map(|n| (n.id(), n)).collect(),
            infos: tree.infos().into_iter().map(|i| (i.id(), i)).collect(),
        }
    }

    fn snapshot(&self, tree: &Tree) -> Snapshot {
        let mut s = Snapshot {
            counter: tree.phase(),
            ..Snapshot::default()
        };
        for (&id, n) in &self.nodes {
            s.updates.insert(id, n.update());
            for left in [true, false] {
                if let Some(c) = n.child(left) {
                    s.children.insert((id, left), c.id());
                }
            }
        }
        for (&id, i) in &self.infos {
            s.states.insert(id, i.state());
        }
        s
    }
}

fn search_path(tree: &Tree, key: Key, seq: u64) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut cur = Some(tree.root());
    while let Some(n) = cur {
        out.push(n.id());
        if n.is_leaf() {
            break;
        }
        cur = n.child(key < n.key()).and_then(|c| c.version_at(seq));
    }
    out
}

fn all_trees(tree: &Tree) -> Result<Vec<VersionTree>, String> {
    (0..=tree.phase())
        .map(|i| tree.version_tree(i).map_err(|e| e.to_string()))
        .collect()
}

pub(crate) struct Monitor {
    snap: Snapshot,
    pre_trees: Option<Result<Vec<VersionTree>, String>>,
    seen_updates: HashSet<(NodeId, UpdateWord)>,
    seen_children: HashSet<(NodeId, bool, NodeId)>,
    infos: HashMap<InfoId, InfoLog>,
    searches: Vec<Option<Search>>,
    cur_op: Vec<Option<usize>>,
    ops: Vec<OpRecord>,
    pub(crate) violations: Vec<Violation>,
    stats: MonitorStats,
}

impl Monitor {
    pub fn new(threads: usize) -> Self {
        Monitor {
            snap: Snapshot::default(),
            pre_trees: None,
            seen_updates: HashSet::new(),
            seen_children: HashSet::new(),
            infos: HashMap::new(),
            searches: (0..threads).map(|_| None).collect(),
            cur_op: vec![None; threads],
            ops: Vec::new(),
            violations: Vec::new(),
            stats: MonitorStats::default(),
        }
    }

    pub fn init(&mut self, tree: &Tree) {
        let view = View::new(tree);
        self.snap = view.snapshot(tree);
        self.seen_updates
            .extend(self.snap.updates.iter().map(|(&n, &w)| (n, w)));
        self.seen_children
            .extend(self.snap.children.iter().map(|(&(n, l), &c)| (n, l, c)));
    }

    pub fn report(&mut self, step: usize, thread: Option<usize>, kind: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            step,
            thread,
            kind: kind.into(),
            detail: detail.into(),
        });
    }

    fn op_mut(&mut self, thread: usize) -> Option<&mut OpRecord> {
        self.cur_op[thread].map(|i| &mut self.ops[i])
    }

    pub fn on_op(&mut self, tree: &Tree, thread: usize, call: OpCall, ret: Option<&Ret>, idx: usize) {
        match ret {
            None => {
                self.cur_op[thread] = Some(self.ops.len());
                self.ops.push(OpRecord {
                    thread,
                    call,
                    ret: None,
                    invoke_step: idx,
                    respond_step: None,
                    seqs: Vec::new(),
                    steps: 0,
                    prev_hops: 0,
                    own_helps: 0,
                    foreign_helps: 0,
                    scan_nodes: None,
                });
            }
            Some(r) => {
                let scan_nodes = match (call, self.op_mut(thread).and_then(|o| o.seqs.last().copied())) {
                    (OpCall::Range(..), Some(seq)) => tree.version_tree(seq).ok().map(|t| t.node_count()),
                    _ => None,
                };
                if let Some(op) = self.op_mut(thread) {
                    op.ret = Some(r.clone());
                    op.respond_step = Some(idx);
                    op.scan_nodes = scan_nodes;
                }
                self.cur_op[thread] = None;
            }
        }
    }

    pub fn pre_step(&mut self, tree: &Tree, step: &Step, _idx: usize) {
        self.stats.steps += 1;
        if let StepLabel::Shared(label) = step.label {
            if let Some(op) = self.op_mut(step.thread) {
                op.steps += 1;
            }
            if label == Label::ChildCas {
                self.pre_trees = Some(all_trees(tree));
            }
        }
    }

    /// Checks the configuration reached by step `idx`.
    /// Checks the step that just ran. Returns whether it changed any shared
    /// value.
    pub fn post_step(&mut self, tree: &Tree, step: &Step, idx: usize) -> bool {
        let view = View::new(tree);
        let new = view.snapshot(tree);
        let t = Some(step.thread);
        let changed = new.counter != self.snap.counter
            || new.states != self.snap.states
            || new.updates != self.snap.updates
            || new.children != self.snap.children;

        if new.counter != self.snap.counter
            && !(step.label == StepLabel::Shared(Label::ScanIncrementCounter)
                && new.counter == self.snap.counter + 1)
        {
            self.report(
                idx,
                t,
                "counter",
                format!("phase moved {} -> {} during {}", self.snap.counter, new.counter, step.label),
            );
        }

        let mut infos: Vec<_> = view.infos.values().copied().collect();
        infos.sort_by_key(|i| i.id());
        for info in infos {
            let now = new.states[&info.id()];
            match self.snap.states.get(&info.id()) {
                None if now != InfoState::Bottom && !info.is_dummy() => self.report(
                    idx,
                    t,
                    "state",
                    format!("descriptor {:?} first seen in {now:?}", info.id()),
                ),
                Some(&prev) if prev != now => self.check_transition(step, idx, info, prev, now),
                _ => {}
            }
        }

        let mut nodes: Vec<_> = view.nodes.values().copied().collect();
        nodes.sort_by_key(|n| n.id());
        for node in &nodes {
            let now = new.updates[&node.id()];
            match self.snap.updates.get(&node.id()) {
                None => {
                    self.seen_updates.insert((node.id(), now));
                }
                Some(&prev) if prev != now => self.check_freeze(step, idx, *node, prev, now, &view),
                _ => {}
            }
            for left in [true, false] {
                let Some(&now) = new.children.get(&(node.id(), left)) else {
                    continue;
                };
                match self.snap.children.get(&(node.id(), left)) {
                    None => {
                        self.seen_children.insert((node.id(), left, now));
                    }
                    Some(&prev) if prev != now => {
                        self.check_swing(tree, step, idx, *node, left, prev, now, &view)
                    }
                    _ => {}
                }
            }
        }
        self.pre_trees = None;

        if let StepLabel::Shared(label) = step.label {
            self.after_label(tree, step.thread, label, idx, &view);
        }

        for s in self.searches.iter_mut().flatten() {
            if s.done {
                continue;
            }
            let path = search_path(tree, s.key, s.seq);
            if s.paths.last().map(|(_, p)| p) != Some(&path) {
                s.paths.push((idx + 1, path));
            }
        }
        self.snap = new;
        changed
    }

    fn check_transition(&mut self, step: &Step, idx: usize, info: InfoRef<'_>, prev: InfoState, now: InfoState) {
        let t = Some(step.thread);
        self.stats.transitions += 1;
        if !prev.can_become(now) {
            self.report(idx, t, "state", format!("{:?}: illegal {prev:?} -> {now:?}", info.id()));
        }
        let expected = matches!(
            (step.label.label(), now),
            (Some(Label::HelpTryCas), InfoState::Try)
                | (Some(Label::HelpAbortCas), InfoState::Abort)
                | (Some(Label::HelpCommitWrite), InfoState::Commit)
                | (Some(Label::HelpAbortWrite), InfoState::Abort)
        );
        if !expected || step.raw_cell != info.state_cell().as_usize() || step.info != Some(info.id()) {
            self.report(
                idx,
                t,
                "state",
                format!("{:?} became {now:?} during unrelated step {}", info.id(), step.label),
            );
        }
        let swung = self.infos.get(&info.id()).and_then(|l| l.swing).is_some();
        if now == InfoState::Abort && swung {
            self.report(idx, t, "state", format!("{:?} aborted after its child swing", info.id()));
        }
        if now == InfoState::Commit && !swung {
            self.report(idx, t, "state", format!("{:?} committed without a child swing", info.id()));
        }
    }

    fn check_freeze(
        &mut self,
        step: &Step,
        idx: usize,
        node: NodeRef<'_>,
        prev: UpdateWord,
        now: UpdateWord,
        view: &View<'_>,
    ) {
        let t = Some(step.thread);
        self.stats.freezes += 1;
        let label = step.label.label();
        if !matches!(label, Some(Label::ExecuteFreezeFirst | Label::HelpFreezeCas))
            || step.raw_cell != node.update_cell().as_usize()
        {
            self.report(idx, t, "freeze", format!("{node:?} update changed during {}", step.label));
            return;
        }
        if step.info != Some(now.info_id()) {
            self.report(idx, t, "freeze", format!("{node:?} frozen for {:?}, step acts for {:?}", now.info_id(), step.info));
            return;
        }
        match self.snap.states.get(&prev.info_id()) {
            Some(&st) if !frozen_with(prev.tag(), st) => {}
            st => self.report(
                idx,
                t,
                "freeze",
                format!("{node:?} re-frozen while {prev:?} was still frozen ({st:?})"),
            ),
        }
        if !self.seen_updates.insert((node.id(), now)) {
            self.report(idx, t, "aba", format!("{node:?} update word {now:?} reappeared"));
        }
        let Some(&info) = view.infos.get(&now.info_id()) else {
            self.report(idx, t, "freeze", format!("unknown descriptor {:?}", now.info_id()));
            return;
        };
        let Some(i) = (0..info.len()).find(|&i| info.node(i) == node) else {
            self.report(idx, t, "freeze", format!("{node:?} is not listed by {:?}", info.id()));
            return;
        };
        if prev != info.old_update(i) {
            self.report(idx, t, "freeze", format!("{node:?} changed from {prev:?}, expected {:?}", info.old_update(i)));
        }
        if (now.tag() == UpdateTag::Mark) != info.marks(i) {
            self.report(idx, t, "freeze", format!("{node:?} frozen with the wrong tag {:?}", now.tag()));
        }
        let pre_state = self.snap.states.get(&info.id()).copied();
        let ok_state = if i == 0 {
            pre_state == Some(InfoState::Bottom) && label == Some(Label::ExecuteFreezeFirst)
        } else {
            pre_state == Some(InfoState::Try) && label == Some(Label::HelpFreezeCas)
        };
        if !ok_state {
            self.report(
                idx,
                t,
                "freeze",
                format!("node {i} of {:?} frozen in state {pre_state:?} by {}", info.id(), step.label),
            );
        }
        let log = self.infos.entry(info.id()).or_default();
        let expected = log.freezes.len();
        log.freezes.push((i, idx));
        if i != expected {
            self.report(idx, t, "freeze", format!("{:?} froze node {i} after {expected} freezes", info.id()));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn check_swing(
        &mut self,
        tree: &Tree,
        step: &Step,
        idx: usize,
        parent: NodeRef<'_>,
        left: bool,
        prev: NodeId,
        now: NodeId,
        view: &View<'_>,
    ) {
        let t = Some(step.thread);
        self.stats.swings += 1;
        if step.label != StepLabel::Shared(Label::ChildCas)
            || parent.child_cell(left).map(|c| c.as_usize()) != Some(step.raw_cell)
        {
            self.report(idx, t, "swing", format!("child of {parent:?} changed during {}", step.label));
            return;
        }
        let Some(info) = step.info.and_then(|i| view.infos.get(&i).copied()) else {
            self.report(idx, t, "swing", "child swing without a descriptor");
            return;
        };
        let matches = info.par() == Some(parent)
            && info.old_child().map(|n| n.id()) == Some(prev)
            && info.new_child().map(|n| n.id()) == Some(now);
        if !matches {
            self.report(idx, t, "swing", format!("swing at {parent:?} does not match {:?}", info.id()));
        }
        let log = self.infos.entry(info.id()).or_default();
        if log.swing.replace(idx).is_some() {
            self.report(idx, t, "swing", format!("{:?} swung twice", info.id()));
        }
        if self.snap.states.get(&info.id()) != Some(&InfoState::Try) {
            self.report(idx, t, "swing", format!("{:?} swung outside state Try", info.id()));
        }
        for i in 0..info.len() {
            let n = info.node(i);
            let word = self.snap.updates.get(&n.id());
            let frozen = word.is_some_and(|w| w.info_id() == info.id() && (w.tag() == UpdateTag::Mark) == info.marks(i));
            if !frozen {
                self.report(idx, t, "swing", format!("{:?} swung with node {i} not frozen for it", info.id()));
            }
        }
        if !self.seen_children.insert((parent.id(), left, now)) {
            self.report(idx, t, "aba", format!("child of {parent:?} returned to an earlier node"));
        }
        self.check_trees(tree, idx, t, info);
    }

    fn check_trees(&mut self, tree: &Tree, idx: usize, t: Option<usize>, info: InfoRef<'_>) {
        let pre = match self.pre_trees.take() {
            Some(Ok(pre)) => pre,
            Some(Err(e)) => return self.report(idx, t, "version-tree", e),
            None => return self.report(idx, t, "version-tree", "no trees recorded before the swing"),
        };
        let post = match all_trees(tree) {
            Ok(post) => post,
            Err(e) => return self.report(idx, t, "version-tree", e),
        };
        self.stats.isolation_checks += 1;
        let (removed, added): (HashSet<NodeId>, HashSet<NodeId>) = {
            let new_child = info.new_child().expect("real descriptor");
            if info.len() == 2 {
                let mut added: HashSet<_> = [new_child.id()].into();
                added.extend([new_child.left(), new_child.right()].into_iter().flatten().map(|n| n.id()));
                ([info.node(1).id()].into(), added)
            } else {
                (
                    (1..info.len()).map(|i| info.node(i).id()).collect(),
                    [new_child.id()].into(),
                )
            }
        };
        for (phase, (before, after)) in pre.iter().zip(&post).enumerate() {
            let phase = phase as u64;
            if phase < info.seq() {
                if before != after {
                    self.report(
                        idx,
                        t,
                        "isolation",
                        format!("swing of {:?} (phase {}) changed the tree of phase {phase}", info.id(), info.seq()),
                    );
                }
            } else {
                let b: HashSet<_> = before.ids().into_iter().collect();
                let a: HashSet<_> = after.ids().into_iter().collect();
                let gone: HashSet<_> = b.difference(&a).copied().collect();
                let new: HashSet<_> = a.difference(&b).copied().collect();
                if gone != removed || new != added {
                    self.report(
                        idx,
                        t,
                        "swing-effect",
                        format!(
                            "swing of {:?} in phase {phase}: removed {} nodes and added {}, expected {} and {}",
                            info.id(),
                            gone.len(),
                            new.len(),
                            removed.len(),
                            added.len()
                        ),
                    );
                }
            }
        }
        for tr in &post {
            self.stats.trees_checked += 1;
            if let Err(e) = tr.check_bst() {
                self.report(idx, t, "bst", format!("phase {}: {e}", tr.phase));
            }
        }
    }

    fn after_label(&mut self, tree: &Tree, thread: usize, label: Label, idx: usize, view: &View<'_>) {
        let t = Some(thread);
        match label {
            Label::FindReadCounter
            | Label::InsertReadCounter
            | Label::DeleteReadCounter
            | Label::ScanReadCounter => {
                let seq = tree.phase();
                let Some(op) = self.op_mut(thread) else {
                    return self.report(idx, t, "op", "phase read outside an operation");
                };
                let regressed = op.seqs.last().is_some_and(|&s| s > seq);
                op.seqs.push(seq);
                if regressed {
                    self.report(idx, t, "phase", format!("attempt read phase {seq} after a later one"));
                }
            }
            Label::RereadParentUpdate | Label::RereadGrandparentUpdate => {
                let gp = label == Label::RereadGrandparentUpdate;
                let Some(s) = self.searches[thread].as_mut() else {
                    return self.report(idx, t, "validate", "re-read without a search");
                };
                let n = s.trail.len();
                let (upper, lower) = match (gp, n) {
                    (false, 2..) => (s.trail[n - 2], s.trail[n - 1]),
                    (true, 3..) => (s.trail[n - 3], s.trail[n - 2]),
                    _ => return self.report(idx, t, "validate", "re-read with a short trail"),
                };
                let current = search_path(tree, s.key, u64::MAX);
                let result = match (view.nodes.get(&upper), view.nodes.get(&lower)) {
                    (Some(&u), Some(&l)) if tree.is_frozen(u) => Err(format!("{u:?} frozen at its re-read ({l:?})")),
                    (Some(&u), Some(&l)) if u.child(s.key < u.key()) != Some(l) => {
                        Err(format!("{u:?} no longer points to {l:?} at its re-read"))
                    }
                    (Some(&u), _) if !current.contains(&u.id()) => Err(format!("{u:?} not in the current tree at its re-read")),
                    (Some(_), Some(_)) => Ok(()),
                    _ => Err("trail names unknown nodes".into()),
                };
                if gp {
                    s.reread_gp = Some(result);
                } else {
                    s.reread_p = Some(result);
                }
            }
            _ => {}
        }
    }

    /// `steps` is the number of steps executed so far; the marker is emitted
    /// in the configuration they reach.
    pub fn on_marker(&mut self, tree: &Tree, thread: usize, event: &Event, steps: usize) {
        let t = Some(thread);
        let at = steps.saturating_sub(1);
        match *event {
            Event::SearchBegin { key, seq } => {
                let path = search_path(tree, key, seq);
                self.searches[thread] = Some(Search {
                    key,
                    seq,
                    trail: vec![tree.root().id()],
                    confirmed: steps,
                    paths: vec![(steps, path)],
                    done: false,
                    reread_p: None,
                    reread_gp: None,
                });
            }
            Event::Visit { node } => self.on_visit(tree, thread, node, steps),
            Event::PrevHop { .. } => {
                if let Some(op) = self.op_mut(thread) {
                    op.prev_hops += 1;
                }
            }
            Event::LeafValidated { leaf } => {
                self.stats.validations += 1;
                let Some(s) = self.searches[thread].as_ref() else {
                    return self.report(at, t, "validate", "validation without a search");
                };
                let mut problems = Vec::new();
                if s.trail.last() != Some(&leaf) {
                    problems.push("validated leaf is not the search's leaf".to_string());
                }
                match &s.reread_p {
                    Some(Ok(())) => {}
                    Some(Err(e)) => problems.push(e.clone()),
                    None => problems.push("parent was not re-read".into()),
                }
                if s.trail.len() >= 3 {
                    match &s.reread_gp {
                        Some(Ok(())) => {}
                        Some(Err(e)) => problems.push(e.clone()),
                        None => problems.push("grandparent was not re-read".into()),
                    }
                }
                for p in problems {
                    self.report(at, t, "validate", p);
                }
            }
            Event::Help { origin, info } => {
                self.stats.helps += 1;
                if origin.is_foreign() {
                    self.stats.foreign_helps += 1;
                }
                if let Some(op) = self.op_mut(thread) {
                    if origin.is_foreign() {
                        op.foreign_helps += 1;
                    } else {
                        op.own_helps += 1;
                    }
                }
                let published = self
                    .infos
                    .get(&info)
                    .is_some_and(|l| l.freezes.first().is_some_and(|&(i, _)| i == 0));
                if !published {
                    self.report(at, t, "help", format!("help for {info:?} before its first freeze"));
                }
            }
            Event::HelpDone { info, committed } => {
                let state = tree.infos().into_iter().find(|i| i.id() == info).map(|i| i.state());
                match state {
                    Some(st) if st.is_terminal() => {
                        if committed != (st == InfoState::Commit) {
                            self.report(at, t, "help", format!("help for {info:?} returned {committed} in {st:?}"));
                        }
                    }
                    st => self.report(at, t, "help", format!("help for {info:?} returned in state {st:?}")),
                }
                let log = self.infos.entry(info).or_default();
                let disagree = log.help_result.replace(committed).is_some_and(|r| r != committed);
                if disagree {
                    self.report(at, t, "help", format!("helpers of {info:?} disagree on the outcome"));
                }
            }
            Event::Shared { .. } => {}
        }
    }

    fn on_visit(&mut self, tree: &Tree, thread: usize, node: NodeId, steps: usize) {
        let t = Some(thread);
        let read_at = steps.saturating_sub(1);
        let Some(s) = self.searches[thread].as_mut() else {
            return self.report(read_at, t, "search", "visit without a search");
        };
        let parent = *s.trail.last().expect("trail starts at the root");
        let nodes: HashMap<_, _> = tree.nodes().into_iter().map(|n| (n.id(), n)).collect();
        let expected = nodes
            .get(&parent)
            .and_then(|p| p.child(s.key < p.key()))
            .and_then(|c| c.version_at(s.seq))
            .map(|c| c.id());
        let is_leaf = nodes.get(&node).is_some_and(|n| n.is_leaf());
        s.trail.push(node);
        // Earliest recorded configuration, no earlier than the parent's and no
        // later than the read, at which `node` lies on the search path.
        let from = s.confirmed;
        let mut found = None;
        for (j, (c, path)) in s.paths.iter().enumerate() {
            let end = s.paths.get(j + 1).map_or(usize::MAX, |(n, _)| n - 1);
            if *c > read_at || end < from {
                continue;
            }
            if path.contains(&node) {
                found = Some((*c).max(from));
                break;
            }
        }
        if is_leaf {
            s.done = true;
            s.paths.clear();
        }
        if expected != Some(node) {
            self.report(read_at, t, "search", format!("visited {node:?}, expected {expected:?}"));
        }
        match found {
            Some(c) => {
                self.searches[thread].as_mut().expect("search").confirmed = c;
                self.stats.visits_confirmed += 1;
            }
            None => self.report(
                read_at,
                t,
                "search",
                format!("{node:?} was never on the search path since its parent was"),
            ),
        }
    }

    /// Checks that only make sense once every thread finished.
    pub fn finish(&mut self, tree: &Tree) {
        let end = self.stats.steps;
        match all_trees(tree) {
            Ok(trees) => {
                for tr in trees {
                    self.stats.trees_checked += 1;
                    if let Err(e) = tr.check_bst() {
                        self.report(end, None, "bst", format!("phase {}: {e}", tr.phase));
                    }
                }
            }
            Err(e) => self.report(end, None, "version-tree", e),
        }
        for info in tree.infos() {
            let published = self.infos.get(&info.id()).is_some_and(|l| !l.freezes.is_empty());
            if published && info.state().in_progress() {
                self.report(end, None, "state", format!("{:?} still {:?} at the end", info.id(), info.state()));
            }
        }
        let mut by_key: HashMap<Key, Vec<(usize, usize)>> = HashMap::new();
        for c in self.committed(tree) {
            if let (Some(f), Some(w)) = (c.first_freeze, c.swing) {
                by_key.entry(c.key).or_default().push((f, w));
            }
        }
        let mut overlaps = Vec::new();
        for (key, mut spans) in by_key {
            spans.sort_unstable();
            for w in spans.windows(2) {
                if w[1].0 <= w[0].1 {
                    overlaps.push(format!("two updates of key {key} in flight at once: {:?} and {:?}", w[0], w[1]));
                }
            }
        }
        for o in overlaps {
            self.report(end, None, "imminence", o);
        }
    }

    pub fn committed(&self, tree: &Tree) -> Vec<CommittedUpdate> {
        let mut out: Vec<_> = tree
            .infos()
            .into_iter()
            .filter(|i| !i.is_dummy() && i.state() == InfoState::Commit)
            .filter_map(|i| {
                let log = self.infos.get(&i.id());
                Some(CommittedUpdate {
                    key: i.target_key()?,
                    insert: i.len() == 2,
                    seq: i.seq(),
                    first_freeze: log.and_then(|l| l.freezes.first()).map(|&(_, s)| s),
                    swing: log.and_then(|l| l.swing),
                })
            })
            .collect();
        out.sort_by_key(|c| (c.swing, c.key));
        out
    }

    pub fn into_parts(self) -> (Vec<Violation>, Vec<OpRecord>, MonitorStats) {
        (self.violations, self.ops, self.stats)
    }
}

#[cfg(test)]
mod tests {
    use versiontree::hook::Access;

    use super::*;

    fn kinds(m: &Monitor) -> HashSet<&str> {
        m.violations.iter().map(|v| v.kind.as_str()).collect()
    }

    #[test]
    fn changes_without_a_matching_step_are_reported() {
        let tree = Tree::new();
        let mut m = Monitor::new(1);
        m.init(&tree);
        assert!(tree.insert(5));
        let step = Step {
            thread: 0,
            label: StepLabel::Shared(Label::FindReadCounter),
            access: Access::Read,
            cell: 1,
            raw_cell: tree.counter_cell().as_usize(),
            info: None,
            changed: None,
        };
        m.post_step(&tree, &step, 0);
        let k = kinds(&m);
        for want in ["freeze", "swing", "state"] {
            assert!(k.contains(want), "{want} missing from {k:?}");
        }
    }

    #[test]
    fn quiet_step_is_clean() {
        let tree = Tree::new();
        assert!(tree.insert(5));
        let mut m = Monitor::new(1);
        m.init(&tree);
        let step = Step {
            thread: 0,
            label: StepLabel::Shared(Label::ScanReadUpdate),
            access: Access::Read,
            cell: 1,
            raw_cell: tree.root().update_cell().as_usize(),
            info: None,
            changed: None,
        };
        m.post_step(&tree, &step, 0);
        assert!(m.violations.is_empty(), "{:?}", m.violations);
    }

    #[test]
    fn counter_moves_only_on_increment() {
        let tree = Tree::new();
        let mut m = Monitor::new(1);
        m.init(&tree);
        tree.range_scan(0, 1);
        let step = Step {
            thread: 0,
            label: StepLabel::Shared(Label::ScanReadCounter),
            access: Access::Read,
            cell: 1,
            raw_cell: tree.counter_cell().as_usize(),
            info: None,
            changed: None,
        };
        m.post_step(&tree, &step, 0);
        assert!(kinds(&m).contains("counter"));
    }
}
