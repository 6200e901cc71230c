//! Insert, delete and the descriptor protocol that carries them out.
//!
//! An update attempt freezes its nodes one by one in list order: the first
//! freeze (always a flag) happens in [`Tree::execute`] and publishes the
//! descriptor, the rest happen in [`Tree::help`], which any thread may run.
//! Before freezing further nodes `help` performs the handshake with range
//! scans: if the phase counter moved since the attempt read it, the attempt
//! aborts itself so no scan of its phase can miss it.

use std::ptr;
use std::sync::atomic::Ordering::SeqCst;

use arrayvec::ArrayVec;

use crate::hook::{Access, Event, HelpOrigin, Label};
use crate::model::{
    is_sentinel, Info, InfoState, Key, Node, UpdateTag, UpdateWord, MAX_FROZEN,
};
use crate::tree::Tree;

/// Everything an update needs to publish a descriptor.
pub(crate) struct ExecutePlan<'t> {
    pub nodes: ArrayVec<&'t Node, MAX_FROZEN>,
    pub old_update: ArrayVec<UpdateWord, MAX_FROZEN>,
    /// Bit `i` marks `nodes[i]` instead of flagging it.
    pub mark: u8,
    pub par: &'t Node,
    pub old_child: &'t Node,
    pub new_child: &'t Node,
    pub seq: u64,
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub(crate) enum PlanError {
    #[error("nodes and old updates differ in length")]
    LengthMismatch,
    #[error("mark names an index outside nodes")]
    MarkOutOfRange,
    #[error("the first node is marked")]
    FirstMarked,
    #[error("parent is not among the frozen nodes")]
    ParentNotFrozen,
    #[error("old child is not marked")]
    OldChildNotMarked,
    #[error("old and new child are the same node")]
    SameChild,
    #[error("new child does not point back to the old child")]
    BrokenPrev,
    #[error("new child of the root must carry a sentinel key")]
    FiniteUnderRoot,
    #[error("a frozen node is newer than the plan's phase")]
    NodeFromLaterPhase,
}

impl ExecutePlan<'_> {
    pub fn check(&self, tree: &Tree) -> Result<(), PlanError> {
        let n = self.nodes.len();
        if n != self.old_update.len() {
            return Err(PlanError::LengthMismatch);
        }
        if self.mark >> n != 0 {
            return Err(PlanError::MarkOutOfRange);
        }
        if self.mark & 1 != 0 {
            return Err(PlanError::FirstMarked);
        }
        if !self.nodes.iter().any(|v| ptr::eq(*v, self.par)) {
            return Err(PlanError::ParentNotFrozen);
        }
        let old_marked = self
            .nodes
            .iter()
            .enumerate()
            .any(|(i, v)| ptr::eq(*v, self.old_child) && self.mark & (1 << i) != 0);
        if !old_marked {
            return Err(PlanError::OldChildNotMarked);
        }
        if ptr::eq(self.old_child, self.new_child) {
            return Err(PlanError::SameChild);
        }
        if !ptr::eq(self.new_child.prev, self.old_child) {
            return Err(PlanError::BrokenPrev);
        }
        if tree.is_root(self.par) && !is_sentinel(self.new_child.key) {
            return Err(PlanError::FiniteUnderRoot);
        }
        if self.nodes.iter().any(|v| v.seq > self.seq) {
            return Err(PlanError::NodeFromLaterPhase);
        }
        Ok(())
    }
}

impl Tree {
    /// Swings the child of `parent` on the side `new` belongs to from `old` to
    /// `new`. A failed compare-and-set is silent.
    pub(crate) fn cas_child(&self, parent: &Node, old: &Node, new: &Node, on_behalf: Option<&Info>) {
        debug_assert!(ptr::eq(new.prev, old));
        let left = new.key < parent.key;
        self.shared(
            Label::ChildCas,
            Access::Cas,
            parent.child_cell_id(left),
            on_behalf,
        );
        let _ = parent.child_cell(left).compare_exchange(
            old as *const Node as *mut Node,
            new as *const Node as *mut Node,
            SeqCst,
            SeqCst,
        );
    }

    /// Publishes a descriptor for `plan` with the first freeze and drives it to
    /// completion. Fails without publishing anything when a witness is frozen
    /// (after helping it if it is still in progress) or the first freeze loses.
    pub(crate) fn execute(&self, plan: ExecutePlan<'_>) -> bool {
        debug_assert_eq!(plan.check(self), Ok(()));
        for &old in &plan.old_update {
            if self.frozen(old) {
                let other = self.info_of(old);
                self.shared(
                    Label::ExecuteReadState,
                    Access::Read,
                    other.state_cell(),
                    Some(other),
                );
                if other.load_state().in_progress() {
                    self.help(other, HelpOrigin::Execute);
                }
                return false;
            }
        }
        let info = self.alloc_info(Info {
            state: (InfoState::Bottom as u8).into(),
            nodes: plan.nodes.iter().map(|v| *v as *const Node).collect(),
            old_update: plan.old_update.clone(),
            mark: plan.mark,
            par: plan.par,
            old_child: plan.old_child,
            new_child: plan.new_child,
            seq: plan.seq,
            next_alloc: ptr::null_mut(),
        });
        let first = plan.nodes[0];
        self.shared(
            Label::ExecuteFreezeFirst,
            Access::Cas,
            first.update_cell(),
            Some(info),
        );
        if first.cas_update(plan.old_update[0], UpdateWord::new(UpdateTag::Flag, info)) {
            self.help(info, HelpOrigin::Own)
        } else {
            false
        }
    }

    /// Finishes or aborts the update described by `info`. Safe to run from any
    /// number of threads at once; returns whether the update committed.
    pub(crate) fn help(&self, info: &Info, origin: HelpOrigin) -> bool {
        debug_assert!(!ptr::eq(info, self.dummy_info()));
        self.emit(|| Event::Help {
            origin,
            info: info.id(),
        });
        let state_cell = info.state_cell();
        // handshake
        if self.read_counter(Label::HelpReadCounter) != info.seq {
            self.shared(Label::HelpAbortCas, Access::Cas, state_cell, Some(info));
            info.cas_state(InfoState::Bottom, InfoState::Abort);
        } else {
            self.shared(Label::HelpTryCas, Access::Cas, state_cell, Some(info));
            info.cas_state(InfoState::Bottom, InfoState::Try);
        }
        self.shared(Label::HelpReadState, Access::Read, state_cell, Some(info));
        let mut proceed = info.load_state() == InfoState::Try;
        let mut i = 1;
        while proceed && i < info.nodes.len() {
            let node = self.node_at(info.nodes[i]);
            let tag = if info.marks(i) {
                UpdateTag::Mark
            } else {
                UpdateTag::Flag
            };
            self.shared(
                Label::HelpFreezeCas,
                Access::Cas,
                node.update_cell(),
                Some(info),
            );
            node.cas_update(info.old_update[i], UpdateWord::new(tag, info));
            self.shared(
                Label::HelpCheckFrozen,
                Access::Read,
                node.update_cell(),
                Some(info),
            );
            proceed = ptr::eq(node.load_update().info_ptr(), info);
            i += 1;
        }
        if proceed {
            self.cas_child(
                self.node_at(info.par),
                self.node_at(info.old_child),
                self.node_at(info.new_child),
                Some(info),
            );
            self.shared(Label::HelpCommitWrite, Access::Write, state_cell, Some(info));
            info.store_state(InfoState::Commit);
        } else {
            self.shared(Label::HelpCheckTry, Access::Read, state_cell, Some(info));
            if info.load_state() == InfoState::Try {
                self.shared(Label::HelpAbortWrite, Access::Write, state_cell, Some(info));
                info.store_state(InfoState::Abort);
            }
        }
        self.shared(Label::HelpReadResult, Access::Read, state_cell, Some(info));
        let committed = info.load_state() == InfoState::Commit;
        self.emit(|| Event::HelpDone {
            info: info.id(),
            committed,
        });
        committed
    }

    /// Adds `k`. Returns false if it was already present.
    pub fn insert(&self, k: Key) -> bool {
        self.debug_key(k);
        loop {
            let seq = self.read_counter(Label::InsertReadCounter);
            let s = self.search(k, seq);
            let Some(witness) = self.validate_leaf(s.gp, s.p, s.l, k) else {
                continue;
            };
            let l = s.l;
            if l.key == k {
                return false;
            }
            let clean = self.clean_word();
            let new = self.alloc_node(Node::leaf(k, seq, ptr::null(), clean));
            let sibling = self.alloc_node(Node::leaf(l.key, seq, ptr::null(), clean));
            let (left, right) = if k < l.key { (new, sibling) } else { (sibling, new) };
            let internal = self.alloc_node(Node::internal(
                k.max(l.key),
                seq,
                l,
                clean,
                left,
                right,
            ));
            self.shared(
                Label::InsertReadLeafUpdate,
                Access::Read,
                l.update_cell(),
                None,
            );
            let lupdate = l.load_update();
            let plan = ExecutePlan {
                nodes: [s.p, l].into_iter().collect(),
                old_update: [witness.pupdate, lupdate].into_iter().collect(),
                mark: 0b10,
                par: s.p,
                old_child: l,
                new_child: internal,
                seq,
            };
            if self.execute(plan) {
                return true;
            }
        }
    }

    /// Removes `k`. Returns false if it was absent.
    pub fn delete(&self, k: Key) -> bool {
        self.debug_key(k);
        loop {
            let seq = self.read_counter(Label::DeleteReadCounter);
            let s = self.search(k, seq);
            let Some(witness) = self.validate_leaf(s.gp, s.p, s.l, k) else {
                continue;
            };
            let (p, l) = (s.p, s.l);
            if l.key != k {
                return false;
            }
            let gp = s.gp.expect("a real key's leaf has a grandparent");
            let sibling_left = l.key >= p.key;
            let sibling = self.read_child(p, sibling_left, seq);
            if self.validate_link(p, sibling, sibling_left).is_none() {
                continue;
            }
            let clean = self.clean_word();
            let (new_node, supdate) = if sibling.is_leaf() {
                let copy = self.alloc_node(Node::leaf(sibling.key, seq, p, clean));
                self.shared(
                    Label::DeleteReadSiblingUpdate,
                    Access::Read,
                    sibling.update_cell(),
                    None,
                );
                (copy, sibling.load_update())
            } else {
                self.shared(
                    Label::DeleteCopySiblingLeft,
                    Access::Read,
                    sibling.child_cell_id(true),
                    None,
                );
                let nephew_l = self.node_at(sibling.child_cell(true).load(SeqCst));
                self.shared(
                    Label::DeleteCopySiblingRight,
                    Access::Read,
                    sibling.child_cell_id(false),
                    None,
                );
                let nephew_r = self.node_at(sibling.child_cell(false).load(SeqCst));
                let copy = self.alloc_node(Node::internal(
                    sibling.key,
                    seq,
                    p,
                    clean,
                    nephew_l,
                    nephew_r,
                ));
                let Some(supdate) = self.validate_link(sibling, nephew_l, true) else {
                    continue;
                };
                if self.validate_link(sibling, nephew_r, false).is_none() {
                    continue;
                }
                (copy, supdate)
            };
            self.shared(
                Label::DeleteReadLeafUpdate,
                Access::Read,
                l.update_cell(),
                None,
            );
            let lupdate = l.load_update();
            let plan = ExecutePlan {
                nodes: [gp, p, l, sibling].into_iter().collect(),
                old_update: [
                    witness.gpupdate.expect("validated below the root"),
                    witness.pupdate,
                    lupdate,
                    supdate,
                ]
                .into_iter()
                .collect(),
                mark: 0b1110,
                par: gp,
                old_child: p,
                new_child: new_node,
                seq,
            };
            if self.execute(plan) {
                return true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};
    use std::sync::Arc;

    use super::*;
    use crate::hook::Event;
    use crate::model::{NodeRef, INF1, INF2};

    fn counting_helps() -> (Arc<AtomicUsize>, Tree) {
        let helps = Arc::new(AtomicUsize::new(0));
        let h = helps.clone();
        let tree = Tree::with_hook(Arc::new(move |e: &Event| {
            if let Event::Help { origin, .. } = e {
                if origin.is_foreign() {
                    h.fetch_add(1, Relaxed);
                }
            }
        }));
        (helps, tree)
    }

    #[test]
    fn cas_child_uncontended_then_repeated() {
        let tree = Tree::new();
        let root = tree.root_node();
        let old = tree.read_child(root, true, 0);
        let x = tree.alloc_node(Node::leaf(INF1, 0, old, tree.clean_word()));
        tree.cas_child(root, old, x, None);
        assert!(ptr::eq(tree.read_child(root, true, 0), x));
        // a second attempt from the same old value fails silently
        let y = tree.alloc_node(Node::leaf(INF1, 0, old, tree.clean_word()));
        tree.cas_child(root, old, y, None);
        assert!(ptr::eq(tree.read_child(root, true, 0), x));
    }

    #[test]
    fn cas_child_targets_right_for_larger_keys() {
        let tree = Tree::new();
        let root = tree.root_node();
        let old = tree.read_child(root, false, 0);
        let x = tree.alloc_node(Node::leaf(INF2, 0, old, tree.clean_word()));
        tree.cas_child(root, old, x, None);
        assert!(ptr::eq(tree.read_child(root, false, 0), x));
        assert_eq!(tree.read_child(root, true, 0).key, INF1);
    }

    #[test]
    fn insert_builds_three_node_subtree() {
        let tree = Tree::new();
        assert!(tree.insert(5));
        let sub = tree.root().left().unwrap();
        assert!(!sub.is_leaf());
        assert_eq!(sub.key(), INF1);
        assert_eq!(sub.left().unwrap().key(), 5);
        assert_eq!(sub.right().unwrap().key(), INF1);
        assert_eq!(sub.prev().unwrap().key(), INF1);
        assert!(sub.prev().unwrap().is_leaf());
    }

    #[test]
    fn insert_duplicate_returns_false() {
        let tree = Tree::new();
        assert!(tree.insert(5));
        assert!(!tree.insert(5));
    }

    #[test]
    fn delete_absent_returns_false() {
        let tree = Tree::new();
        assert!(!tree.delete(5));
    }

    #[test]
    fn delete_replaces_parent_by_sibling_copy() {
        let tree = Tree::new();
        assert!(tree.insert(5));
        let removed = tree.root().left().unwrap();
        assert!(tree.delete(5));
        let now = tree.root().left().unwrap();
        assert!(now.is_leaf());
        assert_eq!(now.key(), INF1);
        assert_eq!(now.prev(), Some(removed));
        // a fresh copy, not the original sibling leaf
        assert_ne!(Some(now), removed.right());
    }

    #[test]
    fn delete_with_internal_sibling_copies_children() {
        let tree = Tree::new();
        for k in [5, 3, 8] {
            assert!(tree.insert(k));
        }
        assert!(tree.delete(3));
        assert!(tree.find(3).is_none());
        assert!(tree.find(5).is_some() && tree.find(8).is_some());
        assert!(tree.delete(8));
        assert!(tree.delete(5));
        let left = tree.root().left().unwrap();
        assert!(left.is_leaf());
        assert_eq!(left.key(), INF1);
    }

    #[test]
    fn committed_descriptor_state() {
        let tree = Tree::new();
        tree.insert(5);
        let committed: Vec<_> = tree.infos().into_iter().filter(|i| !i.is_dummy()).collect();
        assert_eq!(committed.len(), 1);
        assert_eq!(committed[0].state(), InfoState::Commit);
        assert_eq!(committed[0].target_key(), Some(5));
        // the parent is unfrozen (flag, commit); the old leaf stays marked
        assert!(!tree.is_frozen(tree.root()));
        let old_leaf = committed[0].old_child().unwrap();
        assert!(tree.is_frozen(old_leaf));
    }

    fn stale_insert_plan(tree: &Tree) -> ExecutePlan<'_> {
        let seq = tree.phase();
        let s = tree.search(5, seq);
        let w = tree.validate_leaf(s.gp, s.p, s.l, 5).unwrap();
        let clean = tree.clean_word();
        let new = tree.alloc_node(Node::leaf(5, seq, ptr::null(), clean));
        let sib = tree.alloc_node(Node::leaf(s.l.key, seq, ptr::null(), clean));
        let (a, b) = if 5 < s.l.key { (new, sib) } else { (sib, new) };
        let internal = tree.alloc_node(Node::internal(5.max(s.l.key), seq, s.l, clean, a, b));
        ExecutePlan {
            nodes: [s.p, s.l].into_iter().collect(),
            old_update: [w.pupdate, s.l.load_update()].into_iter().collect(),
            mark: 0b10,
            par: s.p,
            old_child: s.l,
            new_child: internal,
            seq,
        }
    }

    #[test]
    fn execute_uncontended_swings_child() {
        let tree = Tree::new();
        let plan = stale_insert_plan(&tree);
        let internal = plan.new_child;
        assert!(tree.execute(plan));
        assert!(ptr::eq(tree.read_child(tree.root_node(), true, 0), internal));
    }

    #[test]
    fn execute_with_stale_witness_publishes_nothing() {
        let tree = Tree::new();
        let plan = stale_insert_plan(&tree);
        // another update changes the root's update word in between
        assert!(tree.insert(9));
        let infos_before = tree.infos().len();
        assert!(!tree.execute(plan));
        // the losing descriptor was allocated but no node references it
        let lost = tree.infos().len() - infos_before;
        assert_eq!(lost, 1);
        let published: Vec<_> = tree.nodes().iter().map(|n| n.update().info_id()).collect();
        let fresh = tree
            .infos()
            .into_iter()
            .filter(|i| !i.is_dummy() && i.state() == InfoState::Bottom)
            .collect::<Vec<_>>();
        assert_eq!(fresh.len(), 1);
        assert!(!published.contains(&fresh[0].id()));
    }

    #[test]
    fn execute_on_marked_committed_node_does_not_help() {
        let (helps, tree) = counting_helps();
        tree.insert(5);
        tree.insert(9);
        let s = tree.search(5, tree.phase());
        let p = s.p;
        assert!(tree.delete(5));
        // p is now marked by a committed delete
        let (tag, info) = NodeRef::new(p).update_info();
        assert_eq!(tag, UpdateTag::Mark);
        assert_eq!(info.state(), InfoState::Commit);
        let before = helps.load(Relaxed);
        let clean = tree.clean_word();
        let child = tree.read_child(p, true, tree.phase());
        let copy = tree.alloc_node(Node::leaf(child.key, tree.phase(), child, clean));
        let plan = ExecutePlan {
            nodes: [p, child].into_iter().collect(),
            old_update: [p.load_update(), child.load_update()].into_iter().collect(),
            mark: 0b10,
            par: p,
            old_child: child,
            new_child: copy,
            seq: tree.phase(),
        };
        assert!(!tree.execute(plan));
        assert_eq!(helps.load(Relaxed), before);
    }

    #[test]
    fn help_commits_in_current_phase() {
        let tree = Tree::new();
        let plan = stale_insert_plan(&tree);
        let internal = plan.new_child;
        // publish by hand so `help` runs as a foreign helper
        let info = tree.alloc_info(Info {
            state: (InfoState::Bottom as u8).into(),
            nodes: plan.nodes.iter().map(|v| *v as *const Node).collect(),
            old_update: plan.old_update.clone(),
            mark: plan.mark,
            par: plan.par,
            old_child: plan.old_child,
            new_child: plan.new_child,
            seq: plan.seq,
            next_alloc: ptr::null_mut(),
        });
        assert!(plan.nodes[0].cas_update(plan.old_update[0], UpdateWord::new(UpdateTag::Flag, info)));
        assert!(tree.help(info, HelpOrigin::Validate));
        assert_eq!(info.load_state(), InfoState::Commit);
        assert!(ptr::eq(tree.read_child(tree.root_node(), true, 0), internal));
        // idempotent
        assert!(tree.help(info, HelpOrigin::Scan));
    }

    #[test]
    fn help_aborts_after_phase_change() {
        let tree = Tree::new();
        let plan = stale_insert_plan(&tree);
        let info = tree.alloc_info(Info {
            state: (InfoState::Bottom as u8).into(),
            nodes: plan.nodes.iter().map(|v| *v as *const Node).collect(),
            old_update: plan.old_update.clone(),
            mark: plan.mark,
            par: plan.par,
            old_child: plan.old_child,
            new_child: plan.new_child,
            seq: plan.seq,
            next_alloc: ptr::null_mut(),
        });
        assert!(plan.nodes[0].cas_update(plan.old_update[0], UpdateWord::new(UpdateTag::Flag, info)));
        tree.range_scan(0, 10);
        assert!(!tree.help(info, HelpOrigin::Own));
        assert_eq!(info.load_state(), InfoState::Abort);
        // nothing stays frozen for the aborted descriptor
        for n in tree.nodes() {
            let (_, i) = n.update_info();
            if i.id() == info.id() {
                assert!(!tree.is_frozen(n));
            }
        }
        assert_eq!(tree.read_child(tree.root_node(), true, 1).key, INF1);
        assert!(tree.read_child(tree.root_node(), true, 1).is_leaf());
    }

    #[test]
    fn plan_check_rejects_broken_plans() {
        let tree = Tree::new();
        let mut plan = stale_insert_plan(&tree);
        assert_eq!(plan.check(&tree), Ok(()));
        plan.mark = 0b01;
        assert_eq!(plan.check(&tree), Err(PlanError::FirstMarked));
        plan.mark = 0b100;
        assert_eq!(plan.check(&tree), Err(PlanError::MarkOutOfRange));
        plan.mark = 0b10;
        plan.new_child = plan.old_child;
        assert_eq!(plan.check(&tree), Err(PlanError::SameChild));
        let stray = tree.alloc_node(Node::leaf(INF1, 0, ptr::null(), tree.clean_word()));
        plan.new_child = stray;
        assert_eq!(plan.check(&tree), Err(PlanError::BrokenPrev));
        let finite = tree.alloc_node(Node::leaf(4, 0, plan.old_child, tree.clean_word()));
        plan.new_child = finite;
        assert_eq!(plan.check(&tree), Err(PlanError::FiniteUnderRoot));
    }
}
