//! Version-aware child resolution, branch search, link and leaf validation,
//! and `find`.

use std::ptr;
use std::sync::atomic::Ordering::SeqCst;

use crate::hook::{Access, Event, HelpOrigin, Label};
use crate::model::{Key, Node, NodeRef, UpdateWord};
use crate::tree::Tree;

/// The last three nodes on a search path. `gp` is absent when the leaf is a
/// direct child of the root.
#[derive(Clone, Copy)]
pub(crate) struct SearchResult<'t> {
    pub gp: Option<&'t Node>,
    pub p: &'t Node,
    pub l: &'t Node,
}

/// Witnesses captured by a successful leaf validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LeafWitness {
    pub gpupdate: Option<UpdateWord>,
    pub pupdate: UpdateWord,
}

impl Tree {
    /// Version-`seq` child of `p`: read the child cell once, then walk prev
    /// pointers until a node created no later than phase `seq`.
    pub(crate) fn read_child<'t>(&'t self, p: &'t Node, left: bool, seq: u64) -> &'t Node {
        debug_assert!(p.seq <= seq);
        self.shared(Label::ReadChildCell, Access::Read, p.child_cell_id(left), None);
        let mut l = self.node_at(p.child_cell(left).load(SeqCst));
        while l.seq > seq {
            self.emit(|| Event::PrevHop { from: l.id() });
            l = self.node_at(l.prev);
        }
        l
    }

    pub(crate) fn search(&self, k: Key, seq: u64) -> SearchResult<'_> {
        self.emit(|| Event::SearchBegin { key: k, seq });
        let mut gp = None;
        let mut p = None;
        let mut l = self.root_node();
        while !l.is_leaf() {
            gp = p;
            p = Some(l);
            l = self.read_child(l, k < l.key, seq);
            self.emit(|| Event::Visit { node: l.id() });
        }
        SearchResult {
            gp,
            p: p.expect("root is internal"),
            l,
        }
    }

    /// Checks that `parent` is not frozen and that its child on the given side
    /// is `child`. Helps once and fails if the parent is frozen.
    pub(crate) fn validate_link(&self, parent: &Node, child: &Node, left: bool) -> Option<UpdateWord> {
        self.shared(
            Label::ValidateReadUpdate,
            Access::Read,
            parent.update_cell(),
            None,
        );
        let up = parent.load_update();
        if self.frozen(up) {
            self.help(self.info_of(up), HelpOrigin::Validate);
            return None;
        }
        self.shared(
            Label::ValidateReadChild,
            Access::Read,
            parent.child_cell_id(left),
            None,
        );
        if !ptr::eq(parent.child_cell(left).load(SeqCst), child) {
            return None;
        }
        Some(up)
    }

    /// Validates the `p -> l` link and, below the root, the `gp -> p` link,
    /// then re-reads both update cells. A successful re-read is the point at
    /// which `l` is known to be in the current tree with neither ancestor
    /// frozen.
    pub(crate) fn validate_leaf(
        &self,
        gp: Option<&Node>,
        p: &Node,
        l: &Node,
        k: Key,
    ) -> Option<LeafWitness> {
        let pupdate = self.validate_link(p, l, k < p.key)?;
        let below_root = !self.is_root(p);
        let gpupdate = if below_root {
            let gp = gp.expect("grandparent present below the root");
            Some(self.validate_link(gp, p, k < gp.key)?)
        } else {
            None
        };
        self.shared(
            Label::RereadParentUpdate,
            Access::Read,
            p.update_cell(),
            None,
        );
        if p.load_update() != pupdate {
            return None;
        }
        if below_root {
            let gp = gp.expect("grandparent present below the root");
            self.shared(
                Label::RereadGrandparentUpdate,
                Access::Read,
                gp.update_cell(),
                None,
            );
            if Some(gp.load_update()) != gpupdate {
                return None;
            }
        }
        self.emit(|| Event::LeafValidated { leaf: l.id() });
        Some(LeafWitness { gpupdate, pupdate })
    }

    /// Returns the leaf holding `k`, if any.
    pub fn find(&self, k: Key) -> Option<NodeRef<'_>> {
        self.debug_key(k);
        loop {
            let seq = self.read_counter(Label::FindReadCounter);
            let s = self.search(k, seq);
            if self.validate_leaf(s.gp, s.p, s.l, k).is_some() {
                return (s.l.key == k).then(|| NodeRef::new(s.l));
            }
        }
    }
}
