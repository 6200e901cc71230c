//! Range scans and version-tree reconstruction.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use crate::hook::{Access, HelpOrigin, Label, NodeId};
use crate::model::{fmt_key, is_sentinel, Key, Node, NodeRef, INF1, INF2};
use crate::tree::Tree;

enum Frame<'t> {
    Visit(&'t Node),
    /// Resolve the version-`seq` child on one side, then visit it.
    ReadThen(&'t Node, bool),
}

impl Tree {
    /// Keys in `[a, b]`, sorted, as of the end of the phase this scan opens.
    pub fn range_scan(&self, a: Key, b: Key) -> Vec<Key> {
        let seq = self.read_counter(Label::ScanReadCounter);
        self.increment_counter();
        self.scan_helper(self.root_node(), seq, a, b)
    }

    pub(crate) fn scan_helper(&self, node: &Node, seq: u64, a: Key, b: Key) -> Vec<Key> {
        let mut out = Vec::new();
        let mut stack = vec![Frame::Visit(node)];
        while let Some(frame) = stack.pop() {
            let node = match frame {
                Frame::Visit(n) => n,
                Frame::ReadThen(p, left) => self.read_child(p, left, seq),
            };
            if node.is_leaf() {
                if a <= node.key && node.key <= b {
                    out.push(node.key);
                }
                continue;
            }
            self.shared(Label::ScanReadUpdate, Access::Read, node.update_cell(), None);
            let info = self.info_of(node.load_update());
            self.shared(Label::ScanReadState, Access::Read, info.state_cell(), Some(info));
            if info.load_state().in_progress() {
                self.help(info, HelpOrigin::Scan);
            }
            if a > node.key {
                stack.push(Frame::ReadThen(node, false));
            } else if b < node.key {
                stack.push(Frame::ReadThen(node, true));
            } else {
                stack.push(Frame::ReadThen(node, false));
                stack.push(Frame::ReadThen(node, true));
            }
        }
        out
    }

    /// The tree reachable from the root through version-`phase` children.
    ///
    /// Loads are not instrumented. The result is only meaningful while no
    /// operation is running, or while every running thread is paused.
    pub fn version_tree(&self, phase: u64) -> Result<VersionTree, VersionTreeError> {
        let current = self.phase();
        if phase > current {
            return Err(VersionTreeError::PhaseAhead { phase, current });
        }
        VersionTree::build(self.root(), phase, self.nodes().len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VersionTreeError {
    #[error("phase {phase} has not started (counter is {current})")]
    PhaseAhead { phase: u64, current: u64 },
    #[error("child pointers revisit node {0:?}")]
    Cycle(NodeId),
    #[error("no version of a child exists at phase {phase} below node {parent:?}")]
    MissingVersion { parent: NodeId, phase: u64 },
}

/// Snapshot of one node of a version tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VersionNode {
    pub id: NodeId,
    pub key: Key,
    pub seq: u64,
    /// Indices into [`VersionTree::nodes`]; `None` for leaves.
    pub children: Option<(usize, usize)>,
}

/// Materialized version tree. Node 0 is the root; nodes are stored in
/// preorder, left before right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionTree {
    pub phase: u64,
    pub nodes: Vec<VersionNode>,
}

/// Ways a version tree can fail to be a leaf-oriented BST.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BstViolation {
    #[error("root has key {} instead of inf2", fmt_key(*.0))]
    BadRoot(Key),
    #[error("sentinel leaves missing")]
    MissingSentinels,
    #[error("key {} appears in more than one leaf", fmt_key(*.0))]
    DuplicateLeaf(Key),
    #[error("leaf {} lies outside the routing interval [{}, {})", fmt_key(*.key), fmt_key(*.lo), fmt_key(*.hi))]
    Routing { key: Key, lo: Key, hi: Key },
    #[error("internal node {} is outside its routing interval", fmt_key(*.0))]
    InternalRouting(Key),
}

impl VersionTree {
    fn build(root: NodeRef<'_>, phase: u64, limit: usize) -> Result<Self, VersionTreeError> {
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        // (node, parent index, is left child)
        let mut stack = vec![(root, None::<(usize, bool)>)];
        while let Some((n, parent)) = stack.pop() {
            if !seen.insert(n.id()) || nodes.len() > limit {
                return Err(VersionTreeError::Cycle(n.id()));
            }
            let idx = nodes.len();
            nodes.push(VersionNode {
                id: n.id(),
                key: n.key(),
                seq: n.seq(),
                children: None,
            });
            if let Some((p, left)) = parent {
                let (l, r) = nodes[p].children.as_mut().expect("parent is internal");
                if left {
                    *l = idx;
                } else {
                    *r = idx;
                }
            }
            if !n.is_leaf() {
                let missing = VersionTreeError::MissingVersion {
                    parent: n.id(),
                    phase,
                };
                let l = n.left().and_then(|c| c.version_at(phase)).ok_or(missing.clone())?;
                let r = n.right().and_then(|c| c.version_at(phase)).ok_or(missing)?;
                nodes[idx].children = Some((usize::MAX, usize::MAX));
                stack.push((r, Some((idx, false))));
                stack.push((l, Some((idx, true))));
            }
        }
        Ok(VersionTree { phase, nodes })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> &VersionNode {
        &self.nodes[0]
    }

    /// Real keys stored in leaves, in order.
    pub fn keys(&self) -> Vec<Key> {
        let mut keys: Vec<Key> = self
            .nodes
            .iter()
            .filter(|n| n.children.is_none() && !is_sentinel(n.key))
            .map(|n| n.key)
            .collect();
        keys.sort_unstable();
        keys
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    /// Hash of shape, keys and sequence numbers. Independent of node
    /// addresses, so equal across replays of the same schedule.
    pub fn structure_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            (n.key, n.seq, n.children).hash(&mut h);
        }
        h.finish()
    }

    /// Leaf-oriented BST check: every leaf in the left subtree of a node with
    /// key `k` is smaller than `k`, every leaf in the right subtree is at
    /// least `k`, and the sentinel leaves are present.
    pub fn check_bst(&self) -> Result<(), BstViolation> {
        let root = self.root();
        if root.key != INF2 || root.children.is_none() {
            return Err(BstViolation::BadRoot(root.key));
        }
        let mut leaves = HashSet::new();
        // (index, lo inclusive, hi exclusive; None = unbounded)
        let mut stack = vec![(0usize, Key::MIN, None::<Key>)];
        while let Some((i, lo, hi)) = stack.pop() {
            let n = &self.nodes[i];
            let inside = n.key >= lo && hi.is_none_or(|h| n.key < h);
            match n.children {
                None => {
                    if !inside {
                        return Err(BstViolation::Routing {
                            key: n.key,
                            lo,
                            hi: hi.unwrap_or(INF2),
                        });
                    }
                    if !leaves.insert(n.key) {
                        return Err(BstViolation::DuplicateLeaf(n.key));
                    }
                }
                Some((l, r)) => {
                    if !inside {
                        return Err(BstViolation::InternalRouting(n.key));
                    }
                    stack.push((r, n.key, hi));
                    stack.push((l, lo, Some(n.key)));
                }
            }
        }
        if !leaves.contains(&INF1) || !leaves.contains(&INF2) {
            return Err(BstViolation::MissingSentinels);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn fresh_tree_scan_is_empty() {
        let tree = Tree::new();
        assert!(tree.range_scan(0, 100).is_empty());
        assert!(tree.range_scan(Key::MIN, INF1 - 1).is_empty());
        assert_eq!(tree.phase(), 2);
    }

    #[test]
    fn scan_after_inserts() {
        let tree = Tree::new();
        for k in [1, 3, 5, 7] {
            assert!(tree.insert(k));
        }
        assert_eq!(tree.range_scan(2, 6), vec![3, 5]);
        assert_eq!(tree.range_scan(6, 2), Vec::<Key>::new());
        assert_eq!(tree.range_scan(1, 7), vec![1, 3, 5, 7]);
        assert_eq!(tree.range_scan(7, 7), vec![7]);
    }

    #[test]
    fn scan_helper_on_leaves() {
        let tree = Tree::new();
        let leaf = tree.alloc_node(Node::leaf(5, 0, std::ptr::null(), tree.clean_word()));
        assert_eq!(tree.scan_helper(leaf, 0, 2, 6), vec![5]);
        assert!(tree.scan_helper(leaf, 0, 6, 9).is_empty());
    }

    #[test]
    fn scan_sees_only_its_phase() {
        let tree = Tree::new();
        tree.insert(5);
        // opens phase 1 while scanning phase 0
        assert_eq!(tree.range_scan(0, 10), vec![5]);
        tree.insert(9);
        assert!(tree.delete(5));
        assert_eq!(tree.scan_helper(tree.root_node(), 0, 0, 10), vec![5]);
        assert_eq!(tree.scan_helper(tree.root_node(), 1, 0, 10), vec![9]);
    }

    #[test]
    fn reconstruct_fresh_tree() {
        let tree = Tree::new();
        let t = tree.version_tree(0).unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.root().key, INF2);
        assert!(t.keys().is_empty());
        t.check_bst().unwrap();
    }

    #[test]
    fn reconstruct_keeps_older_phases() {
        let tree = Tree::new();
        tree.insert(5);
        tree.range_scan(0, 0);
        tree.insert(9);
        let t0 = tree.version_tree(0).unwrap();
        let t1 = tree.version_tree(1).unwrap();
        assert_eq!(t0.keys(), vec![5]);
        assert_eq!(t1.keys(), vec![5, 9]);
        t0.check_bst().unwrap();
        t1.check_bst().unwrap();
        assert_eq!(
            tree.version_tree(2),
            Err(VersionTreeError::PhaseAhead { phase: 2, current: 1 })
        );
    }

    #[test]
    fn structure_hash_ignores_addresses() {
        let build = || {
            let t = Tree::new();
            for k in [4, 2, 6] {
                t.insert(k);
            }
            t.version_tree(0).unwrap()
        };
        let (a, b) = (build(), build());
        assert_ne!(a.ids(), b.ids());
        assert_eq!(a.structure_hash(), b.structure_hash());
    }

    #[test]
    fn check_bst_rejects_misrouted_leaf() {
        let t = Tree::new();
        t.insert(5);
        let mut vt = t.version_tree(0).unwrap();
        let leaf = vt.nodes.iter().position(|n| n.key == 5).unwrap();
        vt.nodes[leaf].key = INF1;
        assert!(matches!(
            vt.check_bst(),
            Err(BstViolation::DuplicateLeaf(_) | BstViolation::Routing { .. })
        ));
        vt.nodes[leaf].key = -3;
        vt.check_bst().unwrap();
        let root = &mut vt.nodes[0];
        root.key = 100;
        assert_eq!(vt.check_bst(), Err(BstViolation::BadRoot(100)));
    }

    #[test]
    fn scan_matches_oracle_under_churn() {
        let tree = Tree::new();
        let mut oracle = BTreeSet::new();
        for i in 0..400i64 {
            let k = (i * 37) % 61;
            if i % 3 == 0 {
                assert_eq!(tree.delete(k), oracle.remove(&k));
            } else {
                assert_eq!(tree.insert(k), oracle.insert(k));
            }
            if i % 20 == 0 {
                let (a, b) = (k - 10, k + 10);
                let want: Vec<_> = oracle.range(a..=b).copied().collect();
                assert_eq!(tree.range_scan(a, b), want);
            }
        }
        for phase in 0..=tree.phase() {
            tree.version_tree(phase).unwrap().check_bst().unwrap();
        }
    }
}
