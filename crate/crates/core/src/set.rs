//! Ordered-set facade over [`Tree`].

use std::sync::Arc;

use crate::hook::Hook;
use crate::model::{fmt_key, is_sentinel, Key};
use crate::scan::{VersionTree, VersionTreeError};
use crate::tree::Tree;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SetError {
    #[error("key {} is reserved", fmt_key(*.0))]
    SentinelKey(Key),
    #[error(transparent)]
    VersionTree(#[from] VersionTreeError),
}

/// Concurrent ordered set of `i64` keys with linearizable point operations
/// and wait-free range queries.
///
/// The two largest `i64` values are reserved; passing them returns
/// [`SetError::SentinelKey`] without touching the tree.
#[derive(Default)]
pub struct OrderedSet {
    tree: Tree,
}

fn real(k: Key) -> Result<Key, SetError> {
    if is_sentinel(k) {
        Err(SetError::SentinelKey(k))
    } else {
        Ok(k)
    }
}

impl OrderedSet {
    pub fn new() -> Self {
        OrderedSet { tree: Tree::new() }
    }

    pub fn with_hook(hook: Arc<dyn Hook>) -> Self {
        OrderedSet {
            tree: Tree::with_hook(hook),
        }
    }

    pub fn contains(&self, k: Key) -> Result<bool, SetError> {
        Ok(self.tree.find(real(k)?).is_some())
    }

    /// Returns true if `k` was absent.
    pub fn add(&self, k: Key) -> Result<bool, SetError> {
        Ok(self.tree.insert(real(k)?))
    }

    /// Returns true if `k` was present.
    pub fn remove(&self, k: Key) -> Result<bool, SetError> {
        Ok(self.tree.delete(real(k)?))
    }

    /// Keys in `[a, b]` in ascending order. Empty when `a > b`.
    pub fn range(&self, a: Key, b: Key) -> Result<Vec<Key>, SetError> {
        Ok(self.tree.range_scan(real(a)?, real(b)?))
    }

    pub fn phase(&self) -> u64 {
        self.tree.phase()
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    /// Version tree of `phase`. Taking `&mut self` guarantees no operation is
    /// in flight.
    pub fn reconstruct_version_tree(&mut self, phase: u64) -> Result<VersionTree, SetError> {
        Ok(self.tree.version_tree(phase)?)
    }
}
