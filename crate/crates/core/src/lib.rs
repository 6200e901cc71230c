//! A concurrent ordered set built on a persistent leaf-oriented binary search
//! tree. Insert, delete and lookup are lock-free; range scans are wait-free
//! and return an atomic snapshot of the keys in their range.
//!
//! [`OrderedSet`] is the public facade. [`Tree`] exposes the underlying
//! structure, its version trees and the instrumentation [`hook`] used by the
//! verification harness.
//!
//! ```
//! use versiontree::OrderedSet;
//!
//! let set = OrderedSet::new();
//! set.add(3).unwrap();
//! set.add(7).unwrap();
//! assert_eq!(set.range(0, 5).unwrap(), vec![3]);
//! ```

pub mod hook;
mod model;
mod mutation;
mod scan;
mod set;
mod traversal;
mod tree;

pub use model::{
    frozen_with, is_sentinel, InfoRef, InfoState, Key, NodeRef, UpdateTag, UpdateWord, INF1,
    INF2,
};
pub use scan::{BstViolation, VersionNode, VersionTree, VersionTreeError};
pub use set::{OrderedSet, SetError};
pub use tree::Tree;
