//! Instrumentation points.
//!
//! Every read, write, compare-and-set and fetch-add on a shared cell (update
//! words, child pointers, descriptor states and the phase counter) is preceded
//! by an [`Event::Shared`] notification. Those are the only places where the
//! interleaving of threads can matter, so a deterministic scheduler only needs
//! to block inside [`Hook::on_event`] to serialize an execution.
//!
//! The remaining event kinds are markers. They are emitted while the calling
//! thread is already running and carry information that is useful for
//! assertions (search begin, node visits, helping) but they are never
//! scheduling points.
//!
//! Hooks must not call back into the tree they observe.

use std::fmt;
use std::str::FromStr;

use crate::model::Key;

/// Kind of access performed on a shared cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    Cas,
    FetchAdd,
}

impl Access {
    pub fn is_read(self) -> bool {
        matches!(self, Access::Read)
    }
}

/// Routine a labelled step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Routine {
    Find,
    Insert,
    Delete,
    RangeScan,
    ScanHelper,
    ReadChild,
    ValidateLink,
    ValidateLeaf,
    Frozen,
    Execute,
    Help,
    CasChild,
}

macro_rules! labels {
    ($($variant:ident => ($name:literal, $routine:ident)),+ $(,)?) => {
        /// A scheduling point: one shared-cell access at a fixed place in the
        /// algorithm.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Label {
            $($variant),+
        }

        impl Label {
            pub const ALL: &'static [Label] = &[$(Label::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(Label::$variant => $name),+
                }
            }

            pub fn routine(self) -> Routine {
                match self {
                    $(Label::$variant => Routine::$routine),+
                }
            }
        }
    };
}

labels! {
    FindReadCounter => ("find.read_counter", Find),
    InsertReadCounter => ("insert.read_counter", Insert),
    InsertReadLeafUpdate => ("insert.read_leaf_update", Insert),
    DeleteReadCounter => ("delete.read_counter", Delete),
    DeleteCopySiblingLeft => ("delete.copy_sibling_left", Delete),
    DeleteCopySiblingRight => ("delete.copy_sibling_right", Delete),
    DeleteReadSiblingUpdate => ("delete.read_sibling_update", Delete),
    DeleteReadLeafUpdate => ("delete.read_leaf_update", Delete),
    ScanReadCounter => ("range_scan.read_counter", RangeScan),
    ScanIncrementCounter => ("range_scan.increment_counter", RangeScan),
    ScanReadUpdate => ("scan_helper.read_update", ScanHelper),
    ScanReadState => ("scan_helper.read_state", ScanHelper),
    ReadChildCell => ("read_child.read_cell", ReadChild),
    ValidateReadUpdate => ("validate_link.read_update", ValidateLink),
    ValidateReadChild => ("validate_link.read_child", ValidateLink),
    RereadParentUpdate => ("validate_leaf.reread_parent", ValidateLeaf),
    RereadGrandparentUpdate => ("validate_leaf.reread_grandparent", ValidateLeaf),
    FrozenReadState => ("frozen.read_state", Frozen),
    ExecuteReadState => ("execute.read_state", Execute),
    ExecuteFreezeFirst => ("execute.freeze_first", Execute),
    HelpReadCounter => ("help.read_counter", Help),
    HelpAbortCas => ("help.abort_cas", Help),
    HelpTryCas => ("help.try_cas", Help),
    HelpReadState => ("help.read_state", Help),
    HelpFreezeCas => ("help.freeze_cas", Help),
    HelpCheckFrozen => ("help.check_frozen", Help),
    HelpCommitWrite => ("help.commit_write", Help),
    HelpCheckTry => ("help.check_try", Help),
    HelpAbortWrite => ("help.abort_write", Help),
    HelpReadResult => ("help.read_result", Help),
    ChildCas => ("cas_child.cas", CasChild),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown step label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| UnknownLabel(s.to_owned()))
    }
}

/// Address of a shared cell. Stable for the lifetime of the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub(crate) usize);

/// Identity of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// Identity of a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InfoId(pub(crate) usize);

impl CellId {
    pub fn as_usize(self) -> usize {
        self.0
    }
}

impl NodeId {
    pub fn as_usize(self) -> usize {
        self.0
    }
}

impl InfoId {
    pub fn as_usize(self) -> usize {
        self.0
    }
}

/// Where a call to `help` came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HelpOrigin {
    /// The owner finishing its own freshly installed descriptor.
    Own,
    /// A link validation found the parent frozen.
    Validate,
    /// An update found one of its witnesses frozen by an in-progress descriptor.
    Execute,
    /// A range scan traversed a node with an in-progress descriptor.
    Scan,
}

impl HelpOrigin {
    /// True when the caller is finishing somebody else's update.
    pub fn is_foreign(self) -> bool {
        !matches!(self, HelpOrigin::Own)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    /// About to access a shared cell. `info` names the descriptor on whose
    /// behalf a freeze, child CAS or state transition is attempted.
    Shared {
        label: Label,
        access: Access,
        cell: CellId,
        info: Option<InfoId>,
    },
    /// A search for `key` over the version-`seq` tree starts.
    SearchBegin { key: Key, seq: u64 },
    /// The search descended to `node`.
    Visit { node: NodeId },
    /// `read_child` followed the prev pointer of `from`.
    PrevHop { from: NodeId },
    /// `validate_leaf` succeeded for `leaf`; emitted right after the final re-read.
    LeafValidated { leaf: NodeId },
    /// `help` was entered for `info`.
    Help { origin: HelpOrigin, info: InfoId },
    /// `help` returned.
    HelpDone { info: InfoId, committed: bool },
}

impl Event {
    /// Only shared accesses are scheduling points.
    pub fn is_scheduling_point(&self) -> bool {
        matches!(self, Event::Shared { .. })
    }
}

pub trait Hook: Send + Sync {
    fn on_event(&self, event: &Event);
}

impl<F> Hook for F
where
    F: Fn(&Event) + Send + Sync,
{
    fn on_event(&self, event: &Event) {
        self(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_names_round_trip() {
        for &label in Label::ALL {
            assert_eq!(label.name().parse::<Label>().unwrap(), label);
        }
        assert!("help.nope".parse::<Label>().is_err());
    }

    #[test]
    fn label_names_are_unique() {
        let mut names: Vec<_> = Label::ALL.iter().map(|l| l.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), Label::ALL.len());
    }
}
