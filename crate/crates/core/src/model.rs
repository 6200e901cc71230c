//! Nodes, update words and descriptors.

use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU8, AtomicUsize, Ordering::SeqCst};

use arrayvec::ArrayVec;

use crate::hook::{CellId, InfoId, NodeId};

/// Keys are 64-bit integers. The two largest values are reserved for the
/// sentinels, which compare greater than every real key.
pub type Key = i64;

/// First sentinel. Never removed; every real key is smaller.
pub const INF1: Key = i64::MAX - 1;
/// Second sentinel, key of the root.
pub const INF2: Key = i64::MAX;

pub fn is_sentinel(key: Key) -> bool {
    key >= INF1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateTag {
    Flag,
    Mark,
}

const MARK_BIT: usize = 1;

/// A tag and a descriptor reference packed into one word so that the pair can
/// be read and compare-and-set atomically. Equality is identity of the
/// descriptor plus the tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct UpdateWord(usize);

impl UpdateWord {
    pub(crate) fn new(tag: UpdateTag, info: &Info) -> Self {
        let addr = info as *const Info as usize;
        debug_assert_eq!(addr & MARK_BIT, 0);
        match tag {
            UpdateTag::Flag => UpdateWord(addr),
            UpdateTag::Mark => UpdateWord(addr | MARK_BIT),
        }
    }

    pub fn tag(self) -> UpdateTag {
        if self.0 & MARK_BIT == 0 {
            UpdateTag::Flag
        } else {
            UpdateTag::Mark
        }
    }

    pub fn info_id(self) -> InfoId {
        InfoId(self.0 & !MARK_BIT)
    }

    pub(crate) fn info_ptr(self) -> *const Info {
        (self.0 & !MARK_BIT) as *const Info
    }

    fn raw(self) -> usize {
        self.0
    }
}

impl fmt::Debug for UpdateWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}, {:#x})", self.tag(), self.info_id().0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum InfoState {
    Bottom = 0,
    Try = 1,
    Commit = 2,
    Abort = 3,
}

impl InfoState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => InfoState::Bottom,
            1 => InfoState::Try,
            2 => InfoState::Commit,
            3 => InfoState::Abort,
            _ => unreachable!("corrupt descriptor state {v}"),
        }
    }

    /// Bottom or Try: the update may still take effect.
    pub fn in_progress(self) -> bool {
        matches!(self, InfoState::Bottom | InfoState::Try)
    }

    pub fn is_terminal(self) -> bool {
        !self.in_progress()
    }

    /// Whether `self -> next` is one of the four legal transitions.
    pub fn can_become(self, next: InfoState) -> bool {
        use InfoState::*;
        matches!(
            (self, next),
            (Bottom, Try) | (Bottom, Abort) | (Try, Commit) | (Try, Abort)
        )
    }
}

/// Frozen predicate on an update word, given the state read from its
/// descriptor: a flag freezes while the update is in progress, a mark keeps
/// freezing after commit.
pub fn frozen_with(tag: UpdateTag, state: InfoState) -> bool {
    match tag {
        UpdateTag::Flag => state.in_progress(),
        UpdateTag::Mark => !matches!(state, InfoState::Abort),
    }
}

pub(crate) const MAX_FROZEN: usize = 4;

/// Update descriptor. Only `state` changes after construction.
pub(crate) struct Info {
    pub(crate) state: AtomicU8,
    pub(crate) nodes: ArrayVec<*const Node, MAX_FROZEN>,
    pub(crate) old_update: ArrayVec<UpdateWord, MAX_FROZEN>,
    /// Bit `i` set when `nodes[i]` is to be marked rather than flagged.
    pub(crate) mark: u8,
    pub(crate) par: *const Node,
    pub(crate) old_child: *const Node,
    pub(crate) new_child: *const Node,
    pub(crate) seq: u64,
    pub(crate) next_alloc: *mut Info,
}

impl Info {
    pub(crate) fn dummy() -> Self {
        Info {
            state: AtomicU8::new(InfoState::Abort as u8),
            nodes: ArrayVec::new(),
            old_update: ArrayVec::new(),
            mark: 0,
            par: ptr::null(),
            old_child: ptr::null(),
            new_child: ptr::null(),
            seq: 0,
            next_alloc: ptr::null_mut(),
        }
    }

    pub(crate) fn load_state(&self) -> InfoState {
        InfoState::from_u8(self.state.load(SeqCst))
    }

    pub(crate) fn cas_state(&self, from: InfoState, to: InfoState) -> bool {
        self.state
            .compare_exchange(from as u8, to as u8, SeqCst, SeqCst)
            .is_ok()
    }

    pub(crate) fn store_state(&self, to: InfoState) {
        self.state.store(to as u8, SeqCst)
    }

    pub(crate) fn marks(&self, i: usize) -> bool {
        self.mark & (1 << i) != 0
    }

    pub(crate) fn id(&self) -> InfoId {
        InfoId(self as *const Info as usize)
    }

    pub(crate) fn state_cell(&self) -> CellId {
        CellId(&self.state as *const AtomicU8 as usize)
    }
}

pub(crate) enum NodeKind {
    Leaf,
    Internal {
        left: AtomicPtr<Node>,
        right: AtomicPtr<Node>,
    },
}

/// Tree node. `key`, `seq` and `prev` are immutable; `update` and the child
/// cells are the only mutable state.
pub(crate) struct Node {
    pub(crate) key: Key,
    pub(crate) seq: u64,
    pub(crate) prev: *const Node,
    pub(crate) update: AtomicUsize,
    pub(crate) kind: NodeKind,
    pub(crate) next_alloc: *mut Node,
}

impl Node {
    pub(crate) fn leaf(key: Key, seq: u64, prev: *const Node, update: UpdateWord) -> Self {
        Node {
            key,
            seq,
            prev,
            update: AtomicUsize::new(update.raw()),
            kind: NodeKind::Leaf,
            next_alloc: ptr::null_mut(),
        }
    }

    pub(crate) fn internal(
        key: Key,
        seq: u64,
        prev: *const Node,
        update: UpdateWord,
        left: *const Node,
        right: *const Node,
    ) -> Self {
        Node {
            key,
            seq,
            prev,
            update: AtomicUsize::new(update.raw()),
            kind: NodeKind::Internal {
                left: AtomicPtr::new(left as *mut Node),
                right: AtomicPtr::new(right as *mut Node),
            },
            next_alloc: ptr::null_mut(),
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }

    pub(crate) fn id(&self) -> NodeId {
        NodeId(self as *const Node as usize)
    }

    pub(crate) fn load_update(&self) -> UpdateWord {
        UpdateWord(self.update.load(SeqCst))
    }

    pub(crate) fn cas_update(&self, old: UpdateWord, new: UpdateWord) -> bool {
        self.update
            .compare_exchange(old.raw(), new.raw(), SeqCst, SeqCst)
            .is_ok()
    }

    pub(crate) fn update_cell(&self) -> CellId {
        CellId(&self.update as *const AtomicUsize as usize)
    }

    /// Child cell on the given side. Panics on a leaf.
    pub(crate) fn child_cell(&self, left: bool) -> &AtomicPtr<Node> {
        match &self.kind {
            NodeKind::Internal { left: l, right: r } => {
                if left {
                    l
                } else {
                    r
                }
            }
            NodeKind::Leaf => panic!("leaf has no children"),
        }
    }

    pub(crate) fn child_cell_id(&self, left: bool) -> CellId {
        CellId(self.child_cell(left) as *const AtomicPtr<Node> as usize)
    }
}

/// Read-only view of a node, for inspection and tests. Loads through a view
/// are not instrumented.
#[derive(Clone, Copy)]
pub struct NodeRef<'t> {
    pub(crate) node: &'t Node,
}

impl<'t> NodeRef<'t> {
    pub(crate) fn new(node: &'t Node) -> Self {
        NodeRef { node }
    }

    pub fn id(self) -> NodeId {
        self.node.id()
    }

    pub fn key(self) -> Key {
        self.node.key
    }

    pub fn seq(self) -> u64 {
        self.node.seq
    }

    pub fn is_leaf(self) -> bool {
        self.node.is_leaf()
    }

    pub fn prev(self) -> Option<NodeRef<'t>> {
        // SAFETY: nodes are never freed while the tree is borrowed.
        unsafe { self.node.prev.as_ref() }.map(NodeRef::new)
    }

    pub fn update(self) -> UpdateWord {
        self.node.load_update()
    }

    /// Descriptor currently referenced by the update cell, with the tag that
    /// was read alongside it.
    pub fn update_info(self) -> (UpdateTag, InfoRef<'t>) {
        let word = self.node.load_update();
        // SAFETY: update words always reference a live descriptor.
        let info = unsafe { &*word.info_ptr() };
        (word.tag(), InfoRef::new(info))
    }

    pub fn child(self, left: bool) -> Option<NodeRef<'t>> {
        match self.node.kind {
            NodeKind::Leaf => None,
            NodeKind::Internal { .. } => {
                let p = self.node.child_cell(left).load(SeqCst);
                // SAFETY: child cells are never null and nodes are never freed.
                Some(NodeRef::new(unsafe { &*p }))
            }
        }
    }

    pub fn left(self) -> Option<NodeRef<'t>> {
        self.child(true)
    }

    pub fn right(self) -> Option<NodeRef<'t>> {
        self.child(false)
    }

    pub fn update_cell(self) -> CellId {
        self.node.update_cell()
    }

    pub fn child_cell(self, left: bool) -> Option<CellId> {
        (!self.is_leaf()).then(|| self.node.child_cell_id(left))
    }

    /// Follows prev pointers from `self` until a node with `seq <= phase`.
    pub fn version_at(self, phase: u64) -> Option<NodeRef<'t>> {
        let mut cur = Some(self);
        while let Some(n) = cur {
            if n.seq() <= phase {
                return Some(n);
            }
            cur = n.prev();
        }
        None
    }
}

impl PartialEq for NodeRef<'_> {
    fn eq(&self, other: &Self) -> bool {
        ptr::eq(self.node, other.node)
    }
}

impl Eq for NodeRef<'_> {}

impl fmt::Debug for NodeRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.is_leaf() { "Leaf" } else { "Internal" };
        write!(
            f,
            "{kind}(key={}, seq={}, id={:#x})",
            fmt_key(self.key()),
            self.seq(),
            self.id().0
        )
    }
}

pub(crate) fn fmt_key(k: Key) -> String {
    match k {
        INF1 => "inf1".into(),
        INF2 => "inf2".into(),
        k => k.to_string(),
    }
}

/// Read-only view of a descriptor.
#[derive(Clone, Copy)]
pub struct InfoRef<'t> {
    pub(crate) info: &'t Info,
}

impl<'t> InfoRef<'t> {
    pub(crate) fn new(info: &'t Info) -> Self {
        InfoRef { info }
    }

    pub fn id(self) -> InfoId {
        self.info.id()
    }

    pub fn state(self) -> InfoState {
        self.info.load_state()
    }

    pub fn state_cell(self) -> CellId {
        self.info.state_cell()
    }

    pub fn is_dummy(self) -> bool {
        self.info.nodes.is_empty()
    }

    pub fn seq(self) -> u64 {
        self.info.seq
    }

    pub fn len(self) -> usize {
        self.info.nodes.len()
    }

    pub fn is_empty(self) -> bool {
        self.info.nodes.is_empty()
    }

    pub fn node(self, i: usize) -> NodeRef<'t> {
        // SAFETY: descriptor node lists reference live nodes.
        NodeRef::new(unsafe { &*self.info.nodes[i] })
    }

    pub fn nodes(self) -> impl Iterator<Item = NodeRef<'t>> + 't {
        let info = self.info;
        (0..info.nodes.len()).map(move |i| InfoRef::new(info).node(i))
    }

    pub fn old_update(self, i: usize) -> UpdateWord {
        self.info.old_update[i]
    }

    /// Whether `nodes[i]` is frozen with a mark rather than a flag.
    pub fn marks(self, i: usize) -> bool {
        self.info.marks(i)
    }

    pub fn par(self) -> Option<NodeRef<'t>> {
        // SAFETY: as above; null only for the dummy.
        unsafe { self.info.par.as_ref() }.map(NodeRef::new)
    }

    pub fn old_child(self) -> Option<NodeRef<'t>> {
        unsafe { self.info.old_child.as_ref() }.map(NodeRef::new)
    }

    pub fn new_child(self) -> Option<NodeRef<'t>> {
        unsafe { self.info.new_child.as_ref() }.map(NodeRef::new)
    }

    /// Key the update inserts or removes. `None` for the dummy.
    pub fn target_key(self) -> Option<Key> {
        match self.len() {
            // insert: [p, l]; the new leaf is the child of newChild that is not a copy of l
            2 => {
                let old = self.old_child()?.key();
                let new = self.new_child()?;
                let (l, r) = (new.left()?, new.right()?);
                Some(if l.key() == old { r.key() } else { l.key() })
            }
            // delete: [gp, p, l, sibling]
            4 => Some(self.node(2).key()),
            _ => None,
        }
    }
}

impl PartialEq for InfoRef<'_> {
    fn eq(&self, other: &Self) -> bool {
        ptr::eq(self.info, other.info)
    }
}

impl Eq for InfoRef<'_> {}

impl fmt::Debug for InfoRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Info")
            .field("id", &format_args!("{:#x}", self.id().0))
            .field("state", &self.state())
            .field("seq", &self.seq())
            .field("nodes", &self.len())
            .finish()
    }
}
