//! The shared tree: root, dummy descriptor, phase counter and the allocation
//! arena that keeps every node and descriptor alive until the tree is dropped.

use std::cell::Cell;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use crate::hook::{Access, CellId, Event, Hook, Label};
use crate::model::{
    frozen_with, Info, InfoRef, Key, Node, NodeRef, UpdateTag, UpdateWord, INF1, INF2,
};

const SHARDS: usize = 16;

thread_local! {
    static SHARD: Cell<Option<usize>> = const { Cell::new(None) };
}

fn shard_index() -> usize {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    SHARD.with(|s| match s.get() {
        Some(i) => i,
        None => {
            let i = NEXT.fetch_add(1, SeqCst) % SHARDS;
            s.set(Some(i));
            i
        }
    })
}

trait Linked {
    fn set_next(&mut self, next: *mut Self);
    fn next(&self) -> *mut Self;
}

impl Linked for Node {
    fn set_next(&mut self, next: *mut Self) {
        self.next_alloc = next;
    }
    fn next(&self) -> *mut Self {
        self.next_alloc
    }
}

impl Linked for Info {
    fn set_next(&mut self, next: *mut Self) {
        self.next_alloc = next;
    }
    fn next(&self) -> *mut Self {
        self.next_alloc
    }
}

/// Push-only intrusive lists, sharded by thread so allocation does not
/// serialize updaters.
struct Arena<T> {
    heads: [CachePadded<AtomicPtr<T>>; SHARDS],
}

impl<T: Linked> Arena<T> {
    fn new() -> Self {
        Arena {
            heads: std::array::from_fn(|_| CachePadded::new(AtomicPtr::new(ptr::null_mut()))),
        }
    }

    fn alloc(&self, value: T) -> *mut T {
        let raw = Box::into_raw(Box::new(value));
        let head = &self.heads[shard_index()];
        let mut cur = head.load(SeqCst);
        loop {
            // SAFETY: `raw` is not yet visible to any other thread.
            unsafe { (*raw).set_next(cur) };
            match head.compare_exchange_weak(cur, raw, SeqCst, SeqCst) {
                Ok(_) => return raw,
                Err(actual) => cur = actual,
            }
        }
    }

    fn for_each(&self, mut f: impl FnMut(*mut T)) {
        for head in &self.heads {
            let mut cur = head.load(SeqCst);
            while !cur.is_null() {
                // SAFETY: list entries stay allocated until `free_all`.
                let next = unsafe { (*cur).next() };
                f(cur);
                cur = next;
            }
        }
    }

    /// # Safety
    /// No reference into the arena may outlive this call.
    unsafe fn free_all(&mut self) {
        self.for_each(|p| drop(Box::from_raw(p)));
        for head in &self.heads {
            head.store(ptr::null_mut(), SeqCst);
        }
    }
}

/// Persistent leaf-oriented BST with versioned child resolution.
///
/// Nodes and descriptors are never reclaimed while the tree is alive: old
/// versions stay reachable through prev pointers and any of them may still be
/// read by a scan of an older phase.
pub struct Tree {
    root: *const Node,
    dummy: *const Info,
    counter: AtomicU64,
    hook: Option<Arc<dyn Hook>>,
    nodes: Arena<Node>,
    infos: Arena<Info>,
}

// SAFETY: all shared mutable state is in atomics; everything else is immutable
// after publication and lives as long as the tree.
unsafe impl Send for Tree {}
unsafe impl Sync for Tree {}

impl Default for Tree {
    fn default() -> Self {
        Tree::new()
    }
}

impl Tree {
    pub fn new() -> Self {
        Self::build(None)
    }

    pub fn with_hook(hook: Arc<dyn Hook>) -> Self {
        Self::build(Some(hook))
    }

    fn build(hook: Option<Arc<dyn Hook>>) -> Self {
        let nodes = Arena::new();
        let infos = Arena::new();
        let dummy = infos.alloc(Info::dummy()) as *const Info;
        // SAFETY: just allocated.
        let clean = UpdateWord::new(UpdateTag::Flag, unsafe { &*dummy });
        let left = nodes.alloc(Node::leaf(INF1, 0, ptr::null(), clean));
        let right = nodes.alloc(Node::leaf(INF2, 0, ptr::null(), clean));
        let root = nodes.alloc(Node::internal(INF2, 0, ptr::null(), clean, left, right));
        Tree {
            root,
            dummy,
            counter: AtomicU64::new(0),
            hook,
            nodes,
            infos,
        }
    }

    pub fn has_hook(&self) -> bool {
        self.hook.is_some()
    }

    /// Current phase, read without instrumentation.
    pub fn phase(&self) -> u64 {
        self.counter.load(SeqCst)
    }

    pub fn root(&self) -> NodeRef<'_> {
        NodeRef::new(self.root_node())
    }

    pub fn dummy(&self) -> InfoRef<'_> {
        // SAFETY: the dummy lives as long as the tree.
        InfoRef::new(unsafe { &*self.dummy })
    }

    pub fn counter_cell(&self) -> CellId {
        CellId(&self.counter as *const AtomicU64 as usize)
    }

    /// Every node ever allocated, published or not.
    pub fn nodes(&self) -> Vec<NodeRef<'_>> {
        let mut out = Vec::new();
        // SAFETY: arena entries outlive `&self`.
        self.nodes
            .for_each(|p| out.push(NodeRef::new(unsafe { &*(p as *const Node) })));
        out
    }

    /// Every descriptor ever allocated, including the dummy.
    pub fn infos(&self) -> Vec<InfoRef<'_>> {
        let mut out = Vec::new();
        self.infos
            .for_each(|p| out.push(InfoRef::new(unsafe { &*(p as *const Info) })));
        out
    }

    pub(crate) fn root_node(&self) -> &Node {
        // SAFETY: the root is never freed while the tree lives.
        unsafe { &*self.root }
    }

    pub(crate) fn dummy_info(&self) -> &Info {
        unsafe { &*self.dummy }
    }

    pub(crate) fn is_root(&self, node: &Node) -> bool {
        ptr::eq(node, self.root)
    }

    pub(crate) fn clean_word(&self) -> UpdateWord {
        UpdateWord::new(UpdateTag::Flag, self.dummy_info())
    }

    pub(crate) fn alloc_node(&self, node: Node) -> &Node {
        // SAFETY: arena allocations live as long as the tree.
        unsafe { &*self.nodes.alloc(node) }
    }

    pub(crate) fn alloc_info(&self, info: Info) -> &Info {
        unsafe { &*self.infos.alloc(info) }
    }

    /// Dereferences a pointer read from a child cell, prev field or descriptor.
    pub(crate) fn node_at(&self, p: *const Node) -> &Node {
        debug_assert!(!p.is_null());
        // SAFETY: every non-null node pointer stored in the tree refers to an
        // arena allocation, freed only when the tree is dropped.
        unsafe { &*p }
    }

    pub(crate) fn info_of(&self, word: UpdateWord) -> &Info {
        // SAFETY: update words always reference arena descriptors.
        unsafe { &*word.info_ptr() }
    }

    #[inline]
    pub(crate) fn emit(&self, event: impl FnOnce() -> Event) {
        #[cfg(feature = "instrument")]
        if let Some(hook) = &self.hook {
            hook.on_event(&event());
        }
        #[cfg(not(feature = "instrument"))]
        let _ = event;
    }

    #[inline]
    pub(crate) fn shared(&self, label: Label, access: Access, cell: CellId, info: Option<&Info>) {
        self.emit(|| Event::Shared {
            label,
            access,
            cell,
            info: info.map(Info::id),
        })
    }

    pub(crate) fn read_counter(&self, label: Label) -> u64 {
        self.shared(label, Access::Read, self.counter_cell(), None);
        self.counter.load(SeqCst)
    }

    pub(crate) fn increment_counter(&self) {
        self.shared(
            Label::ScanIncrementCounter,
            Access::FetchAdd,
            self.counter_cell(),
            None,
        );
        self.counter.fetch_add(1, SeqCst);
    }

    /// Frozen predicate. Reads the descriptor state exactly once.
    pub(crate) fn frozen(&self, word: UpdateWord) -> bool {
        let info = self.info_of(word);
        self.shared(
            Label::FrozenReadState,
            Access::Read,
            info.state_cell(),
            Some(info),
        );
        frozen_with(word.tag(), info.load_state())
    }

    /// Public form of the frozen predicate on a node's current update word.
    pub fn is_frozen(&self, node: NodeRef<'_>) -> bool {
        let (tag, info) = node.update_info();
        frozen_with(tag, info.state())
    }

    pub(crate) fn debug_key(&self, k: Key) {
        debug_assert!(!crate::model::is_sentinel(k), "sentinel key reached the tree");
    }
}

impl Drop for Tree {
    fn drop(&mut self) {
        // SAFETY: `&mut self` proves no operation or view is outstanding.
        unsafe {
            self.nodes.free_all();
            self.infos.free_all();
        }
    }
}
