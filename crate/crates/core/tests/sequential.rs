use std::collections::BTreeSet;

use proptest::prelude::*;
use versiontree::{Key, OrderedSet};

#[derive(Debug, Clone)]
enum Op {
    Contains(Key),
    Add(Key),
    Remove(Key),
    Range(Key, Key),
}

fn op(keys: Key) -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..keys).prop_map(Op::Contains),
        (0..keys).prop_map(Op::Add),
        (0..keys).prop_map(Op::Remove),
        (-2..keys + 2, -2..keys + 2).prop_map(|(a, b)| Op::Range(a, b)),
    ]
}

fn check(ops: &[Op]) {
    let mut set = OrderedSet::new();
    let mut oracle = BTreeSet::new();
    for (i, op) in ops.iter().enumerate() {
        match *op {
            Op::Contains(k) => assert_eq!(set.contains(k).unwrap(), oracle.contains(&k), "op {i}"),
            Op::Add(k) => assert_eq!(set.add(k).unwrap(), oracle.insert(k), "op {i}"),
            Op::Remove(k) => assert_eq!(set.remove(k).unwrap(), oracle.remove(&k), "op {i}"),
            Op::Range(a, b) => {
                let want: Vec<Key> = if a <= b {
                    oracle.range(a..=b).copied().collect()
                } else {
                    vec![]
                };
                assert_eq!(set.range(a, b).unwrap(), want, "op {i}");
            }
        }
    }
    for phase in 0..=set.phase() {
        let t = set.reconstruct_version_tree(phase).unwrap();
        t.check_bst().unwrap();
    }
    let last = set.phase();
    let t = set.reconstruct_version_tree(last).unwrap();
    assert_eq!(t.keys(), oracle.into_iter().collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn matches_sorted_set_small_keys(ops in prop::collection::vec(op(8), 0..200)) {
        check(&ops);
    }

    #[test]
    fn matches_sorted_set_wide_keys(ops in prop::collection::vec(op(1000), 0..300)) {
        check(&ops);
    }
}

#[test]
fn ascending_and_descending_runs() {
    let set = OrderedSet::new();
    for k in 0..2000 {
        assert!(set.add(k).unwrap());
    }
    for k in (2000..4000).rev() {
        assert!(set.add(k).unwrap());
    }
    assert_eq!(set.range(0, 3999).unwrap(), (0..4000).collect::<Vec<_>>());
    for k in (0..4000).step_by(2) {
        assert!(set.remove(k).unwrap());
    }
    assert_eq!(
        set.range(100, 110).unwrap(),
        vec![101, 103, 105, 107, 109]
    );
}
