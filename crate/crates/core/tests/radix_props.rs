use proptest::prelude::*;
use radixflow::oracles::{radix_differential, FlatPrefixMap};
use radixflow::RadixTree;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tree_agrees_with_flat_map(seed in any::<u64>()) {
        let st = radix_differential(seed, 400).map_err(TestCaseError::fail)?;
        prop_assert_eq!(st.ops, 400);
    }

    #[test]
    fn inserts_match_flat_map(seqs in proptest::collection::vec(proptest::collection::vec(0u32..4, 1..10), 1..30)) {
        let mut tree = RadixTree::new();
        let mut flat = FlatPrefixMap::new();
        for s in &seqs {
            prop_assert_eq!(tree.insert(s), flat.insert(s));
        }
        prop_assert_eq!(tree.total_cached(), flat.len());
        for s in &seqs {
            prop_assert_eq!(tree.peek_prefix(s), s.len());
        }
        prop_assert!(tree.check_invariants().is_ok());
        // Leaves alone rebuild the same table.
        let rebuilt = FlatPrefixMap::from_paths(&tree.leaf_paths());
        prop_assert_eq!(rebuilt.len(), flat.len());
    }

    #[test]
    fn full_eviction_empties_an_unpinned_tree(seqs in proptest::collection::vec(proptest::collection::vec(0u32..4, 1..10), 1..20)) {
        let mut tree = RadixTree::new();
        for s in &seqs {
            tree.insert(s);
        }
        let total = tree.total_cached();
        prop_assert_eq!(tree.evict(usize::MAX, |_| {}), total);
        prop_assert_eq!(tree.total_cached(), 0);
        prop_assert_eq!(tree.node_count(), 1);
    }
}

#[test]
fn ten_thousand_operations() {
    radix_differential(7, 10_000).unwrap();
}
