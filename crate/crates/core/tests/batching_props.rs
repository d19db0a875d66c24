use nmt_core::corpus::{holdout_split, make_batches, EncodedPair, SplitSpec};
use proptest::prelude::*;

fn pairs() -> impl Strategy<Value = Vec<EncodedPair>> {
    prop::collection::vec((1usize..12, 1usize..12), 1..80).prop_map(|lens| {
        lens.into_iter()
            .enumerate()
            .map(|(id, (s, t))| EncodedPair { id, src: vec![4; s], tgt: vec![4; t] })
            .collect()
    })
}

fn sorted_ids(b: &nmt_core::corpus::Batches) -> Vec<usize> {
    let mut ids: Vec<usize> = b.batches.iter().flat_map(|m| m.pair_ids.iter().copied()).collect();
    ids.sort_unstable();
    ids
}

proptest! {
    #[test]
    fn every_pair_once_and_budget_respected(ps in pairs(), budget in 12usize..200, seed in any::<u64>()) {
        let b = make_batches(&ps, budget, seed, 3);
        prop_assert_eq!(b.dropped, 0);
        prop_assert_eq!(sorted_ids(&b), (0..ps.len()).collect::<Vec<_>>());
        for m in &b.batches {
            prop_assert!(m.padded_target_tokens() <= budget);
            prop_assert!(!m.is_empty());
        }
    }

    #[test]
    fn seed_and_epoch_determine_batches(ps in pairs(), seed in any::<u64>()) {
        prop_assert_eq!(make_batches(&ps, 40, seed, 1), make_batches(&ps, 40, seed, 1));
    }

    #[test]
    fn holdout_is_a_partition(n in 1usize..100, k in 0usize..100) {
        let k = k % n;
        let items: Vec<usize> = (0..n).collect();
        let (tr, va) = holdout_split(items.clone(), SplitSpec { holdout_n: k }).unwrap();
        prop_assert_eq!(tr.len() + va.len(), n);
        let joined: Vec<usize> = tr.into_iter().chain(va).collect();
        prop_assert_eq!(joined, items);
    }
}

#[test]
fn epochs_reorder_but_cover_the_same_pairs() {
    let ps: Vec<EncodedPair> = (0..200)
        .map(|id| EncodedPair { id, src: vec![4; 1 + id % 9], tgt: vec![4; 1 + (id * 7) % 11] })
        .collect();
    let e1 = make_batches(&ps, 48, 42, 1);
    let e2 = make_batches(&ps, 48, 42, 2);
    let order = |b: &nmt_core::corpus::Batches| -> Vec<usize> {
        b.batches.iter().flat_map(|m| m.pair_ids.iter().copied()).collect()
    };
    assert_ne!(order(&e1), order(&e2));
    assert_eq!(sorted_ids(&e1), sorted_ids(&e2));
}
