mod common;

use std::collections::BTreeSet;

use common::{meta, Fixture};
use kvcompress::attention::{paged_attention, AttentionConfig};
use kvcompress::compression::{compress, evictable_total, plan_eviction, sequence_view};
use kvcompress::SeqId;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a fixture with `lens.len()` sequences whose heads have been grown by
/// prefill, decode, and one compression round.
fn grown_fixture(seed: u64, b: usize, lens: &[usize]) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut fx = Fixture::new(2, 2, b, 3, 512);
    for (seq, &len) in lens.iter().enumerate() {
        let seq = seq as SeqId;
        fx.allocate(seq, len);
        for h in 0..fx.heads() {
            for i in 0..len {
                fx.write(
                    seq,
                    h,
                    &[r.gen(), r.gen(), r.gen()],
                    &[r.gen(), r.gen(), r.gen()],
                    meta(r.gen(), i),
                );
            }
        }
        let view = sequence_view(&fx.tables, &fx.store, seq).unwrap();
        let e = r.gen_range(0..=evictable_total(&view));
        compress(
            &[(seq, e)],
            &mut fx.cache,
            &mut fx.tables,
            &mut fx.store,
            &mut fx.blocks,
        )
        .unwrap();
        for _ in 0..r.gen_range(0..5) {
            fx.decode(seq, |_, pos| {
                (
                    vec![r.gen(), r.gen(), r.gen()],
                    vec![r.gen(), r.gen(), r.gen()],
                    meta(r.gen(), pos),
                )
            });
        }
    }
    fx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slot_addresses_are_a_bijection(seed in any::<u64>(), b in 1usize..6, lens in prop::collection::vec(1usize..30, 1..4)) {
        let fx = grown_fixture(seed, b, &lens);
        let mut seen = BTreeSet::new();
        for (seq, t) in fx.tables.sequences() {
            for h in 0..fx.heads() {
                for i in 0..t.context_lens[h] {
                    let slot = fx.tables.slot(seq, h, i).unwrap();
                    prop_assert!(t.blocks[h].contains(&slot.block));
                    prop_assert!(seen.insert(slot.flat(b)), "slot reused");
                }
            }
        }
        prop_assert_eq!(seen.len(), fx.tables.sequences().map(|(_, t)| t.live_kvs()).sum::<usize>());
        fx.blocks.check_conservation(&fx.tables).unwrap();
    }

    #[test]
    fn blocks_are_conserved_across_frees(seed in any::<u64>(), lens in prop::collection::vec(1usize..30, 1..5)) {
        let mut fx = grown_fixture(seed, 3, &lens);
        let total = fx.blocks.num_blocks();
        for seq in (0..lens.len() as SeqId).rev().step_by(2) {
            fx.blocks.free_sequence(&mut fx.tables, seq).unwrap();
            fx.blocks.check_conservation(&fx.tables).unwrap();
            prop_assert_eq!(fx.blocks.free_count() + fx.tables.total_allocated(), total);
        }
    }

    #[test]
    fn decode_allocation_ignores_batch_order(seed in any::<u64>(), lens in prop::collection::vec(1usize..20, 2..5)) {
        let mut a = grown_fixture(seed, 4, &lens);
        let mut b = grown_fixture(seed, 4, &lens);
        let order: Vec<SeqId> = (0..lens.len() as SeqId).collect();
        let reversed: Vec<SeqId> = order.iter().rev().copied().collect();
        let da = a.blocks.allocate_decode_step(&mut a.tables, &order).unwrap();
        let db = b.blocks.allocate_decode_step(&mut b.tables, &reversed).unwrap();
        prop_assert_eq!(da, db);
        for seq in order {
            prop_assert_eq!(&a.tables.sequence(seq).unwrap().blocks, &b.tables.sequence(seq).unwrap().blocks);
        }
    }

    #[test]
    fn paged_attention_ignores_slot_order(seed in any::<u64>(), len in 1usize..40, b in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let kvs: Vec<(Vec<f64>, Vec<f64>)> = (0..len)
            .map(|_| ((0..4).map(|_| r.gen_range(-1.0..1.0)).collect(), (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        let mut perm: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let cfg = AttentionConfig::new(2, 1, 4, 1).unwrap();
        let build = |order: &[usize]| {
            let mut fx = Fixture::new(1, 1, b, 4, len.div_ceil(b));
            fx.allocate(0, len);
            for (i, &k) in order.iter().enumerate() {
                fx.write(0, 0, &kvs[k].0, &kvs[k].1, meta(0.0, i));
            }
            fx
        };
        let identity: Vec<usize> = (0..len).collect();
        let (a, p) = (build(&identity), build(&perm));
        let q = Array2::from_shape_fn((2, 4), |_| r.gen_range(-1.0..1.0));
        let oa = paged_attention(&a.cache, &a.tables, 0, 0, q.view(), &cfg).unwrap();
        let op = paged_attention(&p.cache, &p.tables, 0, 0, q.view(), &cfg).unwrap();
        for (x, y) in oa.output.iter().zip(op.output.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn eviction_plan_is_invariant_to_metric_scaling(seed in any::<u64>(), scale in 1e-3f64..1e3, lens in prop::collection::vec(1usize..30, 1..2)) {
        let mut fx = grown_fixture(seed, 2, &lens);
        let view = sequence_view(&fx.tables, &fx.store, 0).unwrap();
        let budget = evictable_total(&view) / 2;
        let before = plan_eviction(&view, budget).unwrap();
        for h in 0..fx.heads() {
            for i in 0..fx.tables.context_len(0, h).unwrap() {
                let slot = fx.tables.slot(0, h, i).unwrap();
                fx.store.get_mut(slot).metric *= scale;
            }
        }
        let after = plan_eviction(&sequence_view(&fx.tables, &fx.store, 0).unwrap(), budget).unwrap();
        prop_assert_eq!(before.slots, after.slots);
    }
}
