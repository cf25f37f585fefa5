//! Randomised invariants of the data layer, numerics and report formats.

use proptest::prelude::*;

use macroformer::data::{
    decode_replay, dequantize, encode_replay, quantize, window_replay, Matchup, Race, Replay, ReplayStep, SplitCounts,
};
use macroformer::eval::{ComparisonRow, ComparisonTable};
use macroformer::tensor::kernels::softmax_axis;
use macroformer::training::lr_at_epoch;

fn race() -> impl Strategy<Value = Race> {
    prop_oneof![Just(Race::Terran), Just(Race::Protoss), Just(Race::Zerg)]
}

prop_compose! {
    fn replay()(
        player in race(),
        opponent in race(),
        result in 0u8..=1,
        global_dim in 1usize..6,
        shape in (1usize..3, 1usize..4, 1usize..4),
        len in 1usize..12,
    )(
        steps in proptest::collection::vec(
            (
                proptest::collection::vec(0f32..=1.0, global_dim),
                proptest::collection::vec(0f32..=1.0, shape.0 * shape.1 * shape.2),
                0u16..player.action_count() as u16,
            ),
            len,
        ),
        player in Just(player), opponent in Just(opponent), result in Just(result),
        global_dim in Just(global_dim), shape in Just(shape),
    ) -> Replay {
        Replay {
            matchup: Matchup::new(player, opponent),
            result,
            global_dim,
            spatial_shape: [shape.0, shape.1, shape.2],
            action_count: player.action_count(),
            steps: steps.into_iter().map(|(g, s, a)| ReplayStep::new(g, &s, a).unwrap()).collect(),
        }
    }
}

proptest! {
    #[test]
    fn quantization_stays_within_half_a_level(v in 0f32..=1.0) {
        prop_assert!((dequantize(quantize(v)) - v).abs() <= 1.0 / 510.0 + f32::EPSILON);
    }

    #[test]
    fn quantization_is_idempotent(q in any::<u8>()) {
        prop_assert_eq!(quantize(dequantize(q)), q);
    }

    #[test]
    fn replay_codec_round_trips(r in replay()) {
        let bytes = encode_replay(&r).unwrap();
        let back = decode_replay(&bytes).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(encode_replay(&back).unwrap(), bytes);
    }

    #[test]
    fn windows_partition_the_replay(len in 0usize..200, window in 1usize..30) {
        let ws = window_replay(3, len, window);
        let mut next = 0;
        for (i, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.index, i);
            prop_assert_eq!(w.start, next);
            prop_assert!(w.len >= 1 && w.len <= window);
            prop_assert_eq!(w.is_padded(), w.len < window);
            prop_assert_eq!(w.mask().iter().filter(|&&m| m).count(), w.len);
            next += w.len;
        }
        prop_assert_eq!(next, len);
        prop_assert!(ws.iter().rev().skip(1).all(|w| !w.is_padded()));
    }

    #[test]
    fn split_counts_sum_and_stay_near_ratio(n in 1usize..100_000) {
        let c = SplitCounts::for_total(n);
        prop_assert_eq!(c.train + c.val + c.test, n);
        prop_assert!((c.val as f64 - n as f64 / 10.0).abs() <= 1.0);
        prop_assert!((c.test as f64 - n as f64 / 5.0).abs() <= 1.0);
        prop_assert!((c.train as f64 - 0.7 * n as f64).abs() <= 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..80,
        scale in prop_oneof![Just(1.0), Just(100.0), Just(1e4)],
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut out = vec![0.0; x.len()];
        softmax_axis(&[rows, cols], 1, &x, &mut out);
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn learning_rate_follows_halving_formula(base in 1e-6f64..1.0, epoch in 0usize..40) {
        let lr = lr_at_epoch(base, epoch);
        prop_assert_eq!(lr, base / (1u64 << (epoch / 2)) as f64);
        if epoch % 2 == 1 {
            prop_assert_eq!(lr, lr_at_epoch(base, epoch - 1));
        }
    }

    #[test]
    fn matchup_byte_round_trips(p in race(), o in race()) {
        let m = Matchup::new(p, o);
        prop_assert_eq!(Matchup::from_byte(m.to_byte()).unwrap(), m);
        prop_assert_eq!(m.action_count(), p.action_count());
    }

    #[test]
    fn comparison_csv_round_trips(
        rows in proptest::collection::vec(("[a-z_]{1,14}", 0f64..=1.0, 0f64..=1.0, 0usize..1_000_000), 1..6),
    ) {
        let table = ComparisonTable {
            fingerprint: "test:abc".into(),
            rows: rows
                .into_iter()
                .map(|(variant, gsp, bop, steps)| ComparisonRow { variant, matchup: "TvZ".into(), gsp, bop, steps })
                .collect(),
        };
        prop_assert_eq!(ComparisonTable::from_csv(&table.to_csv(), "test:abc").unwrap(), table);
    }
}

#[test]
fn matchup_bytes_are_distinct_and_bad_bytes_rejected() {
    let races = [Race::Terran, Race::Protoss, Race::Zerg];
    let mut bytes: Vec<u8> = races.iter().flat_map(|&p| races.map(|o| Matchup::new(p, o).to_byte())).collect();
    bytes.sort();
    bytes.dedup();
    assert_eq!(bytes.len(), 9);
    for b in 0..=255u8 {
        if !bytes.contains(&b) {
            assert!(Matchup::from_byte(b).is_err(), "byte {b:#x} accepted");
        }
    }
}
