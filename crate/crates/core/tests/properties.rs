//! Property tests for the dataset and ranking invariants.

use proptest::prelude::*;
use std::collections::BTreeSet;
use tkgr_core::data::{
    history_window, inverse_relation, load_quadruple_file, write_quadruple_file,
};
use tkgr_core::eval::{rank_of, TieRule};

fn quad_lines(quads: &[(usize, usize, usize, usize)]) -> String {
    quads
        .iter()
        .map(|(s, r, o, t)| format!("{s} {r} {o} {t}\n"))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_reproduces_facts_plus_inverses(
        quads in prop::collection::vec((0usize..5, 0usize..3, 0usize..5, 0usize..6), 1..30)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, quad_lines(&quads)).unwrap();
        let seq = load_quadruple_file(&input, 5, 3).unwrap();

        // expected multiset: originals plus inverses, deduplicated per
        // timestamp (snapshot set semantics)
        let mut expect: BTreeSet<(usize, usize, usize, usize)> = BTreeSet::new();
        for &(s, r, o, t) in &quads {
            expect.insert((s, r, o, t));
            expect.insert((o, r + 3, s, t));
        }

        let output = dir.path().join("out.txt");
        write_quadruple_file(&seq, &output).unwrap();
        let text = std::fs::read_to_string(&output).unwrap();
        let mut written: BTreeSet<(usize, usize, usize, usize)> = BTreeSet::new();
        for line in text.lines() {
            let f: Vec<usize> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
            written.insert((f[0], f[1], f[2], f[3]));
        }
        prop_assert_eq!(written, expect);
    }

    #[test]
    fn double_inverse_is_identity(r in 0usize..20, base in 1usize..10) {
        let r = r % (2 * base);
        prop_assert_eq!(inverse_relation(inverse_relation(r, base), base), r);
    }

    #[test]
    fn history_window_strictly_precedes_query(
        times in prop::collection::btree_set(0usize..30, 1..15),
        query_time in 0usize..35,
        m in 1usize..10
    ) {
        let quads: Vec<(usize, usize, usize, usize)> =
            times.iter().map(|&t| (0, 0, 1, t)).collect();
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, quad_lines(&quads)).unwrap();
        let seq = load_quadruple_file(&input, 2, 1).unwrap();
        let window = history_window(&seq, query_time, m);
        prop_assert!(window.len() <= m);
        for (t, _) in &window {
            prop_assert!(*t < query_time);
        }
        // the window is the *latest* such snapshots
        let expected: Vec<usize> = seq
            .timestamps()
            .filter(|&t| t < query_time)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .take(m)
            .rev()
            .collect();
        prop_assert_eq!(window.iter().map(|(t, _)| *t).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn rank_of_agrees_with_sort_oracle(
        scores in prop::collection::vec(0u8..6, 2..12),
        gold_pick in any::<prop::sample::Index>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|v| v as f64 / 5.0).collect();
        let gold = gold_pick.index(scores.len());
        let keep = vec![true; scores.len()];
        let mut sorted: Vec<usize> = (0..scores.len()).collect();
        sorted.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let positions: Vec<usize> = sorted
            .iter()
            .enumerate()
            .filter(|(_, &o)| scores[o] == scores[gold])
            .map(|(pos, _)| pos + 1)
            .collect();
        let oracle = positions.iter().sum::<usize>() as f64 / positions.len() as f64;
        prop_assert_eq!(rank_of(&scores, gold, &keep, TieRule::Mean), oracle);
    }
}
