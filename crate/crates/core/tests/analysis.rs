use domsim_core::analysis::{friedman_test, nemenyi_cd, rank_descending, Alpha, ScoreTable};
use proptest::prelude::*;

fn table(scores: Vec<Vec<f64>>) -> ScoreTable {
    let k = scores[0].len();
    let n = scores.len();
    ScoreTable::new(
        (0..k).map(|j| format!("s{j}")).collect(),
        (0..n).map(|i| format!("i{i}")).collect(),
        scores,
    )
    .unwrap()
}

fn scores_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7, 2usize..12).prop_flat_map(|(k, n)| {
        prop::collection::vec(prop::collection::vec((-20i32..20).prop_map(|v| v as f64 * 0.5), k), n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn friedman_ignores_monotone_rescaling(scores in scores_strategy()) {
        let base = friedman_test(&table(scores.clone())).unwrap();
        let warped: Vec<Vec<f64>> = scores
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|v| (v * 0.3).exp() * (i + 1) as f64 - 7.0).collect())
            .collect();
        let after = friedman_test(&table(warped)).unwrap();
        prop_assert!((base.chi2 - after.chi2).abs() < 1e-9);
        prop_assert_eq!(base.ranks, after.ranks);
    }

    #[test]
    fn permuting_systems_permutes_ranks(scores in scores_strategy(), rot in 0usize..6) {
        let k = scores[0].len();
        let r = rot % k;
        let base = friedman_test(&table(scores.clone())).unwrap();
        let rotated: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| (0..k).map(|j| row[(j + r) % k]).collect())
            .collect();
        let after = friedman_test(&table(rotated)).unwrap();
        prop_assert!((base.chi2 - after.chi2).abs() < 1e-9);
        for j in 0..k {
            prop_assert!((after.ranks[j] - base.ranks[(j + r) % k]).abs() < 1e-12);
        }
        // mean ranks always average (k + 1) / 2
        let mean = after.ranks.iter().sum::<f64>() / k as f64;
        prop_assert!((mean - (k as f64 + 1.0) / 2.0).abs() < 1e-12);
        prop_assert!(after.chi2 >= -1e-12);
    }

    #[test]
    fn midranks_sum_to_triangular_number(row in prop::collection::vec(-5i32..5, 1..12)) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let r = rank_descending(&row);
        let k = row.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - k * (k + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip(scores in scores_strategy()) {
        let t = table(scores);
        let mut buf = Vec::new();
        t.to_csv(&mut buf).unwrap();
        let back = ScoreTable::from_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn critical_difference_shrinks_with_items_and_grows_with_systems(k in 2usize..10, n in 2usize..500) {
        for alpha in [Alpha::P05, Alpha::P10] {
            let cd = nemenyi_cd(k, n, alpha).unwrap();
            prop_assert!(nemenyi_cd(k, n + 1, alpha).unwrap() < cd);
            prop_assert!(nemenyi_cd(k + 1, n, alpha).unwrap() > cd);
        }
        prop_assert!(nemenyi_cd(k, n, Alpha::P10).unwrap() < nemenyi_cd(k, n, Alpha::P05).unwrap());
    }
}

#[test]
fn csv_errors() {
    let gap = "item,system,score\nu1,a,1\nu1,b,2\nu2,a,3\n";
    assert!(ScoreTable::from_csv(gap.as_bytes()).is_err());
    let dup = "item,system,score\nu1,a,1\nu1,a,2\n";
    assert!(ScoreTable::from_csv(dup.as_bytes()).is_err());
    let header = "utt,sys,value\nu1,a,1\nu1,b,2\n";
    assert!(ScoreTable::from_csv(header.as_bytes()).is_err());
    assert!(nemenyi_cd(11, 10, Alpha::P05).is_err());
    assert!(nemenyi_cd(1, 10, Alpha::P05).is_err());
}
