//! Average precision and database ranking.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;

/// How precision is accumulated over the relevant positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApConvention {
    /// Mean of precision at each relevant position.
    Classic,
    /// Trapezoidal interpolation between consecutive recall levels, as in
    /// the revisited Oxford/Paris evaluation kit.
    Revisited,
}

/// AP of `ranking` (database ids, best first) with junk ids removed first.
/// `None` when there is nothing relevant to find.
pub fn average_precision(
    ranking: &[&str],
    relevant: &HashSet<&str>,
    junk: &HashSet<&str>,
    convention: ApConvention,
) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let positions: Vec<usize> = ranking
        .iter()
        .filter(|id| !junk.contains(**id))
        .enumerate()
        .filter(|(_, id)| relevant.contains(**id))
        .map(|(rank, _)| rank)
        .collect();
    let n = relevant.len() as f64;
    let ap = match convention {
        ApConvention::Classic => positions
            .iter()
            .enumerate()
            .map(|(j, &rank)| (j + 1) as f64 / (rank + 1) as f64)
            .sum::<f64>()
            / n,
        ApConvention::Revisited => positions
            .iter()
            .enumerate()
            .map(|(j, &rank)| {
                let before = if rank == 0 { 1.0 } else { j as f64 / rank as f64 };
                let after = (j + 1) as f64 / (rank + 1) as f64;
                (before + after) / 2.0
            })
            .sum::<f64>()
            / n,
    };
    Some(ap)
}

/// Database indices by descending inner product with `query`; ties go to
/// the smaller id.
pub fn rank_database(query: &Descriptor, ids: &[String], database: &[Descriptor]) -> Vec<usize> {
    assert_eq!(ids.len(), database.len(), "one id per database descriptor");
    let scores: Vec<f64> = database.iter().map(|d| d.dot(query)).collect();
    rank_scores(&scores, ids)
}

pub(crate) fn rank_scores(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set<'a>(v: &[&'a str]) -> HashSet<&'a str> {
        v.iter().copied().collect()
    }

    /// Precision at k for every k holding a relevant item, averaged over the
    /// relevant set.
    fn classic_oracle(ranking: &[&str], relevant: &HashSet<&str>, junk: &HashSet<&str>) -> f64 {
        let kept: Vec<&str> = ranking.iter().copied().filter(|r| !junk.contains(r)).collect();
        let mut total = 0.0;
        for k in 1..=kept.len() {
            if relevant.contains(kept[k - 1]) {
                let hits = kept[..k].iter().filter(|r| relevant.contains(**r)).count();
                total += hits as f64 / k as f64;
            }
        }
        total / relevant.len() as f64
    }

    #[test]
    fn basic_cases() {
        let r = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        let none = set(&[]);
        assert_eq!(average_precision(&r, &set(&["a", "b", "c"]), &none, ApConvention::Classic), Some(1.0));
        assert_eq!(average_precision(&r, &set(&["a", "b", "c"]), &none, ApConvention::Revisited), Some(1.0));
        assert_eq!(average_precision(&r, &set(&["b"]), &none, ApConvention::Classic), Some(0.5));
        assert_eq!(average_precision(&r, &none, &none, ApConvention::Classic), None);
        // junk ahead of a relevant item is ignored
        assert_eq!(average_precision(&r, &set(&["b"]), &set(&["a"]), ApConvention::Classic), Some(1.0));
    }

    #[test]
    fn revisited_single_item_at_rank_two() {
        let r = ["a", "b", "c"];
        // trapezoid between precision 0/1 and 1/2
        let ap = average_precision(&r, &set(&["b"]), &set(&[]), ApConvention::Revisited).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn classic_matches_oracle_on_random_rankings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<String> = (0..10).map(|i| format!("{i}")).collect();
        for _ in 0..100 {
            let mut ranking: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            ranking.shuffle(&mut rng);
            let mut pool = ranking.clone();
            pool.shuffle(&mut rng);
            let relevant = set(&pool[..3]);
            let junk = if rng.gen_bool(0.5) { set(&pool[3..5]) } else { set(&[]) };
            let ap = average_precision(&ranking, &relevant, &junk, ApConvention::Classic).unwrap();
            assert_eq!(ap, classic_oracle(&ranking, &relevant, &junk));
        }
    }

    #[test]
    fn ranking_rules() {
        let ids: Vec<String> = ["c", "a", "b", "d"].iter().map(|s| s.to_string()).collect();
        let q = Descriptor::from_unnormalized(vec![1.0, 0.0]).unwrap();
        let db = vec![
            Descriptor::from_unnormalized(vec![0.5, 0.5]).unwrap(),
            Descriptor::from_unnormalized(vec![0.0, 1.0]).unwrap(),
            Descriptor::from_unnormalized(vec![0.5, 0.5]).unwrap(),
            q.clone(),
        ];
        // "d" is the query itself; "b" and "c" tie and go by id
        assert_eq!(rank_database(&q, &ids, &db), vec![3, 2, 0, 1]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<String> = (0..20).map(|i| format!("{i:02}")).collect();
        let db: Vec<Descriptor> = (0..20)
            .map(|_| Descriptor::from_unnormalized((0..6).map(|_| rng.gen::<f64>() - 0.3).collect()).unwrap())
            .collect();
        let q = Descriptor::from_unnormalized((0..6).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let got = rank_database(&q, &ids, &db);
        let mut oracle: Vec<(f64, &String, usize)> = db.iter().zip(&ids).enumerate().map(|(i, (d, id))| (d.dot(&q), id, i)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        assert_eq!(got, oracle.iter().map(|o| o.2).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn scaling_scores_keeps_order(scores in prop::collection::vec(-1.0f64..1.0, 1..30), alpha in 0.01f64..100.0) {
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("{i:03}")).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * alpha).collect();
            prop_assert_eq!(rank_scores(&scores, &ids), rank_scores(&scaled, &ids));
        }

        #[test]
        fn ap_is_a_probability(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), k in 1usize..12) {
            let ids: Vec<String> = perm.iter().map(|i| format!("{i}")).collect();
            let ranking: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            let relevant: HashSet<&str> = ranking.iter().take(12).filter(|s| s.parse::<usize>().unwrap() < k).copied().collect();
            for c in [ApConvention::Classic, ApConvention::Revisited] {
                let ap = average_precision(&ranking, &relevant, &HashSet::new(), c).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }
}
