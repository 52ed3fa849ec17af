//! Top-k ranking metrics, the per-user 8:1:1 split and the evaluation loop.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{predict_all, ClientState, DeviceContext};
use crate::domain::{PoiId, UserId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `1 / log2(rank + 1)` for a 1-indexed rank.
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(ranking: &[PoiId], relevant: &HashSet<PoiId>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, p)| relevant.contains(p))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok(dcg / idcg)
}

pub fn recall_at_k(ranking: &[PoiId], relevant: &HashSet<PoiId>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if relevant.is_empty() {
        log::warn!("recall@{k} with an empty relevant set is defined as 0");
        return Ok(0.0);
    }
    let hits = ranking.iter().take(k).filter(|p| relevant.contains(p)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// POIs ordered by descending score, ties by ascending id, skipping `exclude`.
pub fn rank_by_score<T: Scalar>(scores: &[T], exclude: &HashSet<PoiId>) -> Vec<PoiId> {
    let mut idx: Vec<PoiId> = (0..scores.len() as u32)
        .map(PoiId)
        .filter(|p| !exclude.contains(p))
        .collect();
    idx.sort_by(|a, b| {
        scores[b.index()]
            .partial_cmp(&scores[a.index()])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<PoiId>,
    pub validation: Vec<PoiId>,
    pub test: Vec<PoiId>,
}

/// Deduplicates (first occurrence wins), shuffles, and cuts 8:1:1.
/// Validation and test get `floor(n/10)` each; train keeps the rest.
pub fn split_history<R: Rng + ?Sized>(pois: &[PoiId], rng: &mut R) -> UserSplit {
    let mut seen = HashSet::new();
    let mut uniq: Vec<PoiId> = pois.iter().copied().filter(|p| seen.insert(*p)).collect();
    uniq.shuffle(rng);
    let n = uniq.len();
    let tenth = n / 10;
    let test = uniq.split_off(n - tenth);
    let validation = uniq.split_off(n - 2 * tenth);
    UserSplit {
        train: uniq,
        validation,
        test,
    }
}

pub type Split = BTreeMap<UserId, UserSplit>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    Validation,
    Test,
}

/// Which POIs compete with the held-out items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CandidateMode {
    /// Every catalog POI except the user's training POIs.
    #[default]
    Full,
    /// Held-out items plus `negatives` sampled non-training POIs.
    Sampled { negatives: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by k.
    pub at: BTreeMap<usize, AtK>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    pub fn ndcg(&self, k: usize) -> f64 {
        self.at.get(&k).map_or(f64::NAN, |m| m.ndcg)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at.get(&k).map_or(f64::NAN, |m| m.recall)
    }
}

/// Averages metrics over users with a non-empty holdout set.
pub fn evaluate_rankings(
    rankings: &[(Vec<PoiId>, HashSet<PoiId>)],
    ks: &[usize],
) -> Result<MetricsReport> {
    let mut at = BTreeMap::new();
    let used: Vec<_> = rankings.iter().filter(|(_, rel)| !rel.is_empty()).collect();
    for &k in ks {
        let mut n = 0.0;
        let mut r = 0.0;
        for (rank, rel) in &used {
            n += ndcg_at_k(rank, rel, k)?;
            r += recall_at_k(rank, rel, k)?;
        }
        let m = used.len().max(1) as f64;
        at.insert(
            k,
            AtK {
                ndcg: n / m,
                recall: r / m,
            },
        );
    }
    Ok(MetricsReport {
        at,
        users_evaluated: used.len(),
    })
}

/// One client's ranking of its candidates and its holdout set. The ranking
/// is empty when the user has no holdout items.
pub fn rank_for_user<T: Scalar>(
    client: &ClientState<T>,
    ctx: &DeviceContext<'_, T>,
    split: &Split,
    holdout: Holdout,
    mode: CandidateMode,
) -> Result<(Vec<PoiId>, HashSet<PoiId>)> {
    let Some(s) = split.get(&client.user) else {
        return Ok((Vec::new(), HashSet::new()));
    };
    let relevant: HashSet<PoiId> = match holdout {
        Holdout::Validation => s.validation.iter().copied().collect(),
        Holdout::Test => s.test.iter().copied().collect(),
    };
    if relevant.is_empty() {
        return Ok((Vec::new(), relevant));
    }
    let scores = predict_all(client, ctx)?;
    let train: HashSet<PoiId> = s.train.iter().copied().collect();
    let mut exclude = train.clone();
    if let CandidateMode::Sampled { negatives, seed } = mode {
        let mut rng = crate::rng::stream(seed, "eval-candidates", client.user.0 as u64);
        let mut pool: Vec<PoiId> = (0..scores.len() as u32)
            .map(PoiId)
            .filter(|p| !train.contains(p) && !relevant.contains(p))
            .collect();
        pool.shuffle(&mut rng);
        pool.truncate(negatives);
        let keep: BTreeSet<PoiId> = pool.into_iter().chain(relevant.iter().copied()).collect();
        exclude.extend((0..scores.len() as u32).map(PoiId).filter(|p| !keep.contains(p)));
    }
    Ok((rank_by_score(&scores, &exclude), relevant))
}

/// Ranks the catalog for every client and scores it against the holdout.
pub fn evaluate<T: Scalar>(
    clients: &[ClientState<T>],
    ctx: &DeviceContext<'_, T>,
    split: &Split,
    holdout: Holdout,
    ks: &[usize],
    mode: CandidateMode,
) -> Result<MetricsReport> {
    let rankings = clients
        .par_iter()
        .map(|c| rank_for_user(c, ctx, split, holdout, mode))
        .collect::<Result<Vec<_>>>()?;
    evaluate_rankings(&rankings, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u32]) -> Vec<PoiId> {
        v.iter().map(|&p| PoiId(p)).collect()
    }

    fn set(v: &[u32]) -> HashSet<PoiId> {
        v.iter().map(|&p| PoiId(p)).collect()
    }

    #[test]
    fn ndcg_hand_values() {
        assert_eq!(ndcg_at_k(&ids(&[5, 1, 2]), &set(&[5]), 10).unwrap(), 1.0);
        let v = ndcg_at_k(&ids(&[1, 5, 2]), &set(&[5]), 10).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&ids(&[1, 2, 3]), &set(&[9]), 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&ids(&[1, 2, 3]), &set(&[]), 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&ids(&[1]), &set(&[1]), 0).is_err());
    }

    #[test]
    fn recall_hand_values() {
        assert_eq!(recall_at_k(&ids(&[1, 3, 4]), &set(&[1, 2]), 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ids(&[2, 1, 4]), &set(&[1, 2]), 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ids(&[2, 1, 4]), &set(&[]), 2).unwrap(), 0.0);
        assert!(recall_at_k(&ids(&[1]), &set(&[1]), 0).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let r = rank_by_score(&[0.5, 0.9, 0.5, 0.1], &set(&[]));
        assert_eq!(r, ids(&[1, 0, 2, 3]));
        let r = rank_by_score(&[0.5, 0.9, 0.5, 0.1], &set(&[1]));
        assert_eq!(r, ids(&[0, 2, 3]));
    }

    #[test]
    fn split_is_8_1_1_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pois: Vec<PoiId> = (0..25).chain(0..5).map(PoiId).collect();
        let s = split_history(&pois, &mut rng);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (21, 2, 2));
        let all: HashSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 25);
        let s = split_history(&ids(&[1, 2, 3]), &mut rng);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (3, 0, 0));
    }

    #[test]
    fn empty_holdout_users_are_skipped() {
        let rankings = vec![
            (ids(&[1, 2]), set(&[1])),
            (ids(&[3, 4]), set(&[])),
        ];
        let m = evaluate_rankings(&rankings, &[1]).unwrap();
        assert_eq!(m.users_evaluated, 1);
        assert_eq!(m.ndcg(1), 1.0);
    }
}
