//! Server-side neighbor assignment from desensitized uploads.
//!
//! Geographical neighbors of `u` are users who visited `u`'s primary
//! segment. Semantic neighbors are the same number of further users whose
//! mean upload embedding is closest in squared L2 distance. Neighbor
//! influence is `softmax(-distance)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{PoiCatalog, SegmentId, UserId};
use crate::error::{Error, Result};
use crate::privacy::DesensitizedHistory;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile<T> {
    pub user: UserId,
    pub mean_emb: Array1<T>,
    /// Segment → number of uploaded check-ins in it.
    pub visited_segments: BTreeMap<SegmentId, usize>,
    /// Most visited segment, smallest id on ties.
    pub primary_segment: SegmentId,
}

impl<T: Scalar> UserProfile<T> {
    /// Builds a profile from an upload. Empty uploads are rejected.
    pub fn build(upload: &DesensitizedHistory, catalog: &PoiCatalog, emb: &Array2<T>) -> Result<Self> {
        if upload.pois.is_empty() {
            return Err(Error::Empty("empty desensitized history"));
        }
        let mut sum = Array1::zeros(emb.ncols());
        let mut visited_segments = BTreeMap::new();
        for &p in &upload.pois {
            let e = catalog.entity_of(p)?;
            if e.index() >= emb.nrows() {
                return Err(Error::Unknown {
                    kind: "entity",
                    id: e.0 as u64,
                });
            }
            sum += &emb.row(e.index());
            *visited_segments.entry(catalog.segment_of(p)?).or_insert(0) += 1;
        }
        let mean_emb = sum / T::of(upload.pois.len() as f64);
        let (&primary_segment, _) = visited_segments
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty upload");
        Ok(UserProfile {
            user: upload.user,
            mean_emb,
            visited_segments,
            primary_segment,
        })
    }

    pub fn visits_in(&self, s: SegmentId) -> usize {
        self.visited_segments.get(&s).copied().unwrap_or(0)
    }
}

/// Squared L2 distance between mean upload embeddings; 0 means identical.
pub fn user_distance<T: Scalar>(a: &UserProfile<T>, b: &UserProfile<T>) -> T {
    let d = &a.mean_emb - &b.mean_emb;
    d.dot(&d)
}

/// `u_j ∈ N_geo(u_i)` iff `u_j` visited `u_i`'s primary segment. When more
/// than `cap` users qualify, the ones with the most visits there are kept
/// (smaller id first on ties).
pub fn assign_geo_neighbors<T: Scalar>(
    profiles: &[UserProfile<T>],
    cap: usize,
) -> BTreeMap<UserId, Vec<UserId>> {
    profiles
        .par_iter()
        .map(|owner| {
            let seg = owner.primary_segment;
            let mut cands: Vec<(usize, UserId)> = profiles
                .iter()
                .filter(|p| p.user != owner.user)
                .map(|p| (p.visits_in(seg), p.user))
                .filter(|&(n, _)| n > 0)
                .collect();
            cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            cands.truncate(cap);
            (owner.user, cands.into_iter().map(|(_, u)| u).collect())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// For each user, the `|N_geo|` closest users outside `{u} ∪ N_geo(u)`.
pub fn assign_semantic_neighbors<T: Scalar>(
    profiles: &[UserProfile<T>],
    geo: &BTreeMap<UserId, Vec<UserId>>,
) -> BTreeMap<UserId, Vec<UserId>> {
    profiles
        .par_iter()
        .map(|owner| {
            let own_geo = geo.get(&owner.user).map_or(&[][..], Vec::as_slice);
            let want = own_geo.len();
            if want == 0 {
                return (owner.user, Vec::new());
            }
            let mut cands: Vec<(T, UserId)> = profiles
                .iter()
                .filter(|p| p.user != owner.user && !own_geo.contains(&p.user))
                .map(|p| (user_distance(owner, p), p.user))
                .collect();
            cands.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            cands.truncate(want);
            (owner.user, cands.into_iter().map(|(_, u)| u).collect())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// `w_j = exp(-d(owner, j)) / Σ_k exp(-d(owner, k))`, in `neighbors` order.
pub fn affinity_weights<T: Scalar>(
    owner: &UserProfile<T>,
    neighbors: &[&UserProfile<T>],
) -> Result<Vec<(UserId, T)>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("no neighbors to weight"));
    }
    let neg: Vec<T> = neighbors.iter().map(|n| -user_distance(owner, n)).collect();
    let max = neg.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = neg.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(neighbors
        .iter()
        .zip(exps)
        .map(|(n, e)| (n.user, e / total))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet<T> {
    pub owner: UserId,
    pub geo: Vec<UserId>,
    pub sem: Vec<UserId>,
    pub weights: BTreeMap<UserId, T>,
}

impl<T: Scalar> NeighborSet<T> {
    pub fn members(&self) -> impl Iterator<Item = UserId> + '_ {
        self.geo.iter().chain(&self.sem).copied()
    }

    pub fn len(&self) -> usize {
        self.geo.len() + self.sem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs geographical, semantic and weighting steps for every profile.
///
/// Users without a profile (empty uploads) get no neighbors and are never
/// chosen as one.
pub fn assign_neighbors<T: Scalar>(
    profiles: &[UserProfile<T>],
    cap: usize,
) -> Result<BTreeMap<UserId, NeighborSet<T>>> {
    let geo = assign_geo_neighbors(profiles, cap);
    let sem = assign_semantic_neighbors(profiles, &geo);
    let by_user: BTreeMap<UserId, &UserProfile<T>> =
        profiles.iter().map(|p| (p.user, p)).collect();
    profiles
        .iter()
        .map(|owner| {
            let g = geo[&owner.user].clone();
            let s = sem[&owner.user].clone();
            let members: Vec<&UserProfile<T>> =
                g.iter().chain(&s).map(|u| by_user[u]).collect();
            let weights = if members.is_empty() {
                BTreeMap::new()
            } else {
                affinity_weights(owner, &members)?.into_iter().collect()
            };
            Ok((
                owner.user,
                NeighborSet {
                    owner: owner.user,
                    geo: g,
                    sem: s,
                    weights,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn profile(user: u32, mean: Array1<f64>, segs: &[(u32, usize)]) -> UserProfile<f64> {
        let visited_segments: BTreeMap<_, _> = segs.iter().map(|&(s, n)| (SegmentId(s), n)).collect();
        let primary_segment = *visited_segments
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap()
            .0;
        UserProfile {
            user: UserId(user),
            mean_emb: mean,
            visited_segments,
            primary_segment,
        }
    }

    #[test]
    fn distance_by_hand() {
        let a = profile(0, array![1.0, 0.0], &[(0, 1)]);
        let b = profile(1, array![0.0, 1.0], &[(0, 1)]);
        assert_eq!(user_distance(&a, &b), 2.0);
        assert_eq!(user_distance(&b, &a), 2.0);
        assert_eq!(user_distance(&a, &a), 0.0);
    }

    #[test]
    fn primary_segment_ties_go_to_smallest() {
        let p = profile(0, array![0.0], &[(4, 2), (2, 2), (7, 1)]);
        assert_eq!(p.primary_segment, SegmentId(2));
    }

    #[test]
    fn disjoint_segments_have_no_geo_neighbors() {
        let ps = vec![
            profile(0, array![0.0], &[(0, 3)]),
            profile(1, array![0.0], &[(1, 3)]),
        ];
        let g = assign_geo_neighbors(&ps, 10);
        assert!(g[&UserId(0)].is_empty());
        assert!(g[&UserId(1)].is_empty());
    }

    #[test]
    fn geo_relation_is_not_symmetric() {
        let ps = vec![
            profile(1, array![0.0], &[(0, 3)]),
            profile(2, array![0.0], &[(5, 4), (0, 1)]),
            profile(3, array![0.0], &[(7, 1)]),
        ];
        let g = assign_geo_neighbors(&ps, 10);
        assert_eq!(g[&UserId(1)], vec![UserId(2)]);
        assert!(g[&UserId(2)].is_empty());
        assert!(g[&UserId(3)].is_empty());
    }

    #[test]
    fn geo_cap_keeps_heaviest_visitors() {
        let mut ps = vec![profile(0, array![0.0], &[(9, 10)])];
        for (u, n) in [(1, 2), (2, 5), (3, 1), (4, 5), (5, 3)] {
            ps.push(profile(u, array![0.0], &[(9, n), (1, 20)]));
        }
        let g = assign_geo_neighbors(&ps, 3);
        assert_eq!(g[&UserId(0)], vec![UserId(2), UserId(4), UserId(5)]);
    }

    #[test]
    fn empty_geo_means_empty_semantic() {
        let ps = vec![
            profile(0, array![0.0], &[(0, 1)]),
            profile(1, array![0.0], &[(1, 1)]),
        ];
        let geo = assign_geo_neighbors(&ps, 10);
        let sem = assign_semantic_neighbors(&ps, &geo);
        assert!(sem[&UserId(0)].is_empty());
    }

    #[test]
    fn identical_profile_is_top_semantic_neighbor() {
        let ps = vec![
            profile(1, array![0.5, 0.5], &[(0, 2)]),
            profile(2, array![0.5, 0.5], &[(1, 2)]),
            profile(3, array![-0.5, 0.9], &[(1, 2)]),
            profile(4, array![0.1, 0.2], &[(0, 1), (3, 4)]),
        ];
        let geo = assign_geo_neighbors(&ps, 10);
        assert_eq!(geo[&UserId(1)], vec![UserId(4)]);
        let sem = assign_semantic_neighbors(&ps, &geo);
        assert_eq!(sem[&UserId(1)], vec![UserId(2)]);
    }

    #[test]
    fn weights_by_hand() {
        let o = profile(0, array![0.0], &[(0, 1)]);
        let a = profile(1, array![0.0], &[(0, 1)]);
        let b = profile(2, array![4f64.ln().sqrt()], &[(0, 1)]);
        let w = affinity_weights(&o, &[&a, &b]).unwrap();
        assert!((w[0].1 - 0.8).abs() < 1e-12);
        assert!((w[1].1 - 0.2).abs() < 1e-12);
        let w = affinity_weights(&o, &[&b]).unwrap();
        assert_eq!(w[0].1, 1.0);
        let c = profile(3, array![-(4f64.ln().sqrt())], &[(0, 1)]);
        let w = affinity_weights(&o, &[&b, &c]).unwrap();
        assert!((w[0].1 - 0.5).abs() < 1e-15);
        assert!(affinity_weights(&o, &[]).is_err());
    }
}
