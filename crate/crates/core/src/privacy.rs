//! Client-side desensitization of check-in histories.
//!
//! Each visited POI is replaced by another POI of the same category, drawn
//! with probability proportional to `exp(ε · cos(e_candidate, e_target))`.
//! Random response over the full indicator vector is kept as a baseline.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CheckInHistory, PoiCatalog, PoiId, UserId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The perturbed history a client uploads to the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesensitizedHistory {
    pub user: UserId,
    pub pois: Vec<PoiId>,
}

pub fn cosine_similarity<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<T> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateEmbedding);
    }
    let c = a.dot(&b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Same-category substitutes for `target`, i.e. the candidate set with the
/// target itself removed.
pub fn candidates(catalog: &PoiCatalog, target: PoiId) -> Result<Vec<PoiId>> {
    let c = catalog.category_of(target)?;
    Ok(catalog
        .pois_in_category(c)
        .iter()
        .copied()
        .filter(|&p| p != target)
        .collect())
}

/// Exponential-mechanism probabilities over `candidates`, in candidate order.
///
/// `emb` is the entity table; rows are looked up through the catalog.
pub fn selection_distribution<T: Scalar>(
    target: PoiId,
    candidates: &[PoiId],
    catalog: &PoiCatalog,
    emb: &Array2<T>,
    epsilon: T,
) -> Result<Vec<T>> {
    if candidates.is_empty() {
        return Err(Error::Empty("empty candidate set"));
    }
    let row = |p: PoiId| -> Result<ArrayView1<T>> {
        let e = catalog.entity_of(p)?;
        if e.index() >= emb.nrows() {
            return Err(Error::Unknown {
                kind: "entity",
                id: e.0 as u64,
            });
        }
        Ok(emb.row(e.index()))
    };
    let target_row = row(target)?;
    let logits = candidates
        .iter()
        .map(|&p| Ok(epsilon * cosine_similarity(row(p)?, target_row)?))
        .collect::<Result<Vec<T>>>()?;
    Ok(softmax(&logits))
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Replaces every position of `history` independently. POIs whose category
/// has no other member are passed through unchanged.
pub fn desensitize<T: Scalar, R: Rng + ?Sized>(
    history: &CheckInHistory,
    catalog: &PoiCatalog,
    emb: &Array2<T>,
    epsilon: T,
    rng: &mut R,
) -> Result<DesensitizedHistory> {
    let mut out = Vec::with_capacity(history.len());
    for &p in history.pois() {
        let cands = candidates(catalog, p)?;
        if cands.is_empty() {
            out.push(p);
            continue;
        }
        let probs = selection_distribution(p, &cands, catalog, emb, epsilon)?;
        out.push(cands[sample_index(&probs, rng)]);
    }
    Ok(DesensitizedHistory {
        user: history.user(),
        pois: out,
    })
}

/// Number of positions that had to be passed through unchanged.
pub fn passthrough_count(history: &CheckInHistory, catalog: &PoiCatalog) -> usize {
    history
        .categories()
        .iter()
        .filter(|&&c| catalog.pois_in_category(c).len() < 2)
        .count()
}

/// `1 / (1 + e^ε)`.
pub fn flip_probability(epsilon: f64) -> f64 {
    1.0 / (1.0 + epsilon.exp())
}

/// Random-response baseline: the user's indicator vector over all POIs with
/// every entry flipped independently with [`flip_probability`].
pub fn random_response<R: Rng + ?Sized>(
    history: &CheckInHistory,
    n_pois: usize,
    epsilon: f64,
    rng: &mut R,
) -> Vec<bool> {
    let p = flip_probability(epsilon);
    let mut visited = vec![false; n_pois];
    for &poi in history.pois() {
        if let Some(v) = visited.get_mut(poi.index()) {
            *v = true;
        }
    }
    visited
        .into_iter()
        .map(|v| v ^ rng.random_bool(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{register_catalog, CategoryId, EntityLayout, SegmentId};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_by_hand() {
        let a = array![1.0, 0.0];
        let b = array![1.0, 1.0];
        let c = cosine_similarity(a.view(), b.view()).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_similarity(a.view(), a.view()).unwrap(), 1.0);
        let o = array![0.0, 3.0];
        assert_eq!(cosine_similarity(a.view(), o.view()).unwrap(), 0.0);
        let z = array![0.0, 0.0];
        assert!(matches!(
            cosine_similarity(a.view(), z.view()),
            Err(Error::DegenerateEmbedding)
        ));
    }

    /// POIs 0..n in one category; embeddings chosen per test.
    fn one_category(n: usize) -> PoiCatalog {
        let rows: Vec<_> = (0..n as u32)
            .map(|p| (PoiId(p), CategoryId(0), SegmentId(0)))
            .collect();
        register_catalog(&rows, EntityLayout::contiguous(n, 1, 1)).unwrap()
    }

    #[test]
    fn zero_epsilon_is_uniform() {
        let cat = one_category(5);
        let emb: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.2], [0.3, -0.9], [0.0, 0.0], [0.0, 0.0]];
        let cands = candidates(&cat, PoiId(0)).unwrap();
        let p = selection_distribution(PoiId(0), &cands, &cat, &emb, 0.0).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_candidates_by_hand() {
        let cat = one_category(3);
        // target (1,0); candidate 1 sim 1, candidate 2 sim 0
        let emb = array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let p = selection_distribution(PoiId(0), &[PoiId(1), PoiId(2)], &cat, &emb, 2.0).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn single_and_empty_candidate_sets() {
        let cat = one_category(2);
        let emb = array![[1.0], [1.0], [0.0], [0.0]];
        let p = selection_distribution(PoiId(0), &[PoiId(1)], &cat, &emb, 3.0).unwrap();
        assert_eq!(p, vec![1.0]);
        assert!(selection_distribution(PoiId(0), &[], &cat, &emb, 3.0).is_err());
    }

    #[test]
    fn high_epsilon_concentrates_on_most_similar() {
        let cat = one_category(4);
        let emb = array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let cands = candidates(&cat, PoiId(0)).unwrap();
        let p = selection_distribution(PoiId(0), &cands, &cat, &emb, 8.0).unwrap();
        let want = 8f64.exp() / (8f64.exp() + 2.0 * (-8f64).exp());
        assert!((p[0] - want).abs() < 1e-12);
        assert!(p[0] > 0.9999);
    }

    #[test]
    fn singleton_categories_pass_through() {
        let rows: Vec<_> = (0..3u32)
            .map(|p| (PoiId(p), CategoryId(p), SegmentId(0)))
            .collect();
        let cat = register_catalog(&rows, EntityLayout::contiguous(3, 3, 1)).unwrap();
        let emb = Array2::<f64>::ones((7, 2));
        let h = CheckInHistory::new(UserId(1), vec![PoiId(2), PoiId(0), PoiId(2)], &cat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = desensitize(&h, &cat, &emb, 4.0, &mut rng).unwrap();
        assert_eq!(d.pois, h.pois());
        assert_eq!(passthrough_count(&h, &cat), 3);
    }

    #[test]
    fn substitutes_keep_category_and_avoid_target() {
        let rows: Vec<_> = (0..12u32)
            .map(|p| (PoiId(p), CategoryId(p % 3), SegmentId(0)))
            .collect();
        let cat = register_catalog(&rows, EntityLayout::contiguous(12, 3, 1)).unwrap();
        let emb = Array2::from_shape_fn((16, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pois: Vec<PoiId> = (0..40).map(|i| PoiId(i % 12)).collect();
        let h = CheckInHistory::new(UserId(0), pois, &cat).unwrap();
        let d = desensitize(&h, &cat, &emb, 2.0, &mut rng).unwrap();
        assert_eq!(d.pois.len(), h.len());
        for (orig, sub) in h.pois().iter().zip(&d.pois) {
            assert_ne!(orig, sub);
            assert_eq!(cat.category_of(*orig).unwrap(), cat.category_of(*sub).unwrap());
        }
    }

    #[test]
    fn flip_probabilities() {
        assert_eq!(flip_probability(0.0), 0.5);
        assert!((flip_probability(3f64.ln()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_response_at_zero_epsilon_flips_about_half() {
        let cat = one_category(4);
        let h = CheckInHistory::new(UserId(0), vec![PoiId(1)], &cat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut flips = 0;
        for _ in 0..5000 {
            let v = random_response(&h, 4, 0.0, &mut rng);
            flips += v.iter().zip([false, true, false, false]).filter(|(a, b)| **a != *b).count();
        }
        let rate = flips as f64 / 20000.0;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }
}
