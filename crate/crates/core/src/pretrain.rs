//! Server-side knowledge-graph pretraining.
//!
//! Entity embeddings are first pushed through the propagation layers, then
//! scored with a relation-projected translation distance
//! `‖e_r + W_rᵀ e_h − W_rᵀ e_t‖²`. Each positive triple is paired with a
//! tail-corrupted negative and the pair loss is `−ln σ(s_neg − s_pos)`.
//! Training is plain mini-batch SGD with gradients flowing back through the
//! layers.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::domain::{EntityId, Hyperparams, Triple};
use crate::embedding::EmbeddingState;
use crate::error::{Error, Result};
use crate::kgstore::KnowledgeGraph;
use crate::propagation::{backward, forward, PropagationGraph};
use crate::scalar::{logistic, neg_log_logistic, Scalar};

pub const NEGATIVE_ATTEMPTS: usize = 100;

fn translation<T: Scalar>(
    emb: &EmbeddingState<T>,
    head: ArrayView1<T>,
    relation: usize,
    tail: ArrayView1<T>,
) -> Array1<T> {
    let diff = &head - &tail;
    let mut v = emb.projection[relation].t().dot(&diff);
    v += &emb.relation.row(relation);
    v
}

/// Squared translation distance of `(h, r, t)` on the propagated table
/// `layered`. Lower is more plausible.
pub fn score<T: Scalar>(
    emb: &EmbeddingState<T>,
    layered: &Array2<T>,
    h: EntityId,
    r: crate::domain::RelationId,
    t: EntityId,
) -> Result<T> {
    for e in [h, t] {
        if e.index() >= layered.nrows() {
            return Err(Error::Unknown {
                kind: "entity",
                id: e.0 as u64,
            });
        }
    }
    if r.index() >= emb.n_relations() {
        return Err(Error::Unknown {
            kind: "relation",
            id: r.0 as u64,
        });
    }
    let v = translation(emb, layered.row(h.index()), r.index(), layered.row(t.index()));
    Ok(v.dot(&v))
}

/// Corrupts the tail of `positive` with an entity drawn uniformly from the
/// graph, rejecting draws that form a known triple or repeat the tail.
pub fn sample_negative<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    positive: &Triple,
    rng: &mut R,
) -> Result<Triple> {
    let n = kg.n_entities() as u32;
    for _ in 0..NEGATIVE_ATTEMPTS {
        let tail = EntityId(rng.random_range(0..n));
        let cand = Triple { tail, ..*positive };
        if tail != positive.tail && !kg.contains(&cand) {
            return Ok(cand);
        }
    }
    Err(Error::NoNegative {
        head: positive.head.0,
        relation: positive.relation.0,
        tail: positive.tail.0,
        attempts: NEGATIVE_ATTEMPTS,
    })
}

/// Accumulates `d score / d params` scaled by `weight` for a single triple.
fn add_score_grad<T: Scalar>(
    emb: &EmbeddingState<T>,
    layered: &Array2<T>,
    t: &Triple,
    weight: T,
    grad: &mut EmbeddingState<T>,
    d_layered: &mut Array2<T>,
) {
    let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
    let v = translation(emb, layered.row(h), r, layered.row(tl));
    let dv = v.mapv(|x| x * (weight + weight));
    // ∂/∂e_r
    grad.relation.row_mut(r).scaled_add(T::one(), &dv);
    // ∂/∂W_r = (e_h − e_t) dvᵀ
    let diff = &layered.row(h) - &layered.row(tl);
    let outer = diff
        .view()
        .insert_axis(Axis(1))
        .dot(&dv.view().insert_axis(Axis(0)));
    grad.projection[r] += &outer;
    // ∂/∂e_h = W_r dv, ∂/∂e_t = −W_r dv
    let de = emb.projection[r].dot(&dv);
    d_layered.row_mut(h).scaled_add(T::one(), &de);
    d_layered.row_mut(tl).scaled_add(-T::one(), &de);
}

/// Mean pair loss over `pairs` of `(positive, negative)` triples.
pub fn pair_loss<T: Scalar>(
    graph: &PropagationGraph<T>,
    emb: &EmbeddingState<T>,
    pairs: &[(Triple, Triple)],
) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let layered = forward(graph, &emb.entity, &emb.layers, emb.activation).into_output();
    let mut total = T::zero();
    for (pos, neg) in pairs {
        let sp = score(emb, &layered, pos.head, pos.relation, pos.tail)?;
        let sn = score(emb, &layered, neg.head, neg.relation, neg.tail)?;
        total += neg_log_logistic(sn - sp);
    }
    Ok(total / T::of(pairs.len() as f64))
}

/// Mean pair loss and its gradient w.r.t. every parameter of `emb`.
///
/// With `parallel` the per-pair work is sharded across threads; shards are
/// reduced in index order so the result does not depend on scheduling.
pub fn pair_loss_and_grad<T: Scalar>(
    graph: &PropagationGraph<T>,
    emb: &EmbeddingState<T>,
    pairs: &[(Triple, Triple)],
    parallel: bool,
) -> Result<(T, EmbeddingState<T>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let fwd = forward(graph, &emb.entity, &emb.layers, emb.activation);
    let layered = fwd.output();
    let inv_n = T::one() / T::of(pairs.len() as f64);

    let shard = |chunk: &[(Triple, Triple)]| {
        let mut grad = emb.zeros_like();
        let mut d_layered = Array2::zeros(layered.raw_dim());
        let mut loss = T::zero();
        for (pos, neg) in chunk {
            let sp = score(emb, layered, pos.head, pos.relation, pos.tail)?;
            let sn = score(emb, layered, neg.head, neg.relation, neg.tail)?;
            let x = sn - sp;
            loss += neg_log_logistic(x);
            // d(−ln σ(x))/dx = σ(x) − 1
            let g = (logistic(x) - T::one()) * inv_n;
            add_score_grad(emb, layered, neg, g, &mut grad, &mut d_layered);
            add_score_grad(emb, layered, pos, -g, &mut grad, &mut d_layered);
        }
        Ok::<_, Error>((loss, grad, d_layered))
    };

    let parts: Vec<_> = if parallel {
        let size = pairs.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
        pairs.par_chunks(size).map(shard).collect::<Result<_>>()?
    } else {
        vec![shard(pairs)?]
    };
    let mut parts = parts.into_iter();
    let (mut loss, mut grad, mut d_layered) = parts.next().expect("non-empty batch");
    for (l, g, d) in parts {
        loss += l;
        grad.scaled_add(T::one(), &g);
        d_layered += &d;
    }

    let (d_base, d_layers) = backward(graph, &fwd, &emb.layers, emb.activation, d_layered);
    grad.entity = d_base;
    grad.layers = d_layers;
    Ok((loss * inv_n, grad))
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Shard per-pair work across the rayon pool.
    pub parallel: bool,
    /// Triples withheld from optimization (e.g. for held-out evaluation).
    pub train_triples: Option<Vec<Triple>>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport<T> {
    pub state: EmbeddingState<T>,
    /// Mean pair loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD over the graph's triples, starting from `init`.
pub fn pretrain_from<T: Scalar, R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    init: EmbeddingState<T>,
    hp: &Hyperparams,
    opts: &PretrainOptions,
    rng: &mut R,
) -> Result<PretrainReport<T>> {
    if kg.triples().is_empty() {
        return Err(Error::Empty("knowledge graph has no triples"));
    }
    hp.validate()?;
    let graph = PropagationGraph::full(kg);
    let mut state = init;
    let lr = T::of(hp.pretrain_gamma);
    let mut order: Vec<Triple> = opts
        .train_triples
        .clone()
        .unwrap_or_else(|| kg.triples().to_vec());
    let mut loss_trace = Vec::with_capacity(hp.epochs_pretrain);
    for epoch in 1..=hp.epochs_pretrain {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.pretrain_batch) {
            let pairs = batch
                .iter()
                .map(|p| Ok((*p, sample_negative(kg, p, rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = pair_loss_and_grad(&graph, &state, &pairs, opts.parallel)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "pretrain",
                    epoch,
                });
            }
            total += loss * batch.len() as f64;
            state.scaled_add(-lr, &grad);
        }
        if !state.is_finite() {
            return Err(Error::Divergence {
                stage: "pretrain",
                epoch,
            });
        }
        let mean = total / order.len() as f64;
        log::debug!("pretrain epoch {epoch}: mean loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(PretrainReport { state, loss_trace })
}

/// Initializes from `rng` and trains; see [`pretrain_from`].
pub fn pretrain<T: Scalar, R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    hp: &Hyperparams,
    opts: &PretrainOptions,
    rng: &mut R,
) -> Result<PretrainReport<T>> {
    let init = EmbeddingState::init(kg.n_entities(), kg.n_relations(), hp, rng);
    pretrain_from(kg, init, hp, opts, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Activation, RelationId};
    use crate::propagation::LayerParams;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_state(e_h: f64, e_t: f64, e_r: f64) -> (EmbeddingState<f64>, Array2<f64>) {
        let s = EmbeddingState {
            entity: array![[e_h], [e_t]],
            relation: array![[e_r]],
            projection: vec![array![[1.0]]],
            layers: vec![],
            activation: Activation::Logistic,
        };
        let layered = s.entity.clone();
        (s, layered)
    }

    #[test]
    fn score_by_hand() {
        let (s, l) = scalar_state(1.0, 0.0, 0.5);
        let v = score(&s, &l, EntityId(0), RelationId(0), EntityId(1)).unwrap();
        assert!((v - 2.25).abs() < 1e-15);
    }

    #[test]
    fn score_zero_when_translation_holds() {
        let (s, l) = scalar_state(0.3, 0.3, 0.0);
        assert_eq!(score(&s, &l, EntityId(0), RelationId(0), EntityId(1)).unwrap(), 0.0);
        let (s, l) = scalar_state(0.25, 1.0, 0.75);
        assert!(score(&s, &l, EntityId(0), RelationId(0), EntityId(1)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn score_symmetry_depends_on_relation() {
        let (s, l) = scalar_state(0.4, -0.7, 0.0);
        let a = score(&s, &l, EntityId(0), RelationId(0), EntityId(1)).unwrap();
        let b = score(&s, &l, EntityId(1), RelationId(0), EntityId(0)).unwrap();
        assert_eq!(a, b);
        let (s, l) = scalar_state(0.4, -0.7, 0.2);
        let a = score(&s, &l, EntityId(0), RelationId(0), EntityId(1)).unwrap();
        let b = score(&s, &l, EntityId(1), RelationId(0), EntityId(0)).unwrap();
        assert!(a != b);
    }

    #[test]
    fn score_rejects_unknown_ids() {
        let (s, l) = scalar_state(0.0, 0.0, 0.0);
        assert!(score(&s, &l, EntityId(5), RelationId(0), EntityId(1)).is_err());
        assert!(score(&s, &l, EntityId(0), RelationId(3), EntityId(1)).is_err());
    }

    #[test]
    fn equal_scores_cost_ln2() {
        let kg = KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let g = PropagationGraph::full(&kg);
        let (s, _) = scalar_state(0.5, 0.5, 0.0);
        let pairs = [(Triple::new(0, 0, 1), Triple::new(0, 0, 0))];
        let l = pair_loss(&g, &s, &pairs).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn negative_in_three_entity_graph() {
        let kg = KnowledgeGraph::new(3, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = sample_negative(&kg, &Triple::new(0, 0, 1), &mut rng).unwrap();
            assert!(n.tail == EntityId(0) || n.tail == EntityId(2));
            assert!(!kg.contains(&n));
        }
    }

    #[test]
    fn saturated_graph_has_no_negative() {
        let kg = KnowledgeGraph::new(
            2,
            1,
            vec![Triple::new(0, 0, 0), Triple::new(0, 0, 1)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_negative(&kg, &Triple::new(0, 0, 1), &mut rng).unwrap_err();
        assert!(matches!(err, Error::NoNegative { .. }));
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let triples: Vec<Triple> = (0..12).map(|i| Triple::new(i, i % 2, (i + 3) % 15)).collect();
        let kg = KnowledgeGraph::new(15, 2, triples.clone()).unwrap();
        let hp = Hyperparams {
            dim_entity: 4,
            dim_relation: 3,
            layers: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: EmbeddingState<f64> = EmbeddingState::init(15, 2, &hp, &mut rng);
        let pairs: Vec<_> = triples
            .iter()
            .map(|p| (*p, sample_negative(&kg, p, &mut rng).unwrap()))
            .collect();
        let g = PropagationGraph::full(&kg);
        let (l1, g1) = pair_loss_and_grad(&g, &s, &pairs, false).unwrap();
        let (l2, g2) = pair_loss_and_grad(&g, &s, &pairs, true).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let diff = (&g1.entity - &g2.entity).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
        assert!((pair_loss(&g, &s, &pairs).unwrap() - l1).abs() < 1e-14);
    }

    #[test]
    fn loss_trace_is_reproducible() {
        let triples: Vec<Triple> = (0..40).map(|i| Triple::new(i % 20, i % 3, (i * 7 + 1) % 20)).collect();
        let mut t = triples;
        t.sort();
        t.dedup();
        let kg = KnowledgeGraph::new(20, 3, t).unwrap();
        let hp = Hyperparams {
            dim_entity: 4,
            dim_relation: 4,
            epochs_pretrain: 3,
            pretrain_batch: 8,
            ..Default::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            pretrain::<f64, _>(&kg, &hp, &PretrainOptions::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.state, b.state);
        assert!(a.state.is_finite());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let kg = KnowledgeGraph::new(4, 1, vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3)]).unwrap();
        let hp = Hyperparams {
            dim_entity: 2,
            dim_relation: 2,
            layers: 0,
            pretrain_gamma: 1e300,
            epochs_pretrain: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = EmbeddingState {
            entity: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]],
            relation: array![[0.5, 0.5]],
            projection: vec![Array2::eye(2)],
            layers: Vec::<LayerParams<f64>>::new(),
            activation: Activation::Logistic,
        };
        let err = pretrain_from(&kg, init, &hp, &PretrainOptions::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Divergence { stage: "pretrain", .. }), "{err}");
    }
}
