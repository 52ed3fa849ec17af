//! On-device model and update rule.
//!
//! A client holds its user vector, a private copy of the embeddings of every
//! entity in its sub-graph, and its own propagation layers. It predicts
//! `σ(u · e_p)` with `e_p` propagated over the sub-graph; POIs outside the
//! sub-graph fall back to a frozen server-side table (flagged "cold").
//!
//! Each round the client computes the gradient of its pairwise local loss,
//! publishes the entity part as a [`GradientMessage`], and then mixes its own
//! entity gradient with its neighbors' through [`apply_update`].

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Activation, EntityId, Hyperparams, PoiCatalog, PoiId, UserId};
use crate::embedding::EmbeddingState;
use crate::error::{Error, Result};
use crate::kgstore::SubKnowledgeGraph;
use crate::propagation::{backward, forward, Forward, LayerParams, PropagationGraph};
use crate::scalar::{logistic, neg_log_logistic, Scalar};

/// Read-only data every device receives at deployment.
#[derive(Debug, Clone, Copy)]
pub struct DeviceContext<'a, T> {
    pub catalog: &'a PoiCatalog,
    /// Frozen propagated server embeddings, one row per POI.
    pub cold: &'a Array2<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState<T> {
    pub user: UserId,
    /// `K` entries. Never leaves the device.
    pub user_emb: Array1<T>,
    /// `K × d` map into entity space, present only when `K ≠ d`.
    pub bridge: Option<Array2<T>>,
    /// Rows aligned with `subkg.entities`.
    pub local: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub activation: Activation,
    /// Private training positives.
    pub train: Vec<PoiId>,
    pub subkg: SubKnowledgeGraph,
    /// Sorted entities of `subkg` that also lie in some neighbor's sub-graph.
    #[serde(default)]
    pub neighbor_entities: Vec<EntityId>,
}

/// A neighbor-bound payload: entity-embedding gradients only.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage<T> {
    pub sender: UserId,
    pub round: u32,
    pub grads: BTreeMap<EntityId, Array1<T>>,
}

impl<T: Scalar> GradientMessage<T> {
    /// Canonical byte form: sender, round, count (u32 LE), then per entity
    /// in ascending id order its id (u32 LE) and `d` f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.grads.values().next().map_or(0, |g| g.len());
        let mut out = Vec::with_capacity(12 + self.grads.len() * (4 + 8 * d));
        out.extend_from_slice(&self.sender.0.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.grads.len() as u32).to_le_bytes());
        for (e, g) in &self.grads {
            out.extend_from_slice(&e.0.to_le_bytes());
            for v in g {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }
}

/// Gradients of the local loss. `shared` is what neighbors may see.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradients<T> {
    pub shared: BTreeMap<EntityId, Array1<T>>,
    pub user: Array1<T>,
    pub bridge: Option<Array2<T>>,
    pub layers: Vec<LayerParams<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub value: T,
    pub cold: bool,
}

impl<T: Scalar> ClientState<T> {
    /// Deploys a sub-graph: local rows and layers are copied from `pretrained`,
    /// the user vector is drawn uniformly in `±0.5/sqrt(K)`.
    pub fn new<R: Rng + ?Sized>(
        user: UserId,
        train: Vec<PoiId>,
        subkg: SubKnowledgeGraph,
        pretrained: &EmbeddingState<T>,
        hp: &Hyperparams,
        rng: &mut R,
    ) -> Result<Self> {
        let d = pretrained.dim_entity();
        let mut local = Array2::zeros((subkg.entities.len(), d));
        for (row, e) in subkg.entities.iter().enumerate() {
            if e.index() >= pretrained.n_entities() {
                return Err(Error::Unknown {
                    kind: "entity",
                    id: e.0 as u64,
                });
            }
            local.row_mut(row).assign(&pretrained.entity.row(e.index()));
        }
        let k = hp.dim_user;
        let bound = 0.5 / (k as f64).sqrt();
        let user_emb = Array1::from_shape_simple_fn(k, || T::of(rng.random_range(-bound..=bound)));
        let bridge = (k != d).then(|| {
            Array2::from_shape_fn((k, d), |(i, j)| if i == j { T::one() } else { T::zero() })
        });
        Ok(ClientState {
            user,
            user_emb,
            bridge,
            local,
            layers: pretrained.layers[..hp.layers.min(pretrained.n_layers())].to_vec(),
            activation: pretrained.activation,
            train,
            subkg,
            neighbor_entities: Vec::new(),
        })
    }

    /// Records which local entities neighbors can send gradients for: the
    /// intersection of `subkg` with the neighbors' sub-graph entities.
    pub fn set_neighbor_entities<'a>(&mut self, neighbor_subkgs: impl IntoIterator<Item = &'a SubKnowledgeGraph>) {
        let mut shared = std::collections::BTreeSet::new();
        for sub in neighbor_subkgs {
            shared.extend(sub.entities.iter().copied().filter(|e| self.subkg.contains_entity(*e)));
        }
        self.neighbor_entities = shared.into_iter().collect();
    }

    fn graph(&self) -> PropagationGraph<T> {
        PropagationGraph::local(&self.subkg)
    }

    fn user_in_entity_space(&self) -> Array1<T> {
        match &self.bridge {
            Some(b) => b.t().dot(&self.user_emb),
            None => self.user_emb.clone(),
        }
    }

    fn local_row(&self, ctx: &DeviceContext<'_, T>, p: PoiId) -> Result<Option<usize>> {
        let e = ctx.catalog.entity_of(p)?;
        Ok(self.subkg.entities.binary_search(&e).ok())
    }

    fn forward(&self) -> Forward<T> {
        forward(&self.graph(), &self.local, &self.layers, self.activation)
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.iter().all(|v| v.is_finite())
            && self.local.iter().all(|v| v.is_finite())
            && self.layers.iter().all(LayerParams::is_finite)
            && self
                .bridge
                .as_ref()
                .is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn poi_vector<'a, T: Scalar>(
    layered: &'a Array2<T>,
    cold: &'a Array2<T>,
    row: Option<usize>,
    p: PoiId,
) -> Result<ndarray::ArrayView1<'a, T>> {
    match row {
        Some(r) => Ok(layered.row(r)),
        None if p.index() < cold.nrows() => Ok(cold.row(p.index())),
        None => Err(Error::Unknown {
            kind: "poi",
            id: p.0 as u64,
        }),
    }
}

pub fn predict<T: Scalar>(
    state: &ClientState<T>,
    ctx: &DeviceContext<'_, T>,
    poi: PoiId,
) -> Result<Prediction<T>> {
    let layered = state.forward().into_output();
    let u = state.user_in_entity_space();
    let row = state.local_row(ctx, poi)?;
    let v = poi_vector(&layered, ctx.cold, row, poi)?;
    Ok(Prediction {
        value: logistic(u.dot(&v)),
        cold: row.is_none(),
    })
}

/// Scores every catalog POI in id order with a single forward pass.
pub fn predict_all<T: Scalar>(state: &ClientState<T>, ctx: &DeviceContext<'_, T>) -> Result<Vec<T>> {
    let layered = state.forward().into_output();
    let u = state.user_in_entity_space();
    ctx.catalog
        .pois()
        .map(|p| {
            let row = state.local_row(ctx, p)?;
            Ok(logistic(u.dot(&poi_vector(&layered, ctx.cold, row, p)?)))
        })
        .collect()
}

/// Pairs every training positive with `negatives_per_positive` POIs drawn
/// uniformly from the catalog minus the training set.
pub fn sample_local_batch<R: Rng + ?Sized>(
    state_train: &[PoiId],
    n_pois: usize,
    negatives_per_positive: usize,
    rng: &mut R,
) -> Result<Vec<(PoiId, PoiId)>> {
    let own: HashSet<PoiId> = state_train.iter().copied().collect();
    if own.len() >= n_pois {
        return Err(Error::Empty("no POI left to sample negatives from"));
    }
    let mut batch = Vec::with_capacity(state_train.len() * negatives_per_positive);
    for &p in state_train {
        for _ in 0..negatives_per_positive {
            let n = loop {
                let c = PoiId(rng.random_range(0..n_pois as u32));
                if !own.contains(&c) {
                    break c;
                }
            };
            batch.push((p, n));
        }
    }
    Ok(batch)
}

/// Mean of `−ln σ(ŷ_pos − ŷ_neg)` over the batch.
pub fn local_loss<T: Scalar>(
    state: &ClientState<T>,
    ctx: &DeviceContext<'_, T>,
    batch: &[(PoiId, PoiId)],
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let layered = state.forward().into_output();
    let u = state.user_in_entity_space();
    let yhat = |p: PoiId| -> Result<T> {
        let row = state.local_row(ctx, p)?;
        Ok(logistic(u.dot(&poi_vector(&layered, ctx.cold, row, p)?)))
    };
    let mut total = T::zero();
    for &(pos, neg) in batch {
        total += neg_log_logistic(yhat(pos)? - yhat(neg)?);
    }
    Ok(total / T::of(batch.len() as f64))
}

/// Local loss and its gradient w.r.t. every trainable parameter.
pub fn local_loss_and_grad<T: Scalar>(
    state: &ClientState<T>,
    ctx: &DeviceContext<'_, T>,
    batch: &[(PoiId, PoiId)],
) -> Result<(T, LocalGradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let graph = state.graph();
    let fwd = forward(&graph, &state.local, &state.layers, state.activation);
    let layered = fwd.output();
    let u = state.user_in_entity_space();
    let inv_n = T::one() / T::of(batch.len() as f64);

    let mut d_u = Array1::<T>::zeros(u.len());
    let mut d_layered = Array2::<T>::zeros(layered.raw_dim());
    let mut loss = T::zero();
    for &(pos, neg) in batch {
        let rp = state.local_row(ctx, pos)?;
        let rn = state.local_row(ctx, neg)?;
        let vp = poi_vector(layered, ctx.cold, rp, pos)?;
        let vn = poi_vector(layered, ctx.cold, rn, neg)?;
        let yp = logistic(u.dot(&vp));
        let yn = logistic(u.dot(&vn));
        let x = yp - yn;
        loss += neg_log_logistic(x);
        let dx = (logistic(x) - T::one()) * inv_n;
        for (coef, v, row) in [
            (dx * yp * (T::one() - yp), vp, rp),
            (-dx * yn * (T::one() - yn), vn, rn),
        ] {
            d_u.scaled_add(coef, &v);
            if let Some(r) = row {
                d_layered.row_mut(r).scaled_add(coef, &u);
            }
        }
    }
    let (d_local, d_layers) = backward(&graph, &fwd, &state.layers, state.activation, d_layered);

    let (user, bridge) = match &state.bridge {
        Some(b) => {
            let du = b.dot(&d_u);
            let db = state
                .user_emb
                .view()
                .insert_axis(ndarray::Axis(1))
                .dot(&d_u.view().insert_axis(ndarray::Axis(0)));
            (du, Some(db))
        }
        None => (d_u, None),
    };
    let shared = state
        .subkg
        .entities
        .iter()
        .zip(d_local.rows())
        .filter(|(_, g)| g.iter().any(|v| *v != T::zero()))
        .map(|(e, g)| (*e, g.to_owned()))
        .collect();
    Ok((
        loss * inv_n,
        LocalGradients {
            shared,
            user,
            bridge,
            layers: d_layers,
        },
    ))
}

/// Entity-embedding gradient of the local loss, packaged for neighbors.
pub fn compute_shared_gradients<T: Scalar>(
    state: &ClientState<T>,
    ctx: &DeviceContext<'_, T>,
    batch: &[(PoiId, PoiId)],
    round: u32,
) -> Result<GradientMessage<T>> {
    let (_, grads) = local_loss_and_grad(state, ctx, batch)?;
    Ok(GradientMessage {
        sender: state.user,
        round,
        grads: grads.shared,
    })
}

/// One plain SGD step on the local loss, no neighbor input.
pub fn local_sgd_step<T: Scalar>(
    state: &mut ClientState<T>,
    grads: &LocalGradients<T>,
    gamma: T,
) -> Result<()> {
    for (row, e) in state.subkg.entities.iter().enumerate() {
        if let Some(g) = grads.shared.get(e) {
            state.local.row_mut(row).scaled_add(-gamma, g);
        }
    }
    apply_private(state, grads, gamma)
}

fn apply_private<T: Scalar>(
    state: &mut ClientState<T>,
    grads: &LocalGradients<T>,
    gamma: T,
) -> Result<()> {
    state.user_emb.scaled_add(-gamma, &grads.user);
    if let (Some(b), Some(g)) = (state.bridge.as_mut(), grads.bridge.as_ref()) {
        b.scaled_add(-gamma, g);
    }
    for (l, g) in state.layers.iter_mut().zip(&grads.layers) {
        l.weight.scaled_add(-gamma, &g.weight);
        l.bias.scaled_add(-gamma, &g.bias);
    }
    if !state.is_finite() {
        return Err(Error::NonFinite(format!("update of client {}", state.user)));
    }
    Ok(())
}

/// Blends own and neighbor entity gradients, then steps.
///
/// For an entity shared with a neighbor's sub-graph (see
/// [`ClientState::set_neighbor_entities`]) or present in a message,
/// `V[e] -= γ((1−μ)·own[e] + μ·Σ_j w_j·g_j[e])` with missing entries read as
/// zero. Every other entity takes the plain local step `V[e] -= γ·own[e]`.
/// User vector and layers always take the local step.
pub fn apply_update<T: Scalar>(
    state: &mut ClientState<T>,
    own: &LocalGradients<T>,
    inbox: &[&GradientMessage<T>],
    weights: &BTreeMap<UserId, T>,
    hp: &Hyperparams,
) -> Result<()> {
    let senders: BTreeMap<UserId, ()> = inbox.iter().map(|m| (m.sender, ())).collect();
    if senders.len() != inbox.len()
        || senders.len() != weights.len()
        || !senders.keys().all(|s| weights.contains_key(s))
    {
        return Err(Error::InvalidArgument(format!(
            "client {}: inbox senders do not match affinity weights",
            state.user
        )));
    }
    let gamma = T::of(hp.gamma);
    let mu = T::of(hp.mu);
    let keep = T::one() - mu;
    let d = state.local.ncols();
    for (row, e) in state.subkg.entities.iter().enumerate() {
        let own_g = own.shared.get(e);
        let mut nbr: Option<Array1<T>> = None;
        for m in inbox {
            if let Some(g) = m.grads.get(e) {
                nbr.get_or_insert_with(|| Array1::zeros(d))
                    .scaled_add(weights[&m.sender], g);
            }
        }
        let shared = nbr.is_some() || state.neighbor_entities.binary_search(e).is_ok();
        let step = match (own_g, nbr) {
            (None, None) => continue,
            (Some(g), None) if !shared => g.clone(),
            (Some(g), None) => g * keep,
            (own_g, Some(n)) => {
                let mut s = n * mu;
                if let Some(g) = own_g {
                    s.scaled_add(keep, g);
                }
                s
            }
        };
        state.local.row_mut(row).scaled_add(-gamma, &step);
    }
    apply_private(state, own, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{register_catalog, CategoryId, EntityLayout, SegmentId, Triple};
    use ndarray::array;

    /// 3 POIs (entities 0..3), one category (3), one segment (4).
    fn catalog() -> PoiCatalog {
        let rows: Vec<_> = (0..3u32)
            .map(|p| (PoiId(p), CategoryId(0), SegmentId(0)))
            .collect();
        register_catalog(&rows, EntityLayout::contiguous(3, 1, 1)).unwrap()
    }

    fn bare_state(subkg: SubKnowledgeGraph, local: Array2<f64>, user: Array1<f64>) -> ClientState<f64> {
        ClientState {
            user: UserId(0),
            user_emb: user,
            bridge: None,
            local,
            layers: vec![],
            activation: Activation::Logistic,
            train: vec![PoiId(0)],
            subkg,
            neighbor_entities: vec![],
        }
    }

    #[test]
    fn zero_user_predicts_half() {
        let cat = catalog();
        let cold = Array2::from_elem((3, 2), 0.3);
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        let sub = SubKnowledgeGraph::from_triples(UserId(0), vec![Triple::new(0, 0, 3)]);
        let s = bare_state(sub, array![[1.0, 2.0], [0.5, 0.5]], array![0.0, 0.0]);
        for p in 0..3 {
            assert_eq!(predict(&s, &ctx, PoiId(p)).unwrap().value, 0.5);
        }
    }

    #[test]
    fn aligned_user_predicts_above_half() {
        let cat = catalog();
        let cold = Array2::zeros((3, 2));
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        let sub = SubKnowledgeGraph::from_triples(UserId(0), vec![Triple::new(0, 0, 3)]);
        let e_p = array![0.4, -0.3];
        let s = bare_state(sub, array![[0.4, -0.3], [0.1, 0.1]], e_p.clone());
        let pr = predict(&s, &ctx, PoiId(0)).unwrap();
        assert!(!pr.cold);
        assert!((pr.value - logistic(e_p.dot(&e_p))).abs() < 1e-15);
        assert!(pr.value > 0.5);
        let cold_pr = predict(&s, &ctx, PoiId(2)).unwrap();
        assert!(cold_pr.cold);
        assert_eq!(cold_pr.value, 0.5);
    }

    #[test]
    fn one_layer_forward_by_hand() {
        // entities 0 (poi), 1 (poi), 3 (category): 0 - 3 - 1
        let cat = catalog();
        let cold = Array2::zeros((3, 2));
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        let sub = SubKnowledgeGraph::from_triples(
            UserId(0),
            vec![Triple::new(0, 0, 3), Triple::new(1, 0, 3)],
        );
        let mut s = bare_state(
            sub,
            array![[0.2, -0.4], [0.6, 0.1], [-0.3, 0.5]],
            array![0.7, -1.1],
        );
        s.layers = vec![LayerParams {
            weight: array![[1.0, 0.5], [-0.25, 2.0]],
            bias: array![0.1, -0.1],
        }];
        // deg(0)=1, deg(3)=2 → η = 1/sqrt(2)
        let eta = 1.0 / 2f64.sqrt();
        let agg = [0.2 + eta * -0.3, -0.4 + eta * 0.5];
        let pre = [
            1.0 * agg[0] + -0.25 * agg[1] + 0.1,
            0.5 * agg[0] + 2.0 * agg[1] - 0.1,
        ];
        let e1 = [logistic(pre[0]), logistic(pre[1])];
        let want = logistic(0.7 * e1[0] + -1.1 * e1[1]);
        let got = predict(&s, &ctx, PoiId(0)).unwrap().value;
        assert!((got - want).abs() < 1e-10);
        let all = predict_all(&s, &ctx).unwrap();
        assert!((all[0] - want).abs() < 1e-15);
    }

    #[test]
    fn equal_predictions_cost_ln2() {
        let cat = catalog();
        let cold = Array2::zeros((3, 2));
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        let sub = SubKnowledgeGraph::from_triples(UserId(0), vec![Triple::new(0, 0, 3)]);
        let s = bare_state(sub, array![[0.0, 0.0], [0.0, 0.0]], array![1.0, 1.0]);
        let l = local_loss(&s, &ctx, &[(PoiId(0), PoiId(1)), (PoiId(0), PoiId(2))]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(local_loss(&s, &ctx, &[]).is_err());
    }

    #[test]
    fn isolated_poi_gradient_is_sparse() {
        let cat = catalog();
        let cold = Array2::from_elem((3, 2), 0.2);
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        // POI 0 and 1 unconnected to each other: two separate edges to non-POI entities
        let sub = SubKnowledgeGraph::from_triples(
            UserId(0),
            vec![Triple::new(0, 0, 3), Triple::new(1, 0, 4)],
        );
        let s = bare_state(
            sub,
            array![[0.2, 0.1], [0.3, -0.2], [0.0, 0.4], [0.1, 0.1]],
            array![0.5, -0.5],
        );
        let (_, g) = local_loss_and_grad(&s, &ctx, &[(PoiId(0), PoiId(2))]).unwrap();
        assert_eq!(g.shared.keys().copied().collect::<Vec<_>>(), vec![EntityId(0)]);
    }

    #[test]
    fn zero_mu_update_is_local_sgd() {
        let cat = catalog();
        let cold = Array2::zeros((3, 2));
        let ctx = DeviceContext { catalog: &cat, cold: &cold };
        let sub = SubKnowledgeGraph::from_triples(UserId(0), vec![Triple::new(0, 0, 3)]);
        let s0 = bare_state(sub, array![[0.2, 0.1], [0.3, 0.3]], array![0.5, -0.2]);
        let batch = [(PoiId(0), PoiId(1))];
        let (_, own) = local_loss_and_grad(&s0, &ctx, &batch).unwrap();
        let hp = Hyperparams {
            mu: 0.0,
            gamma: 0.5,
            ..Default::default()
        };
        let mut a = s0.clone();
        let mut b = s0.clone();
        let msg = GradientMessage {
            sender: UserId(7),
            round: 0,
            grads: BTreeMap::from([(EntityId(0), array![100.0, -100.0])]),
        };
        let w = BTreeMap::from([(UserId(7), 1.0)]);
        apply_update(&mut a, &own, &[&msg], &w, &hp).unwrap();
        local_sgd_step(&mut b, &own, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sender_weight_mismatch_rejected() {
        let sub = SubKnowledgeGraph::from_triples(UserId(0), vec![Triple::new(0, 0, 3)]);
        let mut s = bare_state(sub, array![[0.2], [0.3]], array![0.5]);
        let own = LocalGradients {
            shared: BTreeMap::new(),
            user: array![0.0],
            bridge: None,
            layers: vec![],
        };
        let msg = GradientMessage {
            sender: UserId(1),
            round: 0,
            grads: BTreeMap::new(),
        };
        let w = BTreeMap::from([(UserId(2), 1.0)]);
        let hp = Hyperparams::default();
        assert!(apply_update(&mut s, &own, &[&msg], &w, &hp).is_err());
        assert!(apply_update(&mut s, &own, &[], &w, &hp).is_err());
    }

    #[test]
    fn message_bytes_are_canonical() {
        let msg = GradientMessage {
            sender: UserId(3),
            round: 2,
            grads: BTreeMap::from([
                (EntityId(9), array![1.0f64, 2.0]),
                (EntityId(4), array![-1.0, 0.5]),
            ]),
        };
        let b = msg.to_bytes();
        assert_eq!(b.len(), 12 + 2 * (4 + 16));
        assert_eq!(&b[12..16], &4u32.to_le_bytes());
        assert_eq!(&b[16..24], &(-1.0f64).to_le_bytes());
        assert_eq!(&b[32..36], &9u32.to_le_bytes());
    }

    #[test]
    fn negatives_avoid_training_pois() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let train = [PoiId(0), PoiId(2)];
        let b = sample_local_batch(&train, 4, 3, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|(_, n)| n.0 == 1 || n.0 == 3));
        assert!(sample_local_batch(&[PoiId(0), PoiId(1)], 2, 1, &mut rng).is_err());
    }
}
