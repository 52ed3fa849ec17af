//! Pipeline driver.
//!
//! Step 1 pretrains the knowledge graph on the server. Step 2 has every
//! client desensitize its training check-ins and upload them; the server
//! partitions sub-graphs and assigns neighbors from the uploads alone. Step 3
//! runs synchronous rounds on the devices: local batch, gradient messages to
//! the users that listed the sender as a neighbor, blended update, and
//! periodic validation.
//!
//! Every stage is a plain function so the command line can run them one at a
//! time through files and get the same numbers as [`run_in_memory`].
//!
//! Model selection is per device: each client keeps a snapshot of its best
//! validation NDCG@10 (a tie counts as no worse and moves the snapshot
//! forward) and stops updating after `patience` validations without one.
//! Frozen clients keep sending gradients. Since no decision depends on
//! another client's metrics, clients stay independent when messages are off.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{
    apply_update, local_loss_and_grad, sample_local_batch, ClientState, DeviceContext,
    GradientMessage, LocalGradients,
};
use crate::dataio::{Dataset, CATALOG_FILE, CHECKINS_FILE, KG_FILE, LABELS_FILE};
use crate::domain::{CheckInHistory, Hyperparams, PoiCatalog, UserId};
use crate::embedding::{propagate, EmbeddingState};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, ndcg_at_k, rank_for_user, recall_at_k, split_history, CandidateMode, Holdout,
    MetricsReport, Split,
};
use crate::kgstore::{partition_one_hop, partition_subkg, KnowledgeGraph, SubKnowledgeGraph};
use crate::neighbors::{assign_neighbors, NeighborSet, UserProfile};
use crate::pretrain::{pretrain, PretrainOptions, PretrainReport};
use crate::privacy::{desensitize, passthrough_count, DesensitizedHistory};
use crate::rng::stream;
use crate::scalar::Scalar;

pub const CONFIG_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const EVENTS_FILE: &str = "events.jsonl";

/// Components switched off for an ablation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// One-hop sub-graphs instead of the meta-path closure.
    pub no_meta_path: bool,
    /// No client-client gradient exchange.
    pub no_communication: bool,
    /// Random embeddings instead of server pretraining.
    pub no_pretrain: bool,
}

impl Ablation {
    /// Parses `full`, `no-mp`, `no-cc` or `no-p`.
    pub fn parse(tag: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match tag {
            "full" => {}
            "no-mp" => a.no_meta_path = true,
            "no-cc" => a.no_communication = true,
            "no-p" => a.no_pretrain = true,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation {other:?} (expected full, no-mp, no-cc or no-p)"
                )))
            }
        }
        Ok(a)
    }

    pub fn tag(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_meta_path, "no-mp"),
            (self.no_communication, "no-cc"),
            (self.no_pretrain, "no-p"),
        ]
        .into_iter()
        .filter_map(|(on, t)| on.then_some(t))
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub candidates: CandidateMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![10, 20],
            candidates: CandidateMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub schema: u32,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Run output directory.
    pub out: Option<PathBuf>,
    pub hyperparams: Hyperparams,
    pub ablation: Ablation,
    pub eval: EvalSettings,
    /// Check uploads and messages against the privacy boundary while running.
    pub audit: bool,
    /// Shard pretraining batches over the worker pool.
    pub parallel_pretrain: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            schema: CONFIG_SCHEMA,
            data: None,
            out: None,
            hyperparams: Hyperparams::default(),
            ablation: Ablation::default(),
            eval: EvalSettings::default(),
            audit: true,
            parallel_pretrain: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::InvalidArgument("k list must be non-empty and >= 1".into()));
        }
        self.hyperparams.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded. Paths are left out
    /// so the hash names the experiment rather than where it ran.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

// ---------------------------------------------------------------------------
// stages

/// Per-user 8:1:1 split, each user on its own stream.
pub fn split_users(histories: &[CheckInHistory], seed: u64) -> Split {
    histories
        .iter()
        .map(|h| {
            let mut rng = stream(seed, "split", h.user().0 as u64);
            (h.user(), split_history(h.pois(), &mut rng))
        })
        .collect()
}

/// Training portion of every history, which is all a client ever uploads.
pub fn train_histories(split: &Split, catalog: &PoiCatalog) -> Result<Vec<CheckInHistory>> {
    split
        .iter()
        .map(|(u, s)| CheckInHistory::new(*u, s.train.clone(), catalog))
        .collect()
}

/// Server pretraining. Without pretraining the initial draw is returned.
pub fn pretrain_stage<T: Scalar>(
    kg: &KnowledgeGraph,
    hp: &Hyperparams,
    no_pretrain: bool,
    parallel: bool,
) -> Result<PretrainReport<T>> {
    let mut hp = hp.clone();
    if no_pretrain {
        hp.epochs_pretrain = 0;
    }
    let mut rng = stream(hp.seed, "pretrain", 0);
    let opts = PretrainOptions {
        parallel,
        train_triples: None,
    };
    pretrain(kg, &hp, &opts, &mut rng)
}

pub fn desensitize_all<T: Scalar>(
    histories: &[CheckInHistory],
    catalog: &PoiCatalog,
    emb: &Array2<T>,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<DesensitizedHistory>> {
    histories
        .par_iter()
        .map(|h| {
            let mut rng = stream(seed, "desensitize", h.user().0 as u64);
            desensitize(h, catalog, emb, T::of(epsilon), &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadStats {
    pub positions: usize,
    /// Positions left unchanged because their category has a single POI.
    pub passthrough: usize,
    /// Positions whose substitute lies in another segment.
    pub segment_changed: usize,
}

impl UploadStats {
    pub fn segment_distortion_rate(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.segment_changed as f64 / self.positions as f64
        }
    }
}

pub fn upload_stats(
    histories: &[CheckInHistory],
    uploads: &[DesensitizedHistory],
    catalog: &PoiCatalog,
) -> Result<UploadStats> {
    let mut s = UploadStats::default();
    for (h, up) in histories.iter().zip(uploads) {
        s.positions += h.len();
        s.passthrough += passthrough_count(h, catalog);
        for (a, b) in h.pois().iter().zip(&up.pois) {
            if catalog.segment_of(*a)? != catalog.segment_of(*b)? {
                s.segment_changed += 1;
            }
        }
    }
    Ok(s)
}

/// Every uploaded position must be a same-category substitute of the raw
/// position, and differ from it unless the category is a singleton.
pub fn audit_uploads(
    histories: &[CheckInHistory],
    uploads: &[DesensitizedHistory],
    catalog: &PoiCatalog,
) -> Result<()> {
    let by_user: BTreeMap<UserId, &DesensitizedHistory> =
        uploads.iter().map(|u| (u.user, u)).collect();
    for h in histories {
        let up = by_user
            .get(&h.user())
            .ok_or_else(|| Error::Audit(format!("user {} has no upload", h.user())))?;
        if up.pois.len() != h.len() {
            return Err(Error::Audit(format!(
                "user {}: upload length {} differs from history length {}",
                h.user(),
                up.pois.len(),
                h.len()
            )));
        }
        for (i, (raw, sent)) in h.pois().iter().zip(&up.pois).enumerate() {
            let c = catalog.category_of(*raw)?;
            if catalog.category_of(*sent)? != c {
                return Err(Error::Audit(format!(
                    "user {} position {i}: substitute {sent} leaves category {c}",
                    h.user()
                )));
            }
            if raw == sent && catalog.pois_in_category(c).len() > 1 {
                return Err(Error::Audit(format!(
                    "user {} position {i}: raw poi {raw} uploaded unchanged",
                    h.user()
                )));
            }
        }
    }
    Ok(())
}

pub fn partition_all(
    kg: &KnowledgeGraph,
    catalog: &PoiCatalog,
    uploads: &[DesensitizedHistory],
    hop_limit: Option<usize>,
    one_hop: bool,
) -> Result<Vec<SubKnowledgeGraph>> {
    uploads
        .par_iter()
        .map(|u| {
            if one_hop {
                partition_one_hop(kg, catalog, u)
            } else {
                partition_subkg(kg, catalog, u, hop_limit)
            }
        })
        .collect()
}

/// Neighbor sets from uploads and the layer-0 entity table. Users with an
/// empty upload get no profile.
pub fn neighbors_all<T: Scalar>(
    uploads: &[DesensitizedHistory],
    catalog: &PoiCatalog,
    emb: &Array2<T>,
    cap: usize,
) -> Result<BTreeMap<UserId, NeighborSet<T>>> {
    let profiles = uploads
        .iter()
        .filter(|u| !u.pois.is_empty())
        .map(|u| UserProfile::build(u, catalog, emb))
        .collect::<Result<Vec<_>>>()?;
    assign_neighbors(&profiles, cap)
}

/// Frozen server-side propagated embedding of every POI, used for POIs
/// outside a client's sub-graph.
pub fn cold_table<T: Scalar>(
    kg: &KnowledgeGraph,
    catalog: &PoiCatalog,
    emb: &EmbeddingState<T>,
    layers: usize,
) -> Result<Array2<T>> {
    let layered = propagate(kg, emb, layers.min(emb.n_layers()))?;
    let mut out = Array2::zeros((catalog.n_pois(), emb.dim_entity()));
    for p in catalog.pois() {
        out.row_mut(p.index())
            .assign(&layered.row(catalog.entity_of(p)?.index()));
    }
    Ok(out)
}

/// One client per user of `split`, in user order. Users without a sub-graph
/// get an empty one. With `neighbors`, each client learns which of its
/// entities its neighbors' sub-graphs share.
pub fn deploy<T: Scalar>(
    split: &Split,
    subkgs: &BTreeMap<UserId, SubKnowledgeGraph>,
    neighbors: Option<&BTreeMap<UserId, NeighborSet<T>>>,
    pretrained: &EmbeddingState<T>,
    hp: &Hyperparams,
) -> Result<Vec<ClientState<T>>> {
    split
        .iter()
        .map(|(u, s)| {
            let sub = subkgs
                .get(u)
                .cloned()
                .unwrap_or_else(|| SubKnowledgeGraph::from_triples(*u, Vec::new()));
            let mut rng = stream(hp.seed, "client-init", u.0 as u64);
            let mut c = ClientState::new(*u, s.train.clone(), sub, pretrained, hp, &mut rng)?;
            if let Some(n) = neighbors.and_then(|n| n.get(u)) {
                c.set_neighbor_entities(n.members().filter_map(|j| subkgs.get(&j)));
            }
            Ok(c)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// rounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub mean_loss: f64,
    /// Deliveries: one per (recipient, neighbor that sent) pair.
    pub messages: usize,
    pub payload_bytes: usize,
    /// Clients that applied an update this round.
    pub active_clients: usize,
    pub val_ndcg10: Option<f64>,
    pub val_recall10: Option<f64>,
}

/// What the round observer sees after messages are built and before any
/// update is applied.
pub struct RoundTrace<'a, T> {
    pub round: usize,
    /// Keyed by sender.
    pub messages: &'a BTreeMap<UserId, GradientMessage<T>>,
    pub clients: &'a [ClientState<T>],
    pub neighbors: &'a BTreeMap<UserId, NeighborSet<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSettings {
    pub communication: bool,
    pub audit: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Best-validation snapshot of every client, in user order.
    pub clients: Vec<ClientState<T>>,
    pub rounds: Vec<RoundReport>,
    /// Mean validation NDCG@10 and Recall@10 before the first round.
    pub initial_validation: Option<(f64, f64)>,
}

/// A neighbor-bound message may only carry entities of the sender's
/// sub-graph and must not contain any user-vector value.
pub fn audit_message<T: Scalar>(msg: &GradientMessage<T>, sender: &ClientState<T>) -> Result<()> {
    if msg.sender != sender.user {
        return Err(Error::Audit(format!(
            "message from {} checked against client {}",
            msg.sender, sender.user
        )));
    }
    let user_bits: HashSet<u64> = sender
        .user_emb
        .iter()
        .map(|v| v.as_f64())
        .filter(|v| *v != 0.0)
        .map(f64::to_bits)
        .collect();
    for (e, g) in &msg.grads {
        if !sender.subkg.contains_entity(*e) {
            return Err(Error::Audit(format!(
                "client {} sent a gradient for entity {e} outside its sub-graph",
                sender.user
            )));
        }
        if g.iter().any(|v| user_bits.contains(&v.as_f64().to_bits())) {
            return Err(Error::Audit(format!(
                "client {} message carries a user-vector value",
                sender.user
            )));
        }
    }
    Ok(())
}

fn validate_clients<T: Scalar>(
    clients: &[ClientState<T>],
    ctx: &DeviceContext<'_, T>,
    split: &Split,
) -> Result<Vec<Option<(f64, f64)>>> {
    clients
        .par_iter()
        .map(|c| {
            let (rank, rel) = rank_for_user(c, ctx, split, Holdout::Validation, CandidateMode::Full)?;
            if rel.is_empty() {
                return Ok(None);
            }
            Ok(Some((ndcg_at_k(&rank, &rel, 10)?, recall_at_k(&rank, &rel, 10)?)))
        })
        .collect()
}

fn mean_validation(v: &[Option<(f64, f64)>]) -> Option<(f64, f64)> {
    let some: Vec<(f64, f64)> = v.iter().flatten().copied().collect();
    if some.is_empty() {
        return None;
    }
    let n = some.len() as f64;
    Some((
        some.iter().map(|x| x.0).sum::<f64>() / n,
        some.iter().map(|x| x.1).sum::<f64>() / n,
    ))
}

/// Synchronous on-device rounds. `clients` must be sorted by user.
pub fn train_clients<T: Scalar>(
    mut clients: Vec<ClientState<T>>,
    ctx: &DeviceContext<'_, T>,
    neighbors: &BTreeMap<UserId, NeighborSet<T>>,
    split: &Split,
    hp: &Hyperparams,
    settings: TrainSettings,
    observer: &mut dyn FnMut(&RoundTrace<'_, T>),
) -> Result<TrainOutcome<T>> {
    if !clients.windows(2).all(|w| w[0].user < w[1].user) {
        return Err(Error::InvalidArgument("clients must be sorted by user".into()));
    }
    let n_pois = ctx.catalog.n_pois();
    let index: BTreeMap<UserId, usize> = clients.iter().enumerate().map(|(i, c)| (c.user, i)).collect();
    let empty: BTreeMap<UserId, T> = BTreeMap::new();

    let initial = validate_clients(&clients, ctx, split)?;
    let initial_validation = mean_validation(&initial);
    let mut best: Vec<Option<(f64, ClientState<T>)>> = initial
        .iter()
        .zip(&clients)
        .map(|(v, c)| v.map(|(n, _)| (n, c.clone())))
        .collect();
    let mut stale = vec![0usize; clients.len()];
    let mut frozen = vec![false; clients.len()];
    let mut rounds = Vec::with_capacity(hp.rounds_train);

    for round in 1..=hp.rounds_train {
        let results: Vec<Option<(T, LocalGradients<T>)>> = clients
            .par_iter()
            .map(|c| {
                if c.train.is_empty() {
                    return Ok(None);
                }
                let key = ((round as u64) << 32) | c.user.0 as u64;
                let mut rng = stream(hp.seed, "batch", key);
                let batch = sample_local_batch(&c.train, n_pois, hp.negatives_per_positive, &mut rng)?;
                local_loss_and_grad(c, ctx, &batch).map(Some)
            })
            .collect::<Result<_>>()?;

        let mut total = 0.0;
        let mut counted = 0usize;
        for (loss, _) in results.iter().flatten() {
            let l = loss.as_f64();
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: "train",
                    epoch: round,
                });
            }
            total += l;
            counted += 1;
        }

        let round_tag = u32::try_from(round).unwrap_or(u32::MAX);
        let messages: BTreeMap<UserId, GradientMessage<T>> = if settings.communication {
            clients
                .iter()
                .zip(&results)
                .filter_map(|(c, r)| {
                    r.as_ref().map(|(_, g)| {
                        (
                            c.user,
                            GradientMessage {
                                sender: c.user,
                                round: round_tag,
                                grads: g.shared.clone(),
                            },
                        )
                    })
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        if settings.audit {
            for m in messages.values() {
                audit_message(m, &clients[index[&m.sender]])?;
            }
        }
        let sizes: BTreeMap<UserId, usize> =
            messages.iter().map(|(u, m)| (*u, m.to_bytes().len())).collect();
        let mut deliveries = 0usize;
        let mut payload_bytes = 0usize;
        for c in &clients {
            if let Some(n) = neighbors.get(&c.user) {
                for j in n.members() {
                    if let Some(sz) = sizes.get(&j) {
                        deliveries += 1;
                        payload_bytes += sz;
                    }
                }
            }
        }
        observer(&RoundTrace {
            round,
            messages: &messages,
            clients: &clients,
            neighbors,
        });

        let active = clients
            .par_iter_mut()
            .zip(results.par_iter())
            .zip(frozen.par_iter())
            .map(|((c, r), &fz)| {
                let Some((_, own)) = r else { return Ok(0usize) };
                if fz {
                    return Ok(0);
                }
                let (inbox, weights): (Vec<&GradientMessage<T>>, BTreeMap<UserId, T>) =
                    match neighbors.get(&c.user) {
                        Some(n) if settings.communication => {
                            let inbox: Vec<_> = n.members().filter_map(|j| messages.get(&j)).collect();
                            let weights = inbox.iter().map(|m| (m.sender, n.weights[&m.sender])).collect();
                            (inbox, weights)
                        }
                        _ => (Vec::new(), empty.clone()),
                    };
                apply_update(c, own, &inbox, &weights, hp).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence {
                        stage: "train",
                        epoch: round,
                    },
                    e => e,
                })?;
                Ok(1)
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum();

        let mut report = RoundReport {
            round,
            mean_loss: if counted == 0 { 0.0 } else { total / counted as f64 },
            messages: deliveries,
            payload_bytes,
            active_clients: active,
            val_ndcg10: None,
            val_recall10: None,
        };
        if round % hp.validate_every == 0 || round == hp.rounds_train {
            let v = validate_clients(&clients, ctx, split)?;
            for (i, vi) in v.iter().enumerate() {
                let Some((ndcg, _)) = vi else { continue };
                if frozen[i] {
                    continue;
                }
                match &best[i] {
                    Some((b, _)) if ndcg < b => {
                        stale[i] += 1;
                        if stale[i] >= hp.patience {
                            frozen[i] = true;
                        }
                    }
                    _ => {
                        best[i] = Some((*ndcg, clients[i].clone()));
                        stale[i] = 0;
                    }
                }
            }
            if let Some((n, r)) = mean_validation(&v) {
                report.val_ndcg10 = Some(n);
                report.val_recall10 = Some(r);
            }
        }
        log::debug!(
            "round {round}: loss {:.6}, {} messages, {} active",
            report.mean_loss,
            report.messages,
            report.active_clients
        );
        rounds.push(report);
        if frozen.iter().all(|f| *f) {
            break;
        }
    }

    for (c, b) in clients.iter_mut().zip(best) {
        if let Some((_, snap)) = b {
            *c = snap;
        }
    }
    Ok(TrainOutcome {
        clients,
        rounds,
        initial_validation,
    })
}

// ---------------------------------------------------------------------------
// whole pipeline

/// Server-side products of step 2.
#[derive(Debug, Clone)]
pub struct ServerSide<T> {
    pub uploads: Vec<DesensitizedHistory>,
    pub upload_stats: UploadStats,
    pub subkgs: BTreeMap<UserId, SubKnowledgeGraph>,
    pub neighbors: BTreeMap<UserId, NeighborSet<T>>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub metrics: MetricsReport,
    pub rounds: Vec<RoundReport>,
    pub pretrain_loss: Vec<f64>,
    pub upload_stats: UploadStats,
    pub initial_validation: Option<(f64, f64)>,
    pub clients: Vec<ClientState<T>>,
}

/// Desensitize, upload, partition and assign neighbors.
pub fn server_side<T: Scalar>(
    ds: &Dataset,
    cfg: &SimulationConfig,
    split: &Split,
    pretrained: &EmbeddingState<T>,
    epsilon: f64,
) -> Result<ServerSide<T>> {
    let hp = &cfg.hyperparams;
    let catalog = &ds.public.catalog;
    let train = train_histories(split, catalog).map_err(|e| e.in_stage("desensitize"))?;
    let uploads = desensitize_all(&train, catalog, &pretrained.entity, epsilon, hp.seed)
        .map_err(|e| e.in_stage("desensitize"))?;
    if cfg.audit {
        audit_uploads(&train, &uploads, catalog).map_err(|e| e.in_stage("desensitize"))?;
    }
    let upload_stats = upload_stats(&train, &uploads, catalog)?;
    let subkgs = partition_all(&ds.public.kg, catalog, &uploads, hp.hop_limit, cfg.ablation.no_meta_path)
        .map_err(|e| e.in_stage("partition"))?
        .into_iter()
        .map(|s| (s.owner, s))
        .collect();
    let neighbors = neighbors_all(&uploads, catalog, &pretrained.entity, hp.neighbor_cap)
        .map_err(|e| e.in_stage("neighbors"))?;
    Ok(ServerSide {
        uploads,
        upload_stats,
        subkgs,
        neighbors,
    })
}

/// Deploy, train and evaluate on the test split.
pub fn on_device<T: Scalar>(
    ds: &Dataset,
    cfg: &SimulationConfig,
    hp: &Hyperparams,
    split: &Split,
    pretrained: &EmbeddingState<T>,
    server: &ServerSide<T>,
    observer: &mut dyn FnMut(&RoundTrace<'_, T>),
) -> Result<(MetricsReport, TrainOutcome<T>)> {
    let catalog = &ds.public.catalog;
    let cold = cold_table(&ds.public.kg, catalog, pretrained, hp.layers).map_err(|e| e.in_stage("train"))?;
    let ctx = DeviceContext {
        catalog,
        cold: &cold,
    };
    let shared = (!cfg.ablation.no_communication).then_some(&server.neighbors);
    let clients = deploy(split, &server.subkgs, shared, pretrained, hp).map_err(|e| e.in_stage("train"))?;
    let settings = TrainSettings {
        communication: !cfg.ablation.no_communication,
        audit: cfg.audit,
    };
    let outcome = train_clients(clients, &ctx, &server.neighbors, split, hp, settings, observer)
        .map_err(|e| e.in_stage("train"))?;
    let metrics = evaluate(
        &outcome.clients,
        &ctx,
        split,
        Holdout::Test,
        &cfg.eval.ks,
        cfg.eval.candidates,
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    Ok((metrics, outcome))
}

/// The whole pipeline without touching the file system.
pub fn run_in_memory<T: Scalar>(
    ds: &Dataset,
    cfg: &SimulationConfig,
    observer: &mut dyn FnMut(&RoundTrace<'_, T>),
) -> Result<PipelineOutput<T>> {
    cfg.validate()?;
    let hp = &cfg.hyperparams;
    let split = split_users(&ds.histories, hp.seed);
    let pre = pretrain_stage::<T>(&ds.public.kg, hp, cfg.ablation.no_pretrain, cfg.parallel_pretrain)
        .map_err(|e| e.in_stage("pretrain"))?;
    let server = server_side(ds, cfg, &split, &pre.state, hp.epsilon)?;
    let (metrics, outcome) = on_device(ds, cfg, hp, &split, &pre.state, &server, observer)?;
    Ok(PipelineOutput {
        metrics,
        rounds: outcome.rounds,
        pretrain_loss: pre.loss_trace,
        upload_stats: server.upload_stats,
        initial_validation: outcome.initial_validation,
        clients: outcome.clients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub mu: f64,
    pub metrics: MetricsReport,
}

/// Runs every (ε, μ) cell on one pretrained state, redoing step 2 once per ε.
pub fn sweep<T: Scalar>(
    ds: &Dataset,
    cfg: &SimulationConfig,
    pretrained: &EmbeddingState<T>,
    epsilons: &[f64],
    mus: &[f64],
) -> Result<Vec<SweepCell>> {
    if epsilons.is_empty() || mus.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    cfg.validate()?;
    let split = split_users(&ds.histories, cfg.hyperparams.seed);
    let mut cells = Vec::with_capacity(epsilons.len() * mus.len());
    for &epsilon in epsilons {
        let mut hp = cfg.hyperparams.clone();
        hp.epsilon = epsilon;
        hp.validate()?;
        let server = server_side(ds, cfg, &split, pretrained, epsilon)?;
        for &mu in mus {
            hp.mu = mu;
            hp.validate()?;
            let (metrics, _) = on_device(ds, cfg, &hp, &split, pretrained, &server, &mut |_| {})?;
            log::info!("sweep epsilon={epsilon} mu={mu}: NDCG@10 {:.4}", metrics.ndcg(10));
            cells.push(SweepCell { epsilon, mu, metrics });
        }
    }
    Ok(cells)
}

pub fn format_sweep_csv(cells: &[SweepCell], ks: &[usize]) -> String {
    let mut s = String::from("epsilon,mu");
    for k in ks {
        s.push_str(&format!(",NDCG@{k},Recall@{k}"));
    }
    s.push('\n');
    for c in cells {
        s.push_str(&format!("{},{}", c.epsilon, c.mu));
        for &k in ks {
            s.push_str(&format!(",{},{}", c.metrics.ndcg(k), c.metrics.recall(k)));
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// run directory artifacts

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Object id of `bytes` as git computes it in a SHA-256 repository.
pub fn git_object_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hashes of the dataset files that exist in `dir`.
pub fn hash_dataset_inputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for f in [CHECKINS_FILE, CATALOG_FILE, KG_FILE, LABELS_FILE] {
        let p = dir.join(f);
        if p.exists() {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            out.insert(f.to_string(), git_object_hash(&bytes));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub started_ms: u128,
    pub finished_ms: Option<u128>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageRecord>,
    /// File name → git-style content hash.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip)]
    dir: PathBuf,
}

impl RunManifest {
    /// Claims `out` for a new run. Fails if a manifest is already there.
    pub fn create(out: &Path, cfg: &SimulationConfig, inputs: BTreeMap<String, String>) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if path.exists() {
            return Err(Error::RunExists(out.to_path_buf()));
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let m = RunManifest {
            schema: CONFIG_SCHEMA,
            config_hash: cfg.config_hash(),
            seed: cfg.hyperparams.seed,
            ablation: cfg.ablation.tag(),
            status: RunStatus::Running,
            failed_stage: None,
            error: None,
            stages: Vec::new(),
            inputs,
            dir: out.to_path_buf(),
        };
        m.save()?;
        Ok(m)
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)?;
        m.dir = out.to_path_buf();
        Ok(m)
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn begin(&mut self, stage: &str) -> Result<()> {
        self.stages.push(StageRecord {
            name: stage.to_string(),
            started_ms: now_ms(),
            finished_ms: None,
        });
        self.save()
    }

    pub fn end(&mut self, stage: &str) -> Result<()> {
        if let Some(s) = self.stages.iter_mut().rev().find(|s| s.name == stage) {
            s.finished_ms = Some(now_ms());
        }
        self.save()
    }

    /// Marks the run and its partial outputs invalid.
    pub fn fail(&mut self, stage: &str, err: &impl std::fmt::Display) -> Result<()> {
        self.status = RunStatus::Invalid;
        self.failed_stage = Some(stage.to_string());
        self.error = Some(err.to_string());
        self.save()
    }

    pub fn complete(&mut self) -> Result<()> {
        self.status = RunStatus::Complete;
        self.save()
    }
}

/// Line-delimited JSON event log.
pub struct EventLog {
    out: BufWriter<File>,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            out: BufWriter::new(f),
        })
    }

    pub fn emit(&mut self, event: &str, fields: serde_json::Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), event.into());
        if let serde_json::Value::Object(m) = fields {
            obj.extend(m);
        }
        let line = serde_json::to_string(&obj)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("events", e))?;
        self.out.flush().map_err(|e| Error::io("events", e))
    }
}

/// Metrics as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub ablation: String,
    pub users_evaluated: usize,
    /// Keyed by k.
    pub at: BTreeMap<usize, crate::eval::AtK>,
}

impl MetricsFile {
    pub fn new(dataset: &str, cfg: &SimulationConfig, report: &MetricsReport) -> Self {
        MetricsFile {
            dataset: dataset.to_string(),
            seed: cfg.hyperparams.seed,
            config_hash: cfg.config_hash(),
            ablation: cfg.ablation.tag(),
            users_evaluated: report.users_evaluated,
            at: report.at.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One header and one row: `ablation,NDCG@k,Recall@k,...`.
    pub fn to_csv(&self) -> String {
        let mut head = String::from("ablation");
        let mut row = self.ablation.clone();
        for (k, m) in &self.at {
            head.push_str(&format!(",NDCG@{k},Recall@{k}"));
            row.push_str(&format!(",{},{}", m.ndcg, m.recall));
        }
        format!("{head}\n{row}\n")
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let j = out.join(METRICS_JSON);
        fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = out.join(METRICS_CSV);
        fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))
    }
}

pub fn format_rounds_csv(rounds: &[RoundReport]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("round,mean_loss,messages,payload_bytes,active_clients,val_ndcg10,val_recall10\n");
    for r in rounds {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.mean_loss,
            r.messages,
            r.payload_bytes,
            r.active_clients,
            opt(r.val_ndcg10),
            opt(r.val_recall10)
        ));
    }
    s
}
