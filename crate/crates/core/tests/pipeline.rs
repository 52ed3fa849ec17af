//! Whole-pipeline properties on a small synthetic dataset.

use deckg::client::DeviceContext;
use deckg::dataio::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use deckg::eval::{evaluate, Holdout};
use deckg::orchestrator::{
    cold_table, deploy, partition_all, pretrain_stage, run_in_memory, split_users, Ablation, SimulationConfig,
};
use deckg::privacy::DesensitizedHistory;
use deckg::{CheckInHistory, PoiId, UserId};

fn dataset(seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_users: 24,
        n_pois: 80,
        n_categories: 5,
        n_segments: 9,
        n_relations: 8,
        n_triples: 500,
        tags_per_category: 3,
        checkins_per_user: 25,
        preference_clusters: 3,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    (dir, ds)
}

fn cfg(ablation: &str) -> SimulationConfig {
    let mut c = SimulationConfig { ablation: Ablation::parse(ablation).unwrap(), ..Default::default() };
    let hp = &mut c.hyperparams;
    hp.epochs_pretrain = 5;
    hp.rounds_train = 6;
    hp.validate_every = 2;
    hp.dim_entity = 8;
    hp.dim_relation = 8;
    hp.dim_user = 8;
    c
}

/// Replaces user 0's history with the last 30 catalog POIs.
fn perturb_user_zero(ds: &mut Dataset) {
    let n = ds.public.catalog.n_pois() as u32;
    let pois: Vec<PoiId> = (0..30).map(|i| PoiId((n - 1 - i) % n)).collect();
    ds.histories[0] = CheckInHistory::new(UserId(0), pois, &ds.public.catalog).unwrap();
}

fn client_json(out: &deckg::orchestrator::PipelineOutput<f64>) -> Vec<(UserId, String)> {
    out.clients
        .iter()
        .map(|c| (c.user, serde_json::to_string(c).unwrap()))
        .collect()
}

#[test]
fn without_communication_clients_are_independent() {
    let (_d, ds) = dataset(4);
    let mut other = ds.clone();
    perturb_user_zero(&mut other);
    let c = cfg("no-cc");
    let a = client_json(&run_in_memory::<f64>(&ds, &c, &mut |_| {}).unwrap());
    let b = client_json(&run_in_memory::<f64>(&other, &c, &mut |_| {}).unwrap());
    assert_eq!(a.len(), b.len());
    let mut changed_self = false;
    for ((ua, ja), (ub, jb)) in a.iter().zip(&b) {
        assert_eq!(ua, ub);
        if *ua == UserId(0) {
            changed_self = ja != jb;
        } else {
            assert_eq!(ja, jb, "client {ua} moved when only user 0 changed");
        }
    }
    assert!(changed_self);
}

#[test]
fn with_communication_a_change_reaches_neighbors() {
    let (_d, ds) = dataset(4);
    let mut other = ds.clone();
    perturb_user_zero(&mut other);
    let c = cfg("full");
    let a = client_json(&run_in_memory::<f64>(&ds, &c, &mut |_| {}).unwrap());
    let b = client_json(&run_in_memory::<f64>(&other, &c, &mut |_| {}).unwrap());
    let moved = a
        .iter()
        .zip(&b)
        .filter(|((u, ja), (_, jb))| *u != UserId(0) && ja != jb)
        .count();
    assert!(moved > 0);
}

#[test]
fn zero_rounds_equal_scoring_initial_embeddings() {
    let (_d, ds) = dataset(5);
    let mut c = cfg("full");
    c.ablation = Ablation { no_meta_path: true, no_communication: true, no_pretrain: true };
    c.hyperparams.rounds_train = 0;
    let out = run_in_memory::<f64>(&ds, &c, &mut |_| {}).unwrap();
    assert!(out.rounds.is_empty());

    // the same thing assembled by hand
    let hp = &c.hyperparams;
    let split = split_users(&ds.histories, hp.seed);
    let pre = pretrain_stage::<f64>(&ds.public.kg, hp, true, false).unwrap();
    assert!(pre.loss_trace.is_empty());
    let uploads: Vec<DesensitizedHistory> = deckg::orchestrator::desensitize_all(
        &deckg::orchestrator::train_histories(&split, &ds.public.catalog).unwrap(),
        &ds.public.catalog,
        &pre.state.entity,
        hp.epsilon,
        hp.seed,
    )
    .unwrap();
    let subs = partition_all(&ds.public.kg, &ds.public.catalog, &uploads, hp.hop_limit, true)
        .unwrap()
        .into_iter()
        .map(|s| (s.owner, s))
        .collect();
    let clients = deploy(&split, &subs, None, &pre.state, hp).unwrap();
    let cold = cold_table(&ds.public.kg, &ds.public.catalog, &pre.state, hp.layers).unwrap();
    let ctx = DeviceContext { catalog: &ds.public.catalog, cold: &cold };
    let direct = evaluate(&clients, &ctx, &split, Holdout::Test, &c.eval.ks, c.eval.candidates).unwrap();
    assert_eq!(out.metrics, direct);
}

#[test]
fn same_seed_same_metrics() {
    let (_d, ds) = dataset(6);
    let c = cfg("full");
    let a = run_in_memory::<f64>(&ds, &c, &mut |_| {}).unwrap();
    let b = run_in_memory::<f64>(&ds, &c, &mut |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(client_json(&a), client_json(&b));
}

#[test]
fn pretraining_reduces_loss_on_the_public_graph() {
    let (_d, ds) = dataset(7);
    let mut hp = cfg("full").hyperparams;
    hp.epochs_pretrain = 20;
    let rep = pretrain_stage::<f64>(&ds.public.kg, &hp, false, false).unwrap();
    assert_eq!(rep.loss_trace.len(), 20);
    assert!(rep.loss_trace[19] < 0.7 * rep.loss_trace[0], "{:?}", rep.loss_trace);
}

#[test]
fn single_precision_pipeline_runs() {
    let (_d, ds) = dataset(8);
    let out = run_in_memory::<f32>(&ds, &cfg("full"), &mut |_| {}).unwrap();
    for k in [10, 20] {
        assert!((0.0..=1.0).contains(&out.metrics.ndcg(k)));
        assert!((0.0..=1.0).contains(&out.metrics.recall(k)));
    }
}
