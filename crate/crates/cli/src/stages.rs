//! One function per pipeline stage. Each reads its inputs from files and
//! writes its outputs to files, so `run` is literally the stage chain.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use deckg::client::{ClientState, DeviceContext};
use deckg::dataio::{
    self, load_dataset, load_public, read_neighbors, read_split, read_subkgs, read_uploads,
    write_subkgs, write_uploads, Dataset, DatasetStats, SyntheticSpec,
};
use deckg::embedding::{read_checkpoint, write_checkpoint, EmbeddingState};
use deckg::eval::{evaluate, Holdout, Split};
use deckg::orchestrator::{
    audit_uploads, cold_table, deploy, desensitize_all, format_rounds_csv, neighbors_all,
    partition_all, pretrain_stage, split_users, train_clients, train_histories, upload_stats,
    MetricsFile, RoundReport, SimulationConfig, TrainSettings, UploadStats,
};
use deckg::{Error, Hyperparams, UserId};
use serde::{Deserialize, Serialize};

use crate::config::adopt_checkpoint_shape;
use crate::CliError;

type Res<T> = Result<T, CliError>;

pub const CONTEXT_FILE: &str = "context.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn staged<T>(stage: &'static str, r: deckg::Result<T>) -> Res<T> {
    r.map_err(|e| CliError::Core(e.in_stage(stage)))
}

/// Name recorded in metrics files: the dataset directory's last component.
pub fn dataset_name(data: &Path) -> String {
    data.file_name()
        .map_or_else(|| data.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn load_ckpt(path: &Path, hp: &mut Hyperparams) -> Res<EmbeddingState<f64>> {
    let (state, ckpt_hp) = read_checkpoint::<f64>(path)?;
    adopt_checkpoint_shape(hp, &ckpt_hp);
    Ok(state)
}

pub fn read_spec(path: &Path) -> Res<SyntheticSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", path.display())))?;
    let bad = |e: String| CliError::Usage(format!("spec {}: {e}", path.display()));
    match path.extension().and_then(|x| x.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
        Some("toml") => toml::from_str(&text).map_err(|e| bad(e.message().to_string())),
        _ => Err(bad("must end in .toml or .json".into())),
    }
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Res<DatasetStats> {
    staged("synth", dataio::generate_synthetic(spec, out))?;
    let ds = staged("synth", load_dataset(out))?;
    Ok(ds.stats)
}

/// Pretrains on the public graph only and writes the checkpoint. Returns
/// the per-epoch mean loss.
pub fn pretrain(data: &Path, ckpt: &Path, cfg: &SimulationConfig) -> Res<Vec<f64>> {
    let public = staged("pretrain", load_public(data))?;
    let hp = &cfg.hyperparams;
    let report = staged(
        "pretrain",
        pretrain_stage::<f64>(&public.kg, hp, cfg.ablation.no_pretrain, cfg.parallel_pretrain),
    )?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    staged("pretrain", write_checkpoint(ckpt, &report.state, hp))?;
    Ok(report.loss_trace)
}

/// Client side of step 2: split each history, desensitize the training
/// part and write the uploads. The split stays with the clients.
pub fn desensitize(
    data: &Path,
    ckpt: &Path,
    out: &Path,
    split_out: &Path,
    cfg: &SimulationConfig,
) -> Res<UploadStats> {
    let mut hp = cfg.hyperparams.clone();
    let pretrained = load_ckpt(ckpt, &mut hp)?;
    let ds = staged("desensitize", load_dataset(data))?;
    let catalog = &ds.public.catalog;
    let split = split_users(&ds.histories, hp.seed);
    let train = staged("desensitize", train_histories(&split, catalog))?;
    let uploads = staged(
        "desensitize",
        desensitize_all(&train, catalog, &pretrained.entity, hp.epsilon, hp.seed),
    )?;
    if cfg.audit {
        staged("desensitize", audit_uploads(&train, &uploads, catalog))?;
    }
    let stats = staged("desensitize", upload_stats(&train, &uploads, catalog))?;
    staged("desensitize", write_uploads(out, &uploads, &ds.public.ids))?;
    write_file(split_out, &dataio::format_split(&split, &ds.public.ids))?;
    Ok(stats)
}

/// Server side: one sub-graph file per uploading user. The catalog is read
/// from the directory holding `kg`.
pub fn partition(kg: &Path, uploads: &Path, out: &Path, cfg: &SimulationConfig) -> Res<usize> {
    let data = kg.parent().unwrap_or(Path::new("."));
    let mut public = staged("partition", load_public(data))?;
    let ups = staged("partition", read_uploads(uploads, &mut public.ids, true))?;
    let subs = staged(
        "partition",
        partition_all(
            &public.kg,
            &public.catalog,
            &ups,
            cfg.hyperparams.hop_limit,
            cfg.ablation.no_meta_path,
        ),
    )?;
    staged("partition", write_subkgs(out, &subs, &public.ids))?;
    Ok(subs.len())
}

/// Server side: neighbor sets from the uploads and the layer-0 entity table.
pub fn neighbors(data: &Path, uploads: &Path, ckpt: &Path, out: &Path, cfg: &SimulationConfig) -> Res<usize> {
    let mut hp = cfg.hyperparams.clone();
    let pretrained = load_ckpt(ckpt, &mut hp)?;
    let mut public = staged("neighbors", load_public(data))?;
    let ups = staged("neighbors", read_uploads(uploads, &mut public.ids, true))?;
    let sets = staged(
        "neighbors",
        neighbors_all(&ups, &public.catalog, &pretrained.entity, hp.neighbor_cap),
    )?;
    let text = staged("neighbors", dataio::format_neighbors(&sets, &public.ids))?;
    write_file(out, &text)?;
    Ok(sets.len())
}

pub struct TrainInputs<'a> {
    pub data: &'a Path,
    pub ckpt: &'a Path,
    pub subkgs: &'a Path,
    pub neighbors: &'a Path,
    pub split: &'a Path,
}

/// What `evaluate` needs to rebuild the device context of a trained run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainContext {
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub config: SimulationConfig,
}

fn client_file(ext: u64) -> String {
    format!("client-{ext}.json")
}

/// Step 3 rounds. Writes every client's best state, the context and the
/// round log into `out`.
pub fn train(inputs: &TrainInputs<'_>, out: &Path, cfg: &SimulationConfig) -> Res<Vec<RoundReport>> {
    let mut cfg = cfg.clone();
    let pretrained = load_ckpt(inputs.ckpt, &mut cfg.hyperparams)?;
    let hp = &cfg.hyperparams;
    let ds = staged("train", load_dataset(inputs.data))?;
    let ids = &ds.public.ids;
    let split = staged("train", read_split(inputs.split, ids))?;
    let subkgs = staged("train", read_subkgs(inputs.subkgs, ids))?;
    let nbrs = staged("train", read_neighbors::<f64>(inputs.neighbors, ids))?;
    let catalog = &ds.public.catalog;
    let cold = staged("train", cold_table(&ds.public.kg, catalog, &pretrained, hp.layers))?;
    let ctx = DeviceContext {
        catalog,
        cold: &cold,
    };
    let communication = !cfg.ablation.no_communication;
    let clients = staged(
        "train",
        deploy(&split, &subkgs, communication.then_some(&nbrs), &pretrained, hp),
    )?;
    let settings = TrainSettings {
        communication,
        audit: cfg.audit,
    };
    let outcome = staged(
        "train",
        train_clients(clients, &ctx, &nbrs, &split, hp, settings, &mut |_| {}),
    )?;

    fs::create_dir_all(out).map_err(io(out))?;
    for c in &outcome.clients {
        let text = serde_json::to_string(c).map_err(Error::from)?;
        write_file(&out.join(client_file(ids.users.ext(c.user.0))), &text)?;
    }
    let context = TrainContext {
        data: inputs.data.to_path_buf(),
        ckpt: inputs.ckpt.to_path_buf(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&context).map_err(Error::from)? + "\n";
    write_file(&out.join(CONTEXT_FILE), &text)?;
    write_file(&out.join("rounds.csv"), &format_rounds_csv(&outcome.rounds))?;
    Ok(outcome.rounds)
}

fn read_clients(dir: &Path, ds: &Dataset, split: &Split) -> Res<Vec<ClientState<f64>>> {
    let mut out: BTreeMap<UserId, ClientState<f64>> = BTreeMap::new();
    for &u in split.keys() {
        let ext = ds.public.ids.users.ext(u.0);
        let path = dir.join(client_file(ext));
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let c: ClientState<f64> = serde_json::from_str(&text).map_err(Error::from)?;
        if c.user != u {
            return Err(CliError::Core(Error::parse(
                path.display(),
                0,
                format!("client file holds user {} instead of {}", c.user, u),
            )));
        }
        out.insert(u, c);
    }
    Ok(out.into_values().collect())
}

/// Test-split metrics of a trained client directory. `ks` overrides the
/// configured cutoffs.
pub fn evaluate_clients(clients: &Path, split_path: &Path, ks: Option<&[usize]>) -> Res<MetricsFile> {
    let ctx_path = clients.join(CONTEXT_FILE);
    let text = fs::read_to_string(&ctx_path).map_err(io(&ctx_path))?;
    let mut context: TrainContext = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(ks) = ks {
        context.config.eval.ks = ks.to_vec();
    }
    context.config.validate()?;
    let cfg = &context.config;
    let (pretrained, _) = read_checkpoint::<f64>(&context.ckpt)?;
    let ds = staged("evaluate", load_dataset(&context.data))?;
    let split = staged("evaluate", read_split(split_path, &ds.public.ids))?;
    let states = read_clients(clients, &ds, &split)?;
    let catalog = &ds.public.catalog;
    let cold = staged(
        "evaluate",
        cold_table(&ds.public.kg, catalog, &pretrained, cfg.hyperparams.layers),
    )?;
    let ctx = DeviceContext {
        catalog,
        cold: &cold,
    };
    let report = staged(
        "evaluate",
        evaluate(&states, &ctx, &split, Holdout::Test, &cfg.eval.ks, cfg.eval.candidates),
    )?;
    Ok(MetricsFile::new(&dataset_name(&context.data), cfg, &report))
}

/// Writes `out` as JSON and the same metrics as CSV next to it.
pub fn write_metrics(metrics: &MetricsFile, out: &Path) -> Res<()> {
    write_file(out, &metrics.to_json()?)?;
    write_file(&out.with_extension("csv"), &metrics.to_csv())
}
