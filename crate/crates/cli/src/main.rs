//! `deckg`: every pipeline stage, the full run, sweeps and ablations.

mod config;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deckg::dataio::{load_dataset, SyntheticSpec};
use deckg::embedding::{read_checkpoint, write_checkpoint};
use deckg::orchestrator::{
    format_sweep_csv, hash_dataset_inputs, pretrain_stage, sweep, EventLog, RunManifest,
    SimulationConfig, EVENTS_FILE, METRICS_JSON, ROUNDS_CSV,
};
use deckg::{Error, ErrorClass};
use serde_json::json;

use config::{parse_list, CommonArgs};
use stages::TrainInputs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn class(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) => ("usage", 1),
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => ("usage", 1),
                ErrorClass::Data => ("data", 2),
                ErrorClass::Numerical => ("numerical", 3),
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deckg", version, about = "Decentralized KG-enhanced POI recommendation simulator")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DECKG_THREADS")]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Generator settings (TOML or JSON); defaults when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain entity, relation and layer parameters on the public graph.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Split histories and write desensitized uploads.
    Desensitize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where the clients keep their train/validation/test split
        /// [default: split.tsv next to --out].
        #[arg(long = "split-out")]
        split_out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cut one sub-graph per uploading user.
    Partition {
        /// kg.tsv of the dataset; its directory must also hold the catalog.
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        uploads: PathBuf,
        /// One hop from the uploaded POIs instead of the full closure.
        #[arg(long = "one-hop")]
        one_hop: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Assign geographical and semantic neighbors.
    Neighbors {
        /// Dataset directory for the catalog [default: `data` of the config].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        uploads: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the on-device rounds.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        subkgs: PathBuf,
        #[arg(long)]
        neighbors: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long = "no-communication")]
        no_communication: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Test-split metrics of trained clients.
    Evaluate {
        #[arg(long)]
        clients: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Comma-separated cutoffs [default: those used for training].
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole pipeline, stage by stage, into one run directory.
    Run {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Metrics over an epsilon × mu grid on one pretrained checkpoint.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse this checkpoint instead of pretraining.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<String>,
        /// Comma-separated epsilon grid.
        #[arg(long = "epsilon", default_value = "0.5,2,4,8")]
        epsilons: String,
        /// Comma-separated mu grid.
        #[arg(long = "mu", default_value = "0.1,0.3,0.5,0.7")]
        mus: String,
    },
}

fn need(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config file)")))
}

/// Paths of a run directory.
struct RunLayout {
    ckpt: PathBuf,
    split: PathBuf,
    uploads: PathBuf,
    subkgs: PathBuf,
    neighbors: PathBuf,
    clients: PathBuf,
}

impl RunLayout {
    fn new(out: &Path) -> Self {
        RunLayout {
            ckpt: out.join("checkpoint").join("embeddings.bin"),
            split: out.join("device").join("split.tsv"),
            uploads: out.join("server").join("uploads"),
            subkgs: out.join("server").join("subkg"),
            neighbors: out.join("server").join("neighbors.json"),
            clients: out.join("device").join("clients"),
        }
    }
}

fn run_pipeline(cfg: &SimulationConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::create(out, cfg, hash_dataset_inputs(data)?)?;
    let mut events = EventLog::create(&out.join(EVENTS_FILE))?;
    let paths = RunLayout::new(out);
    events.emit(
        "run_start",
        json!({"seed": cfg.hyperparams.seed, "ablation": cfg.ablation.tag(), "config_hash": cfg.config_hash()}),
    )?;

    let mut stage = |name: &'static str,
                     events: &mut EventLog,
                     f: &mut dyn FnMut(&mut EventLog) -> Result<(), CliError>|
     -> Result<(), CliError> {
        manifest.begin(name)?;
        events.emit("stage_start", json!({"stage": name}))?;
        match f(events) {
            Ok(()) => {
                manifest.end(name)?;
                events.emit("stage_end", json!({"stage": name}))?;
                Ok(())
            }
            Err(e) => {
                manifest.fail(name, &e)?;
                events.emit("stage_failed", json!({"stage": name, "error": e.to_string()}))?;
                Err(e)
            }
        }
    };

    stage("pretrain", &mut events, &mut |ev| {
        let loss = stages::pretrain(data, &paths.ckpt, cfg)?;
        for (epoch, l) in loss.iter().enumerate() {
            ev.emit("pretrain_epoch", json!({"epoch": epoch + 1, "mean_loss": l}))?;
        }
        Ok(())
    })?;
    stage("desensitize", &mut events, &mut |ev| {
        let s = stages::desensitize(data, &paths.ckpt, &paths.uploads, &paths.split, cfg)?;
        ev.emit(
            "uploads",
            json!({"positions": s.positions, "passthrough": s.passthrough,
                   "segment_distortion_rate": s.segment_distortion_rate()}),
        )?;
        Ok(())
    })?;
    stage("partition", &mut events, &mut |ev| {
        let n = stages::partition(&data.join(deckg::dataio::KG_FILE), &paths.uploads, &paths.subkgs, cfg)?;
        ev.emit("subkgs", json!({"count": n}))?;
        Ok(())
    })?;
    stage("neighbors", &mut events, &mut |ev| {
        let n = stages::neighbors(data, &paths.uploads, &paths.ckpt, &paths.neighbors, cfg)?;
        ev.emit("neighbor_sets", json!({"count": n}))?;
        Ok(())
    })?;
    stage("train", &mut events, &mut |ev| {
        let inputs = TrainInputs {
            data,
            ckpt: &paths.ckpt,
            subkgs: &paths.subkgs,
            neighbors: &paths.neighbors,
            split: &paths.split,
        };
        let rounds = stages::train(&inputs, &paths.clients, cfg)?;
        for r in &rounds {
            ev.emit("round", serde_json::to_value(r).map_err(Error::from)?)?;
        }
        let p = out.join(ROUNDS_CSV);
        fs::copy(paths.clients.join(ROUNDS_CSV), &p).map_err(|e| Error::io(&p, e))?;
        Ok(())
    })?;
    stage("evaluate", &mut events, &mut |ev| {
        let m = stages::evaluate_clients(&paths.clients, &paths.split, None)?;
        stages::write_metrics(&m, &out.join(METRICS_JSON))?;
        ev.emit("metrics", serde_json::to_value(&m).map_err(Error::from)?)?;
        Ok(())
    })?;
    manifest.complete()?;
    events.emit("run_end", json!({}))?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let mut spec = match spec {
                Some(p) => stages::read_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let stats = stages::synth(&spec, &out)?;
            println!("{}", serde_json::to_string(&stats).map_err(Error::from)?);
        }
        Command::Pretrain { data, out, common } => {
            let cfg = common.resolve()?;
            let loss = stages::pretrain(&data, &out, &cfg)?;
            if let (Some(first), Some(last)) = (loss.first(), loss.last()) {
                log::info!("pretrain loss {first:.6} -> {last:.6} over {} epochs", loss.len());
            }
        }
        Command::Desensitize {
            data,
            ckpt,
            out,
            split_out,
            common,
        } => {
            let cfg = common.resolve()?;
            let split_out = split_out.unwrap_or_else(|| {
                out.parent().unwrap_or(Path::new(".")).join("split.tsv")
            });
            let s = stages::desensitize(&data, &ckpt, &out, &split_out, &cfg)?;
            log::info!(
                "{} positions, {} passthrough, segment distortion {:.4}",
                s.positions,
                s.passthrough,
                s.segment_distortion_rate()
            );
        }
        Command::Partition {
            kg,
            uploads,
            one_hop,
            out,
            common,
        } => {
            let mut cfg = common.resolve()?;
            cfg.ablation.no_meta_path |= one_hop;
            stages::partition(&kg, &uploads, &out, &cfg)?;
        }
        Command::Neighbors {
            data,
            uploads,
            ckpt,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            let data = need(data.or_else(|| cfg.data.clone()), "--data")?;
            stages::neighbors(&data, &uploads, &ckpt, &out, &cfg)?;
        }
        Command::Train {
            data,
            ckpt,
            subkgs,
            neighbors,
            split,
            no_communication,
            out,
            common,
        } => {
            let mut cfg = common.resolve()?;
            cfg.ablation.no_communication |= no_communication;
            let inputs = TrainInputs {
                data: &data,
                ckpt: &ckpt,
                subkgs: &subkgs,
                neighbors: &neighbors,
                split: &split,
            };
            stages::train(&inputs, &out, &cfg)?;
        }
        Command::Evaluate { clients, split, k, out } => {
            let ks = k.map(|k| parse_list::<usize>(&k, "k")).transpose()?;
            let m = stages::evaluate_clients(&clients, &split, ks.as_deref())?;
            stages::write_metrics(&m, &out)?;
        }
        Command::Run { data, out, common } => {
            let mut cfg = common.resolve()?;
            let data = need(data.or_else(|| cfg.data.clone()), "--data")?;
            let out = need(out.or_else(|| cfg.out.clone()), "--out")?;
            cfg.data = Some(data.clone());
            cfg.out = Some(out.clone());
            run_pipeline(&cfg, &data, &out)?;
        }
        Command::Sweep {
            data,
            out,
            ckpt,
            config,
            seed,
            ablation,
            epsilons,
            mus,
        } => {
            let common = CommonArgs {
                config,
                seed,
                ablation,
                ..Default::default()
            };
            let cfg = common.resolve()?;
            let data = need(data.or_else(|| cfg.data.clone()), "--data")?;
            let out = need(out.or_else(|| cfg.out.clone()), "--out")?;
            let epsilons = parse_list::<f64>(&epsilons, "epsilon")?;
            let mus = parse_list::<f64>(&mus, "mu")?;
            let ds = load_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let pretrained = match ckpt {
                Some(p) => read_checkpoint::<f64>(&p)?.0,
                None => {
                    let hp = &cfg.hyperparams;
                    let pre = pretrain_stage::<f64>(&ds.public.kg, hp, cfg.ablation.no_pretrain, cfg.parallel_pretrain)
                        .map_err(|e| e.in_stage("pretrain"))?;
                    write_checkpoint(&out.join("embeddings.bin"), &pre.state, hp)?;
                    pre.state
                }
            };
            let cells = sweep(&ds, &cfg, &pretrained, &epsilons, &mus)?;
            let p = out.join("sweep.csv");
            fs::write(&p, format_sweep_csv(&cells, &cfg.eval.ks)).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// One line, `key=value` pairs, the reason JSON-quoted so it never spans lines.
fn report(e: &CliError) -> u8 {
    let (class, code) = e.class();
    let reason = serde_json::to_string(&e.to_string()).unwrap_or_else(|_| "\"?\"".into());
    eprintln!("deckg: error code={code} class={class} reason={reason}");
    code
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            let first = first.trim_start_matches("error: ").to_string();
            return ExitCode::from(report(&CliError::Usage(first)));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return ExitCode::from(report(&CliError::Usage("--threads must be >= 1".into())));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(report(&e)),
    }
}
