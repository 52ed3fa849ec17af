//! Config files and the flags that override them.

use std::path::{Path, PathBuf};

use clap::Args;
use deckg::orchestrator::{Ablation, SimulationConfig};
use deckg::{Activation, Hyperparams};

use crate::CliError;

/// Flags shared by every stage. Anything left unset keeps the value from
/// the config file, or the built-in default when there is no file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run config (TOML or JSON, picked by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, no-mp, no-cc or no-p.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Entity embedding size d.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Relation embedding size k.
    #[arg(long = "rel-dim")]
    pub rel_dim: Option<usize>,
    /// User embedding size K.
    #[arg(long = "user-dim")]
    pub user_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// logistic, tanh or identity.
    #[arg(long)]
    pub activation: Option<String>,
    /// Pretraining epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pretraining learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch")]
    pub pretrain_batch: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// On-device learning rate.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// On-device rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long = "hop-limit")]
    pub hop_limit: Option<usize>,
    /// Neighbor cap per kind.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Negatives per positive in the local loss.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long = "validate-every")]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

fn parse_activation(s: &str) -> Result<Activation, CliError> {
    match s {
        "logistic" | "sigmoid" => Ok(Activation::Logistic),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(CliError::Usage(format!("unknown activation {other:?}"))),
    }
}

/// Reads a config file; unknown keys are rejected. Relative dataset and
/// output paths are resolved against the file's directory.
pub fn read_config(path: &Path) -> Result<SimulationConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: SimulationConfig = match path.extension().and_then(|x| x.to_str()) {
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?,
        Some("toml") => toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e.message())))?,
        _ => {
            return Err(CliError::Usage(format!(
                "config {} must end in .toml or .json",
                path.display()
            )))
        }
    };
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.data, &mut cfg.out].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<SimulationConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => SimulationConfig::default(),
        };
        if let Some(a) = &self.ablation {
            cfg.ablation = Ablation::parse(a)?;
        }
        self.apply(&mut cfg.hyperparams)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, hp: &mut Hyperparams) -> Result<(), CliError> {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { hp.$field = v; })*
            };
        }
        set!(
            seed => seed,
            dim => dim_entity,
            rel_dim => dim_relation,
            user_dim => dim_user,
            layers => layers,
            epochs => epochs_pretrain,
            lr => pretrain_gamma,
            pretrain_batch => pretrain_batch,
            epsilon => epsilon,
            mu => mu,
            gamma => gamma,
            rounds => rounds_train,
            cap => neighbor_cap,
            negatives => negatives_per_positive,
            validate_every => validate_every,
            patience => patience
        );
        if let Some(h) = self.hop_limit {
            hp.hop_limit = Some(h);
        }
        if let Some(a) = &self.activation {
            hp.activation = parse_activation(a)?;
        }
        Ok(())
    }
}

/// Model shape is fixed by the checkpoint; later stages adopt it.
pub fn adopt_checkpoint_shape(hp: &mut Hyperparams, ckpt: &Hyperparams) {
    if hp.dim_entity != ckpt.dim_entity
        || hp.dim_relation != ckpt.dim_relation
        || hp.layers != ckpt.layers
        || hp.activation != ckpt.activation
    {
        log::warn!("model shape flags differ from the checkpoint; using the checkpoint's");
    }
    hp.dim_entity = ckpt.dim_entity;
    hp.dim_relation = ckpt.dim_relation;
    hp.layers = ckpt.layers;
    hp.activation = ckpt.activation;
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} list entry {x:?}")))
        })
        .collect()
}
