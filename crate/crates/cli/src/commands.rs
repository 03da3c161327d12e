//! Subcommand implementations. Every artifact lands under the output directory.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use protocdr::dataset::{
    filter_and_binarize, identify_overlapping_users, load_interactions, load_review_embeddings, DatasetError,
    InteractionFormat,
};
use protocdr::eval::{
    ablation_csv, attack_pairs, evaluate, overlap_ablation, reconstruction_attack, sweep, sweep_csv, AttackConfig,
    EvalError, GridKey, MetricsReport,
};
use protocdr::rng::derive_seed;
use protocdr::server::{Federation, FederationError, FederationOptions, PreparedDomain};
use protocdr::trainer::ClientData;
use protocdr::wire::{load_checkpoint, save_checkpoint, WireError};
use protocdr::OverlapRegistry;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{parse_list, ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Artifact(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "UsageError",
            Self::Config(e) => match e {
                ConfigError::UnknownKey(_) => "UnknownKey",
                ConfigError::MissingRequired(_) => "MissingRequired",
                ConfigError::TypeError { .. } => "TypeError",
                ConfigError::Syntax { .. } => "SyntaxError",
                ConfigError::Duplicate { .. } => "DuplicateKey",
                ConfigError::FileNotFound(_) => "FileNotFound",
                ConfigError::Io { .. } => "IoError",
            },
            Self::Dataset(_) => "DatasetError",
            Self::Federation(_) => "TrainingError",
            Self::Eval(EvalError::InvalidGridKey(_)) => "InvalidGridKey",
            Self::Eval(_) => "EvaluationError",
            Self::Wire(_) => "CheckpointError",
            Self::Io { .. } => "IoError",
            Self::Artifact(_) => "ArtifactError",
        }
    }

    /// 2 for mistakes in the invocation or configuration, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Eval(EvalError::InvalidGridKey(_) | EvalError::InvalidGridValue { .. }) => 2,
            Self::Config(ConfigError::FileNotFound(_) | ConfigError::Io { .. }) => 1,
            Self::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn record(&self) -> serde_json::Value {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

/// Split datasets and the overlap registry, as written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub split_seed: u64,
    pub names: Vec<String>,
    pub domains: Vec<PreparedDomain>,
    pub registry: OverlapRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config_hash: String,
    pub seed: u64,
    pub rounds: usize,
    pub domains: Vec<String>,
    pub round_log: String,
    pub checkpoints: Vec<String>,
}

pub fn prepared_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("prepared.json")
}

fn checkpoint_path(cfg: &ExperimentConfig, round: usize, name: &str) -> PathBuf {
    cfg.output_dir
        .join("checkpoints")
        .join(format!("round_{round:03}"))
        .join(format!("{name}.ckpt"))
}

fn options(cfg: &ExperimentConfig) -> FederationOptions {
    FederationOptions {
        parallel: cfg.parallel,
        record_wall_time: cfg.record_wall_time,
        collect_history: false,
    }
}

fn build_prepared(cfg: &ExperimentConfig) -> Result<PreparedArtifact, CliError> {
    cfg.validate_for_training()?;
    let mut datasets = Vec::with_capacity(cfg.domains.len());
    for (i, spec) in cfg.domains.iter().enumerate() {
        let raw = load_interactions(&spec.interactions, InteractionFormat::Csv)?;
        let mut ds = filter_and_binarize(&raw, cfg.min_interactions, i)?;
        if let (Some(u), Some(v)) = (&spec.review_users, &spec.review_items) {
            let ru = load_review_embeddings(u, &ds.users)?;
            let ri = load_review_embeddings(v, &ds.items)?;
            ds = ds.with_reviews(Some(ru), Some(ri))?;
        }
        datasets.push(ds);
    }
    let registry = identify_overlapping_users(&datasets);
    if registry.is_empty() {
        return Err(CliError::Artifact("the domains share no users".into()));
    }
    let domains = datasets
        .into_iter()
        .map(|ds| PreparedDomain::new(ds, cfg.n_test, cfg.hyper.train_negative_ratio, cfg.split_seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedArtifact {
        config_hash: cfg.hash(),
        seed: cfg.hyper.seed,
        split_seed: cfg.split_seed,
        names: cfg.domains.iter().map(|d| d.name.clone()).collect(),
        domains,
        registry,
    })
}

/// Reuses `prepared.json` when it was written for the same configuration.
fn load_or_prepare(cfg: &ExperimentConfig) -> Result<PreparedArtifact, CliError> {
    let path = prepared_path(cfg);
    if path.exists() {
        let p: PreparedArtifact = read_json(&path)?;
        if p.config_hash == cfg.hash() {
            return Ok(p);
        }
    }
    build_prepared(cfg)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let p = build_prepared(cfg)?;
    let path = prepared_path(cfg);
    write_json(&path, &p)?;
    Ok(json!({
        "command": "prepare",
        "config_hash": p.config_hash,
        "seed": p.seed,
        "overlap_users": p.registry.len(),
        "domains": p.names.iter().zip(&p.domains).map(|(n, d)| json!({
            "name": n,
            "users": d.dataset.n_users(),
            "items": d.dataset.n_items(),
            "train_interactions": d.split.train.nnz(),
        })).collect::<Vec<_>>(),
        "artifact": path.display().to_string(),
    }))
}

pub fn train(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let p = load_or_prepare(cfg)?;
    write_json(&prepared_path(cfg), &p)?;
    let log_path = cfg.output_dir.join("round_log.jsonl");
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut fed = Federation::new(&cfg.hyper, &p.domains, &p.registry, &options(cfg))?;
    let mut checkpoints = Vec::new();
    for round in 1..=cfg.hyper.rounds {
        let records = fed.step()?;
        for r in records {
            let line = serde_json::to_string(r).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        }
        log.flush().map_err(|e| io_err(&log_path, e))?;
        checkpoints.clear();
        for (client, name) in fed.clients.iter().zip(&p.names) {
            let path = checkpoint_path(cfg, round, name);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            save_checkpoint(&path, client)?;
            let rel = path.strip_prefix(&cfg.output_dir).unwrap_or(&path);
            checkpoints.push(rel.display().to_string());
        }
    }
    write_json(&cfg.output_dir.join("server_prototypes.json"), &fed.download)?;
    let manifest = TrainManifest {
        config_hash: cfg.hash(),
        seed: cfg.hyper.seed,
        rounds: cfg.hyper.rounds,
        domains: p.names.clone(),
        round_log: "round_log.jsonl".into(),
        checkpoints,
    };
    write_json(&cfg.output_dir.join("train.json"), &manifest)?;
    Ok(json!({
        "command": "train",
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "rounds": manifest.rounds,
        "round_log": manifest.round_log,
    }))
}

pub fn evaluate_cmd(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let manifest: TrainManifest = read_json(&cfg.output_dir.join("train.json"))?;
    let p = load_or_prepare(cfg)?;
    if manifest.domains != p.names {
        return Err(CliError::Artifact("checkpoints were trained on different domains".into()));
    }
    let mut clients = Vec::with_capacity(p.names.len());
    for path in &manifest.checkpoints {
        let c = load_checkpoint(&cfg.output_dir.join(path))?;
        if c.hyper != cfg.hyper {
            return Err(CliError::Artifact(format!(
                "{path} was trained with different hyperparameters"
            )));
        }
        clients.push(c);
    }
    let data: Vec<ClientData> = p
        .domains
        .iter()
        .map(|d| ClientData::new(&d.dataset, &d.split, &p.registry, &cfg.hyper))
        .collect();
    let mut report: MetricsReport = evaluate(&clients, &data, cfg.top_n)?;
    report.config_hash = manifest.config_hash;
    report.seed = manifest.seed;
    write_json(&cfg.output_dir.join("metrics.json"), &report)?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn sidecar(path: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let meta = path.with_extension("meta.json");
    write_json(&meta, &json!({ "config_hash": cfg.hash(), "seed": cfg.hyper.seed }))
}

/// Parses repeated `key=v1,v2,...` grid flags.
pub fn parse_grid(args: &[String]) -> Result<Vec<(GridKey, Vec<f64>)>, CliError> {
    let mut grid: Vec<(GridKey, Vec<f64>)> = Vec::new();
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--grid expects key=v1,v2,..., got {a:?}")))?;
        let key = GridKey::parse(k.trim())?;
        if grid.iter().any(|(g, _)| *g == key) {
            return Err(CliError::Usage(format!("grid key {k} given twice")));
        }
        let values = parse_list(k.trim(), v)?;
        if values.is_empty() {
            return Err(CliError::Usage(format!("grid key {k} has no values")));
        }
        grid.push((key, values));
    }
    Ok(grid)
}

pub fn sweep_cmd(cfg: &ExperimentConfig, grid: &[String]) -> Result<serde_json::Value, CliError> {
    let grid = parse_grid(grid)?;
    let p = load_or_prepare(cfg)?;
    let rows = sweep(&p.domains, &p.registry, &cfg.hyper, &grid, cfg.top_n, &options(cfg))?;
    let path = cfg.output_dir.join("sweep.csv");
    write_file(&path, sweep_csv(&rows))?;
    sidecar(&path, cfg)?;
    Ok(json!({
        "command": "sweep",
        "config_hash": cfg.hash(),
        "seed": cfg.hyper.seed,
        "rows": rows.len(),
        "artifact": path.display().to_string(),
    }))
}

pub fn ablate_cmd(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let p = load_or_prepare(cfg)?;
    let rows = overlap_ablation(&p.domains, &p.registry, &cfg.ratios, &cfg.hyper, &options(cfg), cfg.top_n)?;
    let path = cfg.output_dir.join("ablation.csv");
    write_file(&path, ablation_csv(&rows))?;
    sidecar(&path, cfg)?;
    Ok(json!({
        "command": "ablate-overlap",
        "config_hash": cfg.hash(),
        "seed": cfg.hyper.seed,
        "overlap_users": p.registry.len(),
        "rows": rows.len(),
        "artifact": path.display().to_string(),
    }))
}

pub fn attack_cmd(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let p = load_or_prepare(cfg)?;
    let opts = FederationOptions {
        collect_history: true,
        ..options(cfg)
    };
    let mut fed = Federation::new(&cfg.hyper, &p.domains, &p.registry, &opts)?;
    for _ in 0..cfg.hyper.rounds {
        fed.step()?;
    }
    let (clean, noised) = attack_pairs(&fed.history);
    let seed = derive_seed(cfg.hyper.seed, "attack", &[]);
    let mse = reconstruction_attack(&clean, &noised, cfg.attack_holdout, seed, &AttackConfig::default())?;
    let out = json!({
        "command": "attack",
        "config_hash": cfg.hash(),
        "seed": cfg.hyper.seed,
        "pairs": clean.len(),
        "beta": cfg.hyper.beta,
        "eta": cfg.hyper.eta,
        "epsilon": cfg.hyper.epsilon(),
        "mse": mse,
    });
    write_json(&cfg.output_dir.join("attack.json"), &out)?;
    Ok(out)
}
