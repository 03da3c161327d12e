//! Experiment configuration: a flat `key = value` file with one
//! `[domain.<name>]` section per domain, plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use protocdr::Hyperparams;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing required setting {0:?}")]
    MissingRequired(String),
    #[error("invalid value for {key:?}: {reason}")]
    TypeError { key: String, reason: String },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("{key:?} set twice")]
    Duplicate { key: String },
    #[error("{0}: file not found")]
    FileNotFound(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub interactions: PathBuf,
    pub review_users: Option<PathBuf>,
    pub review_items: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hyper: Hyperparams,
    pub domains: Vec<DomainSpec>,
    pub split_seed: u64,
    pub n_test: usize,
    pub top_n: usize,
    pub min_interactions: usize,
    pub output_dir: PathBuf,
    pub parallel: bool,
    pub record_wall_time: bool,
    /// Overlap ratios for `ablate-overlap`.
    pub ratios: Vec<f64>,
    /// Held-out share of prototype pairs for `attack`.
    pub attack_holdout: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hyper = Hyperparams::default();
        Self {
            split_seed: hyper.seed,
            hyper,
            domains: Vec::new(),
            n_test: 99,
            top_n: 10,
            min_interactions: 10,
            output_dir: PathBuf::from("out"),
            parallel: false,
            record_wall_time: true,
            ratios: vec![0.3, 0.5, 0.7, 1.0],
            attack_holdout: 0.2,
        }
    }
}

/// Every top-level key, in rendering order.
pub const KEYS: &[&str] = &[
    "lr",
    "alpha",
    "tau",
    "K",
    "d",
    "L",
    "batch_size",
    "epochs",
    "rounds",
    "beta",
    "eta",
    "train_negative_ratio",
    "seed",
    "kmeans_max_iters",
    "kmeans_tol",
    "init_std",
    "patience",
    "holdout_fraction",
    "split_seed",
    "n_test",
    "top_n",
    "min_interactions",
    "output_dir",
    "parallel",
    "record_wall_time",
    "ratios",
    "attack_holdout",
];

const DOMAIN_KEYS: &[&str] = &["interactions", "review_users", "review_items"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::TypeError {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::TypeError {
            key: key.to_string(),
            reason: format!("expected true or false, got {v:?}"),
        }),
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| parse_num(key, x))
        .collect()
}

/// A raw setting before it is applied: `(section, key, value)`.
#[derive(Debug, Clone, PartialEq)]
struct Entry {
    domain: Option<String>,
    key: String,
    value: String,
}

fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut domain = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "unterminated section header".into(),
            })?;
            let name = inner
                .trim()
                .strip_prefix("domain.")
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ConfigError::UnknownKey(format!("[{}]", inner.trim())))?;
            domain = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            reason: "expected key = value".into(),
        })?;
        out.push(Entry {
            domain: domain.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Splits a `--set` argument; `domain.<name>.<key>=v` addresses a domain section.
fn parse_override(arg: &str) -> Result<Entry, ConfigError> {
    let (key, value) = arg.split_once('=').ok_or_else(|| ConfigError::Syntax {
        line: 0,
        reason: format!("override {arg:?} is not key=value"),
    })?;
    let key = key.trim();
    let value = value.trim().to_string();
    if let Some(rest) = key.strip_prefix("domain.") {
        let (name, k) = rest
            .rsplit_once('.')
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        return Ok(Entry {
            domain: Some(name.to_string()),
            key: k.to_string(),
            value,
        });
    }
    Ok(Entry {
        domain: None,
        key: key.to_string(),
        value,
    })
}

impl ExperimentConfig {
    fn apply(&mut self, e: &Entry) -> Result<(), ConfigError> {
        let (k, v) = (e.key.as_str(), e.value.as_str());
        if let Some(name) = &e.domain {
            if !DOMAIN_KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(format!("domain.{name}.{k}")));
            }
            let idx = match self.domains.iter().position(|d| &d.name == name) {
                Some(i) => i,
                None => {
                    self.domains.push(DomainSpec {
                        name: name.clone(),
                        interactions: PathBuf::new(),
                        review_users: None,
                        review_items: None,
                    });
                    self.domains.len() - 1
                }
            };
            let d = &mut self.domains[idx];
            match k {
                "interactions" => d.interactions = PathBuf::from(v),
                "review_users" => d.review_users = Some(PathBuf::from(v)),
                _ => d.review_items = Some(PathBuf::from(v)),
            }
            return Ok(());
        }
        let h = &mut self.hyper;
        match k {
            "lr" => h.lr = parse_num(k, v)?,
            "alpha" => h.alpha = parse_num(k, v)?,
            "tau" => h.tau = parse_num(k, v)?,
            "K" => h.k = parse_num(k, v)?,
            "d" => h.d = parse_num(k, v)?,
            "L" => h.layers = parse_num(k, v)?,
            "batch_size" => h.batch_size = parse_num(k, v)?,
            "epochs" => h.epochs = parse_num(k, v)?,
            "rounds" => h.rounds = parse_num(k, v)?,
            "beta" => h.beta = parse_num(k, v)?,
            "eta" => h.eta = parse_num(k, v)?,
            "train_negative_ratio" => h.train_negative_ratio = parse_num(k, v)?,
            "seed" => h.seed = parse_num(k, v)?,
            "kmeans_max_iters" => h.kmeans_max_iters = parse_num(k, v)?,
            "kmeans_tol" => h.kmeans_tol = parse_num(k, v)?,
            "init_std" => h.init_std = parse_num(k, v)?,
            "patience" => h.patience = parse_num(k, v)?,
            "holdout_fraction" => h.holdout_fraction = parse_num(k, v)?,
            "split_seed" => self.split_seed = parse_num(k, v)?,
            "n_test" => self.n_test = parse_num(k, v)?,
            "top_n" => self.top_n = parse_num(k, v)?,
            "min_interactions" => self.min_interactions = parse_num(k, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "parallel" => self.parallel = parse_bool(k, v)?,
            "record_wall_time" => self.record_wall_time = parse_bool(k, v)?,
            "ratios" => self.ratios = parse_list(k, v)?,
            "attack_holdout" => self.attack_holdout = parse_num(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }

    /// Parses file text, then applies `overrides` in order. `split_seed`
    /// follows `seed` unless set explicitly.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut entries = parse_entries(text)?;
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            let full = match &e.domain {
                Some(d) => format!("domain.{d}.{}", e.key),
                None => e.key.clone(),
            };
            if !seen.insert(full.clone()) {
                return Err(ConfigError::Duplicate { key: full });
            }
        }
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        let mut cfg = Self::default();
        let mut split_seed_set = false;
        for e in &entries {
            split_seed_set |= e.domain.is_none() && e.key == "split_seed";
            cfg.apply(e)?;
        }
        if !split_seed_set {
            cfg.split_seed = cfg.hyper.seed;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => ConfigError::FileNotFound(p.display().to_string()),
                _ => ConfigError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                },
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    fn check(&self) -> Result<(), ConfigError> {
        for d in &self.domains {
            if d.interactions.as_os_str().is_empty() {
                return Err(ConfigError::MissingRequired(format!("domain.{}.interactions", d.name)));
            }
            if d.review_users.is_some() != d.review_items.is_some() {
                return Err(ConfigError::MissingRequired(format!(
                    "domain.{}.review_users and review_items together",
                    d.name
                )));
            }
        }
        self.hyper.validate().map_err(|e| ConfigError::TypeError {
            key: "hyperparameters".into(),
            reason: e.to_string(),
        })?;
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::TypeError {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.n_test == 0 {
            return bad("n_test", "must be positive");
        }
        if self.top_n == 0 {
            return bad("top_n", "must be positive");
        }
        if self.min_interactions == 0 {
            return bad("min_interactions", "must be positive");
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("ratios", "each ratio must lie in (0, 1]");
        }
        if !(self.attack_holdout > 0.0 && self.attack_holdout < 1.0) {
            return bad("attack_holdout", "must lie in (0, 1)");
        }
        Ok(())
    }

    /// Domain list plus existence of every referenced file.
    pub fn validate_for_training(&self) -> Result<(), ConfigError> {
        if self.domains.len() < 2 {
            return Err(ConfigError::MissingRequired("at least two [domain.<name>] sections".into()));
        }
        for d in &self.domains {
            for p in std::iter::once(&d.interactions).chain(&d.review_users).chain(&d.review_items) {
                if !p.exists() {
                    return Err(ConfigError::FileNotFound(p.display().to_string()));
                }
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let h = &self.hyper;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match key {
            "lr" => h.lr.to_string(),
            "alpha" => h.alpha.to_string(),
            "tau" => h.tau.to_string(),
            "K" => h.k.to_string(),
            "d" => h.d.to_string(),
            "L" => h.layers.to_string(),
            "batch_size" => h.batch_size.to_string(),
            "epochs" => h.epochs.to_string(),
            "rounds" => h.rounds.to_string(),
            "beta" => h.beta.to_string(),
            "eta" => h.eta.to_string(),
            "train_negative_ratio" => h.train_negative_ratio.to_string(),
            "seed" => h.seed.to_string(),
            "kmeans_max_iters" => h.kmeans_max_iters.to_string(),
            "kmeans_tol" => h.kmeans_tol.to_string(),
            "init_std" => h.init_std.to_string(),
            "patience" => h.patience.to_string(),
            "holdout_fraction" => h.holdout_fraction.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "n_test" => self.n_test.to_string(),
            "top_n" => self.top_n.to_string(),
            "min_interactions" => self.min_interactions.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "parallel" => self.parallel.to_string(),
            "record_wall_time" => self.record_wall_time.to_string(),
            "ratios" => list(&self.ratios),
            "attack_holdout" => self.attack_holdout.to_string(),
            _ => unreachable!("key list and renderer out of sync"),
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            s.push_str(&format!("{key} = {}\n", self.value_of(key)));
        }
        for d in &self.domains {
            s.push_str(&format!("\n[domain.{}]\ninteractions = {}\n", d.name, d.interactions.display()));
            if let Some(p) = &d.review_users {
                s.push_str(&format!("review_users = {}\n", p.display()));
            }
            if let Some(p) = &d.review_items {
                s.push_str(&format!("review_items = {}\n", p.display()));
            }
        }
        s
    }

    /// Hex SHA-256 of the canonical form, ignoring settings that cannot change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallel = false;
        Sha256::digest(c.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
