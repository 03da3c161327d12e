//! Leave-one-out ranking metrics, overlap and parameter sweeps, and the
//! prototype reconstruction attack.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{OverlapRegistry, SplitDataset};
use crate::graph::{FusedEmbeddings, GraphError};
use crate::linalg::Matrix;
use crate::losses::{sigmoid, MlpParams};
use crate::nn::{Mlp, MlpAdam};
use crate::optim::OptimError;
use crate::rng::{derive_seed, stream};
use crate::server::{run_federation, FederationError, FederationOptions, FederationOutcome, HistoryEntry, PreparedDomain};
use crate::trainer::{ClientData, ClientState, Hyperparams};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("expected {expected} candidates, got {found}")]
    CandidateCountMismatch { expected: usize, found: usize },
    #[error("positive item {0} must appear exactly once among the candidates")]
    PositiveNotUnique(usize),
    #[error("user {0} has no test candidates")]
    MissingCandidates(usize),
    #[error("need at least {needed} prototype pairs, got {found}")]
    InsufficientPairs { needed: usize, found: usize },
    #[error("unknown grid key {0:?}; expected alpha, K, n or epsilon")]
    InvalidGridKey(String),
    #[error("invalid value {value} for {key}")]
    InvalidGridValue { key: String, value: f64 },
    #[error("overlap ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    /// 1-based position of the positive among the candidates.
    pub rank: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Rank of `positive` when items are sorted by descending score, ties by ascending item index.
pub fn rank_of(items: &[usize], scores: &[f64], positive: usize) -> Result<usize, EvalError> {
    if items.len() != scores.len() {
        return Err(EvalError::CandidateCountMismatch {
            expected: items.len(),
            found: scores.len(),
        });
    }
    let mut hits = items.iter().zip(scores).filter(|(&i, _)| i == positive);
    let (Some((_, &s_pos)), None) = (hits.next(), hits.next()) else {
        return Err(EvalError::PositiveNotUnique(positive));
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::Invalid("non-finite score".into()));
    }
    let ahead = items
        .iter()
        .zip(scores)
        .filter(|(&i, &s)| s > s_pos || (s == s_pos && i < positive))
        .count();
    Ok(ahead + 1)
}

/// Interaction probabilities for `(user, item)` over `items`, batched through the head.
pub fn score_items(fused: &FusedEmbeddings, head: &MlpParams, user: usize, items: &[usize]) -> Vec<f64> {
    let df = fused.dim();
    let mut x = Matrix::zeros(items.len(), 2 * df);
    for (r, &i) in items.iter().enumerate() {
        let row = x.row_mut(r);
        row[..df].copy_from_slice(fused.user.row(user));
        row[df..].copy_from_slice(fused.item.row(i));
    }
    head.mlp.forward(&x).output.as_slice().iter().map(|&z| sigmoid(z)).collect()
}

/// Scores and ranks one user's candidate list (positive first, as built by the split).
pub fn rank_candidates(
    fused: &FusedEmbeddings,
    head: &MlpParams,
    user: usize,
    candidates: &[usize],
    expected: usize,
) -> Result<RankingResult, EvalError> {
    if candidates.len() != expected {
        return Err(EvalError::CandidateCountMismatch {
            expected,
            found: candidates.len(),
        });
    }
    let positive = *candidates.first().ok_or(EvalError::MissingCandidates(user))?;
    let scores = score_items(fused, head, user, candidates);
    let rank = rank_of(candidates, &scores, positive)?;
    Ok(RankingResult {
        user,
        rank,
        items: candidates.to_vec(),
        scores,
    })
}

pub fn hr_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over domains of the per-domain values.
    pub hr_at_n: f64,
    pub ndcg_at_n: f64,
    pub n: usize,
    pub per_domain: BTreeMap<usize, DomainMetrics>,
    pub config_hash: String,
    pub seed: u64,
}

/// Mean HR and NDCG over a domain's test users given their ranks.
pub fn metrics_from_ranks(ranks: &[usize], n: usize) -> DomainMetrics {
    let m = ranks.len().max(1) as f64;
    DomainMetrics {
        hr: ranks.iter().map(|&r| hr_at_n(r, n)).sum::<f64>() / m,
        ndcg: ranks.iter().map(|&r| ndcg_at_n(r, n)).sum::<f64>() / m,
        users: ranks.len(),
    }
}

/// Ranks every test user of `split` with an arbitrary scorer.
pub fn ranks_with<F>(split: &SplitDataset, mut scorer: F) -> Result<Vec<usize>, EvalError>
where
    F: FnMut(usize, &[usize]) -> Vec<f64>,
{
    split
        .test
        .iter()
        .map(|&(u, pos)| {
            let cands = split.candidates(u).ok_or(EvalError::MissingCandidates(u))?;
            let scores = scorer(u, &cands);
            rank_of(&cands, &scores, pos)
        })
        .collect()
}

/// Ranks of every test user in one domain under the trained model.
pub fn domain_ranks(client: &ClientState, data: &ClientData) -> Result<Vec<usize>, EvalError> {
    let fused = client.embeddings(&data.adj)?;
    ranks_with(&data.split, |u, items| score_items(&fused, &client.mlp, u, items))
}

fn report(per_domain: BTreeMap<usize, DomainMetrics>, n: usize, hyper: &Hyperparams) -> MetricsReport {
    let m = per_domain.len().max(1) as f64;
    MetricsReport {
        hr_at_n: per_domain.values().map(|d| d.hr).sum::<f64>() / m,
        ndcg_at_n: per_domain.values().map(|d| d.ndcg).sum::<f64>() / m,
        n,
        per_domain,
        config_hash: hyper.fingerprint(),
        seed: hyper.seed,
    }
}

/// Per-domain HR@n and NDCG@n over all test users.
pub fn evaluate(clients: &[ClientState], data: &[ClientData], n: usize) -> Result<MetricsReport, EvalError> {
    if clients.len() != data.len() || clients.is_empty() {
        return Err(EvalError::Invalid("clients and data must pair up".into()));
    }
    let mut per_domain = BTreeMap::new();
    for (c, d) in clients.iter().zip(data) {
        per_domain.insert(c.domain_id, metrics_from_ranks(&domain_ranks(c, d)?, n));
    }
    Ok(report(per_domain, n, &clients[0].hyper))
}

/// Trains on `domains` and evaluates at cutoff `n`.
pub fn train_and_evaluate(
    hyper: &Hyperparams,
    domains: &[PreparedDomain],
    registry: &OverlapRegistry,
    options: &FederationOptions,
    n: usize,
) -> Result<(FederationOutcome, MetricsReport), EvalError> {
    let outcome = run_federation(hyper, domains, registry, options)?;
    let report = evaluate(&outcome.clients, &outcome.data, n)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub retained: usize,
    pub domain: usize,
    pub metric: String,
    pub value: f64,
}

/// Retrains with only `⌊ρ·|U^o|⌋` users kept in the registry for each ratio.
/// Hidden users keep their interactions and are treated as non-overlapping.
pub fn overlap_ablation(
    domains: &[PreparedDomain],
    registry: &OverlapRegistry,
    ratios: &[f64],
    hyper: &Hyperparams,
    options: &FederationOptions,
    n: usize,
) -> Result<Vec<AblationRow>, EvalError> {
    if let Some(&r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(EvalError::InvalidRatio(r));
    }
    let mut rows = Vec::new();
    for &ratio in ratios {
        let sub = registry.subsample(ratio, derive_seed(hyper.seed, "overlap-ablation", &[]));
        let (_, report) = train_and_evaluate(hyper, domains, &sub, options, n)?;
        for (&domain, m) in &report.per_domain {
            for (metric, value) in [(format!("hr@{n}"), m.hr), (format!("ndcg@{n}"), m.ndcg)] {
                rows.push(AblationRow {
                    ratio,
                    retained: sub.len(),
                    domain,
                    metric,
                    value,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ratio,retained,domain,metric,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.ratio, r.retained, r.domain, r.metric, r.value));
    }
    s
}

/// Attacker network and training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 200,
            lr: 0.001,
            batch_size: 32,
        }
    }
}

pub const MIN_ATTACK_PAIRS: usize = 10;

/// `(clean, noised)` prototype pairs from every round of every domain.
pub fn attack_pairs(history: &BTreeMap<usize, Vec<HistoryEntry>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut clean = Vec::new();
    let mut noised = Vec::new();
    for entry in history.values().flatten() {
        if let Some(rep) = &entry.clean {
            clean.extend(rep.centroids.iter().cloned());
            noised.extend(entry.upload.diff_protos.iter().cloned());
        }
    }
    (clean, noised)
}

fn rows_matrix(rows: &[&Vec<f64>], dim: usize) -> Matrix {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Matrix::from_vec(rows.len(), dim, data).expect("uniform rows")
}

/// Trains a `D → h → h → D` regressor from noised to clean prototypes and
/// returns its mean squared error on a held-out split.
pub fn reconstruction_attack(
    clean: &[Vec<f64>],
    noised: &[Vec<f64>],
    holdout_fraction: f64,
    seed: u64,
    config: &AttackConfig,
) -> Result<f64, EvalError> {
    if clean.len() != noised.len() {
        return Err(EvalError::Invalid("clean and noised histories differ in length".into()));
    }
    if clean.len() < MIN_ATTACK_PAIRS {
        return Err(EvalError::InsufficientPairs {
            needed: MIN_ATTACK_PAIRS,
            found: clean.len(),
        });
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(EvalError::Invalid(format!("holdout_fraction {holdout_fraction} outside (0, 1)")));
    }
    let dim = clean[0].len();
    if clean.iter().chain(noised).any(|v| v.len() != dim) || dim == 0 {
        return Err(EvalError::Invalid("prototype dimensions differ".into()));
    }
    let mut rng = stream(seed, "attack", &[]);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((clean.len() as f64 * holdout_fraction).ceil() as usize).clamp(1, clean.len() - 1);
    let (hold, train) = order.split_at(n_hold);

    let mut net = Mlp::new(&[dim, config.hidden, config.hidden, dim], &mut rng);
    let mut adam = MlpAdam::new(&net);
    let mut train = train.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(config.batch_size.max(1)) {
            let x = rows_matrix(&chunk.iter().map(|&i| &noised[i]).collect::<Vec<_>>(), dim);
            let y = rows_matrix(&chunk.iter().map(|&i| &clean[i]).collect::<Vec<_>>(), dim);
            let trace = net.forward(&x);
            let scale = 2.0 / (chunk.len() * dim) as f64;
            let grad: Vec<f64> = trace
                .output
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, t)| scale * (p - t))
                .collect();
            let grad = Matrix::from_vec(chunk.len(), dim, grad).expect("same shape");
            let (g, _) = net.backward(&trace, &grad);
            adam.step(&mut net, &g, config.lr)?;
        }
    }
    let x = rows_matrix(&hold.iter().map(|&i| &noised[i]).collect::<Vec<_>>(), dim);
    let y = rows_matrix(&hold.iter().map(|&i| &clean[i]).collect::<Vec<_>>(), dim);
    let pred = net.forward(&x).output;
    let sse: f64 = pred.as_slice().iter().zip(y.as_slice()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sse / (hold.len() * dim) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GridKey {
    Alpha,
    K,
    N,
    Epsilon,
}

impl GridKey {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "K" | "k" => Ok(Self::K),
            "n" => Ok(Self::N),
            "epsilon" => Ok(Self::Epsilon),
            other => Err(EvalError::InvalidGridKey(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::K => "K",
            Self::N => "n",
            Self::Epsilon => "epsilon",
        }
    }

    fn check(self, v: f64) -> Result<(), EvalError> {
        let ok = match self {
            Self::Alpha => v >= 0.0 && v.is_finite(),
            Self::K | Self::N => v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64,
            Self::Epsilon => v > 0.0 && v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidGridValue {
                key: self.name().to_string(),
                value: v,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub domain: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub seed: u64,
}

/// Cartesian product of `grid`, in row-major order of the given keys.
fn settings(grid: &[(GridKey, Vec<f64>)]) -> Vec<Vec<(GridKey, f64)>> {
    let mut out = vec![Vec::new()];
    for (key, values) in grid {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push((*key, v));
                    p
                })
            })
            .collect();
    }
    out
}

/// One training run per grid setting, all sharing `base.seed`.
///
/// `n` only changes the evaluation cutoff, so consecutive settings that
/// differ in `n` alone reuse the trained model. An empty grid runs the
/// baseline once.
pub fn sweep(
    domains: &[PreparedDomain],
    registry: &OverlapRegistry,
    base: &Hyperparams,
    grid: &[(GridKey, Vec<f64>)],
    default_n: usize,
    options: &FederationOptions,
) -> Result<Vec<SweepRow>, EvalError> {
    for (key, values) in grid {
        for &v in values {
            key.check(v)?;
        }
    }
    let mut rows = Vec::new();
    let mut cached: Option<(Hyperparams, FederationOutcome)> = None;
    for setting in settings(grid) {
        let mut hyper = base.clone();
        let mut n = default_n;
        for &(key, v) in &setting {
            match key {
                GridKey::Alpha => hyper.alpha = v,
                GridKey::K => hyper.k = v as usize,
                GridKey::N => n = v as usize,
                GridKey::Epsilon => hyper.eta = 2.0 * hyper.beta / v,
            }
        }
        let reuse = cached.as_ref().is_some_and(|(h, _)| *h == hyper);
        if !reuse {
            cached = Some((hyper.clone(), run_federation(&hyper, domains, registry, options)?));
        }
        let (_, outcome) = cached.as_ref().expect("trained above");
        let report = evaluate(&outcome.clients, &outcome.data, n)?;
        let (param, value) = if setting.is_empty() {
            ("baseline".to_string(), String::new())
        } else {
            let names: Vec<&str> = setting.iter().map(|(k, _)| k.name()).collect();
            let values: Vec<String> = setting.iter().map(|(_, v)| v.to_string()).collect();
            (names.join(";"), values.join(";"))
        };
        for (&domain, m) in &report.per_domain {
            rows.push(SweepRow {
                param: param.clone(),
                value: value.clone(),
                domain,
                hr: m.hr,
                ndcg: m.ndcg,
                seed: hyper.seed,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("param,value,domain,hr,ndcg,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.param, r.value, r.domain, r.hr, r.ndcg, r.seed));
    }
    s
}
