//! Server-side aggregation and the round loop that drives all clients.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{leave_one_out_split, sample_negatives, DatasetError, InteractionDataset, OverlapRegistry, SplitDataset};
use crate::rng::derive_seed;
use crate::linalg::cosine;
use crate::proto::RepresentativePrototypes;
use crate::trainer::{local_update, ClientData, ClientState, Hyperparams, RoundReport, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum ServerError {
    #[error("no candidate prototypes")]
    EmptyCandidates,
    #[error("domain {0} uploaded more than once")]
    DuplicateDomain(usize),
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
    #[error("domain {domain} has no cluster at position {cluster}")]
    UnknownCluster { domain: usize, cluster: usize },
    #[error("malformed upload from domain {domain}: {reason}")]
    MalformedUpload { domain: usize, reason: String },
}

/// What a client sends: noised prototypes and the overlap ids behind each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpload {
    pub domain_id: usize,
    pub diff_protos: Vec<Vec<f64>>,
    pub overlap_sets: Vec<BTreeSet<String>>,
}

impl ClientUpload {
    pub fn empty(domain_id: usize) -> Self {
        Self {
            domain_id,
            diff_protos: Vec::new(),
            overlap_sets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.diff_protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diff_protos.is_empty()
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |reason: String| ServerError::MalformedUpload {
            domain: self.domain_id,
            reason,
        };
        if self.diff_protos.len() != self.overlap_sets.len() {
            return Err(bad(format!(
                "{} prototypes but {} overlap sets",
                self.diff_protos.len(),
                self.overlap_sets.len()
            )));
        }
        if let Some(first) = self.diff_protos.first() {
            if self.diff_protos.iter().any(|p| p.len() != first.len()) {
                return Err(bad("ragged prototypes".into()));
            }
        }
        if self.diff_protos.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite prototype".into()));
        }
        Ok(())
    }
}

/// One local prototype chosen from a contributing domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPrototype {
    pub domain: usize,
    pub cluster: usize,
    pub vector: Vec<f64>,
}

/// Server reply for one uploaded cluster: `g_k` plus `L_k` ordered by domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPrototypes {
    pub global: Vec<f64>,
    pub local: Vec<LocalPrototype>,
}

/// Server reply for one domain, indexed by upload position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototypes {
    pub domain_id: usize,
    pub clusters: Vec<ClusterPrototypes>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerPrototypes {
    pub domains: BTreeMap<usize, DomainPrototypes>,
}

/// A prototype that shares at least one overlap user with the anchor cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'a> {
    pub domain: usize,
    pub cluster: usize,
    pub vector: &'a [f64],
}

fn find_upload(uploads: &[ClientUpload], domain: usize) -> Result<&ClientUpload, ServerError> {
    uploads
        .iter()
        .find(|u| u.domain_id == domain)
        .ok_or(ServerError::UnknownDomain(domain))
}

/// Candidates for cluster `cluster` of `domain`, ordered by `(domain, cluster)`.
/// The anchor itself is always included.
pub fn build_candidate_sets<'a>(
    uploads: &'a [ClientUpload],
    domain: usize,
    cluster: usize,
) -> Result<Vec<Candidate<'a>>, ServerError> {
    let anchor = find_upload(uploads, domain)?;
    let members = anchor
        .overlap_sets
        .get(cluster)
        .ok_or(ServerError::UnknownCluster { domain, cluster })?;
    let mut out = Vec::new();
    for up in uploads {
        for (j, (vector, set)) in up.diff_protos.iter().zip(&up.overlap_sets).enumerate() {
            let is_anchor = up.domain_id == domain && j == cluster;
            if is_anchor || !set.is_disjoint(members) {
                out.push(Candidate {
                    domain: up.domain_id,
                    cluster: j,
                    vector,
                });
            }
        }
    }
    out.sort_by_key(|c| (c.domain, c.cluster));
    Ok(out)
}

/// Coordinate-wise mean. Each coordinate is summed in sorted order so the
/// result does not depend on candidate order.
pub fn aggregate_global(candidates: &[&[f64]]) -> Result<Vec<f64>, ServerError> {
    let first = candidates.first().ok_or(ServerError::EmptyCandidates)?;
    let dim = first.len();
    let n = candidates.len() as f64;
    let mut column = Vec::with_capacity(candidates.len());
    Ok((0..dim)
        .map(|i| {
            column.clear();
            column.extend(candidates.iter().map(|c| c[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect())
}

/// Per contributing domain, the candidate most cosine-similar to `anchor`.
///
/// Ties keep the lowest `(domain, cluster)`. A zero vector has similarity 0
/// to everything, so a zero anchor selects each domain's lowest cluster.
pub fn select_local(anchor: &[f64], candidates: &[Candidate]) -> Vec<LocalPrototype> {
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| (c.domain, c.cluster));
    let mut best: BTreeMap<usize, (f64, &Candidate)> = BTreeMap::new();
    for c in sorted {
        let sim = cosine(anchor, c.vector).unwrap_or(0.0);
        match best.get(&c.domain) {
            Some(&(s, _)) if !(sim > s) => {}
            _ => {
                best.insert(c.domain, (sim, c));
            }
        }
    }
    best.into_values()
        .map(|(_, c)| LocalPrototype {
            domain: c.domain,
            cluster: c.cluster,
            vector: c.vector.to_vec(),
        })
        .collect()
}

/// Global and local prototypes for every uploaded cluster.
pub fn aggregate_round(uploads: &[ClientUpload]) -> Result<ServerPrototypes, ServerError> {
    let mut seen = BTreeSet::new();
    for up in uploads {
        if !seen.insert(up.domain_id) {
            return Err(ServerError::DuplicateDomain(up.domain_id));
        }
        up.validate()?;
    }
    let mut out = ServerPrototypes::default();
    for up in uploads {
        let mut clusters = Vec::with_capacity(up.len());
        for (j, anchor) in up.diff_protos.iter().enumerate() {
            let cands = build_candidate_sets(uploads, up.domain_id, j)?;
            let vectors: Vec<&[f64]> = cands.iter().map(|c| c.vector).collect();
            clusters.push(ClusterPrototypes {
                global: aggregate_global(&vectors)?,
                local: select_local(anchor, &cands),
            });
        }
        out.domains.insert(up.domain_id, DomainPrototypes {
            domain_id: up.domain_id,
            clusters,
        });
    }
    Ok(out)
}

/// One per-round, per-domain log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundLogRecord {
    pub round: u64,
    pub domain: usize,
    pub l_prd: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub k_prime: usize,
    /// `None` when there is no noise.
    pub epsilon: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("no domains to train")]
    NoDomains,
}

/// A domain ready for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedDomain {
    pub dataset: InteractionDataset,
    pub split: SplitDataset,
}

impl PreparedDomain {
    /// Leave-one-out split plus `n_test` sampled test negatives per user.
    pub fn new(
        dataset: InteractionDataset,
        n_test: usize,
        train_negative_ratio: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let path = [dataset.domain_id as u64];
        let split = leave_one_out_split(&dataset, derive_seed(seed, "split", &path))?;
        let split = sample_negatives(
            &dataset,
            &split,
            n_test,
            train_negative_ratio,
            derive_seed(seed, "test-negatives", &path),
        )?;
        Ok(Self { dataset, split })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FederationOptions {
    /// Run clients on separate threads within a round.
    pub parallel: bool,
    /// When false, `wall_ms` is always 0 so logs are byte-identical across runs.
    pub record_wall_time: bool,
    /// Keep every round's uploads and clean representatives (attack harness only).
    pub collect_history: bool,
}

/// One round of one client as seen by the attack harness.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub round: u64,
    pub upload: ClientUpload,
    pub clean: Option<RepresentativePrototypes>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub clients: Vec<ClientState>,
    pub data: Vec<ClientData>,
    pub log: Vec<RoundLogRecord>,
    pub reports: Vec<RoundReport>,
    pub history: BTreeMap<usize, Vec<HistoryEntry>>,
    /// Server reply after the last round.
    pub last_download: ServerPrototypes,
}

/// Builds client states for every domain.
pub fn init_clients(
    hyper: &Hyperparams,
    domains: &[PreparedDomain],
    registry: &OverlapRegistry,
) -> Result<(Vec<ClientState>, Vec<ClientData>), FederationError> {
    if domains.is_empty() {
        return Err(FederationError::NoDomains);
    }
    hyper.validate()?;
    let data: Vec<ClientData> = domains
        .iter()
        .map(|d| ClientData::new(&d.dataset, &d.split, registry, hyper))
        .collect();
    let clients = data
        .iter()
        .map(|d| ClientState::new(d, hyper))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((clients, data))
}

/// Round-by-round driver. Each round every client trains on the previous
/// round's server reply, then uploads; the server aggregates once all uploads
/// are in. Results do not depend on `parallel`.
#[derive(Debug, Clone)]
pub struct Federation {
    pub hyper: Hyperparams,
    pub options: FederationOptions,
    pub clients: Vec<ClientState>,
    pub data: Vec<ClientData>,
    pub download: ServerPrototypes,
    pub log: Vec<RoundLogRecord>,
    pub reports: Vec<RoundReport>,
    pub history: BTreeMap<usize, Vec<HistoryEntry>>,
    next_round: u64,
}

impl Federation {
    pub fn new(
        hyper: &Hyperparams,
        domains: &[PreparedDomain],
        registry: &OverlapRegistry,
        options: &FederationOptions,
    ) -> Result<Self, FederationError> {
        let (clients, data) = init_clients(hyper, domains, registry)?;
        Ok(Self {
            hyper: hyper.clone(),
            options: options.clone(),
            clients,
            data,
            download: ServerPrototypes::default(),
            log: Vec::new(),
            reports: Vec::new(),
            history: BTreeMap::new(),
            next_round: 0,
        })
    }

    /// Rounds completed so far.
    pub fn rounds_done(&self) -> u64 {
        self.next_round
    }

    /// Runs one round and returns its log records, ordered by domain.
    /// On error the log keeps every record of earlier rounds.
    pub fn step(&mut self) -> Result<&[RoundLogRecord], FederationError> {
        let round = self.next_round;
        let download = &self.download;
        let step = |client: &mut ClientState, d: &ClientData| {
            let start = Instant::now();
            let out = local_update(client, d, download.domains.get(&client.domain_id), round);
            (out, start.elapsed().as_millis() as u64)
        };
        let results: Vec<_> = if self.options.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .clients
                    .iter_mut()
                    .zip(&self.data)
                    .map(|(c, d)| s.spawn(move || step(c, d)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client thread panicked"))
                    .collect()
            })
        } else {
            self.clients.iter_mut().zip(&self.data).map(|(c, d)| step(c, d)).collect()
        };

        let outs = results
            .into_iter()
            .map(|(out, ms)| out.map(|o| (o, ms)))
            .collect::<Result<Vec<_>, _>>()?;
        let start = self.log.len();
        let epsilon = self.hyper.epsilon();
        let mut uploads = Vec::with_capacity(outs.len());
        for (out, ms) in outs {
            let r = &out.report;
            self.log.push(RoundLogRecord {
                round,
                domain: r.domain_id,
                l_prd: r.mean.prediction,
                l_global: r.mean.global,
                l_local: r.mean.local,
                k_prime: r.k_prime,
                epsilon,
                wall_ms: if self.options.record_wall_time { ms } else { 0 },
            });
            if self.options.collect_history {
                self.history.entry(r.domain_id).or_default().push(HistoryEntry {
                    round,
                    upload: out.upload.clone(),
                    clean: out.clean.clone(),
                });
            }
            self.reports.push(out.report);
            uploads.push(out.upload);
        }
        self.log[start..].sort_by_key(|r| r.domain);
        uploads.sort_by_key(|u| u.domain_id);
        self.download = aggregate_round(&uploads)?;
        self.next_round += 1;
        Ok(&self.log[start..])
    }

    pub fn finish(self) -> FederationOutcome {
        FederationOutcome {
            clients: self.clients,
            data: self.data,
            log: self.log,
            reports: self.reports,
            history: self.history,
            last_download: self.download,
        }
    }
}

/// Trains all domains for `hyper.rounds` rounds.
pub fn run_federation(
    hyper: &Hyperparams,
    domains: &[PreparedDomain],
    registry: &OverlapRegistry,
    options: &FederationOptions,
) -> Result<FederationOutcome, FederationError> {
    let mut fed = Federation::new(hyper, domains, registry, options)?;
    for _ in 0..hyper.rounds {
        fed.step()?;
    }
    Ok(fed.finish())
}

/// One JSON object per line.
pub fn round_log_jsonl(log: &[RoundLogRecord]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("log record serializes"));
        s.push('\n');
    }
    s
}
