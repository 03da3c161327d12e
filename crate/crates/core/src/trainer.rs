//! One client's local update: mini-batch Adam training on the combined
//! objective, then clustering, representative selection and noising.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    full_interactions, sample_training_groups, InteractionDataset, InteractionMatrix, OverlapRegistry, Sample,
    SplitDataset, Vocabulary,
};
use crate::graph::{build_normalized_adjacency_lenient, EmbeddingState, FusedEmbeddings, GraphError, NormAdjacency};
use crate::linalg::Matrix;
use crate::losses::{
    backward, forward_loss, review_channel, ClAssignment, LossBreakdown, LossError, MlpParams, ModelView,
    PrototypeTargets,
};
use crate::nn::MlpAdam;
use crate::optim::{adam_step, AdamState, OptimError};
use crate::proto::{apply_ldp, kmeans, privacy_budget, select_representative, ProtoError, RepresentativePrototypes};
use crate::rng::{derive_seed, stream};
use crate::server::{ClientUpload, DomainPrototypes};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("non-finite values in domain {domain}, round {round}, epoch {epoch}, batch {batch}: {what}")]
    NonFinite {
        domain: usize,
        round: u64,
        epoch: usize,
        batch: usize,
        what: String,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("client state does not match its data: {0}")]
    StateMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub lr: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Clusters per domain.
    pub k: usize,
    /// Embedding dimension per layer.
    pub d: usize,
    /// Propagation depth.
    pub layers: usize,
    /// Positive pairs per batch; each carries `train_negative_ratio` negatives.
    pub batch_size: usize,
    pub epochs: usize,
    pub rounds: usize,
    pub beta: f64,
    pub eta: f64,
    pub train_negative_ratio: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub init_std: f64,
    /// Rounds without holdout improvement before a client stops training; 0 disables.
    pub patience: usize,
    /// Fraction of training positives held out for early stopping.
    pub holdout_fraction: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.001,
            alpha: 0.01,
            tau: 0.2,
            k: 10,
            d: 64,
            layers: 3,
            batch_size: 256,
            epochs: 5,
            rounds: 20,
            beta: 1.0,
            eta: 0.5,
            train_negative_ratio: 4,
            seed: 42,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            init_std: 0.01,
            patience: 3,
            holdout_fraction: 0.05,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyperparams(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if self.k == 0 || self.d == 0 || self.batch_size == 0 || self.rounds == 0 {
            return bad("k, d, batch_size and rounds must be positive");
        }
        if self.kmeans_max_iters == 0 || !(self.kmeans_tol >= 0.0) {
            return bad("kmeans_max_iters must be positive and kmeans_tol >= 0");
        }
        if !(self.beta > 0.0) || !(self.eta >= 0.0) {
            return bad("beta must be > 0 and eta >= 0");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.d * (self.layers + 1)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("hyperparams serialize");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Privacy budget of one release, `None` when unbounded (`eta = 0`).
    pub fn epsilon(&self) -> Option<f64> {
        privacy_budget(self.beta, self.eta).ok()
    }
}

/// Static per-domain inputs a client trains on. Never leaves the client.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub domain_id: usize,
    pub users: Vocabulary,
    pub n_items: usize,
    pub split: SplitDataset,
    pub adj: NormAdjacency,
    pub full: InteractionMatrix,
    pub train_positives: Vec<(usize, usize)>,
    pub holdout: Vec<Sample>,
    /// Holdout BCE of a constant predictor at the holdout's positive rate.
    pub holdout_prior_bce: f64,
    pub registry: OverlapRegistry,
    pub review_nodes: Option<Matrix>,
}

impl ClientData {
    pub fn new(
        ds: &InteractionDataset,
        split: &SplitDataset,
        registry: &OverlapRegistry,
        hyper: &Hyperparams,
    ) -> Self {
        let full = full_interactions(split);
        let mut positives: Vec<(usize, usize)> = split.train.pairs().collect();
        let mut holdout = Vec::new();
        if hyper.patience > 0 && hyper.holdout_fraction > 0.0 {
            let mut rng = stream(hyper.seed, "holdout", &[ds.domain_id as u64]);
            let n_hold = (positives.len() as f64 * hyper.holdout_fraction).floor() as usize;
            let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, positives.len(), n_hold)
                .into_iter()
                .collect();
            let held: Vec<(usize, usize)> = picked.iter().map(|&i| positives[i]).collect();
            positives = positives
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !picked.contains(i))
                .map(|(_, p)| p)
                .collect();
            let seed = derive_seed(hyper.seed, "holdout-negatives", &[ds.domain_id as u64]);
            for g in sample_training_groups(&held, &full, hyper.train_negative_ratio, seed) {
                holdout.push(g.positive);
                holdout.extend(g.negatives);
            }
        }
        let holdout_prior_bce = prior_bce(&holdout);
        let review_nodes = match (&ds.review_user, &ds.review_item) {
            (Some(u), Some(i)) => {
                let mut data = u.as_slice().to_vec();
                data.extend_from_slice(i.as_slice());
                Matrix::from_vec(u.rows() + i.rows(), u.cols(), data)
            }
            _ => None,
        };
        let own_index = registry.per_domain_index.get(&ds.domain_id).cloned().unwrap_or_default();
        let registry = OverlapRegistry {
            overlap_users: own_index.keys().filter(|u| registry.contains(u)).cloned().collect(),
            per_domain_index: [(ds.domain_id, own_index)].into_iter().collect(),
        };
        Self {
            domain_id: ds.domain_id,
            users: ds.users.clone(),
            n_items: ds.n_items(),
            split: split.clone(),
            adj: build_normalized_adjacency_lenient(&split.train),
            full,
            train_positives: positives,
            holdout,
            holdout_prior_bce,
            registry,
            review_nodes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.users.len() + self.n_items
    }
}

fn prior_bce(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return f64::INFINITY;
    }
    let p = samples.iter().map(|s| s.label).sum::<f64>() / samples.len() as f64;
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Adam moments for the ID table and every head tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAdam {
    pub id_embed: AdamState,
    pub head: MlpAdam,
}

/// Cluster assignment from the client's last upload, used to pick each
/// user's prototypes in the next round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMemory {
    pub assignments: Vec<usize>,
    /// Upload position of each cluster, `None` for clusters that were not uploaded.
    pub upload_position: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    /// Set once the holdout loss beats the label-prior baseline; patience only counts after that.
    pub armed: bool,
    pub best: f64,
    pub bad_rounds: usize,
    pub stopped: bool,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            armed: false,
            best: f64::INFINITY,
            bad_rounds: 0,
            stopped: false,
        }
    }
}

/// Everything a client owns and updates: model parameters and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub domain_id: usize,
    pub hyper: Hyperparams,
    pub embedding: EmbeddingState,
    pub mlp: MlpParams,
    pub adam: ClientAdam,
    pub clusters: Option<ClusterMemory>,
    pub early_stop: EarlyStopState,
    pub rounds_completed: u64,
}

impl ClientState {
    pub fn new(data: &ClientData, hyper: &Hyperparams) -> Result<Self, TrainError> {
        hyper.validate()?;
        let seed = derive_seed(hyper.seed, "client-init", &[data.domain_id as u64]);
        let embedding = EmbeddingState::init(
            data.n_nodes(),
            hyper.d,
            hyper.layers,
            hyper.init_std,
            seed,
            data.review_nodes.clone(),
        )?;
        let mlp = MlpParams::new(hyper.fused_dim(), &mut stream(seed, "head", &[]));
        let adam = ClientAdam {
            id_embed: AdamState::new(embedding.id_embed_0.as_slice().len()),
            head: MlpAdam::new(&mlp.mlp),
        };
        Ok(Self {
            domain_id: data.domain_id,
            hyper: hyper.clone(),
            embedding,
            mlp,
            adam,
            clusters: None,
            early_stop: EarlyStopState::default(),
            rounds_completed: 0,
        })
    }

    /// Fused user and item embeddings under the current parameters.
    pub fn embeddings(&self, adj: &NormAdjacency) -> Result<FusedEmbeddings, GraphError> {
        let nodes = self.embedding.fused(adj)?;
        Ok(FusedEmbeddings::from_nodes(&nodes, adj.n_users()))
    }
}

/// Per-round training summary for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub domain_id: usize,
    pub round: u64,
    /// Mean losses over every batch of the round.
    pub mean: LossBreakdown,
    /// Mean losses per epoch.
    pub epochs: Vec<LossBreakdown>,
    /// Largest per-batch contrastive losses seen this round.
    pub max_global: f64,
    pub max_local: f64,
    pub batches: usize,
    pub k_prime: usize,
    pub holdout_bce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateOutcome {
    pub upload: ClientUpload,
    pub report: RoundReport,
    /// Clean representatives behind the upload; kept client-side (attack harness only).
    pub clean: Option<RepresentativePrototypes>,
}

/// Converts a download into loss targets for `domain_id`.
pub fn prototype_targets(download: &DomainPrototypes, domain_id: usize) -> PrototypeTargets {
    PrototypeTargets {
        global: download.clusters.iter().map(|c| c.global.clone()).collect(),
        local: download
            .clusters
            .iter()
            .map(|c| c.local.iter().map(|l| l.vector.clone()).collect())
            .collect(),
        own_local: download
            .clusters
            .iter()
            .map(|c| c.local.iter().find(|l| l.domain == domain_id).map(|l| l.vector.clone()))
            .collect(),
    }
}

fn mean_breakdown(xs: &[LossBreakdown]) -> LossBreakdown {
    if xs.is_empty() {
        return LossBreakdown::default();
    }
    let n = xs.len() as f64;
    LossBreakdown {
        prediction: xs.iter().map(|x| x.prediction).sum::<f64>() / n,
        global: xs.iter().map(|x| x.global).sum::<f64>() / n,
        local: xs.iter().map(|x| x.local).sum::<f64>() / n,
        total: xs.iter().map(|x| x.total).sum::<f64>() / n,
    }
}

/// Runs `epochs` of training, then extracts, filters and noises prototypes.
///
/// `download` is the server's reply to the previous round; `None` or an empty
/// set switches both contrastive losses off.
pub fn local_update(
    client: &mut ClientState,
    data: &ClientData,
    download: Option<&DomainPrototypes>,
    round: u64,
) -> Result<LocalUpdateOutcome, TrainError> {
    let hyper = client.hyper.clone();
    let domain = client.domain_id;
    if data.domain_id != domain || data.n_nodes() != client.embedding.n_nodes() {
        return Err(TrainError::StateMismatch(format!("domain {domain}")));
    }
    let targets = download
        .map(|d| prototype_targets(d, domain))
        .unwrap_or_default();
    let cl_active = !targets.is_empty();
    let rev_cat = review_channel(&client.embedding, &data.adj)?;

    let mut batch_losses = Vec::new();
    let mut epoch_means = Vec::new();
    let (mut max_global, mut max_local) = (0.0f64, 0.0f64);
    let epochs = if client.early_stop.stopped { 0 } else { hyper.epochs };
    for epoch in 0..epochs {
        let seed = derive_seed(hyper.seed, "train-negatives", &[domain as u64, round, epoch as u64]);
        let groups = sample_training_groups(&data.train_positives, &data.full, hyper.train_negative_ratio, seed);
        let mut epoch_losses = Vec::new();
        for (b, chunk) in groups.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .flat_map(|g| std::iter::once(g.positive).chain(g.negatives.iter().copied()))
                .collect();
            let (cl_users, cl_clusters) = if cl_active {
                cl_members(&batch, client.clusters.as_ref(), targets.n_clusters())
            } else {
                (Vec::new(), Vec::new())
            };
            let cl = (!cl_users.is_empty()).then_some(ClAssignment {
                users: &cl_users,
                clusters: &cl_clusters,
                targets: &targets,
            });
            let model = ModelView {
                state: &client.embedding,
                adj: &data.adj,
                rev_cat: &rev_cat,
                head: &client.mlp,
            };
            let non_finite = |what: String| TrainError::NonFinite {
                domain,
                round,
                epoch,
                batch: b,
                what,
            };
            let (loss, grads) = match backward(model, &batch, cl, hyper.tau, hyper.alpha) {
                Err(LossError::NonFinite(what)) => return Err(non_finite(what)),
                other => other?,
            };
            if !loss.total.is_finite() {
                return Err(non_finite("loss".into()));
            }
            adam_step(
                client.embedding.id_embed_0.as_mut_slice(),
                grads.id_embed.as_slice(),
                &mut client.adam.id_embed,
                hyper.lr,
            )
            .map_err(|e| non_finite(e.to_string()))?;
            client
                .adam
                .head
                .step(&mut client.mlp.mlp, &grads.head, hyper.lr)
                .map_err(|e| non_finite(e.to_string()))?;
            max_global = max_global.max(loss.global);
            max_local = max_local.max(loss.local);
            epoch_losses.push(loss);
        }
        epoch_means.push(mean_breakdown(&epoch_losses));
        batch_losses.extend(epoch_losses);
    }

    let holdout_bce = if data.holdout.is_empty() || client.early_stop.stopped {
        None
    } else {
        let model = ModelView {
            state: &client.embedding,
            adj: &data.adj,
            rev_cat: &rev_cat,
            head: &client.mlp,
        };
        Some(forward_loss(model, &data.holdout, None, hyper.tau, hyper.alpha)?.prediction)
    };
    if let Some(bce) = holdout_bce {
        let es = &mut client.early_stop;
        es.armed |= bce < data.holdout_prior_bce;
        if es.armed && bce < es.best {
            es.best = bce;
            es.bad_rounds = 0;
        } else if es.armed {
            es.bad_rounds += 1;
            if hyper.patience > 0 && es.bad_rounds >= hyper.patience {
                es.stopped = true;
            }
        }
    }

    let fused = client.embeddings(&data.adj)?;
    let k = hyper.k.min(fused.user.rows());
    let kseed = derive_seed(hyper.seed, "kmeans", &[domain as u64, round]);
    let protos = kmeans(&fused.user, k, hyper.kmeans_max_iters, hyper.kmeans_tol, kseed)?;
    let (upload, clean, memory) = match select_representative(&protos, &data.registry, domain) {
        Ok(rep) => {
            let lseed = derive_seed(hyper.seed, "ldp", &[domain as u64, round]);
            let noised = apply_ldp(&rep, hyper.beta, hyper.eta, lseed)?;
            let mut upload_position = vec![None; protos.k];
            for (pos, &c) in rep.cluster_ids.iter().enumerate() {
                upload_position[c] = Some(pos);
            }
            let upload = ClientUpload {
                domain_id: domain,
                diff_protos: noised.centroids,
                overlap_sets: rep.overlap_members.clone(),
            };
            (upload, Some(rep), ClusterMemory {
                assignments: protos.assignments.clone(),
                upload_position,
            })
        }
        Err(ProtoError::NoOverlapClusters) => (ClientUpload::empty(domain), None, ClusterMemory {
            assignments: protos.assignments.clone(),
            upload_position: vec![None; protos.k],
        }),
        Err(e) => return Err(e.into()),
    };
    client.clusters = Some(memory);
    client.rounds_completed += 1;

    let report = RoundReport {
        domain_id: domain,
        round,
        mean: mean_breakdown(&batch_losses),
        epochs: epoch_means,
        max_global,
        max_local,
        batches: batch_losses.len(),
        k_prime: upload.len(),
        holdout_bce,
    };
    Ok(LocalUpdateOutcome { upload, report, clean })
}

/// Unique batch users (ascending) whose cluster has a downloaded prototype.
fn cl_members(batch: &[Sample], memory: Option<&ClusterMemory>, n_clusters: usize) -> (Vec<usize>, Vec<usize>) {
    let Some(memory) = memory else {
        return (Vec::new(), Vec::new());
    };
    let users: BTreeSet<usize> = batch.iter().map(|s| s.user).collect();
    users
        .into_iter()
        .filter_map(|u| {
            let pos = memory.upload_position[memory.assignments[u]]?;
            (pos < n_clusters).then_some((u, pos))
        })
        .unzip()
}
