//! Planted-cluster multi-domain interaction data for tests and demos.

use rand::Rng;

use crate::dataset::{InteractionDataset, InteractionMatrix, RawInteractions, RawRecord, Vocabulary};
use crate::rng::stream;

/// Users belong to one of `clusters` preference groups, shared across domains.
/// Each domain's items are split into as many equal blocks; a user draws each
/// interaction from their cluster's block with probability `affinity`, and
/// uniformly from all items otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub users_per_domain: usize,
    /// Users present in every domain, with the same cluster everywhere.
    pub overlap_users: usize,
    pub clusters: usize,
    pub items_per_domain: usize,
    /// Inclusive range of interactions per user and domain.
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            domains: 2,
            users_per_domain: 300,
            overlap_users: 30,
            clusters: 10,
            items_per_domain: 500,
            min_per_user: 12,
            max_per_user: 24,
            affinity: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub datasets: Vec<InteractionDataset>,
    /// Planted cluster of each user, per domain, aligned with `users`.
    pub user_clusters: Vec<Vec<usize>>,
}

fn item_id(domain: usize, i: usize) -> String {
    format!("d{domain}_i{i}")
}

/// Generates the datasets deterministically from `config.seed`.
///
/// Overlap users are `o0..`, domain-specific users `d{k}_u0..`; every item
/// is kept in the vocabulary even if nobody interacts with it.
pub fn generate(config: &SyntheticConfig) -> SyntheticData {
    assert!(config.overlap_users <= config.users_per_domain);
    assert!(config.clusters >= 1 && config.items_per_domain >= config.clusters);
    assert!(config.min_per_user >= 1 && config.min_per_user <= config.max_per_user);
    assert!(config.max_per_user < config.items_per_domain);
    let mut rng = stream(config.seed, "synthetic", &[]);
    let overlap_cluster: Vec<usize> = (0..config.overlap_users)
        .map(|_| rng.random_range(0..config.clusters))
        .collect();
    let block = config.items_per_domain / config.clusters;

    let mut datasets = Vec::with_capacity(config.domains);
    let mut user_clusters = Vec::with_capacity(config.domains);
    for d in 0..config.domains {
        let mut rng = stream(config.seed, "synthetic-domain", &[d as u64]);
        let mut users = Vocabulary::default();
        let mut clusters = Vec::with_capacity(config.users_per_domain);
        for (j, &c) in overlap_cluster.iter().enumerate() {
            users.intern(&format!("o{j}"));
            clusters.push(c);
        }
        for j in 0..config.users_per_domain - config.overlap_users {
            users.intern(&format!("d{d}_u{j}"));
            clusters.push(rng.random_range(0..config.clusters));
        }
        let mut items = Vocabulary::default();
        for i in 0..config.items_per_domain {
            items.intern(&item_id(d, i));
        }
        let mut rows = Vec::with_capacity(users.len());
        for &c in &clusters {
            let n = rng.random_range(config.min_per_user..=config.max_per_user);
            let mut row = std::collections::BTreeSet::new();
            while row.len() < n {
                let item = if rng.random::<f64>() < config.affinity {
                    c * block + rng.random_range(0..block)
                } else {
                    rng.random_range(0..config.items_per_domain)
                };
                row.insert(item);
            }
            rows.push(row);
        }
        let pairs = rows
            .iter()
            .enumerate()
            .flat_map(|(u, r)| r.iter().map(move |&i| (u, i)));
        let interactions = InteractionMatrix::from_pairs(users.len(), items.len(), pairs);
        datasets.push(InteractionDataset {
            domain_id: d,
            users,
            items,
            interactions,
            review_user: None,
            review_item: None,
        });
        user_clusters.push(clusters);
    }
    SyntheticData {
        datasets,
        user_clusters,
    }
}

/// Raw rating log for a dataset, every rating 5, in user then item order.
pub fn to_raw(ds: &InteractionDataset) -> RawInteractions {
    RawInteractions {
        records: ds
            .interactions
            .pairs()
            .map(|(u, i)| RawRecord {
                user_id: ds.users.id(u).to_string(),
                item_id: ds.items.id(i).to_string(),
                rating: 5.0,
                timestamp: None,
            })
            .collect(),
    }
}

/// CSV text in the loader's format.
pub fn to_csv(raw: &RawInteractions) -> String {
    let mut s = String::from("user_id,item_id,rating\n");
    for r in &raw.records {
        s.push_str(&format!("{},{},{}\n", r.user_id, r.item_id, r.rating));
    }
    s
}
