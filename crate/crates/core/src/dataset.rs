//! Interaction ingestion, filtering, overlap detection and leave-one-out splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error on line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("rating {rating} on line {line} is outside [0, 5]")]
    RangeError { line: usize, rating: f64 },
    #[error("filtering removed every interaction")]
    EmptyDataset,
    #[error("min_interactions must be at least 1")]
    InvalidThreshold,
    #[error("user {0} has fewer than 2 interactions")]
    InsufficientInteractions(String),
    #[error("user {0} has too few uninteracted items to sample negatives from")]
    InsufficientItems(String),
    #[error("no review embedding for entity {0}")]
    MissingReviewEmbedding(String),
    #[error("review embedding dimension {found} does not match expected {expected}")]
    ReviewDimMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawInteractions {
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    Csv,
}

fn read_file(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DatasetError::FileNotFound(path.display().to_string())
        } else {
            DatasetError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        }
    })
}

pub fn load_interactions(
    path: impl AsRef<Path>,
    format: InteractionFormat,
) -> Result<RawInteractions, DatasetError> {
    let text = read_file(path.as_ref())?;
    match format {
        InteractionFormat::Csv => parse_interactions_csv(&text),
    }
}

/// Parses `user_id,item_id,rating[,timestamp]` rows after a header line.
/// Line numbers in errors are 1-based and count the header.
pub fn parse_interactions_csv(text: &str) -> Result<RawInteractions, DatasetError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DatasetError::ParseError {
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: Vec<&str> = header.trim_end_matches('\r').split(',').map(str::trim).collect();
    let with_ts = match header.as_slice() {
        ["user_id", "item_id", "rating"] => false,
        ["user_id", "item_id", "rating", "timestamp"] => true,
        _ => {
            return Err(DatasetError::ParseError {
                line: 1,
                reason: "expected header user_id,item_id,rating[,timestamp]".into(),
            })
        }
    };
    let expected_fields = if with_ts { 4 } else { 3 };

    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |reason: &str| DatasetError::ParseError {
            line: lineno,
            reason: reason.to_string(),
        };
        if fields.len() != expected_fields {
            return Err(bad("wrong field count"));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(bad("empty id"));
        }
        let rating: f64 = fields[2].parse().map_err(|_| bad("rating is not a number"))?;
        if !(0.0..=5.0).contains(&rating) {
            return Err(DatasetError::RangeError {
                line: lineno,
                rating,
            });
        }
        let timestamp = if with_ts {
            Some(fields[3].parse().map_err(|_| bad("timestamp is not an integer"))?)
        } else {
            None
        };
        records.push(RawRecord {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(RawInteractions { records })
}

/// Ordered string vocabulary with dense indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.ids
    }
}

impl Vocabulary {
    /// Inserts `id` if unseen and returns its dense index.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sparse binary matrix stored as sorted column lists per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<Vec<usize>>,
}

impl InteractionMatrix {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            rows: vec![Vec::new(); n_rows],
        }
    }

    /// Builds from `(row, col)` pairs; duplicates collapse to a single 1.
    pub fn from_pairs(n_rows: usize, n_cols: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(n_rows, n_cols);
        for (r, c) in pairs {
            assert!(r < n_rows && c < n_cols, "pair ({r},{c}) out of bounds");
            m.rows[r].push(c);
        }
        for row in &mut m.rows {
            row.sort_unstable();
            row.dedup();
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows[r].binary_search(&c).is_ok()
    }

    /// Entry value: 1.0 for stored pairs, 0.0 otherwise.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if self.contains(r, c) {
            1.0
        } else {
            0.0
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn col_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_cols];
        for row in &self.rows {
            for &c in row {
                deg[c] += 1;
            }
        }
        deg
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, cols)| cols.iter().map(move |&c| (r, c)))
    }

    fn remove(&mut self, r: usize, c: usize) -> bool {
        match self.rows[r].binary_search(&c) {
            Ok(pos) => {
                self.rows[r].remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    fn insert(&mut self, r: usize, c: usize) {
        if let Err(pos) = self.rows[r].binary_search(&c) {
            self.rows[r].insert(pos, c);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub domain_id: usize,
    pub users: Vocabulary,
    pub items: Vocabulary,
    pub interactions: InteractionMatrix,
    pub review_user: Option<Matrix>,
    pub review_item: Option<Matrix>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Attaches precomputed review embeddings, checking row counts and dimension.
    pub fn with_reviews(
        mut self,
        review_user: Option<Matrix>,
        review_item: Option<Matrix>,
    ) -> Result<Self, DatasetError> {
        for (m, n) in [(&review_user, self.n_users()), (&review_item, self.n_items())] {
            if let Some(m) = m {
                if m.rows() != n {
                    return Err(DatasetError::ReviewDimMismatch {
                        expected: n,
                        found: m.rows(),
                    });
                }
            }
        }
        if let (Some(u), Some(i)) = (&review_user, &review_item) {
            if u.cols() != i.cols() {
                return Err(DatasetError::ReviewDimMismatch {
                    expected: u.cols(),
                    found: i.cols(),
                });
            }
        }
        self.review_user = review_user;
        self.review_item = review_item;
        Ok(self)
    }
}

/// Removes users and items with fewer than `min_interactions` distinct partners,
/// iterating until nothing changes, and maps every surviving pair to 1.
///
/// Dense indices follow first appearance in the original record order.
pub fn filter_and_binarize(
    raw: &RawInteractions,
    min_interactions: usize,
    domain_id: usize,
) -> Result<InteractionDataset, DatasetError> {
    if min_interactions == 0 {
        return Err(DatasetError::InvalidThreshold);
    }
    // Provisional indices over the raw log.
    let mut users = Vocabulary::default();
    let mut items = Vocabulary::default();
    let mut pairs = Vec::with_capacity(raw.records.len());
    for rec in &raw.records {
        pairs.push((users.intern(&rec.user_id), items.intern(&rec.item_id)));
    }
    let mut alive_pairs: HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let mut user_alive = vec![true; users.len()];
    let mut item_alive = vec![true; items.len()];

    loop {
        let mut user_deg = vec![0usize; users.len()];
        let mut item_deg = vec![0usize; items.len()];
        for &(u, i) in &alive_pairs {
            user_deg[u] += 1;
            item_deg[i] += 1;
        }
        let mut changed = false;
        for (u, alive) in user_alive.iter_mut().enumerate() {
            if *alive && user_deg[u] < min_interactions {
                *alive = false;
                changed = true;
            }
        }
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_deg[i] < min_interactions {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        alive_pairs.retain(|&(u, i)| user_alive[u] && item_alive[i]);
    }

    if alive_pairs.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }

    let mut final_users = Vocabulary::default();
    let mut final_items = Vocabulary::default();
    let mut final_pairs = Vec::with_capacity(alive_pairs.len());
    for &(u, i) in &pairs {
        if alive_pairs.contains(&(u, i)) {
            let fu = final_users.intern(users.id(u));
            let fi = final_items.intern(items.id(i));
            final_pairs.push((fu, fi));
        }
    }
    let interactions =
        InteractionMatrix::from_pairs(final_users.len(), final_items.len(), final_pairs);
    Ok(InteractionDataset {
        domain_id,
        users: final_users,
        items: final_items,
        interactions,
        review_user: None,
        review_item: None,
    })
}

/// Reads a review-embedding file (`entity_id,dim=<d>` header, then
/// `entity_id,f0,...,f{d-1}` rows) and returns rows aligned to `vocab`.
/// Entities absent from the vocabulary are ignored.
pub fn load_review_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<Matrix, DatasetError> {
    let text = read_file(path.as_ref())?;
    parse_review_embeddings(&text, vocab)
}

pub fn parse_review_embeddings(text: &str, vocab: &Vocabulary) -> Result<Matrix, DatasetError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DatasetError::ParseError {
        line: 1,
        reason: "missing header".into(),
    })?;
    let dim: usize = header
        .trim()
        .strip_prefix("entity_id,dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or(DatasetError::ParseError {
            line: 1,
            reason: "expected header entity_id,dim=<d>".into(),
        })?;
    let mut out = Matrix::zeros(vocab.len(), dim);
    let mut seen = vec![false; vocab.len()];
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut fields = line.trim_end_matches('\r').split(',');
        let id = fields.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(DatasetError::ParseError {
                line: lineno,
                reason: "empty entity id".into(),
            });
        }
        let values: Result<Vec<f64>, _> = fields.map(|f| f.trim().parse::<f64>()).collect();
        let values = values.map_err(|_| DatasetError::ParseError {
            line: lineno,
            reason: "non-numeric feature".into(),
        })?;
        if values.len() != dim {
            return Err(DatasetError::ParseError {
                line: lineno,
                reason: format!("expected {dim} features, found {}", values.len()),
            });
        }
        if let Some(r) = vocab.get(id) {
            out.row_mut(r).copy_from_slice(&values);
            seen[r] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DatasetError::MissingReviewEmbedding(vocab.id(missing).to_string()));
    }
    Ok(out)
}

/// Users whose id appears in two or more domains.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapRegistry {
    pub overlap_users: BTreeSet<String>,
    pub per_domain_index: BTreeMap<usize, BTreeMap<String, usize>>,
}

impl OverlapRegistry {
    pub fn len(&self) -> usize {
        self.overlap_users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overlap_users.is_empty()
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.overlap_users.contains(user_id)
    }

    /// Dense indices of the overlap users inside one domain.
    pub fn domain_indices(&self, domain_id: usize) -> BTreeSet<usize> {
        self.per_domain_index
            .get(&domain_id)
            .map(|m| m.values().copied().collect())
            .unwrap_or_default()
    }

    /// Keeps `floor(ratio * |overlap|)` overlap users, sampled with `seed`.
    /// Dropped users stay in their domains but stop counting as overlapping.
    pub fn subsample(&self, ratio: f64, seed: u64) -> OverlapRegistry {
        let all: Vec<&String> = self.overlap_users.iter().collect();
        let keep = ((ratio.clamp(0.0, 1.0) * all.len() as f64) + 1e-9).floor() as usize;
        let keep = keep.min(all.len());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let kept: BTreeSet<String> = index::sample(&mut rng, all.len(), keep)
            .into_iter()
            .map(|i| all[i].clone())
            .collect();
        let per_domain_index = self
            .per_domain_index
            .iter()
            .map(|(&d, m)| {
                let sub = m
                    .iter()
                    .filter(|(u, _)| kept.contains(*u))
                    .map(|(u, &i)| (u.clone(), i))
                    .collect();
                (d, sub)
            })
            .collect();
        OverlapRegistry {
            overlap_users: kept,
            per_domain_index,
        }
    }
}

/// Collects user ids shared by at least two domains.
pub fn identify_overlapping_users(datasets: &[InteractionDataset]) -> OverlapRegistry {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ds in datasets {
        for id in ds.users.ids() {
            *counts.entry(id.as_str()).or_default() += 1;
        }
    }
    let overlap_users: BTreeSet<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= 2)
        .map(|(id, _)| id.to_string())
        .collect();
    let per_domain_index = datasets
        .iter()
        .map(|ds| {
            let m = overlap_users
                .iter()
                .filter_map(|u| ds.users.get(u).map(|i| (u.clone(), i)))
                .collect();
            (ds.domain_id, m)
        })
        .collect();
    OverlapRegistry {
        overlap_users,
        per_domain_index,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: InteractionMatrix,
    /// `(user_index, positive_item_index)`, one per user, in user order.
    pub test: Vec<(usize, usize)>,
    pub train_negative_ratio: usize,
    pub test_negatives: BTreeMap<usize, Vec<usize>>,
}

impl SplitDataset {
    /// The 100-style candidate list for a test user: positive first, then negatives.
    pub fn candidates(&self, user: usize) -> Option<Vec<usize>> {
        let &(_, pos) = self.test.iter().find(|(u, _)| *u == user)?;
        let negs = self.test_negatives.get(&user)?;
        let mut c = Vec::with_capacity(negs.len() + 1);
        c.push(pos);
        c.extend_from_slice(negs);
        Some(c)
    }
}

/// Moves one uniformly chosen interaction per user into the test set.
pub fn leave_one_out_split(ds: &InteractionDataset, seed: u64) -> Result<SplitDataset, DatasetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = ds.interactions.clone();
    let mut test = Vec::with_capacity(ds.n_users());
    for u in 0..ds.n_users() {
        let row = ds.interactions.row(u);
        if row.len() < 2 {
            return Err(DatasetError::InsufficientInteractions(ds.users.id(u).to_string()));
        }
        let item = row[rng.random_range(0..row.len())];
        train.remove(u, item);
        test.push((u, item));
    }
    Ok(SplitDataset {
        train,
        test,
        train_negative_ratio: 0,
        test_negatives: BTreeMap::new(),
    })
}

/// Samples `n_test` distinct uninteracted items per test user, and records the
/// training negative ratio used by per-epoch sampling.
pub fn sample_negatives(
    ds: &InteractionDataset,
    split: &SplitDataset,
    n_test: usize,
    train_ratio: usize,
    seed: u64,
) -> Result<SplitDataset, DatasetError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut test_negatives = BTreeMap::new();
    for &(u, _) in &split.test {
        let interacted = ds.interactions.row(u);
        let pool: Vec<usize> = (0..ds.n_items())
            .filter(|i| interacted.binary_search(i).is_err())
            .collect();
        if pool.len() < n_test {
            return Err(DatasetError::InsufficientItems(ds.users.id(u).to_string()));
        }
        let mut negs: Vec<usize> = index::sample(&mut rng, pool.len(), n_test)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        negs.sort_unstable();
        test_negatives.insert(u, negs);
    }
    Ok(SplitDataset {
        train: split.train.clone(),
        test: split.test.clone(),
        train_negative_ratio: train_ratio,
        test_negatives,
    })
}

/// One labeled training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

/// A group of one positive pair and its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveGroup {
    pub positive: Sample,
    pub negatives: Vec<Sample>,
}

/// Draws `ratio` negatives for each positive in `positives`, rejecting items in `full`.
/// Negatives are drawn with replacement; the caller reseeds per epoch.
pub fn sample_training_groups(
    positives: &[(usize, usize)],
    full: &InteractionMatrix,
    ratio: usize,
    seed: u64,
) -> Vec<PositiveGroup> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_items = full.n_cols();
    let mut groups = Vec::with_capacity(positives.len());
    for &(u, i) in positives {
        let mut negatives = Vec::with_capacity(ratio);
        if full.row(u).len() < n_items {
            while negatives.len() < ratio {
                let j = rng.random_range(0..n_items);
                if !full.contains(u, j) {
                    negatives.push(Sample {
                        user: u,
                        item: j,
                        label: 0.0,
                    });
                }
            }
        }
        groups.push(PositiveGroup {
            positive: Sample {
                user: u,
                item: i,
                label: 1.0,
            },
            negatives,
        });
    }
    groups.shuffle(&mut rng);
    groups
}

/// `train ∪ test` for a split; the set negatives must avoid.
pub fn full_interactions(split: &SplitDataset) -> InteractionMatrix {
    let mut full = split.train.clone();
    for &(u, i) in &split.test {
        full.insert(u, i);
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[(&str, &str)]) -> RawInteractions {
        RawInteractions {
            records: rows
                .iter()
                .map(|(u, i)| RawRecord {
                    user_id: u.to_string(),
                    item_id: i.to_string(),
                    rating: 4.0,
                    timestamp: None,
                })
                .collect(),
        }
    }

    #[test]
    fn parses_two_rows() {
        let r = parse_interactions_csv("user_id,item_id,rating\nu1,i1,5\nu2,i1,3.5\n").unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.records[1].rating, 3.5);
    }

    #[test]
    fn timestamp_column_is_accepted() {
        let r = parse_interactions_csv("user_id,item_id,rating,timestamp\nu1,i1,5,1700000000\n").unwrap();
        assert_eq!(r.records[0].timestamp, Some(1_700_000_000));
    }

    #[test]
    fn out_of_range_rating_rejected() {
        let err = parse_interactions_csv("user_id,item_id,rating\nu1,i1,6.0\n").unwrap_err();
        assert_eq!(err, DatasetError::RangeError { line: 2, rating: 6.0 });
    }

    #[test]
    fn malformed_rows_rejected_with_line_number() {
        let err = parse_interactions_csv("user_id,item_id,rating\nu1,i1,1\nu2,i2\n").unwrap_err();
        assert!(matches!(err, DatasetError::ParseError { line: 3, .. }));
        let err = parse_interactions_csv("user_id,item_id,rating\n,i1,1\n").unwrap_err();
        assert!(matches!(err, DatasetError::ParseError { line: 2, .. }));
        let err = parse_interactions_csv("user,item,rating\n").unwrap_err();
        assert!(matches!(err, DatasetError::ParseError { line: 1, .. }));
    }

    #[test]
    fn missing_file_reported() {
        let err = load_interactions("/nonexistent/x.csv", InteractionFormat::Csv).unwrap_err();
        assert!(matches!(err, DatasetError::FileNotFound(_)));
    }

    #[test]
    fn user_below_threshold_removed() {
        let mut rows = Vec::new();
        for u in 0..10 {
            for i in 0..10 {
                rows.push((format!("u{u}"), format!("i{i}")));
            }
        }
        for i in 0..9 {
            rows.push(("x".to_string(), format!("i{i}")));
        }
        let rows: Vec<(&str, &str)> = rows.iter().map(|(u, i)| (u.as_str(), i.as_str())).collect();
        let ds = filter_and_binarize(&raw(&rows), 10, 0).unwrap();
        assert_eq!(ds.n_users(), 10);
        assert!(ds.users.get("x").is_none());
        assert_eq!(ds.interactions.nnz(), 100);
    }

    #[test]
    fn threshold_one_keeps_everything_binary() {
        let ds = filter_and_binarize(&raw(&[("u", "x"), ("u", "x"), ("v", "y")]), 1, 0).unwrap();
        assert_eq!(ds.interactions.nnz(), 2);
        assert_eq!(ds.interactions.get(0, 0), 1.0);
        assert_eq!(ds.interactions.get(0, 1), 0.0);
        assert_eq!(ds.users.ids(), &["u".to_string(), "v".to_string()]);
    }

    #[test]
    fn zero_threshold_invalid() {
        assert_eq!(
            filter_and_binarize(&raw(&[("u", "x")]), 0, 0).unwrap_err(),
            DatasetError::InvalidThreshold
        );
    }

    #[test]
    fn overlap_by_id() {
        let a = filter_and_binarize(&raw(&[("u1", "x"), ("u2", "x")]), 1, 0).unwrap();
        let b = filter_and_binarize(&raw(&[("u2", "y"), ("u3", "y")]), 1, 1).unwrap();
        let reg = identify_overlapping_users(&[a.clone(), b]);
        assert_eq!(reg.overlap_users.iter().collect::<Vec<_>>(), vec!["u2"]);
        assert_eq!(reg.per_domain_index[&0]["u2"], 1);
        assert_eq!(reg.per_domain_index[&1]["u2"], 0);

        let c = filter_and_binarize(&raw(&[("z", "y")]), 1, 1).unwrap();
        assert!(identify_overlapping_users(&[a, c]).is_empty());
    }

    #[test]
    fn loo_conserves_counts() {
        let rows: Vec<(String, String)> = (0..10).map(|k| ("u".to_string(), format!("i{k}"))).collect();
        let rows: Vec<(&str, &str)> = rows.iter().map(|(u, i)| (u.as_str(), i.as_str())).collect();
        let ds = filter_and_binarize(&raw(&rows), 1, 0).unwrap();
        let s = leave_one_out_split(&ds, 3).unwrap();
        assert_eq!(s.train.row(0).len(), 9);
        assert_eq!(s.test.len(), 1);
        assert!(!s.train.contains(0, s.test[0].1));
        assert_eq!(s, leave_one_out_split(&ds, 3).unwrap());
    }

    #[test]
    fn loo_requires_two_interactions() {
        let ds = filter_and_binarize(&raw(&[("u", "x"), ("v", "x"), ("v", "y")]), 1, 0).unwrap();
        assert_eq!(
            leave_one_out_split(&ds, 0).unwrap_err(),
            DatasetError::InsufficientInteractions("u".into())
        );
    }

    fn single_user(n_interactions: usize, n_items: usize) -> InteractionDataset {
        InteractionDataset {
            domain_id: 0,
            users: Vocabulary::from(vec!["u".to_string()]),
            items: Vocabulary::from((0..n_items).map(|i| format!("i{i}")).collect::<Vec<_>>()),
            interactions: InteractionMatrix::from_pairs(1, n_items, (0..n_interactions).map(|i| (0, i))),
            review_user: None,
            review_item: None,
        }
    }

    #[test]
    fn test_negatives_distinct_and_uninteracted() {
        let ds = single_user(50, 200);
        let split = leave_one_out_split(&ds, 1).unwrap();
        let s = sample_negatives(&ds, &split, 99, 4, 5).unwrap();
        let negs = &s.test_negatives[&0];
        assert_eq!(negs.len(), 99);
        let set: BTreeSet<_> = negs.iter().collect();
        assert_eq!(set.len(), 99);
        assert!(negs.iter().all(|&i| !ds.interactions.contains(0, i)));
        assert_eq!(s.candidates(0).unwrap().len(), 100);
    }

    #[test]
    fn too_few_items_for_negatives() {
        let ds = single_user(100, 150);
        let split = leave_one_out_split(&ds, 1).unwrap();
        assert_eq!(
            sample_negatives(&ds, &split, 99, 4, 5).unwrap_err(),
            DatasetError::InsufficientItems("u".into())
        );
    }

    #[test]
    fn training_groups_avoid_full_set() {
        let ds = single_user(10, 30);
        let split = leave_one_out_split(&ds, 1).unwrap();
        let full = full_interactions(&split);
        assert_eq!(full, ds.interactions);
        let positives: Vec<_> = split.train.pairs().collect();
        let groups = sample_training_groups(&positives, &full, 4, 9);
        assert_eq!(groups.len(), 9);
        for g in &groups {
            assert_eq!(g.negatives.len(), 4);
            assert!(g.negatives.iter().all(|n| !full.contains(n.user, n.item)));
        }
        assert_eq!(groups, sample_training_groups(&positives, &full, 4, 9));
    }

    #[test]
    fn review_file_aligns_to_vocab() {
        let vocab = Vocabulary::from(vec!["b".to_string(), "a".to_string()]);
        let m = parse_review_embeddings("entity_id,dim=2\na,1,2\nb,3,4\nzz,0,0\n", &vocab).unwrap();
        assert_eq!(m.row(0), &[3.0, 4.0]);
        assert_eq!(m.row(1), &[1.0, 2.0]);
        let err = parse_review_embeddings("entity_id,dim=2\na,1,2\n", &vocab).unwrap_err();
        assert_eq!(err, DatasetError::MissingReviewEmbedding("b".into()));
        let err = parse_review_embeddings("entity_id,dim=2\na,1\n", &vocab).unwrap_err();
        assert!(matches!(err, DatasetError::ParseError { line: 2, .. }));
    }

    #[test]
    fn registry_subsample_floor() {
        let reg = OverlapRegistry {
            overlap_users: (0..655).map(|i| format!("u{i:04}")).collect(),
            per_domain_index: BTreeMap::new(),
        };
        assert_eq!(reg.subsample(0.3, 1).len(), 196);
        assert_eq!(reg.subsample(1.0, 1), reg);
        assert_eq!(reg.subsample(0.5, 1).len(), 327);
    }
}
