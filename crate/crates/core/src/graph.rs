//! Normalized bipartite adjacency and linear graph propagation.
//!
//! Nodes are ordered users first, then items. Propagation applies the
//! symmetric normalized adjacency `D^{-1/2} A D^{-1/2}` repeatedly with no
//! self-loops, weights or nonlinearities; layer outputs are concatenated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionMatrix;
use crate::linalg::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} has no edges")]
    IsolatedNode(usize),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("no layers to combine")]
    NoLayers,
}

/// Symmetric normalized adjacency in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormAdjacency {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entry `(r, c)`, zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        match self.indices[lo..hi].binary_search(&c) {
            Ok(p) => self.values[lo + p],
            Err(_) => 0.0,
        }
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Dense copy, for tests and small diagnostics.
    pub fn to_dense(&self) -> Matrix {
        let n = self.dim();
        let mut m = Matrix::zeros(n, n);
        for r in 0..n {
            for (c, v) in self.row_entries(r) {
                m.set(r, c, v);
            }
        }
        m
    }

    /// `self · x`. Each output row accumulates its neighbours in ascending column order.
    pub fn matmul(&self, x: &Matrix) -> Result<Matrix, GraphError> {
        if x.rows() != self.dim() {
            return Err(GraphError::ShapeMismatch {
                expected: (self.dim(), x.cols()),
                found: x.shape(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        self.matmul_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn matmul_into(&self, x: &Matrix, out: &mut Matrix) {
        debug_assert_eq!(x.shape(), out.shape());
        for r in 0..self.dim() {
            let dst = out.row_mut(r);
            dst.iter_mut().for_each(|v| *v = 0.0);
            for (c, w) in self.row_entries(r) {
                for (d, s) in dst.iter_mut().zip(x.row(c)) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Builds `D^{-1/2} A D^{-1/2}` for the bipartite graph of `train`.
/// Fails on any user or item without edges.
pub fn build_normalized_adjacency(train: &InteractionMatrix) -> Result<NormAdjacency, GraphError> {
    let n_users = train.n_rows();
    if let Some(u) = (0..n_users).find(|&u| train.row(u).is_empty()) {
        return Err(GraphError::IsolatedNode(u));
    }
    if let Some(i) = train.col_degrees().iter().position(|&d| d == 0) {
        return Err(GraphError::IsolatedNode(n_users + i));
    }
    Ok(build_lenient(train))
}

/// Like [`build_normalized_adjacency`] but isolated nodes get empty rows, so
/// their embeddings propagate to zero beyond layer 0.
pub fn build_normalized_adjacency_lenient(train: &InteractionMatrix) -> NormAdjacency {
    build_lenient(train)
}

fn build_lenient(train: &InteractionMatrix) -> NormAdjacency {
    let n_users = train.n_rows();
    let n_items = train.n_cols();
    let item_deg = train.col_degrees();
    let mut item_rows: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (u, i) in train.pairs() {
        item_rows[i].push(u);
    }
    let weight = |du: usize, dv: usize| 1.0 / ((du as f64) * (dv as f64)).sqrt();

    let mut indptr = Vec::with_capacity(n_users + n_items + 1);
    let mut indices = Vec::with_capacity(2 * train.nnz());
    let mut values = Vec::with_capacity(2 * train.nnz());
    indptr.push(0);
    for u in 0..n_users {
        let du = train.row(u).len();
        for &i in train.row(u) {
            indices.push(n_users + i);
            values.push(weight(du, item_deg[i]));
        }
        indptr.push(indices.len());
    }
    for (i, users) in item_rows.iter().enumerate() {
        // Users were pushed in ascending order by `pairs()`.
        for &u in users {
            indices.push(u);
            values.push(weight(train.row(u).len(), item_deg[i]));
        }
        indptr.push(indices.len());
    }
    NormAdjacency {
        n_users,
        n_items,
        indptr,
        indices,
        values,
    }
}

/// Returns `[E0, A·E0, ..., A^L·E0]`.
pub fn propagate(adj: &NormAdjacency, e0: &Matrix, depth: usize) -> Result<Vec<Matrix>, GraphError> {
    if e0.rows() != adj.dim() {
        return Err(GraphError::ShapeMismatch {
            expected: (adj.dim(), e0.cols()),
            found: e0.shape(),
        });
    }
    let mut layers = Vec::with_capacity(depth + 1);
    layers.push(e0.clone());
    for l in 1..=depth {
        let next = adj.matmul(&layers[l - 1])?;
        layers.push(next);
    }
    Ok(layers)
}

/// Horizontal concatenation in layer order.
pub fn combine_layers(layers: &[Matrix]) -> Result<Matrix, GraphError> {
    let first = layers.first().ok_or(GraphError::NoLayers)?;
    let (n, d) = first.shape();
    if let Some(bad) = layers.iter().find(|m| m.shape() != (n, d)) {
        return Err(GraphError::ShapeMismatch {
            expected: (n, d),
            found: bad.shape(),
        });
    }
    let mut out = Matrix::zeros(n, d * layers.len());
    for r in 0..n {
        let dst = out.row_mut(r);
        for (l, layer) in layers.iter().enumerate() {
            dst[l * d..(l + 1) * d].copy_from_slice(layer.row(r));
        }
    }
    Ok(out)
}

/// Element-wise sum of the ID and review channels.
pub fn fuse_id_review(id: &Matrix, rev: &Matrix) -> Result<Matrix, GraphError> {
    id.lin_comb(1.0, rev, 1.0).ok_or(GraphError::ShapeMismatch {
        expected: id.shape(),
        found: rev.shape(),
    })
}

/// Fused user and item embeddings, split out of the node-ordered matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbeddings {
    pub user: Matrix,
    pub item: Matrix,
}

impl FusedEmbeddings {
    pub fn from_nodes(nodes: &Matrix, n_users: usize) -> Self {
        let cols = nodes.cols();
        let split = n_users * cols;
        let data = nodes.as_slice();
        FusedEmbeddings {
            user: Matrix::from_vec(n_users, cols, data[..split].to_vec()).expect("user block"),
            item: Matrix::from_vec(nodes.rows() - n_users, cols, data[split..].to_vec())
                .expect("item block"),
        }
    }

    pub fn dim(&self) -> usize {
        self.user.cols()
    }
}

/// Full forward of one channel: propagate then concatenate.
pub fn channel_embeddings(adj: &NormAdjacency, e0: &Matrix, depth: usize) -> Result<Matrix, GraphError> {
    combine_layers(&propagate(adj, e0, depth)?)
}

/// Adjoint of [`channel_embeddings`]: maps a gradient on the concatenated
/// output back to `E0`, using `A = Aᵀ`.
///
/// `grad_out` has `(L+1)·d` columns; the result is `Σ_l A^l G_l`, evaluated
/// Horner-style from the deepest layer.
pub fn channel_backward(adj: &NormAdjacency, grad_out: &Matrix, d: usize, depth: usize) -> Result<Matrix, GraphError> {
    let n = adj.dim();
    if grad_out.shape() != (n, d * (depth + 1)) {
        return Err(GraphError::ShapeMismatch {
            expected: (n, d * (depth + 1)),
            found: grad_out.shape(),
        });
    }
    let block = |l: usize| {
        let mut g = Matrix::zeros(n, d);
        for r in 0..n {
            g.row_mut(r).copy_from_slice(&grad_out.row(r)[l * d..(l + 1) * d]);
        }
        g
    };
    let mut acc = block(depth);
    let mut scratch = Matrix::zeros(n, d);
    for l in (0..depth).rev() {
        adj.matmul_into(&acc, &mut scratch);
        std::mem::swap(&mut acc, &mut scratch);
        acc.add_assign(&block(l));
    }
    Ok(acc)
}

/// Per-domain embedding tables. Both tables index nodes users-then-items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    /// Trainable ID embeddings at layer 0.
    pub id_embed_0: Matrix,
    /// Fixed review embeddings at layer 0.
    pub rev_embed_0: Matrix,
    /// Propagation depth `L`.
    pub depth: usize,
}

impl EmbeddingState {
    /// Gaussian(0, `std`) ID embeddings. Review rows come from `reviews` when
    /// given, otherwise from the same Gaussian scheme on a separate stream.
    pub fn init(
        n_nodes: usize,
        d: usize,
        depth: usize,
        std: f64,
        seed: u64,
        reviews: Option<Matrix>,
    ) -> Result<Self, GraphError> {
        let id_embed_0 = Matrix::gaussian(n_nodes, d, std, &mut crate::rng::stream(seed, "id-embed", &[]));
        let rev_embed_0 = match reviews {
            Some(r) if r.shape() != (n_nodes, d) => {
                return Err(GraphError::ShapeMismatch {
                    expected: (n_nodes, d),
                    found: r.shape(),
                })
            }
            Some(r) => r,
            None => Matrix::gaussian(n_nodes, d, std, &mut crate::rng::stream(seed, "rev-embed", &[])),
        };
        Ok(Self {
            id_embed_0,
            rev_embed_0,
            depth,
        })
    }

    pub fn dim(&self) -> usize {
        self.id_embed_0.cols()
    }

    pub fn fused_dim(&self) -> usize {
        self.dim() * (self.depth + 1)
    }

    pub fn n_nodes(&self) -> usize {
        self.id_embed_0.rows()
    }

    /// Node-ordered fused embeddings: concatenated ID layers plus concatenated review layers.
    pub fn fused(&self, adj: &NormAdjacency) -> Result<Matrix, GraphError> {
        let id = channel_embeddings(adj, &self.id_embed_0, self.depth)?;
        let rev = channel_embeddings(adj, &self.rev_embed_0, self.depth)?;
        fuse_id_review(&id, &rev)
    }
}
