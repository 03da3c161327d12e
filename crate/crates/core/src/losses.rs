//! Prediction and prototype contrastive objectives with analytic gradients.
//!
//! The trainable parameters are the layer-0 ID embeddings and the prediction
//! head. Gradients flow from the losses through the head, the fused
//! embeddings, the layer concatenation and every propagation step back to the
//! ID table. Server prototypes are constants.

use rand::Rng;
use thiserror::Error;

use crate::dataset::Sample;
use crate::graph::{channel_backward, channel_embeddings, EmbeddingState, GraphError, NormAdjacency};
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{DenseGrad, Mlp};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no prototype for cluster {0}")]
    MissingPrototype(usize),
    #[error("temperature must be positive")]
    InvalidTemperature,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Temperature-scaled cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either input has zero norm; the value is then 0.
    pub degenerate: bool,
}

pub fn similarity(e: &[f64], g: &[f64], tau: f64) -> Similarity {
    let ne = norm(e);
    let ng = norm(g);
    if ne == 0.0 || ng == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: dot(e, g) / (ne * ng) / tau,
        degenerate: false,
    }
}

/// Adds `scale · ∂(cos(e,g)/τ)/∂e` into `out`.
fn accumulate_similarity_grad(e: &[f64], g: &[f64], tau: f64, scale: f64, out: &mut [f64]) {
    let ne = norm(e);
    let ng = norm(g);
    if ne == 0.0 || ng == 0.0 {
        return;
    }
    let cos = dot(e, g) / (ne * ng);
    let a = scale / (tau * ne * ng);
    let b = scale * cos / (tau * ne * ne);
    for ((o, &gi), &ei) in out.iter_mut().zip(g).zip(e) {
        *o += a * gi - b * ei;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log softmax_0` over `[f(e,positive), f(e,neg_1), ...]`, optionally
/// accumulating `scale · ∂/∂e` into `grad`.
fn info_nce(e: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(similarity(e, positive, tau).value);
    logits.extend(negatives.iter().map(|n| similarity(e, n, tau).value));
    let lse = log_sum_exp(&logits);
    if let Some((out, scale)) = grad {
        for (i, &s) in logits.iter().enumerate() {
            let p = (s - lse).exp();
            let coeff = if i == 0 { p - 1.0 } else { p };
            let target = if i == 0 { positive } else { negatives[i - 1] };
            accumulate_similarity_grad(e, target, tau, scale * coeff, out);
        }
    }
    lse - logits[0]
}

/// Server prototypes as seen by the client, indexed by the positions of the
/// client's last upload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeTargets {
    /// Global prototype `g_k` per cluster.
    pub global: Vec<Vec<f64>>,
    /// Local prototypes `L_k` per cluster, one per contributing domain.
    pub local: Vec<Vec<Vec<f64>>>,
    /// This domain's own entry of `L_k`, used as a negative for other clusters.
    pub own_local: Vec<Option<Vec<f64>>>,
}

impl PrototypeTargets {
    pub fn is_empty(&self) -> bool {
        self.global.is_empty() && self.local.iter().all(Vec::is_empty)
    }

    pub fn n_clusters(&self) -> usize {
        self.global.len()
    }
}

/// Users of one batch paired with their prototype cluster.
#[derive(Debug, Clone)]
pub struct ClBatchContext<'a> {
    pub user_embeds: Vec<&'a [f64]>,
    pub cluster_of: Vec<usize>,
    pub targets: &'a PrototypeTargets,
    pub tau: f64,
    pub alpha: f64,
}

impl ClBatchContext<'_> {
    fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::InvalidTemperature);
        }
        if self.user_embeds.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if self.user_embeds.len() != self.cluster_of.len() {
            return Err(LossError::ShapeMismatch("user_embeds vs cluster_of".into()));
        }
        Ok(())
    }
}

fn global_cl(ctx: &ClBatchContext, mut grads: Option<&mut [Vec<f64>]>) -> Result<f64, LossError> {
    ctx.validate()?;
    let n = ctx.user_embeds.len() as f64;
    let mut total = 0.0;
    for (b, (&e, &k)) in ctx.user_embeds.iter().zip(&ctx.cluster_of).enumerate() {
        let pos = ctx.targets.global.get(k).ok_or(LossError::MissingPrototype(k))?;
        let negs: Vec<&[f64]> = ctx
            .targets
            .global
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, g)| g.as_slice())
            .collect();
        let g = grads.as_deref_mut().map(|gs| (gs[b].as_mut_slice(), 1.0 / n));
        total += info_nce(e, pos, &negs, ctx.tau, g);
    }
    Ok(total / n)
}

fn local_cl(ctx: &ClBatchContext, mut grads: Option<&mut [Vec<f64>]>) -> Result<f64, LossError> {
    ctx.validate()?;
    let n = ctx.user_embeds.len() as f64;
    let mut total = 0.0;
    for (b, (&e, &k)) in ctx.user_embeds.iter().zip(&ctx.cluster_of).enumerate() {
        let positives = ctx
            .targets
            .local
            .get(k)
            .filter(|p| !p.is_empty())
            .ok_or(LossError::MissingPrototype(k))?;
        let negs: Vec<&[f64]> = ctx
            .targets
            .own_local
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .filter_map(|(_, l)| l.as_deref())
            .collect();
        let m = positives.len() as f64;
        let mut user_total = 0.0;
        for pos in positives {
            let g = grads.as_deref_mut().map(|gs| (gs[b].as_mut_slice(), 1.0 / (m * n)));
            user_total += info_nce(e, pos, &negs, ctx.tau, g);
        }
        total += user_total / m;
    }
    Ok(total / n)
}

/// Batch mean of the global prototype contrastive loss; the other clusters'
/// global prototypes are the negatives.
pub fn global_cl_loss(ctx: &ClBatchContext) -> Result<f64, LossError> {
    global_cl(ctx, None)
}

/// Batch mean of the local prototype contrastive loss, averaged over the
/// contributing domains of each user's cluster. Negatives are this domain's
/// local prototypes of the other clusters.
pub fn local_cl_loss(ctx: &ClBatchContext) -> Result<f64, LossError> {
    local_cl(ctx, None)
}

/// Prediction head `2·D_f → D_f → D_f/2 → 1` with ReLU hidden layers and a
/// sigmoid on the output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpParams {
    pub mlp: Mlp,
}

impl MlpParams {
    pub fn head_dims(fused_dim: usize) -> [usize; 4] {
        [2 * fused_dim, fused_dim, (fused_dim / 2).max(1), 1]
    }

    pub fn new<R: Rng + ?Sized>(fused_dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(&Self::head_dims(fused_dim), rng),
        }
    }

    pub fn zeros(fused_dim: usize) -> Self {
        Self {
            mlp: Mlp::zeros(&Self::head_dims(fused_dim)),
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.mlp.input_dim() / 2
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Probability that the user interacts with the item.
pub fn predict(e_u: &[f64], e_v: &[f64], head: &MlpParams) -> Result<f64, LossError> {
    let d = head.fused_dim();
    if e_u.len() != d || e_v.len() != d {
        return Err(LossError::ShapeMismatch(format!(
            "expected two {d}-dim vectors, got {} and {}",
            e_u.len(),
            e_v.len()
        )));
    }
    let mut x = Vec::with_capacity(2 * d);
    x.extend_from_slice(e_u);
    x.extend_from_slice(e_v);
    let x = Matrix::from_vec(1, 2 * d, x).expect("row vector");
    Ok(sigmoid(head.mlp.forward(&x).output.get(0, 0)))
}

/// Mean binary cross-entropy.
pub fn prediction_loss(preds: &[f64], labels: &[f64]) -> Result<f64, LossError> {
    if preds.len() != labels.len() {
        return Err(LossError::ShapeMismatch("preds vs labels".into()));
    }
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &r)| -(r * p.ln() + (1.0 - r) * (1.0 - p).ln()))
        .sum();
    Ok(sum / preds.len() as f64)
}

pub fn total_loss(l_prd: f64, l_global: f64, l_local: f64, alpha: f64) -> f64 {
    l_prd + alpha * (l_global + l_local)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub id_embed: Matrix,
    pub head: Vec<DenseGrad>,
}

/// Which batch users take part in the contrastive terms, and their clusters.
#[derive(Debug, Clone, Copy)]
pub struct ClAssignment<'a> {
    pub users: &'a [usize],
    pub clusters: &'a [usize],
    pub targets: &'a PrototypeTargets,
}

/// Borrowed view of one domain's model for a forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub state: &'a EmbeddingState,
    pub adj: &'a NormAdjacency,
    /// Concatenated review-channel layers; constant because the review table is fixed.
    pub rev_cat: &'a Matrix,
    pub head: &'a MlpParams,
}

pub fn review_channel(state: &EmbeddingState, adj: &NormAdjacency) -> Result<Matrix, GraphError> {
    channel_embeddings(adj, &state.rev_embed_0, state.depth)
}

fn run(
    model: ModelView,
    batch: &[Sample],
    cl: Option<ClAssignment>,
    tau: f64,
    alpha: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n_users = model.adj.n_users();
    let mut fused = channel_embeddings(model.adj, &model.state.id_embed_0, model.state.depth)?;
    if fused.shape() != model.rev_cat.shape() {
        return Err(LossError::ShapeMismatch("review channel".into()));
    }
    fused.add_assign(model.rev_cat);
    let df = fused.cols();
    if model.head.fused_dim() != df {
        return Err(LossError::ShapeMismatch(format!(
            "head expects {} fused dims, embeddings have {df}",
            model.head.fused_dim()
        )));
    }

    let bsz = batch.len();
    let mut x = Matrix::zeros(bsz, 2 * df);
    for (r, s) in batch.iter().enumerate() {
        let row = x.row_mut(r);
        row[..df].copy_from_slice(fused.row(s.user));
        row[df..].copy_from_slice(fused.row(n_users + s.item));
    }
    let trace = model.head.mlp.forward(&x);
    let logits = trace.output.as_slice();
    let prediction = batch
        .iter()
        .zip(logits)
        .map(|(s, &z)| softplus(z) - s.label * z)
        .sum::<f64>()
        / bsz as f64;

    let mut grad_fused = want_grad.then(|| Matrix::zeros(fused.rows(), df));
    let mut head_grads = None;
    if let Some(gf) = grad_fused.as_mut() {
        let dz: Vec<f64> = batch
            .iter()
            .zip(logits)
            .map(|(s, &z)| (sigmoid(z) - s.label) / bsz as f64)
            .collect();
        let dz = Matrix::from_vec(bsz, 1, dz).expect("column");
        let (hg, gx) = model.head.mlp.backward(&trace, &dz);
        for (r, s) in batch.iter().enumerate() {
            let gr = gx.row(r);
            for (d, v) in gf.row_mut(s.user).iter_mut().zip(&gr[..df]) {
                *d += v;
            }
            for (d, v) in gf.row_mut(n_users + s.item).iter_mut().zip(&gr[df..]) {
                *d += v;
            }
        }
        head_grads = Some(hg);
    }

    let (mut global, mut local) = (0.0, 0.0);
    if let Some(cl) = cl.filter(|c| !c.users.is_empty() && !c.targets.is_empty()) {
        if cl.users.len() != cl.clusters.len() {
            return Err(LossError::ShapeMismatch("cl users vs clusters".into()));
        }
        let ctx = ClBatchContext {
            user_embeds: cl.users.iter().map(|&u| fused.row(u)).collect(),
            cluster_of: cl.clusters.to_vec(),
            targets: cl.targets,
            tau,
            alpha,
        };
        if let Some(gf) = grad_fused.as_mut() {
            let mut gu = vec![vec![0.0; df]; cl.users.len()];
            global = global_cl(&ctx, Some(&mut gu))?;
            local = local_cl(&ctx, Some(&mut gu))?;
            for (&u, g) in cl.users.iter().zip(&gu) {
                for (d, v) in gf.row_mut(u).iter_mut().zip(g) {
                    *d += alpha * v;
                }
            }
        } else {
            global = global_cl(&ctx, None)?;
            local = local_cl(&ctx, None)?;
        }
    }

    let breakdown = LossBreakdown {
        prediction,
        global,
        local,
        total: total_loss(prediction, global, local, alpha),
    };
    let grads = match (grad_fused, head_grads) {
        (Some(gf), Some(head)) => {
            let id_embed = channel_backward(model.adj, &gf, model.state.dim(), model.state.depth)?;
            if !id_embed.is_finite() {
                return Err(LossError::NonFinite("id_embed".into()));
            }
            if head
                .iter()
                .any(|g| !g.w.is_finite() || g.b.iter().any(|v| !v.is_finite()))
            {
                return Err(LossError::NonFinite("mlp".into()));
            }
            Some(Gradients { id_embed, head })
        }
        _ => None,
    };
    Ok((breakdown, grads))
}

/// Objective value only.
pub fn forward_loss(
    model: ModelView,
    batch: &[Sample],
    cl: Option<ClAssignment>,
    tau: f64,
    alpha: f64,
) -> Result<LossBreakdown, LossError> {
    run(model, batch, cl, tau, alpha, false).map(|(l, _)| l)
}

/// Objective value plus exact gradients for the ID table and the head.
pub fn backward(
    model: ModelView,
    batch: &[Sample],
    cl: Option<ClAssignment>,
    tau: f64,
    alpha: f64,
) -> Result<(LossBreakdown, Gradients), LossError> {
    let (l, g) = run(model, batch, cl, tau, alpha, true)?;
    Ok((l, g.expect("gradients requested")))
}
