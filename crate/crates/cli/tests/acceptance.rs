//! One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protocdr::dataset::{identify_overlapping_users, sample_training_groups, Sample};
use protocdr::eval::{
    evaluate, hr_at_n, metrics_from_ranks, ndcg_at_n, rank_candidates, rank_of, ranks_with,
    reconstruction_attack, AttackConfig,
};
use protocdr::graph::{EmbeddingState, FusedEmbeddings};
use protocdr::linalg::Matrix;
use protocdr::losses::{
    backward, forward_loss, predict, review_channel, total_loss, ClAssignment, MlpParams, ModelView,
    PrototypeTargets,
};
use protocdr::proto::{apply_ldp, privacy_budget, RepresentativePrototypes};
use protocdr::rng::stream;
use protocdr::server::{
    aggregate_round, ClientUpload, Federation, FederationOptions, PreparedDomain, ServerError,
    ServerPrototypes,
};
use protocdr::synthetic::{generate, to_csv, to_raw, SyntheticConfig};
use protocdr::trainer::{prototype_targets, ClientData, Hyperparams};
use protocdr::wire::{decode_upload, encode_upload};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn quiet() -> FederationOptions {
    FederationOptions {
        record_wall_time: false,
        ..FederationOptions::default()
    }
}

fn prepare(cfg: &SyntheticConfig, n_test: usize, ratio: usize) -> (Vec<PreparedDomain>, protocdr::OverlapRegistry) {
    let data = generate(cfg);
    let reg = identify_overlapping_users(&data.datasets);
    let domains = data
        .datasets
        .into_iter()
        .map(|ds| PreparedDomain::new(ds, n_test, ratio, cfg.seed).unwrap())
        .collect();
    (domains, reg)
}

// ---- toy instance shared by criteria 1 and 7 ----

struct Toy {
    data: ClientData,
    state: EmbeddingState,
    head: MlpParams,
    batch: Vec<Sample>,
    users: Vec<usize>,
    clusters: Vec<usize>,
    targets: PrototypeTargets,
}

impl Toy {
    fn cl(&self) -> ClAssignment<'_> {
        ClAssignment {
            users: &self.users,
            clusters: &self.clusters,
            targets: &self.targets,
        }
    }

    fn losses(&self, state: &EmbeddingState, head: &MlpParams, alpha: f64) -> protocdr::losses::LossBreakdown {
        let rev = review_channel(state, &self.data.adj).unwrap();
        let model = ModelView {
            state,
            adj: &self.data.adj,
            rev_cat: &rev,
            head,
        };
        forward_loss(model, &self.batch, Some(self.cl()), 0.2, alpha).unwrap()
    }
}

/// A 2-domain federation of 6 users and 8 items per domain, after one round,
/// so the prototypes are what the server actually sent back.
fn toy(seed: u64, domain: usize) -> Toy {
    let (domains, reg) = prepare(
        &SyntheticConfig {
            domains: 2,
            users_per_domain: 6,
            overlap_users: 3,
            clusters: 2,
            items_per_domain: 8,
            min_per_user: 3,
            max_per_user: 4,
            affinity: 0.7,
            seed,
        },
        3,
        1,
    );
    let hyper = Hyperparams {
        d: 4,
        layers: 2,
        k: 2,
        init_std: 0.5,
        epochs: 1,
        train_negative_ratio: 1,
        seed,
        ..Hyperparams::default()
    };
    let mut fed = Federation::new(&hyper, &domains, &reg, &quiet()).unwrap();
    fed.step().unwrap();
    let client = &fed.clients[domain];
    let data = fed.data[domain].clone();
    let download = &fed.download.domains[&domain];
    let targets = prototype_targets(download, domain);
    let memory = client.clusters.as_ref().unwrap();
    let (mut users, mut clusters) = (Vec::new(), Vec::new());
    for (u, &c) in memory.assignments.iter().enumerate() {
        if let Some(p) = memory.upload_position[c] {
            users.push(u);
            clusters.push(p);
        }
    }
    let batch = sample_training_groups(&data.train_positives, &data.full, 1, seed)
        .into_iter()
        .flat_map(|g| std::iter::once(g.positive).chain(g.negatives))
        .collect();
    Toy {
        state: client.embedding.clone(),
        head: client.mlp.clone(),
        data,
        batch,
        users,
        clusters,
        targets,
    }
}

// ---- 1 ----

impl Toy {
    /// Which hidden ReLU units are active for every sample of the batch.
    fn relu_pattern(&self, state: &EmbeddingState, head: &MlpParams) -> Vec<bool> {
        let nodes = state.fused(&self.data.adj).unwrap();
        let fused = FusedEmbeddings::from_nodes(&nodes, self.data.adj.n_users());
        let df = fused.dim();
        let mut x = Matrix::zeros(self.batch.len(), 2 * df);
        for (r, s) in self.batch.iter().enumerate() {
            let row = x.row_mut(r);
            row[..df].copy_from_slice(fused.user.row(s.user));
            row[df..].copy_from_slice(fused.item.row(s.item));
        }
        let trace = head.mlp.forward(&x);
        trace.inputs[1..].iter().flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0)).collect()
    }
}

/// Analytic vs central-difference gradient for every parameter. `None` when
/// some `±H` perturbation flips a ReLU, since the loss is not smooth there.
fn gradient_pairs(t: &Toy, alpha: f64, h: f64) -> Option<Vec<(f64, f64, String)>> {
    let rev = review_channel(&t.state, &t.data.adj).unwrap();
    let model = ModelView {
        state: &t.state,
        adj: &t.data.adj,
        rev_cat: &rev,
        head: &t.head,
    };
    let (_, grads) = backward(model, &t.batch, Some(t.cl()), 0.2, alpha).unwrap();
    let base = t.relu_pattern(&t.state, &t.head);
    let mut out = Vec::new();
    for idx in 0..t.state.id_embed_0.as_slice().len() {
        let mut fd = [0.0; 2];
        for (k, delta) in [h, -h].into_iter().enumerate() {
            let mut s = t.state.clone();
            s.id_embed_0.as_mut_slice()[idx] += delta;
            if t.relu_pattern(&s, &t.head) != base {
                return None;
            }
            fd[k] = t.losses(&s, &t.head, alpha).total;
        }
        out.push((grads.id_embed.as_slice()[idx], (fd[0] - fd[1]) / (2.0 * h), format!("E0[{idx}]")));
    }
    for (l, g) in grads.head.iter().enumerate() {
        let n_w = g.w.as_slice().len();
        for idx in 0..n_w + g.b.len() {
            let mut fd = [0.0; 2];
            for (k, delta) in [h, -h].into_iter().enumerate() {
                let mut hd = t.head.clone();
                let layer = &mut hd.mlp.layers[l];
                if idx < n_w {
                    layer.w.as_mut_slice()[idx] += delta;
                } else {
                    layer.b[idx - n_w] += delta;
                }
                if t.relu_pattern(&t.state, &hd) != base {
                    return None;
                }
                fd[k] = t.losses(&t.state, &hd, alpha).total;
            }
            let analytic = if idx < n_w { g.w.as_slice()[idx] } else { g.b[idx - n_w] };
            out.push((analytic, (fd[0] - fd[1]) / (2.0 * h), format!("head[{l}][{idx}]")));
        }
    }
    Some(out)
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-4;
    const REL_TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    const INSTANCES: usize = 4;
    let start = Instant::now();
    let (mut used, mut skipped, mut checked) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    'seeds: for seed in 0..50 {
        for domain in 0..2 {
            let t = toy(seed, domain);
            let loss = t.losses(&t.state, &t.head, 1.0);
            ensure(loss.global > 0.0 && loss.local > 0.0, || {
                format!("contrastive terms inactive on toy seed {seed} domain {domain}")
            })?;
            for alpha in [0.01, 1.0] {
                let Some(pairs) = gradient_pairs(&t, alpha, H) else {
                    skipped += 1;
                    continue;
                };
                for (analytic, numeric, what) in pairs {
                    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                    worst = worst.max(err);
                    checked += 1;
                    ensure(err <= REL_TOL, || {
                        format!("seed {seed} domain {domain} {what}: analytic {analytic:e} numeric {numeric:e} rel {err:e}")
                    })?;
                }
                used += 1;
            }
            if used >= 2 * INSTANCES {
                break 'seeds;
            }
        }
    }
    ensure(used >= 2 * INSTANCES, || format!("only {used} smooth instances"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!(
        "{checked} coordinates over {used} (instance, alpha) pairs, worst rel err {worst:.2e} (tol 1e-4); {skipped} skipped at a ReLU kink; {:.1}s",
        t.as_secs_f64()
    ))
}

// ---- 2 ----

fn random_fixture(seed: u64) -> Vec<ClientUpload> {
    let mut rng = stream(seed, "acceptance-aggregation", &[]);
    let dim = rng.random_range(2..6);
    let pool: Vec<Vec<f64>> = (0..4)
        .map(|p| {
            if p == 0 {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
        })
        .collect();
    (0..3)
        .map(|domain| {
            let k = rng.random_range(1..=5);
            let mut diff_protos = Vec::new();
            let mut overlap_sets = Vec::new();
            for _ in 0..k {
                // duplicates from the pool force exact ties
                let v = if rng.random_bool(0.3) {
                    pool[rng.random_range(0..pool.len())].clone()
                } else {
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
                };
                diff_protos.push(v);
                let n = rng.random_range(1..=3);
                overlap_sets.push((0..n).map(|_| format!("u{}", rng.random_range(0..8))).collect());
            }
            ClientUpload {
                domain_id: domain,
                diff_protos,
                overlap_sets,
            }
        })
        .collect()
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn aggregation_oracles() -> Outcome {
    let start = Instant::now();
    let mut clusters = 0;
    for seed in 0..100 {
        let ups = random_fixture(seed);
        let got = aggregate_round(&ups).map_err(|e| e.to_string())?;
        for up in &ups {
            for (j, anchor) in up.diff_protos.iter().enumerate() {
                clusters += 1;
                let members = &up.overlap_sets[j];
                let mut cands: Vec<(usize, usize, &Vec<f64>)> = Vec::new();
                for other in &ups {
                    for (c, set) in other.overlap_sets.iter().enumerate() {
                        let anchor_self = other.domain_id == up.domain_id && c == j;
                        if anchor_self || set.iter().any(|u| members.contains(u)) {
                            cands.push((other.domain_id, c, &other.diff_protos[c]));
                        }
                    }
                }
                let cp = &got.domains[&up.domain_id].clusters[j];
                for i in 0..anchor.len() {
                    let mean = cands.iter().map(|c| c.2[i]).sum::<f64>() / cands.len() as f64;
                    ensure((cp.global[i] - mean).abs() <= 1e-12, || {
                        format!("fixture {seed}: global[{i}] {} vs {mean}", cp.global[i])
                    })?;
                }
                // exhaustive argmax, lowest (domain, cluster) on ties
                let mut expect: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for &(d, c, v) in &cands {
                    let s = brute_cos(anchor, v);
                    let e = expect.entry(d).or_insert((s, c));
                    if s > e.0 || (s == e.0 && c < e.1) {
                        *e = (s, c);
                    }
                }
                let picked: Vec<(usize, usize)> = cp.local.iter().map(|l| (l.domain, l.cluster)).collect();
                let wanted: Vec<(usize, usize)> = expect.iter().map(|(&d, &(_, c))| (d, c)).collect();
                ensure(picked == wanted, || format!("fixture {seed} cluster {j}: {picked:?} vs {wanted:?}"))?;
                for l in &cp.local {
                    ensure(l.vector == ups[l.domain].diff_protos[l.cluster], || "local vector copy".into())?;
                }
            }
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("100 fixtures, {clusters} clusters, {:.2}s", t.as_secs_f64()))
}

// ---- 3 ----

fn oracle_rank(items: &[usize], scores: &[f64], positive: usize) -> usize {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    order.iter().position(|&k| items[k] == positive).unwrap() + 1
}

fn metric_oracles() -> Outcome {
    ensure(ndcg_at_n(3, 10) == 0.5, || format!("NDCG(3,10) = {}", ndcg_at_n(3, 10)))?;
    let mut rng = stream(3, "acceptance-metrics", &[]);
    let mut ranks = Vec::new();
    for trial in 0..1000 {
        let mut items: Vec<usize> = (0..1000).collect();
        for i in 0..100 {
            let j = rng.random_range(i..items.len());
            items.swap(i, j);
        }
        items.truncate(100);
        let coarse = trial % 2 == 0;
        let scores: Vec<f64> = (0..100)
            .map(|_| {
                if coarse {
                    f64::from(rng.random_range(0..8u8)) / 8.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let positive = items[rng.random_range(0..100)];
        let r = rank_of(&items, &scores, positive).map_err(|e| e.to_string())?;
        let o = oracle_rank(&items, &scores, positive);
        ensure(r == o, || format!("trial {trial}: rank {r} vs oracle {o}"))?;
        for n in [1, 5, 10, 20] {
            let hr = if o <= n { 1.0 } else { 0.0 };
            let ndcg = if o <= n { std::f64::consts::LN_2 / ((o + 1) as f64).ln() } else { 0.0 };
            ensure(hr_at_n(r, n) == hr, || format!("trial {trial} HR@{n}"))?;
            ensure((ndcg_at_n(r, n) - ndcg).abs() <= f64::EPSILON * ndcg, || {
                format!("trial {trial} NDCG@{n}: {} vs {ndcg}", ndcg_at_n(r, n))
            })?;
        }
        ranks.push(r);
    }
    // model-scored path
    let df = 6;
    for trial in 0..50u64 {
        let mut rng = stream(trial, "acceptance-rank-candidates", &[]);
        let fused = FusedEmbeddings {
            user: Matrix::gaussian(3, df, 1.0, &mut rng),
            item: Matrix::gaussian(60, df, 1.0, &mut rng),
        };
        let head = MlpParams::new(df, &mut rng);
        let mut cands: Vec<usize> = (0..60).collect();
        cands.rotate_left(trial as usize % 60);
        let user = trial as usize % 3;
        let res = rank_candidates(&fused, &head, user, &cands[..40], 40).map_err(|e| e.to_string())?;
        for (k, &i) in cands[..40].iter().enumerate() {
            let p = predict(fused.user.row(user), fused.item.row(i), &head).unwrap();
            ensure((res.scores[k] - p).abs() <= 1e-12, || format!("score mismatch at {k}"))?;
        }
        let o = oracle_rank(&cands[..40], &res.scores, cands[0]);
        ensure(res.rank == o, || format!("rank_candidates {} vs oracle {o}", res.rank))?;
    }
    let m = metrics_from_ranks(&ranks, 10);
    Ok(format!("1000 score vectors + 50 model-scored lists exact; NDCG(3,10)=0.5; HR@10 {:.3}", m.hr))
}

// ---- 4 ----

fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

fn rep_of(rows: Vec<Vec<f64>>) -> RepresentativePrototypes {
    RepresentativePrototypes {
        cluster_ids: (0..rows.len()).collect(),
        overlap_members: vec![BTreeSet::new(); rows.len()],
        centroids: rows,
    }
}

fn ldp_properties() -> Outcome {
    let eps = privacy_budget(1.0, 0.5).map_err(|e| e.to_string())?;
    ensure(eps == 4.0, || format!("privacy_budget(1, 0.5) = {eps}"))?;

    let mut rng = stream(0, "acceptance-ldp", &[]);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let out = apply_ldp(&rep_of(rows.clone()), 1.0, 0.0, 9).map_err(|e| e.to_string())?;
    for (a, b) in out.centroids.iter().flatten().zip(rows.iter().flatten()) {
        ensure(a.to_bits() == b.clamp(-1.0, 1.0).to_bits(), || format!("eta=0: {a} vs clip({b})"))?;
    }

    let eta = 0.5;
    let zeros = rep_of(vec![vec![0.0; 100]; 1000]);
    let mut xs: Vec<f64> = apply_ldp(&zeros, 1.0, eta, 17)
        .map_err(|e| e.to_string())?
        .centroids
        .into_iter()
        .flatten()
        .collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = laplace_cdf(x, eta);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    });
    let critical = 1.6276 / n.sqrt();
    ensure(d < critical, || format!("KS D={d:.5} >= {critical:.5}"))?;

    let config = AttackConfig::default();
    let etas = [0.1, 0.5, 1.0];
    let mut means = [0.0; 3];
    for seed in 0..5u64 {
        let mut rng = stream(seed, "acceptance-attack", &[]);
        let clean: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        let mut mses = [0.0; 3];
        for (k, &eta) in etas.iter().enumerate() {
            let noised = apply_ldp(&rep_of(clean.clone()), 1.0, eta, seed).map_err(|e| e.to_string())?.centroids;
            mses[k] = reconstruction_attack(&clean, &noised, 0.2, seed, &config).map_err(|e| e.to_string())?;
            means[k] += mses[k] / 5.0;
        }
        ensure(mses[0] <= mses[1] && mses[1] <= mses[2], || format!("seed {seed}: MSE {mses:?} not monotone"))?;
    }
    Ok(format!(
        "eps=4; eta=0 exact clip; KS D={d:.5} < {critical:.5}; attack MSE {:.4} <= {:.4} <= {:.4} on every seed",
        means[0], means[1], means[2]
    ))
}

// ---- 5 ----

fn cold_start() -> Outcome {
    let (domains, reg) = prepare(
        &SyntheticConfig {
            users_per_domain: 60,
            overlap_users: 15,
            clusters: 4,
            items_per_domain: 200,
            seed: 5,
            ..SyntheticConfig::default()
        },
        99,
        4,
    );
    let hyper = Hyperparams {
        d: 8,
        layers: 2,
        epochs: 2,
        batch_size: 64,
        rounds: 2,
        alpha: 0.1,
        ..Hyperparams::default()
    };
    let mut fed = Federation::new(&hyper, &domains, &reg, &quiet()).unwrap();
    fed.step().map_err(|e| e.to_string())?;
    fed.step().map_err(|e| e.to_string())?;
    let log: Vec<serde_json::Value> = protocdr::server::round_log_jsonl(&fed.log)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut batches = 0;
    for rec in log.iter().filter(|r| r["round"] == 0) {
        // the log holds batch means of non-negative terms: zero mean means every batch is zero
        ensure(rec["l_global"] == 0.0 && rec["l_local"] == 0.0, || format!("round 1 log: {rec}"))?;
    }
    for r in fed.reports.iter().filter(|r| r.round == 0) {
        ensure(r.max_global == 0.0 && r.max_local == 0.0, || format!("round 1 batch max: {r:?}"))?;
        batches += r.batches;
    }
    for rec in log.iter().filter(|r| r["round"] == 1) {
        ensure(rec["l_global"].as_f64().unwrap() > 0.0, || format!("round 2 log shows no CL: {rec}"))?;
    }
    Ok(format!("{batches} round-1 batches with L_global = L_local = 0; nonzero from round 2"))
}

// ---- 6 ----

fn knowledge_transfer() -> Outcome {
    let start = Instant::now();
    let seeds = 5;
    let mut hr = [[0.0f64; 2]; 2];
    for seed in 0..seeds {
        let (domains, reg) = prepare(
            &SyntheticConfig {
                seed,
                ..SyntheticConfig::default()
            },
            99,
            4,
        );
        for (a, alpha) in [0.0, 0.01].into_iter().enumerate() {
            let hyper = Hyperparams {
                d: 16,
                layers: 2,
                epochs: 5,
                rounds: 6,
                alpha,
                seed,
                ..Hyperparams::default()
            };
            let mut fed = Federation::new(&hyper, &domains, &reg, &quiet()).unwrap();
            for _ in 0..hyper.rounds {
                fed.step().map_err(|e| e.to_string())?;
            }
            let report = evaluate(&fed.clients, &fed.data, 10).map_err(|e| e.to_string())?;
            for (d, slot) in hr[a].iter_mut().enumerate() {
                *slot += report.per_domain[&d].hr / seeds as f64;
            }
        }
    }
    let gain = [hr[1][0] - hr[0][0], hr[1][1] - hr[0][1]];
    let t = start.elapsed();
    let detail = format!(
        "HR@10 alpha=0 {:.4}/{:.4}, alpha=0.01 {:.4}/{:.4}, gain {:+.4}/{:+.4}, {:.0}s",
        hr[0][0], hr[0][1], hr[1][0], hr[1][1], gain[0], gain[1], t.as_secs_f64()
    );
    ensure(gain[0] >= 0.0 && gain[1] >= 0.0 && (gain[0] + gain[1]) / 2.0 > 0.0, || detail.clone())?;
    ensure(t < Duration::from_secs(300), || format!("{detail}: over 5 min"))?;
    Ok(detail)
}

// ---- 7 ----

fn loss_affine() -> Outcome {
    let t = toy(1, 0);
    let alphas = [0.0, 0.01, 0.02];
    let ls: Vec<_> = alphas.iter().map(|&a| t.losses(&t.state, &t.head, a)).collect();
    for l in &ls[1..] {
        ensure(
            l.prediction.to_bits() == ls[0].prediction.to_bits()
                && l.global.to_bits() == ls[0].global.to_bits()
                && l.local.to_bits() == ls[0].local.to_bits(),
            || "component losses depend on alpha".into(),
        )?;
    }
    for (l, &a) in ls.iter().zip(&alphas) {
        let expect = total_loss(l.prediction, l.global, l.local, a);
        ensure(l.total.to_bits() == expect.to_bits(), || format!("alpha {a}: {} vs {expect}", l.total))?;
    }
    let slope = ls[0].global + ls[0].local;
    ensure(slope > 0.0, || "contrastive terms inactive".into())?;
    let second = ls[2].total - 2.0 * ls[1].total + ls[0].total;
    let ulp = f64::EPSILON * ls[2].total.abs();
    ensure(second.abs() <= 4.0 * ulp, || format!("second difference {second:e}"))?;
    for k in 1..3 {
        let s = (ls[k].total - ls[0].total) / alphas[k];
        ensure((s - slope).abs() <= 1e-10 * slope, || format!("slope {s} vs {slope}"))?;
    }
    Ok(format!(
        "L = {:.6} + alpha * {:.6}; second difference {second:e}",
        ls[0].total, slope
    ))
}

// ---- 8 ----

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data = generate(&SyntheticConfig {
        users_per_domain: 40,
        overlap_users: 10,
        clusters: 4,
        items_per_domain: 160,
        min_per_user: 8,
        max_per_user: 12,
        seed: 8,
        ..SyntheticConfig::default()
    });
    let mut cfg = String::from(
        "d = 8\nL = 2\nK = 4\nepochs = 2\nrounds = 3\nbatch_size = 64\nmin_interactions = 1\nrecord_wall_time = false\n",
    );
    cfg.push_str(extra);
    for (name, ds) in ["books", "movies"].iter().zip(&data.datasets) {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, to_csv(&to_raw(ds))).unwrap();
        cfg.push_str(&format!("[domain.{name}]\ninteractions = {}\n", path.display()));
    }
    let path = dir.join("run.conf");
    fs::write(&path, cfg).unwrap();
    path
}

fn train_cli(conf: &Path, out: &Path, set: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protocdr"));
    cmd.arg("train").arg("--config").arg(conf).arg("--out").arg(out);
    for s in set {
        cmd.args(["--set", s]);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = write_config(dir.path(), "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train_cli(&conf, &a, &[])?;
    train_cli(&conf, &b, &[])?;
    train_cli(&conf, &c, &["parallel=true"])?;
    let (ta, tb) = (tree(&a), tree(&b));
    let ckpts: Vec<&String> = ta.keys().filter(|k| k.ends_with(".ckpt")).collect();
    ensure(ckpts.len() == 6, || format!("expected 6 checkpoints, found {ckpts:?}"))?;
    ensure(ta.keys().eq(tb.keys()), || "artifact sets differ".into())?;
    for (k, v) in &ta {
        ensure(tb[k] == *v, || format!("{k} differs between identical runs"))?;
    }
    let log = "round_log.jsonl";
    ensure(tree(&c)[log] == ta[log], || "parallel and serial round logs differ".into())?;
    Ok(format!("{} artifacts byte-identical over two runs; parallel log identical", ta.len()))
}

// ---- 9 ----

fn information_flow() -> Outcome {
    // the server consumes uploads and nothing else
    let _: fn(&[ClientUpload]) -> Result<ServerPrototypes, ServerError> = aggregate_round;

    let (domains, reg) = prepare(
        &SyntheticConfig {
            users_per_domain: 50,
            overlap_users: 12,
            clusters: 4,
            items_per_domain: 200,
            seed: 9,
            ..SyntheticConfig::default()
        },
        99,
        4,
    );
    let hyper = Hyperparams {
        d: 8,
        layers: 1,
        epochs: 1,
        rounds: 2,
        ..Hyperparams::default()
    };
    let opts = FederationOptions {
        collect_history: true,
        ..quiet()
    };
    let mut fed = Federation::new(&hyper, &domains, &reg, &opts).unwrap();
    fed.step().map_err(|e| e.to_string())?;
    fed.step().map_err(|e| e.to_string())?;
    let df = hyper.fused_dim();
    let mut n = 0;
    for entries in fed.history.values() {
        for e in entries {
            let up = &e.upload;
            n += 1;
            let json = serde_json::to_value(up).unwrap();
            let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
            ensure(keys == ["diff_protos", "domain_id", "overlap_sets"], || format!("upload fields {keys:?}"))?;
            ensure(up.diff_protos.len() <= hyper.k && up.diff_protos.len() == up.overlap_sets.len(), || {
                "upload holds more rows than clusters".into()
            })?;
            ensure(up.diff_protos.iter().all(|v| v.len() == df), || "prototype width".into())?;
            ensure(up.overlap_sets.iter().flatten().all(|u| reg.contains(u)), || {
                "non-overlap user id in upload".into()
            })?;
            ensure(decode_upload(&encode_upload(up)).as_ref() == Ok(up), || "wire round trip".into())?;
        }
    }
    Ok(format!("{n} uploads: only domain id, <= K noised {df}-dim prototypes and overlap ids"))
}

// ---- 10 ----

fn null_calibration() -> Outcome {
    let (domains, _) = prepare(
        &SyntheticConfig {
            users_per_domain: 600,
            overlap_users: 60,
            seed: 10,
            ..SyntheticConfig::default()
        },
        99,
        4,
    );
    let mut rng = stream(10, "acceptance-random-scorer", &[]);
    let mut ranks = Vec::new();
    for d in &domains {
        let r = ranks_with(&d.split, |_, items| items.iter().map(|_| rng.random::<f64>()).collect())
            .map_err(|e| e.to_string())?;
        ensure(d.split.candidates(0).map(|c| c.len()) == Some(100), || "candidate list size".into())?;
        ranks.extend(r);
    }
    let m = metrics_from_ranks(&ranks, 10);
    ensure(ranks.len() >= 1000, || format!("only {} users", ranks.len()))?;
    ensure((m.hr - 0.10).abs() <= 0.02, || format!("HR@10 {:.4}", m.hr))?;
    Ok(format!("HR@10 {:.4} over {} users", m.hr, ranks.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("aggregation oracles", aggregation_oracles),
        ("metric oracles", metric_oracles),
        ("LDP properties", ldp_properties),
        ("round-1 cold start", cold_start),
        ("synthetic knowledge transfer", knowledge_transfer),
        ("loss linearity in alpha", loss_affine),
        ("determinism", determinism),
        ("information flow", information_flow),
        ("null calibration", null_calibration),
    ];
    let filter = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
