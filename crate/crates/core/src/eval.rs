//! Community detection and link prediction protocols, metrics and baselines.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{neighbor_means, DynamicNetwork};
use crate::objective::DecoderSpec;
use crate::rng::{SeedTree, Stream};
use crate::trainer::{train, TrainConfig, TrainedModel};

/// Restarts used by the clustering pipelines.
pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERS: usize = 300;
/// Variance of the similarity kernel used to pick `k`.
pub const INDUCED_VARIANCE: f64 = 1.0;
pub const DEGREE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|j| (points[(i, j)] - centers[(c, j)]).powi(2)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.nrows() {
        let d = sq_dist(points, i, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeding(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centers = DMatrix::zeros(k, points.ncols());
    centers.set_row(0, &points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &points.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>) -> KMeansResult {
    let (n, d) = points.shape();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest(points, i, &centers);
            dists[i] = dist;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // empty clusters take the point farthest from its center
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                    changed = true;
                }
            }
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        for i in 0..n {
            for j in 0..d {
                sums[(labels[i], j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    KMeansResult { labels, centers, wcss }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// within-cluster sum of squares wins.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k < 1 || k > n {
        return Err(Error::param("k", format!("must be in 1..={n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    let tree = SeedTree::new(seed);
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = tree.rng(Stream::KMeans, ((k as u64) << 20) | r as u64);
        let res = lloyd(points, plus_plus_seeding(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| res.wcss < b.wcss) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `exp(-|z_i - z_j|^2 / (2 variance))` off the diagonal, zero on it.
pub fn rbf_induced_adjacency(z: &DMatrix<f64>, variance: f64) -> Result<DMatrix<f64>> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::param("variance", "must be finite and > 0"));
    }
    let n = z.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (-(z.row(i) - z.row(j)).norm_squared() / (2.0 * variance)).exp();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok(w)
}

fn check_labels(n: usize, labels: &[usize], op: &'static str) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::shape(op, format!("{} labels for {n} nodes", labels.len())));
    }
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

/// Newman modularity `sum_c (e_cc - a_c^2)` with weighted degrees. Zero for
/// a graph without edges.
pub fn modularity(a: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("modularity", "adjacency must be square"));
    }
    let k = check_labels(n, labels, "modularity")?;
    let total: f64 = a.sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut e = vec![0.0; k];
    let mut deg = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            let w = a[(i, j)];
            deg[labels[i]] += w;
            if labels[i] == labels[j] {
                e[labels[i]] += w;
            }
        }
    }
    Ok((0..k).map(|c| e[c] / total - (deg[c] / total).powi(2)).sum())
}

/// The modularity-maximizing `k` over `k_min..=k_max` (capped at n)
/// and its labels. Ties go to the smaller `k`.
pub fn select_k(z: &DMatrix<f64>, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<(usize, Vec<usize>)> {
    let (lo, hi) = k_range(z.nrows(), k_min, k_max)?;
    let induced = rbf_induced_adjacency(z, INDUCED_VARIANCE)?;
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for k in lo..=hi {
        let labels = kmeans(z, k, seed, restarts)?.labels;
        let q = modularity(&induced, &labels)?;
        if best.as_ref().is_none_or(|b| q > b.0) {
            best = Some((q, k, labels));
        }
    }
    let (_, k, labels) = best.expect("non-empty range");
    Ok((k, labels))
}

fn k_range(n: usize, k_min: usize, k_max: usize) -> Result<(usize, usize)> {
    if k_min < 1 || k_min > k_max {
        return Err(Error::param("k range", format!("need 1 <= k_min <= k_max, got {k_min}..={k_max}")));
    }
    if n == 0 {
        return Err(Error::param("k range", "no nodes"));
    }
    let hi = k_max.min(n);
    Ok((k_min.min(hi), hi))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two single-cluster partitions score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("nmi", format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Metric("nmi of empty partitions".into()));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let (ha, hb) = (entropy(ca.iter().copied(), n), entropy(cb.iter().copied(), n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

/// Normalized spectral clustering: bottom-`k` eigenvectors of
/// `I - D^-1/2 A D^-1/2`, rows scaled to unit length, then k-means.
pub fn spectral_clustering(a: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("spectral_clustering", "adjacency must be square"));
    }
    if k < 1 || k > n {
        return Err(Error::param("k", format!("must be in 1..={n}")));
    }
    if a.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidNetwork("spectral clustering needs finite non-negative weights".into()));
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / (a.row(i).sum() + DEGREE_EPS).sqrt()).collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let mut u = DMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, order[c])]);
    for i in 0..n {
        let norm = u.row(i).norm();
        if norm > 0.0 {
            u.row_mut(i).unscale_mut(norm);
        }
    }
    Ok(kmeans(&u, k, seed, DEFAULT_RESTARTS)?.labels)
}

/// Spectral clustering for each `k` in range; keeps the labeling with the
/// highest modularity on `a` itself (ties to the smaller `k`).
pub fn spectral_select_k(a: &DMatrix<f64>, k_min: usize, k_max: usize, seed: u64) -> Result<(usize, Vec<usize>)> {
    let (lo, hi) = k_range(a.nrows(), k_min, k_max)?;
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for k in lo..=hi {
        let labels = spectral_clustering(a, k, seed)?;
        let q = modularity(a, &labels)?;
        if best.as_ref().is_none_or(|b| q > b.0) {
            best = Some((q, k, labels));
        }
    }
    let (_, k, labels) = best.expect("non-empty range");
    Ok((k, labels))
}

fn check_scored(scores: &[f64], truth: &[bool]) -> Result<()> {
    if scores.len() != truth.len() {
        return Err(Error::shape("metric", format!("{} scores vs {} labels", scores.len(), truth.len())));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no scored pairs".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(())
}

/// Mann-Whitney statistic; ties count one half.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_scored(scores, truth)?;
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative pairs".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&p| truth[p]).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Best F1 over thresholds at every distinct score, predicting positive
/// when `score >= threshold`. Returns `(f1, smallest threshold achieving
/// it)`; F1 is 0 without positives.
pub fn f1_max(scores: &[f64], truth: &[bool]) -> Result<(f64, f64)> {
    check_scored(scores, truth)?;
    let pos = truth.iter().filter(|&&t| t).count();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let min = scores[*idx.last().unwrap()];
    if pos == 0 {
        return Ok((0.0, min));
    }
    let (mut best, mut thr) = (0.0, min);
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += usize::from(truth[idx[i]]);
            predicted += 1;
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (predicted + pos) as f64;
        if f1 >= best {
            best = f1;
            thr = s;
        }
    }
    Ok((best, thr))
}

/// Fraction of history snapshots in which each pair was linked.
pub fn bas_predict(history: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = history.first().ok_or_else(|| Error::param("history", "needs at least one snapshot"))?;
    let n = first.nrows();
    let mut s = DMatrix::zeros(n, n);
    for a in history {
        if a.shape() != (n, n) {
            return Err(Error::shape("bas_predict", "snapshots differ in size"));
        }
        s += a.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(s / history.len() as f64)
}

/// Entries `(i, j)` with `i > j`, row by row.
pub fn lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| (0..i).map(move |j| m[(i, j)])).collect()
}

/// Predicted edge probabilities for the snapshot after `z_t`: one
/// noiseless evolution step, then the decoder.
pub fn predict_next(z_t: &DMatrix<f64>, a_t: &DMatrix<f64>, decoder: &DecoderSpec, s4: f64) -> Result<DMatrix<f64>> {
    let z_next = neighbor_means(z_t, a_t, s4)?;
    let n = z_next.nrows();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = decoder.edge_probability((z_next.row(i) - z_next.row(j)).norm_squared());
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    Ok(p)
}

/// [`predict_next`] from a model trained on `history`.
pub fn link_predict(model: &TrainedModel, history: &DynamicNetwork) -> Result<DMatrix<f64>> {
    let t = history.len();
    if model.state.len() != t || model.epochs_run == 0 {
        return Err(Error::param(
            "model",
            format!("must be trained on the {t}-snapshot history (has {} layers, {} epochs)", model.state.len(), model.epochs_run),
        ));
    }
    predict_next(&model.state.nu[t - 1], history.snapshot(t - 1), &model.decoder, model.priors.s4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkPredResult {
    pub probabilities: DMatrix<f64>,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Scores a symmetric probability matrix against a target snapshot on the
/// lower-triangle pairs.
pub fn score_prediction(probabilities: DMatrix<f64>, target: &DMatrix<f64>) -> Result<LinkPredResult> {
    if probabilities.shape() != target.shape() || probabilities.nrows() != probabilities.ncols() {
        return Err(Error::shape(
            "score_prediction",
            format!("{:?} prediction vs {:?} truth", probabilities.shape(), target.shape()),
        ));
    }
    for m in [&probabilities, target] {
        if m != &m.transpose() {
            return Err(Error::InvalidNetwork("prediction and truth must be symmetric".into()));
        }
    }
    let scores = lower_triangle(&probabilities);
    let truth: Vec<bool> = lower_triangle(target).iter().map(|&v| v > 0.0).collect();
    let auc = auc(&scores, &truth)?;
    let (f1, threshold) = f1_max(&scores, &truth)?;
    Ok(LinkPredResult { probabilities, auc, f1, threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPredRow {
    /// 0-based index of the predicted snapshot.
    pub target: usize,
    pub method: String,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAverage {
    pub method: String,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPredReport {
    pub targets: Vec<usize>,
    pub rows: Vec<LinkPredRow>,
    pub averages: Vec<MethodAverage>,
}

impl LinkPredReport {
    pub fn average(&self, method: &str) -> Option<&MethodAverage> {
        self.averages.iter().find(|a| a.method == method)
    }
}

/// Rolling protocol: for each of the last `targets` snapshots `t` (at least
/// index 2), fit on snapshots `0..t` and predict `t`. The model is skipped
/// when `config` is `None`; `bas` adds the frequency baseline. Methods are
/// named after the model variant and `bas`.
pub fn rolling_link_prediction(
    network: &DynamicNetwork,
    config: Option<&TrainConfig>,
    bas: bool,
    targets: usize,
) -> Result<LinkPredReport> {
    let t_len = network.len();
    if t_len < 3 {
        return Err(Error::InvalidNetwork(format!("rolling link prediction needs T >= 3, got {t_len}")));
    }
    if targets == 0 {
        return Err(Error::param("targets", "must be positive"));
    }
    let first = t_len.saturating_sub(targets).max(2);
    let target_idx: Vec<usize> = (first..t_len).collect();
    let mut rows = Vec::new();
    for &t in &target_idx {
        let history = network.prefix(t)?;
        let truth = network.snapshot(t);
        if let Some(cfg) = config {
            let model = train(&history, cfg)?;
            let r = score_prediction(link_predict(&model, &history)?, truth)?;
            log::info!("target {t}: {} auc {:.4} f1 {:.4}", variant_name(cfg), r.auc, r.f1);
            rows.push(LinkPredRow {
                target: t,
                method: variant_name(cfg).into(),
                auc: r.auc,
                f1: r.f1,
                threshold: r.threshold,
            });
        }
        if bas {
            let r = score_prediction(bas_predict(history.snapshots())?, truth)?;
            rows.push(LinkPredRow {
                target: t,
                method: "bas".into(),
                auc: r.auc,
                f1: r.f1,
                threshold: r.threshold,
            });
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let averages = methods
        .into_iter()
        .map(|m| {
            let sel: Vec<&LinkPredRow> = rows.iter().filter(|r| r.method == m).collect();
            let k = sel.len() as f64;
            MethodAverage {
                auc: sel.iter().map(|r| r.auc).sum::<f64>() / k,
                f1: sel.iter().map(|r| r.f1).sum::<f64>() / k,
                method: m,
            }
        })
        .collect();
    Ok(LinkPredReport {
        targets: target_idx,
        rows,
        averages,
    })
}

fn variant_name(cfg: &TrainConfig) -> &'static str {
    match cfg.variant {
        crate::objective::Variant::Ielsm => "ielsm",
        crate::objective::Variant::Elsm => "elsm",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityResult {
    pub labels: Vec<Vec<usize>>,
    pub k_per_t: Vec<usize>,
    /// Modularity on the observed snapshots.
    pub modularity_per_t: Vec<f64>,
    /// NMI between snapshot `t` and `t + 1`.
    pub successive_nmi: Vec<f64>,
    pub avg_modularity: f64,
    /// `None` for a single snapshot.
    pub avg_nmi: Option<f64>,
}

impl CommunityResult {
    fn from_labels(network: &DynamicNetwork, labels: Vec<Vec<usize>>, k_per_t: Vec<usize>) -> Result<Self> {
        let modularity_per_t = labels
            .iter()
            .enumerate()
            .map(|(t, l)| modularity(network.snapshot(t), l))
            .collect::<Result<Vec<_>>>()?;
        let successive_nmi = labels.windows(2).map(|w| nmi(&w[0], &w[1])).collect::<Result<Vec<_>>>()?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(CommunityResult {
            avg_modularity: mean(&modularity_per_t),
            avg_nmi: (!successive_nmi.is_empty()).then(|| mean(&successive_nmi)),
            labels,
            k_per_t,
            modularity_per_t,
            successive_nmi,
        })
    }
}

/// Clusters each snapshot's embeddings with [`select_k`] and scores the
/// labels on the observed graph.
pub fn community_pipeline(
    embeddings: &[DMatrix<f64>],
    network: &DynamicNetwork,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<CommunityResult> {
    if embeddings.len() != network.len() {
        return Err(Error::shape(
            "community_pipeline",
            format!("{} embedding layers for {} snapshots", embeddings.len(), network.len()),
        ));
    }
    if embeddings.iter().any(|z| z.nrows() != network.n()) {
        return Err(Error::shape("community_pipeline", "embedding rows differ from n"));
    }
    let (ks, labels) = embeddings
        .iter()
        .map(|z| select_k(z, k_min, k_max, seed, DEFAULT_RESTARTS))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    CommunityResult::from_labels(network, labels, ks)
}

/// The spectral baseline: [`spectral_select_k`] on every snapshot.
pub fn spectral_pipeline(network: &DynamicNetwork, k_min: usize, k_max: usize, seed: u64) -> Result<CommunityResult> {
    let (ks, labels) = network
        .snapshots()
        .iter()
        .map(|a| spectral_select_k(a, k_min, k_max, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    CommunityResult::from_labels(network, labels, ks)
}
