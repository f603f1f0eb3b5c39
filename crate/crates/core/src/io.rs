//! Dataset ingestion, preprocessing and artifact serialization.
//!
//! # Network snapshot format
//!
//! ```text
//! <n> <T> <weighted: 0|1>
//! <t> <i> <j> <w>        one line per nonzero entry with i > j
//! ```
//!
//! Indices are 0-based. Blank lines and lines starting with `#` are ignored.
//!
//! # Temporal edge lists
//!
//! One event per line, `t u v [w]`, separated by whitespace or commas. `t`
//! is a number, `u` and `v` arbitrary tokens remapped to dense indices in
//! order of first appearance, `w` an optional non-negative integer weight
//! (default 1).
//!
//! # Checkpoints
//!
//! Little-endian binary:
//!
//! ```text
//! b"ELSMCKPT"  u32 version  u64 meta_len  meta (JSON: config, epoch, adam_step, log)
//! 3 x tensor block (parameters, first moments, second moments):
//!     u64 count, then per tensor: u32 rank, rank x u64 dims, numel x f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{CommunityResult, LinkPredReport};
use crate::model::{DynamicNetwork, LatentTrajectory};
use crate::objective::{DecoderSpec, ElsmState, Priors, VariationalState};
use crate::trainer::{AdamState, Checkpoint, LogRow, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ELSMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Meaningful lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalEdge {
    pub time: f64,
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemporalEdgeList {
    pub records: Vec<TemporalEdge>,
    /// Original token of each dense node index.
    pub node_ids: Vec<String>,
    pub self_loops_dropped: usize,
}

impl TemporalEdgeList {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }
}

/// Parses edge-list text; `origin` only labels errors.
pub fn parse_edge_list(text: &str, origin: &Path) -> Result<TemporalEdgeList> {
    let mut out = TemporalEdgeList::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (ln, line) in content_lines(text) {
        let f = fields(line);
        if f.len() < 3 || f.len() > 4 {
            return Err(parse_err(origin, ln, format!("expected `t u v [w]`, found {} fields", f.len())));
        }
        let time: f64 = f[0]
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| parse_err(origin, ln, format!("bad timestamp `{}`", f[0])))?;
        let weight = match f.get(3) {
            None => 1.0,
            Some(s) => {
                let w: f64 = s.parse().map_err(|_| parse_err(origin, ln, format!("bad weight `{s}`")))?;
                if !(w >= 0.0) || !w.is_finite() || w.fract() != 0.0 {
                    return Err(parse_err(origin, ln, format!("weight must be a non-negative integer, got `{s}`")));
                }
                w
            }
        };
        let mut id = |tok: &str| {
            let next = index.len();
            *index.entry(tok.to_string()).or_insert_with(|| {
                out.node_ids.push(tok.to_string());
                next
            })
        };
        let (u, v) = (id(f[1]), id(f[2]));
        if u == v {
            out.self_loops_dropped += 1;
            continue;
        }
        out.records.push(TemporalEdge { time, u, v, weight });
    }
    Ok(out)
}

pub fn load_edge_list(path: &Path) -> Result<TemporalEdgeList> {
    parse_edge_list(&read_text(path)?, path)
}

/// Sums event weights into `count` consecutive windows of length `window`
/// starting at the earliest timestamp. With `binarize` every touched pair
/// becomes 1. Events after the last window are ignored.
pub fn aggregate_windows(edges: &TemporalEdgeList, window: f64, count: usize, binarize: bool) -> Result<DynamicNetwork> {
    let start = edges.records.iter().map(|e| e.time).fold(f64::INFINITY, f64::min);
    aggregate_windows_from(edges, if start.is_finite() { start } else { 0.0 }, window, count, binarize)
}

/// [`aggregate_windows`] with an explicit start time.
pub fn aggregate_windows_from(
    edges: &TemporalEdgeList,
    start: f64,
    window: f64,
    count: usize,
    binarize: bool,
) -> Result<DynamicNetwork> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::param("window", "must be finite and > 0"));
    }
    if count == 0 {
        return Err(Error::param("count", "must be positive"));
    }
    let n = edges.num_nodes();
    let mut snaps = vec![DMatrix::zeros(n, n); count];
    for e in &edges.records {
        if e.time < start {
            continue;
        }
        let t = ((e.time - start) / window).floor() as usize;
        if t >= count {
            continue;
        }
        let a = &mut snaps[t];
        let v = if binarize { 1.0 } else { a[(e.u, e.v)] + e.weight };
        a[(e.u, e.v)] = v;
        a[(e.v, e.u)] = v;
    }
    DynamicNetwork::new(snaps, !binarize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRanking {
    /// Sum of incident weights over all snapshots.
    TotalWeight,
    /// Distinct neighbors over all snapshots.
    UniqueNeighbors,
}

/// Keeps the `k` highest-ranked nodes (ties to the lower index) in their
/// original order. Returns the kept original indices alongside.
pub fn filter_top_nodes(network: &DynamicNetwork, k: usize, by: NodeRanking) -> Result<(DynamicNetwork, Vec<usize>)> {
    let n = network.n();
    if k > n || k == 0 {
        return Err(Error::param("k", format!("must be in 1..={n}")));
    }
    let score = |i: usize| -> f64 {
        match by {
            NodeRanking::TotalWeight => network.snapshots().iter().map(|a| a.row(i).sum()).sum(),
            NodeRanking::UniqueNeighbors => (0..n)
                .filter(|&j| network.snapshots().iter().any(|a| a[(i, j)] > 0.0))
                .count() as f64,
        }
    };
    let scores: Vec<f64> = (0..n).map(score).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    let snaps = network
        .snapshots()
        .iter()
        .map(|a| DMatrix::from_fn(k, k, |i, j| a[(keep[i], keep[j])]))
        .collect();
    Ok((DynamicNetwork::from_trusted(snaps, network.weighted()), keep))
}

/// Drops snapshots with fewer than `min_nonzero` nonzero entries (counting
/// both triangles). Returns the kept snapshot indices alongside.
pub fn filter_sparse_snapshots(network: &DynamicNetwork, min_nonzero: usize) -> Result<(DynamicNetwork, Vec<usize>)> {
    let keep: Vec<usize> = (0..network.len())
        .filter(|&t| network.snapshot(t).iter().filter(|v| **v != 0.0).count() >= min_nonzero)
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidNetwork(format!(
            "every snapshot has fewer than {min_nonzero} nonzero entries"
        )));
    }
    let snaps = keep.iter().map(|&t| network.snapshot(t).clone()).collect();
    Ok((DynamicNetwork::from_trusted(snaps, network.weighted()), keep))
}

/// Renders a network in the snapshot text format.
pub fn format_network(network: &DynamicNetwork) -> String {
    let mut s = format!("{} {} {}\n", network.n(), network.len(), u8::from(network.weighted()));
    for (t, a) in network.snapshots().iter().enumerate() {
        for i in 0..a.nrows() {
            for j in 0..i {
                let w = a[(i, j)];
                if w != 0.0 {
                    s.push_str(&format!("{t} {i} {j} {w}\n"));
                }
            }
        }
    }
    s
}

pub fn parse_network(text: &str, origin: &Path) -> Result<DynamicNetwork> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(origin, 1, "missing header `n T weighted`"))?;
    let h = fields(header);
    let parse_usize = |s: &str, ln: usize, what: &str| -> Result<usize> {
        s.parse().map_err(|_| parse_err(origin, ln, format!("bad {what} `{s}`")))
    };
    if h.len() != 3 {
        return Err(parse_err(origin, hl, "header must be `n T weighted`"));
    }
    let n = parse_usize(h[0], hl, "n")?;
    let t_len = parse_usize(h[1], hl, "T")?;
    let weighted = match h[2] {
        "0" => false,
        "1" => true,
        other => return Err(parse_err(origin, hl, format!("weighted flag must be 0 or 1, got `{other}`"))),
    };
    if t_len == 0 {
        return Err(parse_err(origin, hl, "T must be positive"));
    }
    let mut snaps = vec![DMatrix::zeros(n, n); t_len];
    for (ln, line) in lines {
        let f = fields(line);
        if f.len() != 4 {
            return Err(parse_err(origin, ln, "expected `t i j w`"));
        }
        let t = parse_usize(f[0], ln, "snapshot")?;
        let i = parse_usize(f[1], ln, "node")?;
        let j = parse_usize(f[2], ln, "node")?;
        let w: f64 = f[3].parse().map_err(|_| parse_err(origin, ln, format!("bad weight `{}`", f[3])))?;
        if t >= t_len || i >= n || j >= n {
            return Err(parse_err(origin, ln, format!("entry ({t}, {i}, {j}) outside header bounds T={t_len}, n={n}")));
        }
        if i == j {
            return Err(parse_err(origin, ln, "self-loops are not allowed"));
        }
        if snaps[t][(i, j)] != 0.0 {
            return Err(parse_err(origin, ln, "duplicate entry"));
        }
        snaps[t][(i, j)] = w;
        snaps[t][(j, i)] = w;
    }
    DynamicNetwork::new(snaps, weighted).map_err(|e| parse_err(origin, 0, e.to_string()))
}

pub fn save_network(path: &Path, network: &DynamicNetwork) -> Result<()> {
    write_atomic(path, format_network(network).as_bytes())
}

pub fn load_network(path: &Path) -> Result<DynamicNetwork> {
    parse_network(&read_text(path)?, path)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.iter().any(|x| x.len() != cols) {
        return Err(Error::shape("json matrix", format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

fn layers(ms: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
    ms.iter().map(rows).collect()
}

fn from_layers(l: &[Vec<Vec<f64>>], n: usize, d: usize, what: &str) -> Result<Vec<DMatrix<f64>>> {
    l.iter()
        .map(|m| {
            if m.len() != n {
                return Err(Error::shape("json layers", format!("{what}: {} rows, expected {n}", m.len())));
            }
            from_rows(m, d, what)
        })
        .collect()
}

/// Ground-truth latents written by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    /// `T x n x d`
    pub z: Vec<Vec<Vec<f64>>>,
    /// 1-based initial memberships.
    pub c: Option<Vec<usize>>,
    /// `(T-1) x n` split indicators for snapshots `1..T`.
    pub h: Option<Vec<Vec<u8>>>,
    /// `K x d`
    pub mu: Option<Vec<Vec<f64>>>,
    /// `(T-1) x d`
    pub alpha: Option<Vec<Vec<f64>>>,
}

impl From<&LatentTrajectory> for TrajectoryFile {
    fn from(t: &LatentTrajectory) -> Self {
        TrajectoryFile {
            z: layers(&t.z),
            c: t.c.clone(),
            h: t.h.clone(),
            mu: t.mu.as_ref().map(rows),
            alpha: t.alpha.as_ref().map(rows),
        }
    }
}

impl TrajectoryFile {
    pub fn to_trajectory(&self) -> Result<LatentTrajectory> {
        let n = self.z.first().map_or(0, |l| l.len());
        let d = self.z.first().and_then(|l| l.first()).map_or(0, |r| r.len());
        Ok(LatentTrajectory {
            z: from_layers(&self.z, n, d, "z")?,
            c: self.c.clone(),
            h: self.h.clone(),
            mu: self.mu.as_ref().map(|m| from_rows(m, d, "mu")).transpose()?,
            alpha: self.alpha.as_ref().map(|m| from_rows(m, d, "alpha")).transpose()?,
        })
    }
}

/// Full-model part of [`EmbeddingsFile`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElsmEmbeddings {
    /// `n x K`
    pub c_hat: Vec<Vec<f64>>,
    /// `(T-1) x n`, row `r` belongs to snapshot `r + 1`.
    pub h_hat: Vec<Vec<f64>>,
    pub alpha_mean: Vec<Vec<f64>>,
    pub alpha_log_var: Vec<Vec<f64>>,
    pub mu_mean: Vec<Vec<f64>>,
    pub mu_log_var: Vec<Vec<f64>>,
    /// `T x n x d` mean-head outputs before mixing.
    pub pre_split: Vec<Vec<Vec<f64>>>,
}

/// Trained embeddings: variational means and log-variances per snapshot,
/// plus the fitted decoder and priors needed for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsFile {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    /// `T x n x d`
    pub nu: Vec<Vec<Vec<f64>>>,
    pub log_var: Vec<Vec<Vec<f64>>>,
    pub decoder: DecoderSpec,
    pub priors: Priors,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elsm: Option<ElsmEmbeddings>,
}

impl EmbeddingsFile {
    pub fn new(state: &VariationalState, decoder: &DecoderSpec, priors: &Priors) -> Self {
        let n = state.nu.first().map_or(0, |m| m.nrows());
        let d = state.nu.first().map_or(0, |m| m.ncols());
        EmbeddingsFile {
            n,
            t: state.len(),
            d,
            nu: layers(&state.nu),
            log_var: layers(&state.log_var),
            decoder: decoder.clone(),
            priors: priors.clone(),
            elsm: state.elsm.as_ref().map(|e| ElsmEmbeddings {
                c_hat: rows(&e.c_hat),
                h_hat: rows(&e.h_hat),
                alpha_mean: rows(&e.alpha_mean),
                alpha_log_var: rows(&e.alpha_log_var),
                mu_mean: rows(&e.mu_mean),
                mu_log_var: rows(&e.mu_log_var),
                pre_split: layers(&e.pre_split),
            }),
        }
    }

    pub fn state(&self) -> Result<VariationalState> {
        if self.nu.len() != self.t || self.log_var.len() != self.t {
            return Err(Error::shape("embeddings", format!("expected {} layers", self.t)));
        }
        let elsm = match &self.elsm {
            None => None,
            Some(e) => {
                let k = e.c_hat.first().map_or(0, |r| r.len());
                Some(ElsmState {
                    pre_split: from_layers(&e.pre_split, self.n, self.d, "pre_split")?,
                    h_hat: from_rows(&e.h_hat, self.n, "h_hat")?,
                    c_hat: from_rows(&e.c_hat, k, "c_hat")?,
                    alpha_mean: from_rows(&e.alpha_mean, self.d, "alpha_mean")?,
                    alpha_log_var: from_rows(&e.alpha_log_var, self.d, "alpha_log_var")?,
                    mu_mean: from_rows(&e.mu_mean, self.d, "mu_mean")?,
                    mu_log_var: from_rows(&e.mu_log_var, self.d, "mu_log_var")?,
                })
            }
        };
        Ok(VariationalState {
            nu: from_layers(&self.nu, self.n, self.d, "nu")?,
            log_var: from_layers(&self.log_var, self.n, self.d, "log_var")?,
            elsm,
        })
    }
}

/// A dense matrix as JSON rows, used by `eval-metrics`.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let r: Vec<Vec<f64>> = read_json(path)?;
    let cols = r.first().map_or(0, |x| x.len());
    from_rows(&r, cols, &path.display().to_string()).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_json(path, &rows(m))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("{other:?}"),
        },
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Training log with columns `epoch, elbo, joint, entropy, edge,
/// transition, prior, discrete`.
pub fn write_training_log(path: &Path, log: &[LogRow]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        elbo: f64,
        joint: f64,
        entropy: f64,
        edge: f64,
        transition: f64,
        prior: f64,
        discrete: f64,
    }
    write_csv(
        path,
        log.iter().map(|r| Row {
            epoch: r.epoch,
            elbo: r.report.elbo,
            joint: r.report.joint,
            entropy: r.report.entropy,
            edge: r.report.edge,
            transition: r.report.transition,
            prior: r.report.prior,
            discrete: r.report.discrete,
        }),
    )
}

/// Community CSV: `snapshot, k, modularity, nmi_prev` per snapshot, followed
/// by an `average` row when there is more than one snapshot.
pub fn write_community_csv(path: &Path, result: &CommunityResult) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        snapshot: String,
        k: String,
        modularity: f64,
        nmi_prev: Option<f64>,
    }
    let mut out: Vec<Row> = (0..result.k_per_t.len())
        .map(|t| Row {
            snapshot: t.to_string(),
            k: result.k_per_t[t].to_string(),
            modularity: result.modularity_per_t[t],
            nmi_prev: t.checked_sub(1).map(|p| result.successive_nmi[p]),
        })
        .collect();
    if out.len() > 1 {
        let mean_k = result.k_per_t.iter().sum::<usize>() as f64 / result.k_per_t.len() as f64;
        out.push(Row {
            snapshot: "average".into(),
            k: mean_k.to_string(),
            modularity: result.avg_modularity,
            nmi_prev: result.avg_nmi,
        });
    }
    write_csv(path, out)
}

/// Link prediction CSV: `target, method, auc, f1, threshold` per target
/// snapshot and method, then one `average` row per method.
pub fn write_linkpred_csv(path: &Path, report: &LinkPredReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        target: String,
        method: &'a str,
        auc: f64,
        f1: f64,
        threshold: Option<f64>,
    }
    let mut out: Vec<Row> = report
        .rows
        .iter()
        .map(|r| Row {
            target: r.target.to_string(),
            method: &r.method,
            auc: r.auc,
            f1: r.f1,
            threshold: Some(r.threshold),
        })
        .collect();
    for a in &report.averages {
        out.push(Row {
            target: "average".into(),
            method: &a.method,
            auc: a.auc,
            f1: a.f1,
            threshold: None,
        });
    }
    write_csv(path, out)
}

/// Provenance written next to every CLI output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: std::collections::BTreeMap<String, PathBuf>,
    pub outputs: std::collections::BTreeMap<String, PathBuf>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub notes: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    log: Vec<LogRow>,
}

fn put_tensors(buf: &mut Vec<u8>, ts: &[Tensor]) {
    buf.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for t in ts {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&CheckpointMeta {
        config: ck.config.clone(),
        epoch: ck.epoch,
        adam_step: ck.adam.step,
        log: ck.log.clone(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    put_tensors(&mut buf, &ck.params);
    put_tensors(&mut buf, &ck.adam.m);
    put_tensors(&mut buf, &ck.adam.v);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&l| l <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| self.len()).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
            let bytes = self.take(numel * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt metadata: {e}")))?;
    let params = r.tensors()?;
    let m = r.tensors()?;
    let v = r.tensors()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config: meta.config,
        epoch: meta.epoch,
        params,
        adam: AdamState {
            step: meta.adam_step,
            m,
            v,
        },
        log: meta.log,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
