//! Shared domain types and the distance kernels of the evolving latent
//! space model.
//!
//! Three kernels drive the generative process, all functions of the squared
//! Euclidean distance between two latent positions:
//!
//! * the edge kernel `f(x) = 1 - tanh(|x|^2 / s2^2)` gives the probability
//!   that two nodes are connected,
//! * the split kernel `g(x) = 1 - tanh(|x|^2 / s3^2)` gives the probability
//!   that a node joins a freshly sampled community center,
//! * the influence kernel `l(x) = exp(-|x|^2 / s4^2)` weighs how strongly a
//!   neighbor pulls a node's next position.
//!
//! [`neighbor_mean`] combines the influence kernel with the previous
//! snapshot's adjacency into the mean of a node's next embedding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generative hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of nodes.
    pub n: usize,
    /// Number of snapshots.
    #[serde(rename = "T")]
    pub t: usize,
    /// Maximum number of initial communities.
    #[serde(rename = "K")]
    pub k: usize,
    /// Membership distribution over the `k` initial communities.
    pub pi: Vec<f64>,
    /// Prior mean of community centers.
    pub m_prior: Vec<f64>,
    /// Prior standard deviation of community centers.
    pub s: f64,
    /// Spread of nodes around their community center.
    pub s1: f64,
    /// Edge kernel radius.
    pub s2: f64,
    /// Split kernel radius.
    pub s3: f64,
    /// Influence kernel radius.
    pub s4: f64,
    /// Latent dimension.
    pub d: usize,
}

impl HyperParams {
    /// The synthetic configuration used for the community detection benchmark.
    pub fn synthetic_benchmark() -> Self {
        HyperParams {
            n: 100,
            t: 10,
            k: 5,
            pi: vec![0.2; 5],
            m_prior: vec![0.0, 0.0],
            s: 1.0,
            s1: 0.05,
            s2: 0.2,
            s3: 1.0,
            s4: 0.5,
            d: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "must be positive"));
        }
        if self.t == 0 {
            return Err(Error::param("T", "must be positive"));
        }
        if self.d == 0 {
            return Err(Error::param("d", "must be positive"));
        }
        validate_pi(&self.pi, self.k)?;
        if self.m_prior.len() != self.d {
            return Err(Error::param(
                "m_prior",
                format!("length {} differs from d = {}", self.m_prior.len(), self.d),
            ));
        }
        if self.m_prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("m_prior", "entries must be finite"));
        }
        for (name, v) in [
            ("s", self.s),
            ("s1", self.s1),
            ("s2", self.s2),
            ("s3", self.s3),
            ("s4", self.s4),
        ] {
            check_scale(name, v)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_pi(pi: &[f64], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::param("K", "must be positive"));
    }
    if pi.len() != k {
        return Err(Error::param(
            "pi",
            format!("length {} differs from K = {k}", pi.len()),
        ));
    }
    if pi.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::param("pi", "entries must be finite and non-negative"));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param("pi", format!("sums to {total}, expected 1")));
    }
    Ok(())
}

pub(crate) fn check_scale(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite and > 0, got {v}")))
    }
}

/// A fixed node set observed through `T` symmetric adjacency snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicNetwork {
    snapshots: Vec<DMatrix<f64>>,
    weighted: bool,
}

impl DynamicNetwork {
    /// Builds a network, checking symmetry, the empty diagonal and the entry
    /// domain of every snapshot.
    pub fn new(snapshots: Vec<DMatrix<f64>>, weighted: bool) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::InvalidNetwork("no snapshots".into()));
        }
        let n = snapshots[0].nrows();
        for (t, a) in snapshots.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::InvalidNetwork(format!(
                    "snapshot {t} is {}x{}, expected {n}x{n}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            for i in 0..n {
                if a[(i, i)] != 0.0 {
                    return Err(Error::InvalidNetwork(format!(
                        "snapshot {t} has a self-loop at node {i}"
                    )));
                }
                for j in 0..i {
                    let v = a[(i, j)];
                    if v != a[(j, i)] {
                        return Err(Error::InvalidNetwork(format!(
                            "snapshot {t} is not symmetric at ({i}, {j})"
                        )));
                    }
                    let ok = if weighted {
                        v >= 0.0 && v.fract() == 0.0 && v.is_finite()
                    } else {
                        v == 0.0 || v == 1.0
                    };
                    if !ok {
                        return Err(Error::InvalidNetwork(format!(
                            "snapshot {t} entry ({i}, {j}) = {v} outside the {} domain",
                            if weighted { "integer weight" } else { "binary" }
                        )));
                    }
                }
            }
        }
        Ok(DynamicNetwork {
            snapshots,
            weighted,
        })
    }

    /// An `n`-node network with `t` empty snapshots.
    pub fn empty(n: usize, t: usize, weighted: bool) -> Self {
        DynamicNetwork {
            snapshots: vec![DMatrix::zeros(n, n); t.max(1)],
            weighted,
        }
    }

    pub(crate) fn from_trusted(snapshots: Vec<DMatrix<f64>>, weighted: bool) -> Self {
        debug_assert!(Self::new(snapshots.clone(), weighted).is_ok());
        DynamicNetwork {
            snapshots,
            weighted,
        }
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].nrows()
    }

    /// Number of snapshots.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn weighted(&self) -> bool {
        self.weighted
    }

    pub fn snapshot(&self, t: usize) -> &DMatrix<f64> {
        &self.snapshots[t]
    }

    pub fn snapshots(&self) -> &[DMatrix<f64>] {
        &self.snapshots
    }

    /// The first `t` snapshots.
    pub fn prefix(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.len() {
            return Err(Error::param(
                "prefix",
                format!("{t} not in 1..={}", self.len()),
            ));
        }
        Ok(DynamicNetwork {
            snapshots: self.snapshots[..t].to_vec(),
            weighted: self.weighted,
        })
    }

    /// Every positive entry becomes 1.
    pub fn binarized(&self) -> Self {
        DynamicNetwork {
            snapshots: self
                .snapshots
                .iter()
                .map(|a| a.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
                .collect(),
            weighted: false,
        }
    }
}

/// Latent state of the model. The discrete latents and centers only exist
/// for the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    /// One `n x d` embedding matrix per snapshot.
    pub z: Vec<DMatrix<f64>>,
    /// Initial memberships, 1-based in `1..=K`.
    pub c: Option<Vec<usize>>,
    /// Split indicators; row `t` belongs to snapshot `t + 1`.
    pub h: Option<Vec<Vec<u8>>>,
    /// Initial community centers, `K x d`.
    pub mu: Option<DMatrix<f64>>,
    /// New community centers; row `t` belongs to snapshot `t + 1`.
    pub alpha: Option<DMatrix<f64>>,
}

impl LatentTrajectory {
    pub fn validate(&self, n: usize, t: usize, k: Option<usize>) -> Result<()> {
        if self.z.len() != t {
            return Err(Error::shape(
                "trajectory",
                format!("{} embedding layers for {t} snapshots", self.z.len()),
            ));
        }
        if self.z.iter().any(|z| z.nrows() != n) {
            return Err(Error::shape("trajectory", "embedding rows differ from n"));
        }
        if let Some(h) = &self.h {
            if h.len() != t - 1 || h.iter().any(|row| row.len() != n) {
                return Err(Error::shape("trajectory", "h must be (T-1) x n"));
            }
            if h.iter().flatten().any(|&v| v > 1) {
                return Err(Error::shape("trajectory", "h entries must be 0 or 1"));
            }
        }
        if let Some(alpha) = &self.alpha {
            if alpha.nrows() != t - 1 {
                return Err(Error::shape("trajectory", "alpha must have T-1 rows"));
            }
        }
        if let (Some(c), Some(k)) = (&self.c, k) {
            if c.len() != n || c.iter().any(|&ci| ci == 0 || ci > k) {
                return Err(Error::shape("trajectory", "c entries must lie in 1..=K"));
            }
        }
        Ok(())
    }
}

fn squared_norm(diff: &[f64]) -> Result<f64> {
    if diff.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input".into()));
    }
    Ok(diff.iter().map(|v| v * v).sum())
}

/// `1 - tanh(|x|^2 / r^2)`.
pub fn tanh_kernel(diff: &[f64], radius: f64) -> Result<f64> {
    check_scale("radius", radius)?;
    Ok(1.0 - (squared_norm(diff)? / (radius * radius)).tanh())
}

/// Edge probability between two nodes whose embeddings differ by `diff`.
pub fn edge_kernel_f(diff: &[f64], s2: f64) -> Result<f64> {
    check_scale("s2", s2)?;
    tanh_kernel(diff, s2)
}

/// Probability that a node at offset `diff` from a new center joins it.
pub fn split_kernel_g(diff: &[f64], s3: f64) -> Result<f64> {
    check_scale("s3", s3)?;
    tanh_kernel(diff, s3)
}

/// Influence weight of a neighbor at offset `diff`.
pub fn influence_kernel_l(diff: &[f64], s4: f64) -> Result<f64> {
    check_scale("s4", s4)?;
    Ok((-squared_norm(diff)? / (s4 * s4)).exp())
}

/// Mean of node `i`'s next embedding: the average of its own previous
/// position (weight 1) and its neighbors' (weight `a_ij * l(z_i - z_j)`).
pub fn neighbor_mean(
    z_prev: &DMatrix<f64>,
    a_prev: &DMatrix<f64>,
    i: usize,
    s4: f64,
) -> Result<DVector<f64>> {
    check_scale("s4", s4)?;
    let n = z_prev.nrows();
    if a_prev.nrows() != n || a_prev.ncols() != n {
        return Err(Error::shape(
            "neighbor_mean",
            format!(
                "adjacency {}x{} vs {n} embeddings",
                a_prev.nrows(),
                a_prev.ncols()
            ),
        ));
    }
    if i >= n {
        return Err(Error::shape("neighbor_mean", format!("node {i} >= {n}")));
    }
    let zi = z_prev.row(i);
    let mut num: DVector<f64> = zi.transpose();
    let mut den = 1.0;
    for j in 0..n {
        let a = a_prev[(i, j)];
        if j == i || a == 0.0 {
            continue;
        }
        let zj = z_prev.row(j);
        let dist2 = (zi - zj).norm_squared();
        if !dist2.is_finite() {
            return Err(Error::NonFinite("neighbor_mean embedding".into()));
        }
        let w = a * (-dist2 / (s4 * s4)).exp();
        num += zj.transpose() * w;
        den += w;
    }
    Ok(num / den)
}

/// [`neighbor_mean`] for every node, stacked as rows.
pub fn neighbor_means(z_prev: &DMatrix<f64>, a_prev: &DMatrix<f64>, s4: f64) -> Result<DMatrix<f64>> {
    let n = z_prev.nrows();
    let mut out = DMatrix::zeros(n, z_prev.ncols());
    for i in 0..n {
        out.set_row(i, &neighbor_mean(z_prev, a_prev, i, s4)?.transpose());
    }
    Ok(out)
}
