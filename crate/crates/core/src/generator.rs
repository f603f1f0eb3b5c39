//! Synthetic dynamic networks drawn from the evolving latent space model.
//!
//! The first snapshot places every node around one of `K` Gaussian
//! community centers. Each later snapshot samples a fresh center `alpha`,
//! lets nodes close to it jump there, and moves every other node towards
//! the kernel-weighted mean of its previous neighbors. Edges are emitted
//! independently per unordered pair from the edge kernel.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_scale, neighbor_means, tanh_kernel, validate_pi, DynamicNetwork, HyperParams,
    LatentTrajectory,
};
use crate::rng::{SeedTree, Stream};

/// How adjacency entries are drawn from latent distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EdgeEmission {
    /// `a_ij ~ Bernoulli(1 - tanh(|z_i - z_j|^2 / s2^2))`.
    Bernoulli,
    /// `a_ij ~ Poisson(exp(-w^2 |z_i - z_j|^2 + b))`.
    Poisson { w_rho: f64, b_rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(flatten)]
    pub params: HyperParams,
    #[serde(default = "default_emission")]
    pub emission: EdgeEmission,
    /// Explicit initial community centers (`K` rows of length `d`); sampled
    /// from the prior when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

fn default_emission() -> EdgeEmission {
    EdgeEmission::Bernoulli
}

impl From<HyperParams> for GeneratorConfig {
    fn from(params: HyperParams) -> Self {
        GeneratorConfig {
            params,
            emission: EdgeEmission::Bernoulli,
            centers: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if let EdgeEmission::Poisson { w_rho, b_rho } = self.emission {
            if !w_rho.is_finite() || !b_rho.is_finite() {
                return Err(Error::param("emission", "w_rho and b_rho must be finite"));
            }
        }
        if let Some(c) = &self.centers {
            if c.len() != self.params.k || c.iter().any(|row| row.len() != self.params.d) {
                return Err(Error::param("centers", "must be K rows of length d"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub network: DynamicNetwork,
    /// Ground truth for every latent variable.
    pub trajectory: LatentTrajectory,
    pub seed: u64,
}

fn gaussian_row(rng: &mut impl Rng, mean: &[f64], sd: f64, out: &mut [f64]) {
    for (o, m) in out.iter_mut().zip(mean) {
        let e: f64 = rng.sample(StandardNormal);
        *o = m + sd * e;
    }
}

/// `K x d` centers drawn i.i.d. from `N(m_prior, s^2 I)`, or `explicit`
/// returned verbatim.
pub fn sample_initial_centers(
    params: &HyperParams,
    rng: &mut impl Rng,
    explicit: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if let Some(c) = explicit {
        if c.nrows() != params.k || c.ncols() != params.d {
            return Err(Error::param("centers", "must be K x d"));
        }
        return Ok(c.clone());
    }
    let mut centers = DMatrix::zeros(params.k, params.d);
    let mut row = vec![0.0; params.d];
    for j in 0..params.k {
        gaussian_row(rng, &params.m_prior, params.s, &mut row);
        for (q, v) in row.iter().enumerate() {
            centers[(j, q)] = *v;
        }
    }
    Ok(centers)
}

/// `n` categorical draws from `pi`, labelled `1..=K`.
pub fn sample_memberships(pi: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    validate_pi(pi, pi.len())?;
    let dist = WeightedIndex::new(pi).map_err(|e| Error::param("pi", e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng) + 1).collect())
}

/// `z_i ~ N(mu_{c_i}, s1^2 I)`.
pub fn sample_initial_embeddings(
    centers: &DMatrix<f64>,
    c: &[usize],
    s1: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    check_scale("s1", s1)?;
    let (k, d) = centers.shape();
    let mut z = DMatrix::zeros(c.len(), d);
    for (i, &ci) in c.iter().enumerate() {
        if ci == 0 || ci > k {
            return Err(Error::param("c", format!("membership {ci} outside 1..={k}")));
        }
        for q in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            z[(i, q)] = centers[(ci - 1, q)] + s1 * e;
        }
    }
    Ok(z)
}

/// One symmetric, loop-free adjacency snapshot given embeddings.
pub fn sample_adjacency(
    z: &DMatrix<f64>,
    s2: f64,
    emission: EdgeEmission,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    check_scale("s2", s2)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let n = z.nrows();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let dist2 = (z.row(i) - z.row(j)).norm_squared();
            let v = match emission {
                EdgeEmission::Bernoulli => {
                    let p = 1.0 - (dist2 / (s2 * s2)).tanh();
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                EdgeEmission::Poisson { w_rho, b_rho } => {
                    let rate = (-w_rho * w_rho * dist2 + b_rho).exp();
                    if rate > 0.0 {
                        Poisson::new(rate)
                            .map_err(|e| Error::param("poisson rate", e.to_string()))?
                            .sample(rng)
                    } else {
                        0.0
                    }
                }
            };
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// `h_i ~ Bernoulli(g(z_i - alpha))`.
pub fn sample_split_indicators(
    z_prev: &DMatrix<f64>,
    alpha: &[f64],
    s3: f64,
    rng: &mut impl Rng,
) -> Result<Vec<u8>> {
    check_scale("s3", s3)?;
    if alpha.len() != z_prev.ncols() {
        return Err(Error::shape("split indicators", "alpha length differs from d"));
    }
    let mut diff = vec![0.0; alpha.len()];
    (0..z_prev.nrows())
        .map(|i| {
            for (q, v) in diff.iter_mut().enumerate() {
                *v = z_prev[(i, q)] - alpha[q];
            }
            let p = tanh_kernel(&diff, s3)?;
            Ok(u8::from(rng.random::<f64>() < p))
        })
        .collect()
}

/// `z_i ~ N(h_i alpha + (1 - h_i) mu_i, s1^2 I)` with `mu_i` the neighbor
/// mean of the previous snapshot.
pub fn evolve_embeddings(
    z_prev: &DMatrix<f64>,
    a_prev: &DMatrix<f64>,
    h: &[u8],
    alpha: &[f64],
    s1: f64,
    s4: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    check_scale("s1", s1)?;
    let (n, d) = z_prev.shape();
    if h.len() != n || alpha.len() != d {
        return Err(Error::shape("evolve", "h must have n entries and alpha d"));
    }
    let means = neighbor_means(z_prev, a_prev, s4)?;
    let mut z = DMatrix::zeros(n, d);
    for i in 0..n {
        for q in 0..d {
            let centre = if h[i] == 1 { alpha[q] } else { means[(i, q)] };
            let e: f64 = rng.sample(StandardNormal);
            z[(i, q)] = centre + s1 * e;
        }
    }
    Ok(z)
}

/// Runs the full generative process for `params.t` snapshots.
pub fn generate_network(params: &HyperParams, seed: u64) -> Result<GeneratorOutput> {
    generate(&GeneratorConfig::from(params.clone()), seed)
}

pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<GeneratorOutput> {
    config.validate()?;
    let p = &config.params;
    let tree = SeedTree::new(seed);
    let explicit = config.centers.as_ref().map(|rows| {
        DMatrix::from_row_iterator(p.k, p.d, rows.iter().flatten().copied())
    });

    let mu = sample_initial_centers(p, &mut tree.rng(Stream::Centers, 0), explicit.as_ref())?;
    let c = sample_memberships(&p.pi, p.n, &mut tree.rng(Stream::Memberships, 0))?;
    let z1 = sample_initial_embeddings(&mu, &c, p.s1, &mut tree.rng(Stream::InitialEmbeddings, 0))?;
    let a1 = sample_adjacency(&z1, p.s2, config.emission, &mut tree.rng(Stream::Adjacency, 0))?;

    let mut zs = vec![z1];
    let mut adj = vec![a1];
    let mut hs = Vec::with_capacity(p.t.saturating_sub(1));
    let mut alphas = DMatrix::zeros(p.t - 1, p.d);
    let mut alpha = vec![0.0; p.d];
    for t in 1..p.t {
        let ti = t as u64;
        gaussian_row(&mut tree.rng(Stream::Alpha, ti), &p.m_prior, p.s, &mut alpha);
        let z_prev = &zs[t - 1];
        let h = sample_split_indicators(z_prev, &alpha, p.s3, &mut tree.rng(Stream::Splits, ti))?;
        let z = evolve_embeddings(
            z_prev,
            &adj[t - 1],
            &h,
            &alpha,
            p.s1,
            p.s4,
            &mut tree.rng(Stream::Evolution, ti),
        )?;
        let a = sample_adjacency(&z, p.s2, config.emission, &mut tree.rng(Stream::Adjacency, ti))?;
        for (q, v) in alpha.iter().enumerate() {
            alphas[(t - 1, q)] = *v;
        }
        hs.push(h);
        zs.push(z);
        adj.push(a);
    }

    let weighted = matches!(config.emission, EdgeEmission::Poisson { .. });
    Ok(GeneratorOutput {
        network: DynamicNetwork::from_trusted(adj, weighted),
        trajectory: LatentTrajectory {
            z: zs,
            c: Some(c),
            h: Some(hs),
            mu: Some(mu),
            alpha: Some(alphas),
        },
        seed,
    })
}
