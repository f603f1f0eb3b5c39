//! Log-likelihoods, entropies and the evidence lower bound.
//!
//! Two implementations live here. The plain functions evaluate every term
//! directly from matrices and serve as the reference; [`elbo_on_tape`]
//! records the same computation on an autodiff [`Graph`] for training.

use libm::lgamma;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::encoder::{self, gmm_responsibilities, log_weight, EncoderParams};
use crate::error::{Error, Result};
use crate::model::{check_scale, neighbor_mean, validate_pi, DynamicNetwork};

/// Probabilities are kept inside `[P_MIN, 1 - P_MIN]`.
pub const P_MIN: f64 = 1e-7;
/// Poisson rates are floored here before taking logs.
pub const RATE_MIN: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ielsm,
    Elsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// `p = 1 - tanh(|z_i - z_j|^2 / s2^2)`
    BernoulliKernel,
    /// `p = sigmoid(-w^2 |z_i - z_j|^2 + b)`
    BernoulliLearned,
    /// Poisson with rate `exp(-w^2 |z_i - z_j|^2 + b)`
    PoissonLearned,
}

/// Edge decoder. For the learned kinds `w_rho` and `b_rho` are initial
/// values during training and fitted values afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub s2: f64,
    pub w_rho: f64,
    pub b_rho: f64,
    /// Fit `s2` as `exp(theta)`.
    pub learn_s2: bool,
    /// Fit the influence radius `s4` as `exp(theta)`.
    pub learn_s4: bool,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            kind: DecoderKind::BernoulliKernel,
            s2: 1.0,
            w_rho: 1.0,
            b_rho: 0.0,
            learn_s2: false,
            learn_s4: false,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        check_scale("s2", self.s2)?;
        if !self.w_rho.is_finite() || !self.b_rho.is_finite() {
            return Err(Error::param("w_rho/b_rho", "must be finite"));
        }
        if self.learn_s2 && self.kind != DecoderKind::BernoulliKernel {
            return Err(Error::param("learn_s2", "only applies to the bernoulli-kernel decoder"));
        }
        Ok(())
    }

    pub fn is_poisson(&self) -> bool {
        self.kind == DecoderKind::PoissonLearned
    }

    /// `log rho` before flooring.
    fn log_rate_raw(&self, dist2: f64) -> f64 {
        -self.w_rho * self.w_rho * dist2 + self.b_rho
    }

    /// Poisson mean for squared distance `dist2`.
    pub fn rate(&self, dist2: f64) -> f64 {
        self.log_rate_raw(dist2).exp().max(RATE_MIN)
    }

    /// `(ln p, ln(1 - p))` of the clamped Bernoulli edge probability.
    fn bernoulli_log_probs(&self, dist2: f64) -> (f64, f64) {
        match self.kind {
            DecoderKind::BernoulliKernel => tanh_kernel_log_probs(dist2 / (self.s2 * self.s2)),
            _ => {
                let x = self.log_rate_raw(dist2);
                (clamp_log_p(log_sigmoid(x)), clamp_log_p(log_sigmoid(-x)))
            }
        }
    }

    /// Bernoulli edge probability, clamped.
    fn bernoulli_p(&self, dist2: f64) -> f64 {
        let p = match self.kind {
            DecoderKind::BernoulliKernel => 1.0 - (dist2 / (self.s2 * self.s2)).tanh(),
            _ => {
                let x = self.log_rate_raw(dist2);
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    x.exp() / (1.0 + x.exp())
                }
            }
        };
        p.clamp(P_MIN, 1.0 - P_MIN)
    }

    /// Probability that an edge is present; `1 - exp(-rho)` for Poisson.
    pub fn edge_probability(&self, dist2: f64) -> f64 {
        match self.kind {
            DecoderKind::PoissonLearned => -(-self.rate(dist2)).exp_m1(),
            _ => self.bernoulli_p(dist2),
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn clamp_log_p(lp: f64) -> f64 {
    lp.clamp(P_MIN.ln(), (-P_MIN).ln_1p())
}

/// `(ln k, ln(1 - k))` for `k = 1 - tanh(x)` clamped like any probability,
/// without forming `1 - tanh(x)` (`1 - tanh(x) = 2 sigmoid(-2x)`).
fn tanh_kernel_log_probs(x: f64) -> (f64, f64) {
    let on = clamp_log_p(std::f64::consts::LN_2 + log_sigmoid(-2.0 * x));
    let off = x.tanh().clamp(P_MIN, 1.0 - P_MIN).ln();
    (on, off)
}

/// Prior values used during inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    /// Prior mean of first-layer positions and centers; zeros when absent.
    pub m_prior: Option<Vec<f64>>,
    pub s: f64,
    pub s1: f64,
    pub s3: f64,
    pub s4: f64,
    /// Number of initial centers (full model only).
    #[serde(rename = "K")]
    pub k: usize,
    /// Mixture weights; uniform when absent.
    pub pi: Option<Vec<f64>>,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            m_prior: None,
            s: 1.0,
            s1: 0.1,
            s3: 1.0,
            s4: 1.0,
            k: 5,
            pi: None,
        }
    }
}

impl Priors {
    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, v) in [("s", self.s), ("s1", self.s1), ("s3", self.s3), ("s4", self.s4)] {
            check_scale(name, v)?;
        }
        if let Some(m) = &self.m_prior {
            if m.len() != d || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("m_prior", format!("needs {d} finite entries")));
            }
        }
        validate_pi(&self.weights(), self.k)
    }

    pub fn mean(&self, d: usize) -> Vec<f64> {
        self.m_prior.clone().unwrap_or_else(|| vec![0.0; d])
    }

    pub fn weights(&self) -> Vec<f64> {
        self.pi
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.k.max(1) as f64; self.k])
    }
}

/// Posterior approximation at one point in training.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `T` matrices `n x d` of means.
    pub nu: Vec<DMatrix<f64>>,
    /// `T` matrices `n x d` of clamped log-variances.
    pub log_var: Vec<DMatrix<f64>>,
    pub elsm: Option<ElsmState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElsmState {
    /// Mean-head outputs `m_i^(t)` before mixing with the new center.
    pub pre_split: Vec<DMatrix<f64>>,
    /// `(T-1) x n`, row `r` holds `h_hat` at snapshot `r + 1`.
    pub h_hat: DMatrix<f64>,
    /// `n x K` responsibilities.
    pub c_hat: DMatrix<f64>,
    /// `(T-1) x d`
    pub alpha_mean: DMatrix<f64>,
    pub alpha_log_var: DMatrix<f64>,
    /// `K x d`
    pub mu_mean: DMatrix<f64>,
    pub mu_log_var: DMatrix<f64>,
}

impl VariationalState {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        let all = |ms: &[DMatrix<f64>]| ms.iter().all(|m| m.iter().all(|v| v.is_finite()));
        let base = all(&self.nu) && all(&self.log_var);
        match &self.elsm {
            None => base,
            Some(e) => {
                base && all(&e.pre_split)
                    && all(&[
                        e.h_hat.clone(),
                        e.c_hat.clone(),
                        e.alpha_mean.clone(),
                        e.alpha_log_var.clone(),
                        e.mu_mean.clone(),
                        e.mu_log_var.clone(),
                    ])
            }
        }
    }
}

/// Standard-normal draws for one Monte Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub z: Vec<DMatrix<f64>>,
    pub alpha: Option<DMatrix<f64>>,
    pub mu: Option<DMatrix<f64>>,
}

impl Noise {
    pub fn zeros(t: usize, n: usize, d: usize, k: Option<usize>) -> Self {
        Noise {
            z: vec![DMatrix::zeros(n, d); t],
            alpha: k.map(|_| DMatrix::zeros(t.saturating_sub(1), d)),
            mu: k.map(|k| DMatrix::zeros(k, d)),
        }
    }

    pub fn sample(rng: &mut impl Rng, t: usize, n: usize, d: usize, k: Option<usize>) -> Self {
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = (0..t).map(|_| draw(n, d)).collect();
        let alpha = k.map(|_| draw(t.saturating_sub(1), d));
        let mu = k.map(|k| draw(k, d));
        Noise { z, alpha, mu }
    }
}

/// Expected log joint split by source.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointTerms {
    pub edge: f64,
    pub transition: f64,
    /// Gaussian priors: first-layer positions, or centers in the full model.
    pub prior: f64,
    /// Membership, first-layer mixture and split terms.
    pub discrete: f64,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.edge + self.transition + self.prior + self.discrete
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub joint: f64,
    pub entropy: f64,
    pub edge: f64,
    pub transition: f64,
    pub prior: f64,
    pub discrete: f64,
}

impl ElboReport {
    fn from_parts(j: JointTerms, entropy: f64) -> Self {
        let joint = j.total();
        ElboReport {
            elbo: joint + entropy,
            joint,
            entropy,
            edge: j.edge,
            transition: j.transition,
            prior: j.prior,
            discrete: j.discrete,
        }
    }

    /// The first non-finite component, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("edge", self.edge),
            ("transition", self.transition),
            ("prior", self.prior),
            ("discrete", self.discrete),
            ("entropy", self.entropy),
            ("elbo", self.elbo),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Diagonal Gaussian log-density. `var` holds one shared variance or one
/// per coordinate.
pub fn log_gaussian_density(x: &[f64], mean: &[f64], var: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || !(var.len() == 1 || var.len() == x.len()) {
        return Err(Error::shape(
            "log_gaussian_density",
            format!("x {}, mean {}, var {}", x.len(), mean.len(), var.len()),
        ));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::param("var", format!("must be > 0, got {v}")));
    }
    Ok(x.iter()
        .zip(mean)
        .enumerate()
        .map(|(q, (xi, mi))| {
            let v = if var.len() == 1 { var[0] } else { var[q] };
            -0.5 * (LN_2PI + v.ln()) - (xi - mi) * (xi - mi) / (2.0 * v)
        })
        .sum())
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Log-probability of one observed entry.
pub fn edge_log_likelihood(a: f64, zi: &[f64], zj: &[f64], decoder: &DecoderSpec) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::shape("edge_log_likelihood", "embedding lengths differ"));
    }
    let dist2 = sqdist(zi, zj);
    if decoder.is_poisson() {
        if !(a >= 0.0) || a.fract() != 0.0 {
            return Err(Error::param("a", format!("Poisson counts must be non-negative integers, got {a}")));
        }
        let log_rate = decoder.log_rate_raw(dist2).max(RATE_MIN.ln());
        Ok(a * log_rate - log_rate.exp() - lgamma(a + 1.0))
    } else {
        let (on, off) = decoder.bernoulli_log_probs(dist2);
        match a {
            v if v == 1.0 => Ok(on),
            v if v == 0.0 => Ok(off),
            _ => Err(Error::param("a", format!("Bernoulli entries must be 0 or 1, got {a}"))),
        }
    }
}

/// `log N(z_t | neighbor_mean(z_prev, a_prev, i, s4), s1^2 I)`.
pub fn transition_log_density(
    z_t: &[f64],
    z_prev: &DMatrix<f64>,
    a_prev: &DMatrix<f64>,
    i: usize,
    s1: f64,
    s4: f64,
) -> Result<f64> {
    check_scale("s1", s1)?;
    let mean = neighbor_mean(z_prev, a_prev, i, s4)?;
    log_gaussian_density(z_t, mean.as_slice(), &[s1 * s1])
}

fn check_latents(network: &DynamicNetwork, z: &[DMatrix<f64>]) -> Result<usize> {
    if z.len() != network.len() || z.is_empty() {
        return Err(Error::shape("joint", format!("{} layers for {} snapshots", z.len(), network.len())));
    }
    let d = z[0].ncols();
    if z.iter().any(|m| m.nrows() != network.n() || m.ncols() != d) {
        return Err(Error::shape("joint", "every layer must be n x d"));
    }
    Ok(d)
}

fn edge_terms(network: &DynamicNetwork, z: &[DMatrix<f64>], decoder: &DecoderSpec) -> Result<f64> {
    let mut total = 0.0;
    for (a, zt) in network.snapshots().iter().zip(z) {
        let rows: Vec<Vec<f64>> = (0..zt.nrows()).map(|i| row(zt, i)).collect();
        for i in 0..rows.len() {
            for j in 0..i {
                total += edge_log_likelihood(a[(i, j)], &rows[i], &rows[j], decoder)?;
            }
        }
    }
    Ok(total)
}

/// Joint log-likelihood of the simplified model for fixed positions `z`.
pub fn joint_log_likelihood_ielsm(
    network: &DynamicNetwork,
    z: &[DMatrix<f64>],
    priors: &Priors,
    decoder: &DecoderSpec,
) -> Result<JointTerms> {
    let d = check_latents(network, z)?;
    let m = priors.mean(d);
    let var = [priors.s * priors.s];
    let mut prior = 0.0;
    for i in 0..network.n() {
        prior += log_gaussian_density(&row(&z[0], i), &m, &var)?;
    }
    let mut transition = 0.0;
    for t in 1..z.len() {
        for i in 0..network.n() {
            transition += transition_log_density(&row(&z[t], i), &z[t - 1], network.snapshot(t - 1), i, priors.s1, priors.s4)?;
        }
    }
    Ok(JointTerms {
        edge: edge_terms(network, z, decoder)?,
        transition,
        prior,
        discrete: 0.0,
    })
}

/// Values of every membership- and split-dependent term at each setting of
/// the discrete latent it depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTerms {
    /// `n x K`: `ln pi_j + log N(z_i^(1) | mu_j, s1^2 I)`.
    pub membership: DMatrix<f64>,
    /// `(T-1) x n` split log-probabilities for `h = 1` and `h = 0`.
    pub split_on: DMatrix<f64>,
    pub split_off: DMatrix<f64>,
    /// `(T-1) x n` transition log-densities for `h = 1` (mean `alpha`) and
    /// `h = 0` (neighbor mean).
    pub transition_on: DMatrix<f64>,
    pub transition_off: DMatrix<f64>,
}

/// Tabulates [`DiscreteTerms`] for fixed continuous latents.
pub fn discrete_component_terms(
    network: &DynamicNetwork,
    z: &[DMatrix<f64>],
    alpha: &DMatrix<f64>,
    mu: &DMatrix<f64>,
    priors: &Priors,
) -> Result<DiscreteTerms> {
    let d = check_latents(network, z)?;
    let (n, t_len) = (network.n(), network.len());
    let pi = priors.weights();
    if mu.nrows() != pi.len() || mu.ncols() != d || alpha.nrows() != t_len - 1 || alpha.ncols() != d {
        return Err(Error::shape(
            "discrete_component_terms",
            format!("mu {:?}, alpha {:?} for K = {}, T = {t_len}, d = {d}", mu.shape(), alpha.shape(), pi.len()),
        ));
    }
    let var = [priors.s1 * priors.s1];
    let mut membership = DMatrix::zeros(n, pi.len());
    for i in 0..n {
        let zi = row(&z[0], i);
        for j in 0..pi.len() {
            membership[(i, j)] = log_weight(pi[j]) + log_gaussian_density(&zi, &row(mu, j), &var)?;
        }
    }
    let mut split_on = DMatrix::zeros(t_len - 1, n);
    let mut split_off = split_on.clone();
    let mut transition_on = split_on.clone();
    let mut transition_off = split_on.clone();
    for r in 0..t_len - 1 {
        let a = row(alpha, r);
        for i in 0..n {
            let prev = row(&z[r], i);
            let (on, off) = tanh_kernel_log_probs(sqdist(&prev, &a) / (priors.s3 * priors.s3));
            split_on[(r, i)] = on;
            split_off[(r, i)] = off;
            let cur = row(&z[r + 1], i);
            transition_on[(r, i)] = log_gaussian_density(&cur, &a, &var)?;
            transition_off[(r, i)] = transition_log_density(&cur, &z[r], network.snapshot(r), i, priors.s1, priors.s4)?;
        }
    }
    Ok(DiscreteTerms {
        membership,
        split_on,
        split_off,
        transition_on,
        transition_off,
    })
}

fn check_soft(c_hat: &DMatrix<f64>, h_hat: &DMatrix<f64>, terms: &DiscreteTerms) -> Result<()> {
    if c_hat.shape() != terms.membership.shape() || h_hat.shape() != terms.split_on.shape() {
        return Err(Error::shape(
            "expected_discrete_terms",
            format!("c_hat {:?}, h_hat {:?}", c_hat.shape(), h_hat.shape()),
        ));
    }
    if h_hat.iter().any(|h| !(0.0..=1.0).contains(h)) {
        return Err(Error::param("h_hat", "entries must lie in [0, 1]"));
    }
    for i in 0..c_hat.nrows() {
        let r = c_hat.row(i);
        if r.iter().any(|c| !(*c >= 0.0)) || (r.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::param("c_hat", format!("row {i} is not a distribution")));
        }
    }
    Ok(())
}

/// `(membership + split, transition)` parts of the expectation.
fn expected_parts(c_hat: &DMatrix<f64>, h_hat: &DMatrix<f64>, terms: &DiscreteTerms) -> Result<(f64, f64)> {
    check_soft(c_hat, h_hat, terms)?;
    let mut discrete = c_hat.component_mul(&terms.membership).sum();
    let mut transition = 0.0;
    for (idx, &h) in h_hat.iter().enumerate() {
        discrete += h * terms.split_on[idx] + (1.0 - h) * terms.split_off[idx];
        transition += h * terms.transition_on[idx] + (1.0 - h) * terms.transition_off[idx];
    }
    Ok((discrete, transition))
}

/// Expectation of all membership- and split-dependent terms under
/// independent categorical `c_hat` rows and Bernoulli `h_hat` entries.
pub fn expected_discrete_terms(c_hat: &DMatrix<f64>, h_hat: &DMatrix<f64>, terms: &DiscreteTerms) -> Result<f64> {
    let (a, b) = expected_parts(c_hat, h_hat, terms)?;
    Ok(a + b)
}

/// Latents of the full model. `c` and `h` may be one-hot/binary or soft.
#[derive(Debug, Clone, Copy)]
pub struct ElsmLatents<'a> {
    pub z: &'a [DMatrix<f64>],
    /// `n x K`
    pub c: &'a DMatrix<f64>,
    /// `(T-1) x n`
    pub h: &'a DMatrix<f64>,
    /// `(T-1) x d`
    pub alpha: &'a DMatrix<f64>,
    /// `K x d`
    pub mu: &'a DMatrix<f64>,
}

/// Joint log-likelihood of the full model; soft `c`/`h` give the expectation
/// over the discrete latents.
pub fn joint_log_likelihood_elsm(
    network: &DynamicNetwork,
    latents: &ElsmLatents<'_>,
    priors: &Priors,
    decoder: &DecoderSpec,
) -> Result<JointTerms> {
    let d = check_latents(network, latents.z)?;
    let terms = discrete_component_terms(network, latents.z, latents.alpha, latents.mu, priors)?;
    let (discrete, transition) = expected_parts(latents.c, latents.h, &terms)?;
    let m = priors.mean(d);
    let var = [priors.s * priors.s];
    let mut prior = 0.0;
    for cm in [latents.mu, latents.alpha] {
        for j in 0..cm.nrows() {
            prior += log_gaussian_density(&row(cm, j), &m, &var)?;
        }
    }
    Ok(JointTerms {
        edge: edge_terms(network, latents.z, decoder)?,
        transition,
        prior,
        discrete,
    })
}

fn gaussian_entropy(log_var: &DMatrix<f64>) -> f64 {
    log_var.iter().map(|lv| 0.5 * (LN_2PI + 1.0 + lv)).sum()
}

fn xlnx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

pub(crate) fn categorical_entropy(c: &DMatrix<f64>) -> f64 {
    -c.iter().map(|&p| xlnx(p)).sum::<f64>()
}

/// Closed-form entropy of the variational distribution.
pub fn entropies(state: &VariationalState) -> f64 {
    let mut h: f64 = state.log_var.iter().map(gaussian_entropy).sum();
    if let Some(e) = &state.elsm {
        h += gaussian_entropy(&e.alpha_log_var) + gaussian_entropy(&e.mu_log_var);
        h -= e.h_hat.iter().map(|&p| xlnx(p) + xlnx(1.0 - p)).sum::<f64>();
        h += categorical_entropy(&e.c_hat);
    }
    h
}

/// Monte Carlo ELBO, one sample per entry of `noise`. For the full model the
/// responsibilities are recomputed from each sampled first layer.
pub fn elbo(
    network: &DynamicNetwork,
    state: &VariationalState,
    noise: &[Noise],
    priors: &Priors,
    decoder: &DecoderSpec,
) -> Result<ElboReport> {
    if noise.is_empty() {
        return Err(Error::param("noise", "need at least one sample"));
    }
    let mut acc = JointTerms::default();
    let mut cat_entropy = 0.0;
    for eps in noise {
        if eps.z.len() != state.len() {
            return Err(Error::shape("elbo", "noise layers differ from state"));
        }
        let z: Vec<DMatrix<f64>> = state
            .nu
            .iter()
            .zip(&state.log_var)
            .zip(&eps.z)
            .map(|((m, lv), e)| encoder::reparameterize(m, lv, e))
            .collect::<Result<_>>()?;
        let j = match &state.elsm {
            None => joint_log_likelihood_ielsm(network, &z, priors, decoder)?,
            Some(e) => {
                let (ea, em) = eps
                    .alpha
                    .as_ref()
                    .zip(eps.mu.as_ref())
                    .ok_or_else(|| Error::shape("elbo", "full model needs center noise"))?;
                let alpha = encoder::reparameterize(&e.alpha_mean, &e.alpha_log_var, ea)?;
                let mu = encoder::reparameterize(&e.mu_mean, &e.mu_log_var, em)?;
                let c = gmm_responsibilities(&z[0], &e.mu_mean, &priors.weights(), priors.s1)?;
                cat_entropy += categorical_entropy(&c);
                let latents = ElsmLatents {
                    z: &z,
                    c: &c,
                    h: &e.h_hat,
                    alpha: &alpha,
                    mu: &mu,
                };
                joint_log_likelihood_elsm(network, &latents, priors, decoder)?
            }
        };
        acc.edge += j.edge;
        acc.transition += j.transition;
        acc.prior += j.prior;
        acc.discrete += j.discrete;
    }
    let s = noise.len() as f64;
    let mean = JointTerms {
        edge: acc.edge / s,
        transition: acc.transition / s,
        prior: acc.prior / s,
        discrete: acc.discrete / s,
    };
    let mut entropy = entropies(state);
    if let Some(e) = &state.elsm {
        entropy += cat_entropy / s - categorical_entropy(&e.c_hat);
    }
    Ok(ElboReport::from_parts(mean, entropy))
}

/// Trainable decoder scalars, each a rank-0 leaf when active.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<P> {
    pub w_rho: Option<P>,
    pub b_rho: Option<P>,
    /// `ln s2`
    pub log_s2: Option<P>,
    /// `ln s4`
    pub log_s4: Option<P>,
}

impl<P> DecoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> DecoderParams<Q> {
        DecoderParams {
            w_rho: self.w_rho.as_ref().map(&mut *f),
            b_rho: self.b_rho.as_ref().map(&mut *f),
            log_s2: self.log_s2.as_ref().map(&mut *f),
            log_s4: self.log_s4.as_ref().map(&mut *f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        for p in [&self.w_rho, &self.b_rho, &self.log_s2, &self.log_s4].into_iter().flatten() {
            f(p);
        }
    }
}

impl DecoderParams<Tensor> {
    pub fn init(spec: &DecoderSpec, priors: &Priors) -> Self {
        let learned = spec.kind != DecoderKind::BernoulliKernel;
        DecoderParams {
            w_rho: learned.then(|| Tensor::scalar(spec.w_rho)),
            b_rho: learned.then(|| Tensor::scalar(spec.b_rho)),
            log_s2: spec.learn_s2.then(|| Tensor::scalar(spec.s2.ln())),
            log_s4: spec.learn_s4.then(|| Tensor::scalar(priors.s4.ln())),
        }
    }

    /// Decoder and priors with the fitted scalars written back.
    pub fn resolve(&self, spec: &DecoderSpec, priors: &Priors) -> (DecoderSpec, Priors) {
        let get = |p: &Option<Tensor>| p.as_ref().map(|t| t.data()[0]);
        let mut spec = spec.clone();
        let mut priors = priors.clone();
        if let Some(w) = get(&self.w_rho) {
            spec.w_rho = w;
        }
        if let Some(b) = get(&self.b_rho) {
            spec.b_rho = b;
        }
        if let Some(l) = get(&self.log_s2) {
            spec.s2 = l.exp();
        }
        if let Some(l) = get(&self.log_s4) {
            priors.s4 = l.exp();
        }
        (spec, priors)
    }
}

/// Every trainable tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: EncoderParams<P>,
    pub decoder: DecoderParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            encoder: self.encoder.map(f),
            decoder: self.decoder.map(f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        self.encoder.for_each(f);
        self.decoder.for_each(f);
    }

    pub fn len(&self) -> usize {
        let mut count = 0;
        self.for_each(&mut |_| count += 1);
        count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<P: Clone> ModelParams<P> {
    pub fn to_vec(&self) -> Vec<P> {
        let mut out = Vec::new();
        self.for_each(&mut |p| out.push(p.clone()));
        out
    }

    /// Same layout with leaves taken in order from `values`.
    pub fn with_values<Q: Clone>(&self, values: &[Q]) -> Result<ModelParams<Q>> {
        if values.len() != self.len() {
            return Err(Error::shape("parameters", format!("{} values for {} leaves", values.len(), self.len())));
        }
        let mut it = values.iter();
        Ok(self.map(&mut |_| it.next().expect("length checked").clone()))
    }
}

/// Network-derived constants reused every epoch.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub n: usize,
    pub t: usize,
    pub inputs: Tensor,
    pub adjacency: Vec<Tensor>,
    /// Lower triangle of `A` (Bernoulli and Poisson).
    pub pos: Vec<Tensor>,
    /// Lower triangle of `1 - A` (Bernoulli) or of ones (Poisson).
    pub neg: Vec<Tensor>,
    /// Sum of `ln(a!)` over scored entries.
    pub log_factorial: f64,
}

impl Prepared {
    pub fn new(network: &DynamicNetwork, features: Option<&DMatrix<f64>>, decoder: &DecoderSpec) -> Result<Self> {
        if network.is_empty() {
            return Err(Error::InvalidNetwork("no snapshots".into()));
        }
        if network.weighted() && !decoder.is_poisson() {
            return Err(Error::param(
                "decoder",
                "weighted networks need the poisson-learned decoder (or binarize the input)",
            ));
        }
        let n = network.n();
        let mut pos = Vec::with_capacity(network.len());
        let mut neg = Vec::with_capacity(network.len());
        let mut log_factorial = 0.0;
        for a in network.snapshots() {
            let mut p = Tensor::zeros(&[n, n]);
            let mut q = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..i {
                    let v = a[(i, j)];
                    p.data_mut()[i * n + j] = v;
                    q.data_mut()[i * n + j] = if decoder.is_poisson() { 1.0 } else { 1.0 - v };
                    if decoder.is_poisson() {
                        log_factorial += lgamma(v + 1.0);
                    }
                }
            }
            pos.push(p);
            neg.push(q);
        }
        Ok(Prepared {
            n,
            t: network.len(),
            inputs: encoder::encoder_inputs(network, features)?,
            adjacency: network.snapshots().iter().map(Tensor::from_dmatrix).collect(),
            pos,
            neg,
            log_factorial,
        })
    }
}

/// Graph nodes of one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TapeElbo {
    pub elbo: Var,
    pub joint: Var,
    pub entropy: Var,
    pub edge: Var,
    pub transition: Var,
    pub prior: Var,
    pub discrete: Var,
}

impl TapeElbo {
    pub fn report(&self, g: &Graph) -> ElboReport {
        let v = |x: Var| g.value(x).data()[0];
        ElboReport {
            elbo: v(self.elbo),
            joint: v(self.joint),
            entropy: v(self.entropy),
            edge: v(self.edge),
            transition: v(self.transition),
            prior: v(self.prior),
            discrete: v(self.discrete),
        }
    }
}

/// Encoder outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TapeState {
    pub nu: Var,
    pub log_var: Var,
    pub elsm: Option<encoder::ElsmVars>,
}

pub(crate) fn encode_on_tape(g: &mut Graph, data: &Prepared, params: &ModelParams<Var>, d: usize) -> Result<TapeState> {
    let x = g.constant(data.inputs.clone());
    let hidden = encoder::bilstm(g, x, data.n, &params.encoder)?;
    let (mean, log_var) = encoder::heads(g, hidden, &params.encoder)?;
    match &params.encoder.elsm {
        None => Ok(TapeState {
            nu: mean,
            log_var,
            elsm: None,
        }),
        Some(h) => {
            let (nu, ev) = encoder::elsm_heads(g, hidden, mean, data.n, d, h)?;
            Ok(TapeState {
                nu,
                log_var,
                elsm: Some(ev),
            })
        }
    }
}

fn add_all(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `sum log N(x | mean, var)` over all entries of `x`.
fn gaussian_sum(g: &mut Graph, x: Var, mean: Var, var: f64) -> Result<Var> {
    let numel = g.value(x).numel() as f64;
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.affine(s, -1.0 / (2.0 * var), -0.5 * numel * (LN_2PI + var.ln())))
}

fn gaussian_entropy_tape(g: &mut Graph, log_var: Var) -> Var {
    let numel = g.value(log_var).numel() as f64;
    let s = g.sum(log_var);
    g.affine(s, 0.5, 0.5 * numel * (LN_2PI + 1.0))
}

/// `1 / scale^2`, either fixed or from a learned log-scale.
fn inv_sq(g: &mut Graph, fixed: f64, learned: Option<Var>) -> Var {
    match learned {
        Some(l) => {
            let t = g.scale(l, -2.0);
            g.exp(t)
        }
        None => g.scalar(1.0 / (fixed * fixed)),
    }
}

fn edge_tape(g: &mut Graph, data: &Prepared, z_t: &[Var], decoder: &DecoderSpec, params: &DecoderParams<Var>) -> Result<Var> {
    let mut parts = Vec::with_capacity(data.t);
    let inv_s2 = inv_sq(g, decoder.s2, params.log_s2);
    for t in 0..data.t {
        let d2 = g.sqdist(z_t[t], z_t[t])?;
        let pos = g.constant(data.pos[t].clone());
        let neg = g.constant(data.neg[t].clone());
        let ll = match decoder.kind {
            DecoderKind::BernoulliKernel => {
                let x = g.mul(d2, inv_s2)?;
                let (lp, lq) = tanh_kernel_log_probs_tape(g, x)?;
                bernoulli_tape(g, lp, lq, pos, neg)?
            }
            DecoderKind::BernoulliLearned => {
                let x = learned_logit(g, d2, params)?;
                let lp = g.log_sigmoid(x);
                let lp = clamp_log_p_tape(g, lp);
                let nx = g.neg(x);
                let lq = g.log_sigmoid(nx);
                let lq = clamp_log_p_tape(g, lq);
                bernoulli_tape(g, lp, lq, pos, neg)?
            }
            DecoderKind::PoissonLearned => {
                let x = learned_logit(g, d2, params)?;
                let lr = g.clamp(x, RATE_MIN.ln(), f64::INFINITY);
                let rate = g.exp(lr);
                let a = g.mul(pos, lr)?;
                let b = g.mul(neg, rate)?;
                let diff = g.sub(a, b)?;
                g.sum(diff)
            }
        };
        parts.push(ll);
    }
    let total = add_all(g, &parts)?;
    Ok(g.offset(total, -data.log_factorial))
}

fn learned_logit(g: &mut Graph, d2: Var, params: &DecoderParams<Var>) -> Result<Var> {
    let (w, b) = params
        .w_rho
        .zip(params.b_rho)
        .ok_or_else(|| Error::param("decoder", "learned decoder needs w_rho and b_rho"))?;
    let w2 = g.square(w);
    let x = g.mul(d2, w2)?;
    let x = g.neg(x);
    g.add(x, b)
}

fn clamp_log_p_tape(g: &mut Graph, lp: Var) -> Var {
    g.clamp(lp, P_MIN.ln(), (-P_MIN).ln_1p())
}

/// Tape version of [`tanh_kernel_log_probs`].
fn tanh_kernel_log_probs_tape(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let t = g.scale(x, -2.0);
    let on = g.log_sigmoid(t);
    let on = g.offset(on, std::f64::consts::LN_2);
    let on = clamp_log_p_tape(g, on);
    let th = g.tanh(x);
    let th = g.clamp(th, P_MIN, 1.0 - P_MIN);
    Ok((on, g.log(th)?))
}

fn bernoulli_tape(g: &mut Graph, lp: Var, lq: Var, pos: Var, neg: Var) -> Result<Var> {
    let a = g.mul(pos, lp)?;
    let b = g.mul(neg, lq)?;
    let s = g.add(a, b)?;
    Ok(g.sum(s))
}

/// Neighbor means of every row of `z_prev` given adjacency `a_prev`.
fn neighbor_mean_tape(g: &mut Graph, z_prev: Var, a_prev: &Tensor, inv_s4: Var) -> Result<Var> {
    let d2 = g.sqdist(z_prev, z_prev)?;
    let x = g.mul(d2, inv_s4)?;
    let x = g.neg(x);
    let l = g.exp(x);
    let a = g.constant(a_prev.clone());
    let w = g.mul(a, l)?;
    let pulled = g.matmul(w, z_prev)?;
    let num = g.add(z_prev, pulled)?;
    let den = g.sum_axis(w, 1)?;
    let den = g.offset(den, 1.0);
    g.div(num, den)
}

fn prior_mean_row(g: &mut Graph, priors: &Priors, d: usize) -> Var {
    g.constant(Tensor::row(priors.mean(d)))
}

fn noise_tensor(ms: &[DMatrix<f64>]) -> Result<Tensor> {
    let parts: Vec<Tensor> = ms.iter().map(Tensor::from_dmatrix).collect();
    let cols = parts.first().map_or(0, |t| t.shape()[1]);
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    Tensor::matrix(rows, cols, parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Records the ELBO averaged over `noise` samples.
pub(crate) fn elbo_on_tape(
    g: &mut Graph,
    data: &Prepared,
    params: &ModelParams<Var>,
    noise: &[Noise],
    priors: &Priors,
    decoder: &DecoderSpec,
) -> Result<(TapeElbo, TapeState)> {
    if noise.is_empty() {
        return Err(Error::param("mc_samples", "need at least one sample"));
    }
    let d = g.shape(params.encoder.mean.out.w)[1];
    let (n, t_len) = (data.n, data.t);
    let state = encode_on_tape(g, data, params, d)?;
    let s1sq = priors.s1 * priors.s1;
    let inv_s4 = inv_sq(g, priors.s4, params.decoder.log_s4);
    let m_row = prior_mean_row(g, priors, d);
    let pi = priors.weights();
    let log_pi = g.constant(Tensor::row(pi.iter().map(|&p| log_weight(p)).collect()));

    let mut sums: [Vec<Var>; 4] = Default::default();
    let mut cat_entropy = Vec::new();
    for eps in noise {
        let ez = g.constant(noise_tensor(&eps.z)?);
        let z = encoder::reparameterize_var(g, state.nu, state.log_var, ez)?;
        let layers: Vec<Var> = (0..t_len).map(|t| g.slice(z, 0, t * n, n)).collect::<Result<_>>()?;
        sums[0].push(edge_tape(g, data, &layers, decoder, &params.decoder)?);

        let mut means = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 1..t_len {
            means.push(neighbor_mean_tape(g, layers[t - 1], &data.adjacency[t - 1], inv_s4)?);
        }

        match &state.elsm {
            None => {
                let first = gaussian_sum(g, layers[0], m_row, priors.s * priors.s)?;
                sums[2].push(first);
                let mut tr = vec![g.scalar(0.0)];
                for t in 1..t_len {
                    tr.push(gaussian_sum(g, layers[t], means[t - 1], s1sq)?);
                }
                sums[1].push(add_all(g, &tr)?);
            }
            Some(ev) => {
                let (ea, em) = eps
                    .alpha
                    .as_ref()
                    .zip(eps.mu.as_ref())
                    .ok_or_else(|| Error::shape("elbo", "full model needs center noise"))?;
                let ea = g.constant(Tensor::from_dmatrix(ea));
                let em = g.constant(Tensor::from_dmatrix(em));
                let alpha = encoder::reparameterize_var(g, ev.alpha_mean, ev.alpha_log_var, ea)?;
                let mu = encoder::reparameterize_var(g, ev.mu_mean, ev.mu_log_var, em)?;
                let pa = gaussian_sum(g, alpha, m_row, priors.s * priors.s)?;
                let pm = gaussian_sum(g, mu, m_row, priors.s * priors.s)?;
                sums[2].push(g.add(pa, pm)?);

                // responsibilities from the sampled first layer and center means
                let dm = g.sqdist(layers[0], ev.mu_mean)?;
                let dm = g.scale(dm, -1.0 / (2.0 * s1sq));
                let logits = g.add(dm, log_pi)?;
                let log_c = g.log_softmax_rows(logits)?;
                let c = g.exp(log_c);
                let clc = g.mul(c, log_c)?;
                let ent = g.sum(clc);
                cat_entropy.push(g.neg(ent));

                let ds = g.sqdist(layers[0], mu)?;
                let ds = g.scale(ds, -1.0 / (2.0 * s1sq));
                let ds = g.offset(ds, -0.5 * d as f64 * (LN_2PI + s1sq.ln()));
                let comp = g.add(ds, log_pi)?;
                let weighted = g.mul(c, comp)?;
                let mut disc = vec![g.sum(weighted)];

                if t_len > 1 {
                    let rows = (t_len - 1) * n;
                    let mut d_alpha = Vec::with_capacity(t_len - 1);
                    let mut alpha_rep = Vec::with_capacity(t_len - 1);
                    for t in 1..t_len {
                        let a_row = g.slice(alpha, 0, t - 1, 1)?;
                        d_alpha.push(g.sqdist(layers[t - 1], a_row)?);
                        alpha_rep.push(g.broadcast_to(a_row, &[n, d])?);
                    }
                    let d_alpha = g.concat(&d_alpha, 0)?;
                    let x = g.scale(d_alpha, 1.0 / (priors.s3 * priors.s3));
                    let (lg, lng) = tanh_kernel_log_probs_tape(g, x)?;
                    let h = ev.h_hat;
                    let nh = g.one_minus(h);
                    let on = g.mul(h, lg)?;
                    let off = g.mul(nh, lng)?;
                    let split = g.add(on, off)?;
                    disc.push(g.sum(split));

                    let tail = g.slice(z, 0, n, rows)?;
                    let alpha_rep = g.concat(&alpha_rep, 0)?;
                    let nb = g.concat(&means, 0)?;
                    let da = g.sub(tail, alpha_rep)?;
                    let da = g.square(da);
                    let da = g.sum_axis(da, 1)?;
                    let dn = g.sub(tail, nb)?;
                    let dn = g.square(dn);
                    let dn = g.sum_axis(dn, 1)?;
                    let on = g.mul(h, da)?;
                    let off = g.mul(nh, dn)?;
                    let sq = g.add(on, off)?;
                    let sq = g.sum(sq);
                    let tr = g.affine(sq, -1.0 / (2.0 * s1sq), -0.5 * (rows * d) as f64 * (LN_2PI + s1sq.ln()));
                    sums[1].push(tr);
                } else {
                    let zero = g.scalar(0.0);
                    sums[1].push(zero);
                }
                sums[3].push(add_all(g, &disc)?);
            }
        }
    }
    let inv = 1.0 / noise.len() as f64;
    let avg = |g: &mut Graph, parts: &[Var]| -> Result<Var> {
        if parts.is_empty() {
            return Ok(g.scalar(0.0));
        }
        let s = add_all(g, parts)?;
        Ok(g.scale(s, inv))
    };
    let edge = avg(g, &sums[0])?;
    let transition = avg(g, &sums[1])?;
    let prior = avg(g, &sums[2])?;
    let discrete = avg(g, &sums[3])?;
    let joint = add_all(g, &[edge, transition, prior, discrete])?;

    let mut ent = vec![gaussian_entropy_tape(g, state.log_var)];
    if let Some(ev) = &state.elsm {
        ent.push(gaussian_entropy_tape(g, ev.alpha_log_var));
        ent.push(gaussian_entropy_tape(g, ev.mu_log_var));
        if t_len > 1 {
            // -[h ln h + (1 - h) ln(1 - h)] from the logits
            let l1 = g.log_sigmoid(ev.split_logit);
            let neg_logit = g.neg(ev.split_logit);
            let l0 = g.log_sigmoid(neg_logit);
            let nh = g.one_minus(ev.h_hat);
            let a = g.mul(ev.h_hat, l1)?;
            let b = g.mul(nh, l0)?;
            let s = g.add(a, b)?;
            let s = g.sum(s);
            ent.push(g.neg(s));
        }
        ent.push(avg(g, &cat_entropy)?);
    }
    let entropy = add_all(g, &ent)?;
    let elbo = g.add(joint, entropy)?;
    Ok((
        TapeElbo {
            elbo,
            joint,
            entropy,
            edge,
            transition,
            prior,
            discrete,
        },
        state,
    ))
}

/// The ELBO of one network as a differentiable function of the model
/// parameters.
#[derive(Debug, Clone)]
pub struct ElboProblem {
    data: Prepared,
    priors: Priors,
    decoder: DecoderSpec,
}

impl ElboProblem {
    pub fn new(
        network: &DynamicNetwork,
        features: Option<&DMatrix<f64>>,
        priors: &Priors,
        decoder: &DecoderSpec,
    ) -> Result<Self> {
        Ok(ElboProblem {
            data: Prepared::new(network, features, decoder)?,
            priors: priors.clone(),
            decoder: decoder.clone(),
        })
    }

    /// Records the ELBO averaged over `noise` on `g`.
    pub fn elbo(&self, g: &mut Graph, params: &ModelParams<Var>, noise: &[Noise]) -> Result<Var> {
        Ok(elbo_on_tape(g, &self.data, params, noise, &self.priors, &self.decoder)?.0.elbo)
    }

    /// Finite-difference check of the ELBO gradient at `params` with the
    /// noise held fixed.
    pub fn check_gradient(
        &self,
        params: &ModelParams<Tensor>,
        noise: &[Noise],
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let flat = params.to_vec();
        grad_check(
            |g, vars| {
                let p = params.with_values(vars)?;
                self.elbo(g, &p, noise)
            },
            &flat,
            opts,
        )
    }
}

/// Variational state of `params` on `network`. The responsibilities are
/// evaluated at the first-layer sample drawn with `noise` (the means when
/// `noise` is `None`).
pub fn encode_state(
    network: &DynamicNetwork,
    features: Option<&DMatrix<f64>>,
    params: &ModelParams<Tensor>,
    priors: &Priors,
    decoder: &DecoderSpec,
    noise: Option<&Noise>,
) -> Result<VariationalState> {
    let data = Prepared::new(network, features, decoder)?;
    let mut g = Graph::new();
    g.set_grad_enabled(false);
    let vars = params.map(&mut |p| g.constant(p.clone()));
    let d = params.encoder.d();
    let st = encode_on_tape(&mut g, &data, &vars, d)?;
    let split = |v: Var| encoder::split_rows(g.value(v), data.n);
    let nu = split(st.nu)?;
    let log_var = split(st.log_var)?;
    let elsm = match st.elsm {
        None => None,
        Some(ev) => {
            let mat = |v: Var| g.value(v).to_dmatrix();
            let mu_mean = mat(ev.mu_mean)?;
            let z1 = match noise {
                Some(eps) => encoder::reparameterize(&nu[0], &log_var[0], &eps.z[0])?,
                None => nu[0].clone(),
            };
            let c_hat = gmm_responsibilities(&z1, &mu_mean, &priors.weights(), priors.s1)?;
            let h = g.value(ev.h_hat);
            let h_hat = DMatrix::from_row_slice(data.t - 1, data.n, h.data());
            Some(ElsmState {
                pre_split: split(ev.pre_split)?,
                h_hat,
                c_hat,
                alpha_mean: mat(ev.alpha_mean)?,
                alpha_log_var: mat(ev.alpha_log_var)?,
                mu_mean,
                mu_log_var: mat(ev.mu_log_var)?,
            })
        }
    };
    Ok(VariationalState { nu, log_var, elsm })
}
