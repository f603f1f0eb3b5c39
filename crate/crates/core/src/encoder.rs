//! Amortized inference network.
//!
//! A bidirectional LSTM reads every node's adjacency row snapshot by
//! snapshot. Its concatenated hidden states `g_i^(t)` feed shared head
//! networks producing the variational mean and log-variance of each latent
//! position, and for the full model the community center, split and
//! responsibility parameters.
//!
//! Parameter containers are generic over the leaf type so that the same
//! layout holds plain tensors (for storage and optimisation) and graph
//! handles (while differentiating).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::DynamicNetwork;

/// Lower bound and upper bound applied to every log-variance output.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// LSTM hidden size per direction.
    pub hidden: usize,
    /// Width of the single hidden layer of each head network.
    pub head_hidden: usize,
    /// Per-node width of the reducers ahead of the center networks.
    pub reducer_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            head_hidden: 64,
            reducer_dim: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("head_hidden", self.head_hidden),
            ("reducer_dim", self.reducer_dim),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Width of `g_i^(t)`.
    pub fn m_out(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    /// `in x out`
    pub w: P,
    /// `1 x out`
    pub b: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<P> {
    /// `in x 4h`, gate blocks ordered input, forget, candidate, output.
    pub w_ih: P,
    /// `h x 4h`
    pub w_hh: P,
    /// `1 x 4h`
    pub b: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<P> {
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}

/// Extra heads of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ElsmHeads<P> {
    /// Per-node reducer `P` feeding the new-center network.
    pub alpha_reduce: Linear<P>,
    /// Concatenated reduced states to `(m_alpha, log s_alpha^2)`.
    pub alpha_out: Linear<P>,
    /// Per-node reducer `R` feeding the initial-center network.
    pub mu_reduce: Linear<P>,
    /// Concatenated reduced states to `K` pairs `(m_mu, log s_mu^2)`.
    pub mu_out: Linear<P>,
    /// `g_i^(t)` to the split logit of `h_i^(t+1)`.
    pub split: Linear<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub forward: Lstm<P>,
    pub backward: Lstm<P>,
    /// Mean head `M`.
    pub mean: Mlp<P>,
    /// Log-variance head `V`.
    pub log_var: Mlp<P>,
    pub elsm: Option<ElsmHeads<P>>,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        f(&self.w);
        f(&self.b);
    }
}

impl<P> Lstm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Lstm<Q> {
        Lstm {
            w_ih: f(&self.w_ih),
            w_hh: f(&self.w_hh),
            b: f(&self.b),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        f(&self.w_ih);
        f(&self.w_hh);
        f(&self.b);
    }
}

impl<P> Mlp<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Mlp<Q> {
        Mlp {
            hidden: self.hidden.map(f),
            out: self.out.map(f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        self.hidden.for_each(f);
        self.out.for_each(f);
    }
}

impl<P> ElsmHeads<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ElsmHeads<Q> {
        ElsmHeads {
            alpha_reduce: self.alpha_reduce.map(f),
            alpha_out: self.alpha_out.map(f),
            mu_reduce: self.mu_reduce.map(f),
            mu_out: self.mu_out.map(f),
            split: self.split.map(f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        self.alpha_reduce.for_each(f);
        self.alpha_out.for_each(f);
        self.mu_reduce.for_each(f);
        self.mu_out.for_each(f);
        self.split.for_each(f);
    }
}

impl<P> EncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            forward: self.forward.map(f),
            backward: self.backward.map(f),
            mean: self.mean.map(f),
            log_var: self.log_var.map(f),
            elsm: self.elsm.as_ref().map(|h| h.map(f)),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&P)) {
        self.forward.for_each(f);
        self.backward.for_each(f);
        self.mean.for_each(f);
        self.log_var.for_each(f);
        if let Some(h) = &self.elsm {
            h.for_each(f);
        }
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

impl Linear<Tensor> {
    /// Fan-in scaled uniform initialisation.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            w: uniform(rng, input, output, bound),
            b: uniform(rng, 1, output, bound),
        }
    }
}

impl Lstm<Tensor> {
    /// Uniform weights in ±1/sqrt(hidden); forget-gate bias set to 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = Tensor::zeros(&[1, 4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Lstm {
            w_ih: uniform(rng, input, 4 * hidden, bound),
            w_hh: uniform(rng, hidden, 4 * hidden, bound),
            b,
        }
    }
}

impl Mlp<Tensor> {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            hidden: Linear::init(input, hidden, rng),
            out: Linear::init(hidden, output, rng),
        }
    }
}

impl EncoderParams<Tensor> {
    /// Fresh parameters for `n` nodes with `input` features per row.
    /// `k` enables the full-model heads with that many initial centers.
    pub fn init(
        n: usize,
        input: usize,
        d: usize,
        k: Option<usize>,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n == 0 || input == 0 || d == 0 {
            return Err(Error::param("encoder", "n, input width and d must be positive"));
        }
        if k == Some(0) {
            return Err(Error::param("K", "must be positive"));
        }
        let h = cfg.hidden;
        let m = cfg.m_out();
        let r = cfg.reducer_dim;
        let forward = Lstm::init(input, h, rng);
        let backward = Lstm::init(input, h, rng);
        let mean = Mlp::init(m, cfg.head_hidden, d, rng);
        let log_var = Mlp::init(m, cfg.head_hidden, d, rng);
        let elsm = k.map(|k| ElsmHeads {
            alpha_reduce: Linear::init(m, r, rng),
            alpha_out: Linear::init(n * r, 2 * d, rng),
            mu_reduce: Linear::init(m, r, rng),
            mu_out: Linear::init(n * r, 2 * k * d, rng),
            split: Linear::init(m, 1, rng),
        });
        Ok(EncoderParams {
            forward,
            backward,
            mean,
            log_var,
            elsm,
        })
    }

    /// Width of the rows read by the LSTM.
    pub fn input_dim(&self) -> usize {
        self.forward.w_ih.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.forward.w_hh.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.mean.out.w.shape()[1]
    }

    pub fn num_centers(&self) -> Option<usize> {
        self.elsm
            .as_ref()
            .map(|h| h.mu_out.w.shape()[1] / (2 * self.d()))
    }
}

/// One LSTM step on a single input vector.
pub fn lstm_cell_step(
    x: &DVector<f64>,
    state: (&DVector<f64>, &DVector<f64>),
    params: &Lstm<Tensor>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (h_prev, c_prev) = state;
    let w_ih = params.w_ih.to_dmatrix()?;
    let w_hh = params.w_hh.to_dmatrix()?;
    let hs = w_hh.nrows();
    if w_ih.nrows() != x.len() || h_prev.len() != hs || c_prev.len() != hs || w_hh.ncols() != 4 * hs {
        return Err(Error::shape(
            "lstm_cell_step",
            format!("input {} / state {} vs weights {:?}", x.len(), h_prev.len(), params.w_ih.shape()),
        ));
    }
    let z = w_ih.transpose() * x + w_hh.transpose() * h_prev + DVector::from_column_slice(params.b.data());
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = DVector::zeros(hs);
    let mut c = DVector::zeros(hs);
    for q in 0..hs {
        let i = sig(z[q]);
        let f = sig(z[hs + q]);
        let g = z[2 * hs + q].tanh();
        let o = sig(z[3 * hs + q]);
        c[q] = f * c_prev[q] + i * g;
        h[q] = o * c[q].tanh();
    }
    Ok((h, c))
}

/// LSTM input rows for every snapshot, stacked as a `T n x input` tensor.
///
/// Row `i` of block `t` is node `i`'s adjacency row at `t` (as `ln(1 + a)`
/// for weighted networks), followed by its optional feature row.
pub fn encoder_inputs(network: &DynamicNetwork, features: Option<&DMatrix<f64>>) -> Result<Tensor> {
    let n = network.n();
    let f = features.map_or(0, |m| m.ncols());
    if let Some(m) = features {
        if m.nrows() != n {
            return Err(Error::shape("features", format!("{} rows for {n} nodes", m.nrows())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node features".into()));
        }
    }
    let width = n + f;
    let mut data = Vec::with_capacity(network.len() * n * width);
    for a in network.snapshots() {
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                data.push(if network.weighted() { v.ln_1p() } else { v });
            }
            if let Some(m) = features {
                data.extend(m.row(i).iter());
            }
        }
    }
    Tensor::matrix(network.len() * n, width, data)
}

fn linear(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, l.w)?;
    g.add(y, l.b)
}

fn mlp(g: &mut Graph, x: Var, m: &Mlp<Var>) -> Result<Var> {
    let h = linear(g, x, &m.hidden)?;
    let h = g.tanh(h);
    linear(g, h, &m.out)
}

fn lstm_sequence(g: &mut Graph, inputs: Var, t_len: usize, n: usize, l: &Lstm<Var>, reverse: bool) -> Result<Vec<Var>> {
    let hs = g.shape(l.w_hh)[0];
    let projected = g.matmul(inputs, l.w_ih)?;
    let projected = g.add(projected, l.b)?;
    let mut h = g.constant(Tensor::zeros(&[n, hs]));
    let mut c = g.constant(Tensor::zeros(&[n, hs]));
    let mut out = vec![h; t_len];
    let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    for t in order {
        let x = g.slice(projected, 0, t * n, n)?;
        let r = g.matmul(h, l.w_hh)?;
        let z = g.add(x, r)?;
        let zi = g.slice(z, 1, 0, hs)?;
        let zf = g.slice(z, 1, hs, hs)?;
        let zg = g.slice(z, 1, 2 * hs, hs)?;
        let zo = g.slice(z, 1, 3 * hs, hs)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional pass over `inputs` (`T n x input`), returning the stacked
/// hidden outputs `g` as a `T n x 2h` node.
pub fn bilstm(g: &mut Graph, inputs: Var, n: usize, params: &EncoderParams<Var>) -> Result<Var> {
    let rows = g.shape(inputs)[0];
    if n == 0 || rows % n != 0 || rows == 0 {
        return Err(Error::shape("bilstm", format!("{rows} input rows for {n} nodes")));
    }
    let t_len = rows / n;
    let fwd = lstm_sequence(g, inputs, t_len, n, &params.forward, false)?;
    let bwd = lstm_sequence(g, inputs, t_len, n, &params.backward, true)?;
    let per_t: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b], 1))
        .collect::<Result<_>>()?;
    g.concat(&per_t, 0)
}

/// Hidden outputs `g_i^(t)` of the bidirectional LSTM, one `n x m_out`
/// matrix per snapshot.
pub fn bilstm_forward(
    network: &DynamicNetwork,
    features: Option<&DMatrix<f64>>,
    params: &EncoderParams<Tensor>,
) -> Result<Vec<DMatrix<f64>>> {
    if network.is_empty() {
        return Err(Error::InvalidNetwork("no snapshots".into()));
    }
    let inputs = encoder_inputs(network, features)?;
    if inputs.shape()[1] != params.input_dim() {
        return Err(Error::shape(
            "bilstm_forward",
            format!("input width {} vs encoder {}", inputs.shape()[1], params.input_dim()),
        ));
    }
    let mut g = Graph::new();
    g.set_grad_enabled(false);
    let vars = params.map(&mut |p| g.constant(p.clone()));
    let x = g.constant(inputs);
    let out = bilstm(&mut g, x, network.n(), &vars)?;
    split_rows(g.value(out), network.n())
}

pub(crate) fn split_rows(t: &Tensor, n: usize) -> Result<Vec<DMatrix<f64>>> {
    let m = t.to_dmatrix()?;
    let blocks = m.nrows() / n.max(1);
    Ok((0..blocks).map(|b| m.rows(b * n, n).into_owned()).collect())
}

/// Mean and clamped log-variance heads applied to every row of `g`.
pub fn heads(g: &mut Graph, hidden: Var, params: &EncoderParams<Var>) -> Result<(Var, Var)> {
    let mean = mlp(g, hidden, &params.mean)?;
    let lv = mlp(g, hidden, &params.log_var)?;
    let lv = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok((mean, lv))
}

/// `nu + exp(log_var / 2) * eps`.
pub fn reparameterize_var(g: &mut Graph, nu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let noise = g.mul(sd, eps)?;
    g.add(nu, noise)
}

pub fn reparameterize(nu: &DMatrix<f64>, log_var: &DMatrix<f64>, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if nu.shape() != log_var.shape() || nu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?} / {:?} / {:?}", nu.shape(), log_var.shape(), eps.shape()),
        ));
    }
    Ok(nu.zip_zip_map(log_var, eps, |m, lv, e| m + (0.5 * lv).exp() * e))
}

/// Graph nodes produced by the full-model heads.
#[derive(Debug, Clone, Copy)]
pub struct ElsmVars {
    /// Pre-split means `m_i^(t)`, `T n x d`.
    pub pre_split: Var,
    /// Split logits for `t = 2..T`, `(T-1) n x 1`.
    pub split_logit: Var,
    /// `h_hat`, same layout as `split_logit`.
    pub h_hat: Var,
    /// `(T-1) x d`
    pub alpha_mean: Var,
    pub alpha_log_var: Var,
    /// `K x d`
    pub mu_mean: Var,
    pub mu_log_var: Var,
}

/// Full-model heads. Returns the mixed means `nu` (`T n x d`) together with
/// the auxiliary nodes. `pre_split` is the output of the mean head.
pub fn elsm_heads(
    g: &mut Graph,
    hidden: Var,
    pre_split: Var,
    n: usize,
    d: usize,
    heads: &ElsmHeads<Var>,
) -> Result<(Var, ElsmVars)> {
    let rows = g.shape(hidden)[0];
    let t_len = rows / n;
    let k2d = g.shape(heads.mu_out.w)[1];
    if k2d == 0 || k2d % (2 * d) != 0 {
        return Err(Error::param("K", "must be positive"));
    }
    let k = k2d / (2 * d);
    let r = g.shape(heads.mu_reduce.w)[1];

    let first = g.slice(hidden, 0, 0, n)?;
    let reduced = linear(g, first, &heads.mu_reduce)?;
    let reduced = g.tanh(reduced);
    let flat = g.reshape(reduced, &[1, n * r])?;
    let mu = linear(g, flat, &heads.mu_out)?;
    let mu = g.reshape(mu, &[k, 2 * d])?;
    let mu_mean = g.slice(mu, 1, 0, d)?;
    let mu_lv = g.slice(mu, 1, d, d)?;
    let mu_lv = g.clamp(mu_lv, LOG_VAR_MIN, LOG_VAR_MAX);

    if t_len == 1 {
        let empty = g.constant(Tensor::zeros(&[0, d]));
        let empty_h = g.constant(Tensor::zeros(&[0, 1]));
        return Ok((
            pre_split,
            ElsmVars {
                pre_split,
                split_logit: empty_h,
                h_hat: empty_h,
                alpha_mean: empty,
                alpha_log_var: empty,
                mu_mean,
                mu_log_var: mu_lv,
            },
        ));
    }

    // states at t = 1..T-1 predict quantities of t + 1
    let lead = g.slice(hidden, 0, 0, (t_len - 1) * n)?;
    let reduced = linear(g, lead, &heads.alpha_reduce)?;
    let reduced = g.tanh(reduced);
    let flat = g.reshape(reduced, &[t_len - 1, n * r])?;
    let alpha = linear(g, flat, &heads.alpha_out)?;
    let alpha_mean = g.slice(alpha, 1, 0, d)?;
    let alpha_lv = g.slice(alpha, 1, d, d)?;
    let alpha_lv = g.clamp(alpha_lv, LOG_VAR_MIN, LOG_VAR_MAX);

    let split_logit = linear(g, lead, &heads.split)?;
    let h_hat = g.sigmoid(split_logit);

    let mut alpha_rows = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let row = g.slice(alpha_mean, 0, t, 1)?;
        alpha_rows.push(g.broadcast_to(row, &[n, d])?);
    }
    let alpha_rep = g.concat(&alpha_rows, 0)?;
    let m_first = g.slice(pre_split, 0, 0, n)?;
    let m_tail = g.slice(pre_split, 0, n, (t_len - 1) * n)?;
    let gap = g.sub(alpha_rep, m_tail)?;
    let shift = g.mul(h_hat, gap)?;
    let tail = g.add(m_tail, shift)?;
    let nu = g.concat(&[m_first, tail], 0)?;
    Ok((
        nu,
        ElsmVars {
            pre_split,
            split_logit,
            h_hat,
            alpha_mean,
            alpha_log_var: alpha_lv,
            mu_mean,
            mu_log_var: mu_lv,
        },
    ))
}

/// Mixture responsibilities of each row of `z` over centers `means` with
/// component covariance `s1^2 I` and weights `pi`.
pub fn gmm_responsibilities(z: &DMatrix<f64>, means: &DMatrix<f64>, pi: &[f64], s1: f64) -> Result<DMatrix<f64>> {
    let k = means.nrows();
    if k == 0 {
        return Err(Error::param("K", "must be positive"));
    }
    if pi.len() != k || z.ncols() != means.ncols() {
        return Err(Error::shape("responsibilities", format!("z {:?}, means {:?}, pi {}", z.shape(), means.shape(), pi.len())));
    }
    let mut out = DMatrix::zeros(z.nrows(), k);
    let mut logits = vec![0.0; k];
    for i in 0..z.nrows() {
        for j in 0..k {
            let d2 = (z.row(i) - means.row(j)).norm_squared();
            logits[j] = log_weight(pi[j]) - d2 / (2.0 * s1 * s1);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..k {
            out[(i, j)] = (logits[j] - max).exp() / total;
        }
    }
    Ok(out)
}

/// `ln pi` with zero weights mapped to a large finite negative value.
pub(crate) fn log_weight(p: f64) -> f64 {
    p.max(1e-300).ln()
}
