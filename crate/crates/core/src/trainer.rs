//! Full-batch stochastic gradient ascent on the ELBO.

use std::path::PathBuf;

use log::{debug, info};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::DynamicNetwork;
use crate::objective::{
    elbo_on_tape, encode_state, DecoderParams, DecoderSpec, ElboReport, ModelParams, Noise, Prepared, Priors,
    Variant, VariationalState,
};
use crate::rng::{SeedTree, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Latent dimension.
    pub d: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderSpec,
    pub priors: Priors,
    /// Monte Carlo samples per ELBO estimate.
    pub mc_samples: usize,
    /// Record every `log_every`-th epoch (the last one always).
    pub log_every: usize,
    /// Reuse the epoch-0 noise for every epoch.
    pub frozen_noise: bool,
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many epochs; `0` writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ielsm,
            epochs: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            seed: 0,
            d: 2,
            encoder: EncoderConfig::default(),
            decoder: DecoderSpec::default(),
            priors: Priors::default(),
            mc_samples: 1,
            log_every: 1,
            frozen_noise: false,
            checkpoint_path: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::param("adam_eps", "must be > 0"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::param("grad_clip", "must be >= 0"));
        }
        if self.d == 0 {
            return Err(Error::param("d", "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::param("mc_samples", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be positive"));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.priors.validate(self.d)
    }

    fn centers(&self) -> Option<usize> {
        (self.variant == Variant::Elsm).then_some(self.priors.k)
    }

    /// Freshly initialised parameters for a network with `n` nodes and
    /// `input` encoder features per row.
    pub fn init_params(&self, n: usize, input: usize) -> Result<ModelParams<Tensor>> {
        self.validate()?;
        let mut rng = SeedTree::new(self.seed).rng(Stream::ParamInit, 0);
        Ok(ModelParams {
            encoder: EncoderParams::init(n, input, self.d, self.centers(), &self.encoder, &mut rng)?,
            decoder: DecoderParams::init(&self.decoder, &self.priors),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    #[serde(flatten)]
    pub report: ElboReport,
}

/// Adaptive moment estimation state, one moment pair per leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(leaves: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: leaves.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: leaves.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything needed to continue a run exactly where it stopped. Noise is
/// derived from `(seed, epoch)`, so the epoch counter is the whole random
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ModelParams<Tensor>,
    /// Decoder with fitted scalars.
    pub decoder: DecoderSpec,
    /// Priors with a fitted influence radius, if learned.
    pub priors: Priors,
    /// State at zero noise.
    pub state: VariationalState,
    pub log: Vec<LogRow>,
    pub epochs_run: usize,
}

pub struct Trainer<'a> {
    network: &'a DynamicNetwork,
    features: Option<&'a DMatrix<f64>>,
    config: TrainConfig,
    data: Prepared,
    params: ModelParams<Tensor>,
    adam: AdamState,
    epoch: usize,
    log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(network: &'a DynamicNetwork, config: TrainConfig) -> Result<Self> {
        Self::with_features(network, None, config)
    }

    /// Node features are appended to every adjacency row fed to the encoder.
    pub fn with_features(
        network: &'a DynamicNetwork,
        features: Option<&'a DMatrix<f64>>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let data = Prepared::new(network, features, &config.decoder)?;
        let params = config.init_params(network.n(), data.inputs.shape()[1])?;
        let adam = AdamState::new(&params.to_vec());
        Ok(Trainer {
            network,
            features,
            config,
            data,
            params,
            adam,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Continues from `checkpoint`. `config`, when given, replaces the stored
    /// configuration (typically to extend `epochs`) and must describe the
    /// same model.
    pub fn resume(
        network: &'a DynamicNetwork,
        features: Option<&'a DMatrix<f64>>,
        checkpoint: Checkpoint,
        config: Option<TrainConfig>,
    ) -> Result<Self> {
        let config = config.unwrap_or_else(|| checkpoint.config.clone());
        let mut trainer = Self::with_features(network, features, config)?;
        let stored = &checkpoint.config;
        let cfg = &trainer.config;
        if stored.variant != cfg.variant
            || stored.d != cfg.d
            || stored.encoder != cfg.encoder
            || stored.decoder.kind != cfg.decoder.kind
            || stored.decoder.learn_s2 != cfg.decoder.learn_s2
            || stored.decoder.learn_s4 != cfg.decoder.learn_s4
            || stored.centers() != cfg.centers()
        {
            return Err(Error::CheckpointMismatch(
                "variant, d, encoder sizes, decoder or K differ from the checkpoint".into(),
            ));
        }
        let layout = trainer.params.to_vec();
        check_layout(&layout, &checkpoint.params, "parameters")?;
        check_layout(&layout, &checkpoint.adam.m, "first moments")?;
        check_layout(&layout, &checkpoint.adam.v, "second moments")?;
        trainer.params = trainer.params.with_values(&checkpoint.params)?;
        trainer.adam = checkpoint.adam;
        trainer.epoch = checkpoint.epoch;
        trainer.log = checkpoint.log;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ModelParams<Tensor> {
        &self.params
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            params: self.params.to_vec(),
            adam: self.adam.clone(),
            log: self.log.clone(),
        }
    }

    fn noise(&self, epoch: usize) -> Vec<Noise> {
        let idx = if self.config.frozen_noise { 0 } else { epoch as u64 };
        let mut rng = SeedTree::new(self.config.seed).rng(Stream::Noise, idx);
        let (n, t, d) = (self.data.n, self.data.t, self.config.d);
        (0..self.config.mc_samples)
            .map(|_| Noise::sample(&mut rng, t, n, d, self.config.centers()))
            .collect()
    }

    /// ELBO of the current parameters under the given noise, without updating.
    pub fn evaluate(&self, noise: &[Noise]) -> Result<ElboReport> {
        let mut g = Graph::new();
        g.set_grad_enabled(false);
        let vars = self.params.map(&mut |p| g.constant(p.clone()));
        let (te, _) = elbo_on_tape(&mut g, &self.data, &vars, noise, &self.config.priors, &self.config.decoder)?;
        Ok(te.report(&g))
    }

    /// One full-batch update. Returns the ELBO measured before the update.
    pub fn step(&mut self) -> Result<ElboReport> {
        let noise = self.noise(self.epoch);
        let mut g = Graph::new();
        let vars = self.params.map(&mut |p| g.param(p.clone()));
        let (te, _) = elbo_on_tape(&mut g, &self.data, &vars, &noise, &self.config.priors, &self.config.decoder)?;
        let report = te.report(&g);
        if let Some((component, value)) = report.non_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                component,
                value,
            });
        }
        let loss = g.neg(te.elbo);
        let grads = g.backward(loss)?;
        let mut gs: Vec<Tensor> = vars
            .to_vec()
            .into_iter()
            .map(|v| grads.get(v).cloned().expect("every leaf is trainable"))
            .collect();
        let norm = gs.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                component: "gradient",
                value: norm,
            });
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let s = self.config.grad_clip / norm;
            gs.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let mut leaves = self.params.to_vec();
        self.adam.update(&mut leaves, &gs, &self.config);
        self.params = self.params.with_values(&leaves)?;

        let last = self.epoch + 1 == self.config.epochs;
        if self.epoch % self.config.log_every == 0 || last {
            self.log.push(LogRow {
                epoch: self.epoch,
                report,
            });
        }
        debug!("epoch {} elbo {:.4} grad-norm {:.3}", self.epoch, report.elbo, norm);
        self.epoch += 1;
        Ok(report)
    }

    /// Runs the remaining epochs, writing checkpoints as configured.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            let report = self.step()?;
            if self.epoch % 100 == 0 {
                info!("epoch {}/{}: elbo {:.4}", self.epoch, self.config.epochs, report.elbo);
            }
            if let Some(path) = &self.config.checkpoint_path {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.epoch % every == 0) || self.epoch == self.config.epochs {
                    crate::io::write_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        Ok(())
    }

    /// Final model with its zero-noise variational state.
    pub fn finish(self) -> Result<TrainedModel> {
        let (decoder, priors) = self.params.decoder.resolve(&self.config.decoder, &self.config.priors);
        let state = encode_state(self.network, self.features, &self.params, &priors, &decoder, None)?;
        if !state.is_finite() {
            return Err(Error::NonFinite("final variational state".into()));
        }
        Ok(TrainedModel {
            config: self.config,
            params: self.params,
            decoder,
            priors,
            state,
            log: self.log,
            epochs_run: self.epoch,
        })
    }
}

fn check_layout(want: &[Tensor], got: &[Tensor], what: &str) -> Result<()> {
    if want.len() != got.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{what}: {} tensors stored, model has {}",
            got.len(),
            want.len()
        )));
    }
    for (i, (w, g)) in want.iter().zip(got).enumerate() {
        if w.shape() != g.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{what}: tensor {i} has shape {:?}, model expects {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    Ok(())
}

/// Trains a model on `network` from scratch.
pub fn train(network: &DynamicNetwork, config: &TrainConfig) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(network, config.clone())?;
    trainer.run()?;
    trainer.finish()
}
