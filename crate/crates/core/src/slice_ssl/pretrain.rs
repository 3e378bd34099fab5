use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, AugmentConfig};
use super::encoder::EncoderConfig;
use super::loss::nt_xent_graph;
use crate::error::{Error, Result};
use crate::numerics::{evaluate, forward_backward, Adam, AdamConfig, DenseArray, Graph, ParamStore, ParamVars, Rng, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
    /// Softmax temperature dividing cosine similarities.
    pub tau: f64,
    /// Slices per step; each contributes two views.
    pub batch_size: usize,
    pub steps: usize,
    /// Size of the fixed validation batch.
    pub validation_size: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: AdamConfig::default(),
            tau: 0.1,
            batch_size: 16,
            steps: 200,
            validation_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Encoder parameters only; the projection head is dropped.
    pub params: ParamStore,
    pub log: Vec<StepLoss>,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Two views per slice, packed as rows `(2k, 2k+1)`.
fn view_batch(slices: &[Vec<f64>], idx: &[usize], cfg: &SslConfig, rng: &Rng) -> Result<DenseArray> {
    let [h, w] = cfg.encoder.input_extent;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = idx
        .par_iter()
        .enumerate()
        .map(|(i, &s)| augment_pair(&slices[s], h, w, &cfg.augment, &mut rng.fork_indexed("view", i)))
        .collect::<Result<_>>()?;
    let flat: Vec<&[f64]> = pairs.iter().flat_map(|(a, b)| [a.as_slice(), b.as_slice()]).collect();
    cfg.encoder.batch_images(&flat)
}

fn ssl_loss(g: &mut Graph, v: &ParamVars, cfg: &SslConfig, images: &DenseArray) -> Result<Var> {
    let x = g.constant(images.clone());
    let h = cfg.encoder.forward(g, v, x)?;
    let z = cfg.encoder.project(g, v, h)?;
    let z = g.l2_normalize_rows(z, NORM_EPS)?;
    nt_xent_graph(g, z, cfg.tau)
}

fn collapse(step: usize, e: Error) -> Error {
    match e {
        Error::DegenerateEmbedding { row, norm } => Error::invalid(format!(
            "embeddings collapsed at step {step}: row {row} has norm {norm:e}; lower the learning rate or check the inputs"
        )),
        other => other,
    }
}

/// Two-view contrastive pretraining of the slice encoder.
///
/// `slices` are flat `H·W` planes matching `cfg.encoder.input_extent`.
pub fn pretrain_slice_encoder(slices: &[Vec<f64>], cfg: &SslConfig, rng: &Rng) -> Result<PretrainOutcome> {
    cfg.encoder.validate()?;
    cfg.augment.validate()?;
    if slices.is_empty() {
        return Err(Error::invalid("slice dataset is empty"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::invalid("pretraining batch size must be >= 2"));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let px = cfg.encoder.pixels();
    if let Some(i) = slices.iter().position(|s| s.len() != px) {
        return Err(Error::shape("pretrain_slice_encoder", &[slices[i].len()], &cfg.encoder.input_extent));
    }

    let mut encoder = cfg.encoder.init_params(&mut rng.fork("slice_encoder.init"))?;
    let projection = cfg.encoder.init_projection(&mut rng.fork("ssl_projection.init"))?;
    let mut params = encoder.clone();
    params.merge(projection)?;

    let batch = cfg.batch_size.min(slices.len());
    let val_idx = rng.fork("validation").sample_indices(slices.len(), cfg.validation_size.max(2).min(slices.len()));
    let val_images = view_batch(slices, &val_idx, cfg, &rng.fork("validation.views"))?;
    let val_loss = |p: &ParamStore| evaluate(|g: &mut Graph, v: &ParamVars| ssl_loss(g, v, cfg, &val_images), p);
    let initial_val_loss = val_loss(&params).map_err(|e| collapse(0, e))?;

    let mut opt = Adam::new(cfg.optimizer.clone(), &params);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut batch_rng = rng.fork("batches");
    for step in 0..cfg.steps {
        let idx = batch_rng.sample_indices(slices.len(), batch);
        let images = view_batch(slices, &idx, cfg, &rng.fork_indexed("augment", step))?;
        let (loss, grads) = forward_backward(|g: &mut Graph, v: &ParamVars| ssl_loss(g, v, cfg, &images), &params)
            .map_err(|e| collapse(step, e))?;
        opt.step(&mut params, &grads)?;
        log::debug!("ssl step {step}: loss {loss:.5}");
        log.push(StepLoss { step, loss });
    }
    let final_val_loss = val_loss(&params).map_err(|e| collapse(cfg.steps, e))?;

    for (name, value) in encoder.iter_mut() {
        *value = params.get(name)?.clone();
    }
    Ok(PretrainOutcome {
        params: encoder,
        log,
        initial_val_loss,
        final_val_loss,
    })
}
