//! Symmetric cross-modal contrastive alignment of pooled CT embeddings and
//! clinical embeddings, and the aligned inference path.
//!
//! For a batch of `M` unit-norm pairs `(s_i, c_i)` and temperature `τ`, the
//! loss averages the cross-entropy of `τ·S·Cᵀ` over rows (CT → clinical) and
//! over columns (clinical → CT). Negatives are the other pairs in the batch.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clinical_encoder::{standardize, ClinicalConfig, ClinicalRecord, FeatureStats, CLINICAL_PREFIX};
use crate::ct_preprocess::SliceStack;
use crate::error::{Error, Result};
use crate::mil_pool::{AbmilConfig, VolumeEmbedding, MIL_PREFIX};
use crate::numerics::{
    evaluate, forward_backward_with, forward_value, kernels, Adam, AdamConfig, DenseArray, Graph, ParamStore,
    ParamVars, Rng, Var, NORM_EPS,
};
use crate::slice_ssl::loss::check_unit_rows;
use crate::slice_ssl::{encode_stack, EncoderConfig, ENCODER_PREFIX};

/// Checkpoint key of the `[1,1]` log-temperature.
pub const TEMPERATURE_KEY: &str = "temperature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub mil: AbmilConfig,
    pub clinical: ClinicalConfig,
    pub optimizer: AdamConfig,
    /// Multiplier on cosine similarities.
    pub tau: f64,
    pub learnable_tau: bool,
    pub finetune_encoder: bool,
    /// Pairs per batch (`M`).
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mil: AbmilConfig::default(),
            clinical: ClinicalConfig::default(),
            optimizer: AdamConfig::default(),
            tau: 10.0,
            learnable_tau: false,
            finetune_encoder: false,
            batch_size: 8,
            steps: 300,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.mil.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("alignment tau must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("alignment batch size must be >= 2"));
        }
        Ok(())
    }
}

/// One optimizer step of the alignment log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
}

/// Loss over the fixed evaluation batching after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    /// Union of slice encoder, ABMIL, clinical MLP and temperature parameters.
    pub params: ParamStore,
    /// Clinical standardization fitted on the alignment cohort.
    pub stats: FeatureStats,
    pub log: Vec<AlignStep>,
    pub initial_loss: f64,
    pub epoch_losses: Vec<EpochLoss>,
}

impl AlignOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().map_or(self.initial_loss, |e| e.loss)
    }
}

/// Symmetric contrastive loss on unit rows, evaluated with log-sum-exp.
pub fn sym_contrastive_loss(s: &DenseArray, c: &DenseArray, tau: f64) -> Result<f64> {
    let (m, d) = s.dims2("sym_contrastive_loss")?;
    if c.shape() != [m, d] {
        return Err(Error::shape("sym_contrastive_loss", s.shape(), c.shape()));
    }
    if m == 0 {
        return Err(Error::invalid("contrastive batch is empty"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    check_unit_rows(s, "sym_contrastive_loss")?;
    check_unit_rows(c, "sym_contrastive_loss")?;
    let logits = kernels::matmul_nt(s, c)?.map(|v| tau * v);
    let cols = logits.transpose()?;
    let total: f64 = (0..m)
        .map(|i| kernels::row_logsumexp(logits.row(i)) + kernels::row_logsumexp(cols.row(i)) - 2.0 * logits.get2(i, i))
        .sum();
    Ok(total / (2 * m) as f64)
}

/// Graph form on already normalized `[M,d]` rows; `log_tau` holds `ln τ`.
pub fn sym_contrastive_graph(g: &mut Graph, s: Var, c: Var, log_tau: Var) -> Result<Var> {
    let (m, _) = g.value(s).dims2("sym_contrastive_loss")?;
    if g.shape(c) != g.shape(s) {
        return Err(Error::shape("sym_contrastive_loss", g.shape(s), g.shape(c)));
    }
    let ct = g.transpose(c)?;
    let sim = g.matmul(s, ct)?;
    let tau = g.exp(log_tau)?;
    let logits = g.mul(sim, tau)?;
    let eye = DenseArray::identity(m);
    let ct_to_clin = g.softmax_cross_entropy(logits, &eye)?;
    let logits_t = g.transpose(logits)?;
    let clin_to_ct = g.softmax_cross_entropy(logits_t, &eye)?;
    let both = g.add(ct_to_clin, clin_to_ct)?;
    g.scale(both, 0.5)
}

fn log_tau_array(tau: f64) -> DenseArray {
    DenseArray::full(&[1, 1], tau.ln())
}

/// Current `τ` stored in a checkpoint.
pub fn temperature(params: &ParamStore) -> Result<f64> {
    Ok(params.get(TEMPERATURE_KEY)?.data()[0].exp())
}

/// Fresh ABMIL, clinical and temperature parameters; the slice encoder is copied from `encoder_params`.
pub fn init_alignment_params(
    encoder_params: &ParamStore,
    encoder_cfg: &EncoderConfig,
    num_features: usize,
    cfg: &AlignConfig,
    rng: &Rng,
) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = encoder_params.subset(ENCODER_PREFIX);
    if p.is_empty() {
        return Err(Error::invalid("alignment needs pretrained slice encoder parameters"));
    }
    p.merge(cfg.mil.init_params(encoder_cfg.embed_dim, &mut rng.fork("mil.init"))?)?;
    p.merge(cfg.clinical.init_params(num_features, cfg.mil.embed_dim, &mut rng.fork("clinical.init"))?)?;
    p.insert(TEMPERATURE_KEY, log_tau_array(cfg.tau))?;
    Ok(p)
}

/// One patient's CT input to the alignment graph.
enum Bag {
    /// Frozen slice embeddings `S_i`.
    Embedded(DenseArray),
    /// `[N,1,H,W]` slice images for end-to-end finetuning.
    Images(DenseArray),
}

fn pooled_rows(g: &mut Graph, v: &ParamVars, bags: &[&Bag], enc: &EncoderConfig, mil: &AbmilConfig) -> Result<Var> {
    let mut rows = Vec::with_capacity(bags.len());
    for bag in bags {
        let s = match bag {
            Bag::Embedded(s) => g.constant(s.clone()),
            Bag::Images(x) => {
                let x = g.constant(x.clone());
                enc.forward(g, v, x)?
            }
        };
        let (pooled, _) = mil.pool(g, v, s)?;
        rows.push(pooled);
    }
    let s = g.concat_rows(&rows)?;
    g.l2_normalize_rows(s, NORM_EPS)
}

fn batch_loss(
    g: &mut Graph,
    v: &ParamVars,
    bags: &[&Bag],
    t: &DenseArray,
    enc: &EncoderConfig,
    cfg: &AlignConfig,
) -> Result<Var> {
    let s = pooled_rows(g, v, bags, enc, &cfg.mil)?;
    let tv = g.constant(t.clone());
    let c = cfg.clinical.forward(g, v, tv)?;
    let c = g.l2_normalize_rows(c, NORM_EPS)?;
    sym_contrastive_graph(g, s, c, v.get(TEMPERATURE_KEY)?)
}

/// Pairs stacks with clinical records by patient id, in stack order.
fn pair_modalities<'a>(stacks: &'a [SliceStack], clinical: &'a [ClinicalRecord]) -> Result<Vec<&'a ClinicalRecord>> {
    let by_id: HashMap<&str, &ClinicalRecord> = clinical.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let ct_ids: BTreeSet<&str> = stacks.iter().map(|s| s.patient_id.as_str()).collect();
    if ct_ids.len() != stacks.len() {
        return Err(Error::invalid("duplicate patient ids among slice stacks"));
    }
    let no_clin: Vec<&str> = ct_ids.iter().copied().filter(|id| !by_id.contains_key(id)).collect();
    let no_ct: BTreeSet<&str> = by_id.keys().copied().filter(|id| !ct_ids.contains(id)).collect();
    if !no_clin.is_empty() || !no_ct.is_empty() {
        return Err(Error::invalid(format!(
            "modalities disagree: missing clinical for [{}]; missing CT for [{}]",
            no_clin.join(", "),
            no_ct.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(stacks.iter().map(|s| by_id[s.patient_id.as_str()]).collect())
}

fn degenerate(step: usize, e: Error) -> Error {
    match e {
        Error::DegenerateEmbedding { row, norm } => Error::invalid(format!(
            "alignment aborted at step {step}: embedding row {row} has norm {norm:e}"
        )),
        other => other,
    }
}

/// Trains ABMIL pooling, the clinical MLP, and optionally `τ` and the slice
/// encoder, minimizing the symmetric contrastive loss over in-batch negatives.
pub fn train_alignment(
    stacks: &[SliceStack],
    clinical: &[ClinicalRecord],
    encoder_params: &ParamStore,
    encoder_cfg: &EncoderConfig,
    cfg: &AlignConfig,
    rng: &Rng,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let records = pair_modalities(stacks, clinical)?;
    let n = stacks.len();
    if n < cfg.batch_size {
        return Err(Error::invalid(format!("{n} patients cannot fill an alignment batch of {}", cfg.batch_size)));
    }
    let num_features = records[0].values.len();
    let stats = FeatureStats::fit(&records, num_features)?;
    let t_all = standardize(&records, &stats)?;

    let init = init_alignment_params(encoder_params, encoder_cfg, num_features, cfg, rng)?;
    let trainable_prefixes: Vec<&str> = [MIL_PREFIX, CLINICAL_PREFIX]
        .into_iter()
        .chain(cfg.learnable_tau.then_some(TEMPERATURE_KEY))
        .chain(cfg.finetune_encoder.then_some(ENCODER_PREFIX))
        .collect();
    let mut trainable = ParamStore::new();
    let mut frozen = ParamStore::new();
    for (k, v) in init.iter() {
        let target = if trainable_prefixes.iter().any(|p| k.starts_with(p)) { &mut trainable } else { &mut frozen };
        target.insert(k.clone(), v.clone())?;
    }

    let [h, w] = encoder_cfg.input_extent;
    let bags: Vec<Bag> = stacks
        .par_iter()
        .map(|stack| {
            if cfg.finetune_encoder {
                let r = stack.resized(h, w)?;
                let slices: Vec<&[f64]> = (0..r.num_slices()).map(|i| r.slice(i)).collect();
                encoder_cfg.batch_images(&slices).map(Bag::Images)
            } else {
                encode_stack(encoder_params, encoder_cfg, stack).map(Bag::Embedded)
            }
        })
        .collect::<Result<_>>()?;

    let m = cfg.batch_size;
    let eval_batches: Vec<Vec<usize>> = (0..n / m).map(|b| (b * m..(b + 1) * m).collect()).collect();
    let run_batch = |idx: &[usize]| -> Result<(Vec<&Bag>, DenseArray)> {
        Ok((idx.iter().map(|&i| &bags[i]).collect(), t_all.select_rows(idx)?))
    };
    let epoch_loss = |trainable: &ParamStore| -> Result<f64> {
        let mut all = trainable.clone();
        all.merge(frozen.clone())?;
        let mut total = 0.0;
        for idx in &eval_batches {
            let (b, t) = run_batch(idx)?;
            total += evaluate(|g: &mut Graph, v: &ParamVars| batch_loss(g, v, &b, &t, encoder_cfg, cfg), &all)?;
        }
        Ok(total / eval_batches.len() as f64)
    };

    let initial_loss = epoch_loss(&trainable).map_err(|e| degenerate(0, e))?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &trainable);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut epoch_losses = Vec::new();
    let per_epoch = n / m;
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order = (0..n).collect();
            rng.fork_indexed("epoch", epoch).shuffle(&mut order);
        }
        let (b, t) = run_batch(&order[slot * m..(slot + 1) * m])?;
        let (loss, grads) = forward_backward_with(
            |g: &mut Graph, v: &ParamVars| batch_loss(g, v, &b, &t, encoder_cfg, cfg),
            &trainable,
            &frozen,
        )
        .map_err(|e| degenerate(step, e))?;
        opt.step(&mut trainable, &grads)?;
        let tau = match trainable.get(TEMPERATURE_KEY) {
            Ok(lt) => lt.data()[0].exp(),
            Err(_) => frozen.get(TEMPERATURE_KEY)?.data()[0].exp(),
        };
        log.push(AlignStep { epoch, step, loss, tau });
        if slot + 1 == per_epoch || step + 1 == cfg.steps {
            let loss = epoch_loss(&trainable).map_err(|e| degenerate(step, e))?;
            log::info!("alignment epoch {epoch}: loss {loss:.5}");
            epoch_losses.push(EpochLoss { epoch, loss });
        }
    }

    let mut params = trainable;
    params.merge(frozen)?;
    Ok(AlignOutcome {
        params,
        stats,
        log,
        initial_loss,
        epoch_losses,
    })
}

/// Pools precomputed slice embeddings and L2-normalizes the result.
pub fn embed_slices(patient_id: &str, slices: &DenseArray, params: &ParamStore, mil: &AbmilConfig) -> Result<VolumeEmbedding> {
    let mut v = crate::mil_pool::pool(patient_id, slices, params, mil)?;
    let row = DenseArray::new(vec![1, v.s.len()], std::mem::take(&mut v.s))?;
    v.s = kernels::l2_normalize_rows(&row, NORM_EPS)?.into_data();
    Ok(v)
}

/// Inference path: encode every slice, pool, normalize.
pub fn embed_patient(
    params: &ParamStore,
    encoder_cfg: &EncoderConfig,
    mil: &AbmilConfig,
    stack: &SliceStack,
) -> Result<VolumeEmbedding> {
    let s = encode_stack(params, encoder_cfg, stack)?;
    embed_slices(&stack.patient_id, &s, params, mil)
}

/// Unit-norm clinical embeddings for standardized rows.
pub fn embed_clinical(params: &ParamStore, cfg: &ClinicalConfig, t: &DenseArray) -> Result<DenseArray> {
    let c = forward_value(
        |g: &mut Graph, v: &ParamVars| {
            let x = g.constant(t.clone());
            let c = cfg.forward(g, v, x)?;
            g.l2_normalize_rows(c, NORM_EPS)
        },
        params,
    )?;
    Ok(c)
}
