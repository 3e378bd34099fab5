//! Attention-based multiple-instance pooling of slice embeddings.
//!
//! Each slice embedding `h_k = W·x_k + b` is scored with
//! `a_k = wᵀ tanh(V·h_k)` (optionally gated by `sigmoid(U·h_k)`), the scores
//! are softmaxed over the bag, and the bag embedding is `s = Σ_k α_k h_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{forward_value, glorot, DenseArray, Graph, ParamStore, ParamVars, Rng, Var};

pub const MIL_PREFIX: &str = "mil.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbmilConfig {
    /// Output width `d` of the pooled embedding.
    pub embed_dim: usize,
    /// Attention hidden width.
    pub hidden_dim: usize,
    pub gated: bool,
    /// Uniform-stride cap on slices per bag.
    pub max_slices: Option<usize>,
}

impl Default for AbmilConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            gated: false,
            max_slices: None,
        }
    }
}

fn key(name: &str) -> String {
    format!("{MIL_PREFIX}{name}")
}

/// Pooled embedding of one bag together with its attention weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEmbedding {
    pub patient_id: String,
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Exported attention record `{patient_id, alpha}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub patient_id: String,
    pub alpha: Vec<f64>,
}

impl From<&VolumeEmbedding> for AttentionRecord {
    fn from(v: &VolumeEmbedding) -> Self {
        Self {
            patient_id: v.patient_id.clone(),
            alpha: v.alpha.clone(),
        }
    }
}

/// Row indices kept when a bag is capped at `cap` slices.
pub fn subsample_rows(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c >= 1 && n > c => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

impl AbmilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.hidden_dim < 1 {
            return Err(Error::invalid("ABMIL needs embed_dim >= 2 and hidden_dim >= 1"));
        }
        if self.max_slices == Some(0) {
            return Err(Error::invalid("max_slices must be >= 1"));
        }
        Ok(())
    }

    pub fn init_params(&self, input_dim: usize, rng: &mut Rng) -> Result<ParamStore> {
        self.validate()?;
        let (d, h) = (self.embed_dim, self.hidden_dim);
        let mut p = ParamStore::new();
        p.insert(key("map.weight"), glorot(rng, input_dim, d))?;
        p.insert(key("map.bias"), DenseArray::zeros(&[1, d]))?;
        p.insert(key("attn_v.weight"), glorot(rng, d, h))?;
        p.insert(key("attn_v.bias"), DenseArray::zeros(&[1, h]))?;
        p.insert(key("attn_w.weight"), glorot(rng, h, 1))?;
        if self.gated {
            p.insert(key("attn_u.weight"), glorot(rng, d, h))?;
            p.insert(key("attn_u.bias"), DenseArray::zeros(&[1, h]))?;
        }
        Ok(p)
    }

    /// Mapped slice embeddings `H = S·W + b`, shape `[N, d]`.
    pub fn map(&self, g: &mut Graph, vars: &ParamVars, slices: Var) -> Result<Var> {
        g.affine(slices, vars.get(&key("map.weight"))?, vars.get(&key("map.bias"))?)
    }

    /// Attention weights as a `[1, N]` row.
    pub fn attention(&self, g: &mut Graph, vars: &ParamVars, mapped: Var) -> Result<Var> {
        let pre = g.affine(mapped, vars.get(&key("attn_v.weight"))?, vars.get(&key("attn_v.bias"))?)?;
        let mut a = g.tanh(pre)?;
        if self.gated {
            let u = g.affine(mapped, vars.get(&key("attn_u.weight"))?, vars.get(&key("attn_u.bias"))?)?;
            let gate = g.sigmoid(u)?;
            a = g.mul(a, gate)?;
        }
        let scores = g.matmul(a, vars.get(&key("attn_w.weight"))?)?;
        let row = g.transpose(scores)?;
        g.row_softmax(row)
    }

    /// `(s, α)`: the `[1, d]` bag embedding and the `[1, N]` attention row.
    pub fn pool(&self, g: &mut Graph, vars: &ParamVars, slices: Var) -> Result<(Var, Var)> {
        let (n, _) = g.value(slices).dims2("abmil_pool")?;
        let slices = if let Some(cap) = self.max_slices.filter(|&c| n > c) {
            let keep = subsample_rows(n, Some(cap));
            let sel = g.constant(selection_matrix(&keep, n));
            g.matmul(sel, slices)?
        } else {
            slices
        };
        let mapped = self.map(g, vars, slices)?;
        let alpha = self.attention(g, vars, mapped)?;
        let s = g.matmul(alpha, mapped)?;
        Ok((s, alpha))
    }
}

/// `[k, n]` 0/1 matrix picking rows `keep` out of `n`.
fn selection_matrix(keep: &[usize], n: usize) -> DenseArray {
    let mut m = DenseArray::zeros(&[keep.len(), n]);
    for (r, &i) in keep.iter().enumerate() {
        m.data_mut()[r * n + i] = 1.0;
    }
    m
}

fn check_bag(slices: &DenseArray, params: &ParamStore) -> Result<()> {
    let (_, dh) = slices.dims2("abmil_pool")?;
    let w = params.get(&key("map.weight"))?;
    if w.shape()[0] != dh {
        return Err(Error::shape("abmil_pool", slices.shape(), w.shape()));
    }
    Ok(())
}

/// Attention distribution over the slices of one bag.
pub fn attention_weights(slices: &DenseArray, params: &ParamStore, cfg: &AbmilConfig) -> Result<Vec<f64>> {
    check_bag(slices, params)?;
    let alpha = forward_value(
        |g: &mut Graph, v: &ParamVars| {
            let s = g.constant(slices.clone());
            let mapped = cfg.map(g, v, s)?;
            cfg.attention(g, v, mapped)
        },
        params,
    )?;
    Ok(alpha.into_data())
}

/// Pools one bag `S ∈ R^{N×d_H}` into a `d`-dimensional embedding.
pub fn pool(patient_id: &str, slices: &DenseArray, params: &ParamStore, cfg: &AbmilConfig) -> Result<VolumeEmbedding> {
    check_bag(slices, params)?;
    let out = forward_value(
        |g: &mut Graph, v: &ParamVars| {
            let s = g.constant(slices.clone());
            let (pooled, alpha) = cfg.pool(g, v, s)?;
            // Both results packed as one column `[s; α]`.
            let pt = g.transpose(pooled)?;
            let at = g.transpose(alpha)?;
            g.concat_rows(&[pt, at])
        },
        params,
    )?;
    let d = cfg.embed_dim;
    let data = out.into_data();
    Ok(VolumeEmbedding {
        patient_id: patient_id.to_string(),
        s: data[..d].to_vec(),
        alpha: data[d..].to_vec(),
    })
}
