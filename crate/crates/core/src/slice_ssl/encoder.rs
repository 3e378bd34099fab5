use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ct_preprocess::SliceStack;
use crate::error::{Error, Result};
use crate::numerics::{forward_value, glorot, DenseArray, Graph, ParamStore, ParamVars, Rng, Var};

pub const ENCODER_PREFIX: &str = "slice_encoder.";
pub const PROJECTION_PREFIX: &str = "ssl_projection.";

/// Slices encoded per graph when embedding whole stacks.
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[height, width]` of encoder input slices.
    pub input_extent: [usize; 2],
    pub blocks: Vec<ConvBlock>,
    /// Slice embedding width (d_H).
    pub embed_dim: usize,
    pub activation: Activation,
    /// Hidden width of the pretraining-only projection head.
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_extent: [32, 32],
            blocks: vec![
                ConvBlock { channels: 8, kernel: 3, pool: 2 },
                ConvBlock { channels: 16, kernel: 3, pool: 2 },
                ConvBlock { channels: 16, kernel: 3, pool: 2 },
            ],
            embed_dim: 64,
            activation: Activation::Relu,
            projection_hidden: 64,
            projection_dim: 32,
        }
    }
}

fn key(name: &str) -> String {
    format!("{ENCODER_PREFIX}{name}")
}

fn proj_key(name: &str) -> String {
    format!("{PROJECTION_PREFIX}{name}")
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::invalid("encoder embed_dim must be >= 2"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("encoder needs at least one conv block"));
        }
        if self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(Error::invalid("projection head widths must be >= 1"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel % 2 == 0 || b.pool == 0 {
                return Err(Error::invalid(format!(
                    "conv block {i}: channels >= 1, odd kernel and pool >= 1 required"
                )));
            }
        }
        self.feature_dims().map(|_| ())
    }

    /// `(channels, height, width)` after the last conv block.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let [mut h, mut w] = self.input_extent;
        let mut c = 1;
        for b in &self.blocks {
            if h < b.pool || w < b.pool {
                return Err(Error::invalid(format!(
                    "input extent {:?} is too small for the configured pooling",
                    self.input_extent
                )));
            }
            h /= b.pool;
            w /= b.pool;
            c = b.channels;
        }
        Ok((c, h, w))
    }

    fn flat_dim(&self) -> Result<usize> {
        let (c, h, w) = self.feature_dims()?;
        Ok(c * h * w)
    }

    pub fn pixels(&self) -> usize {
        self.input_extent[0] * self.input_extent[1]
    }

    /// Encoder parameters: He-uniform conv kernels, Glorot head, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        let mut c_in = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = c_in * b.kernel * b.kernel;
            let limit = (6.0 / fan_in as f64).sqrt();
            let n = b.channels * fan_in;
            let w = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
            p.insert(key(&format!("conv{i}.weight")), DenseArray::new(vec![b.channels, c_in, b.kernel, b.kernel], w)?)?;
            p.insert(key(&format!("conv{i}.bias")), DenseArray::zeros(&[b.channels]))?;
            c_in = b.channels;
        }
        p.insert(key("head.weight"), glorot(rng, self.flat_dim()?, self.embed_dim))?;
        p.insert(key("head.bias"), DenseArray::zeros(&[1, self.embed_dim]))?;
        Ok(p)
    }

    /// Projection head used only during contrastive pretraining.
    pub fn init_projection(&self, rng: &mut Rng) -> Result<ParamStore> {
        let mut p = ParamStore::new();
        p.insert(proj_key("l1.weight"), glorot(rng, self.embed_dim, self.projection_hidden))?;
        p.insert(proj_key("l1.bias"), DenseArray::zeros(&[1, self.projection_hidden]))?;
        p.insert(proj_key("l2.weight"), glorot(rng, self.projection_hidden, self.projection_dim))?;
        p.insert(proj_key("l2.bias"), DenseArray::zeros(&[1, self.projection_dim]))?;
        Ok(p)
    }

    /// `[B,1,H,W]` images → `[B, embed_dim]` slice embeddings.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, images: Var) -> Result<Var> {
        let mut h = images;
        for (i, b) in self.blocks.iter().enumerate() {
            h = g.conv2d(h, vars.get(&key(&format!("conv{i}.weight")))?, vars.get(&key(&format!("conv{i}.bias")))?)?;
            h = self.activation.apply(g, h)?;
            if b.pool > 1 {
                h = g.max_pool2d(h, b.pool)?;
            }
        }
        let batch = g.shape(h)[0];
        let flat = g.reshape(h, &[batch, self.flat_dim()?])?;
        g.affine(flat, vars.get(&key("head.weight"))?, vars.get(&key("head.bias"))?)
    }

    /// Projection head applied to slice embeddings.
    pub fn project(&self, g: &mut Graph, vars: &ParamVars, h: Var) -> Result<Var> {
        let a = g.affine(h, vars.get(&proj_key("l1.weight"))?, vars.get(&proj_key("l1.bias"))?)?;
        let a = g.relu(a)?;
        g.affine(a, vars.get(&proj_key("l2.weight"))?, vars.get(&proj_key("l2.bias"))?)
    }

    /// Packs flat `H·W` slices into a `[B,1,H,W]` array.
    pub fn batch_images(&self, slices: &[&[f64]]) -> Result<DenseArray> {
        let px = self.pixels();
        if let Some(s) = slices.iter().find(|s| s.len() != px) {
            return Err(Error::shape("encode_slice", &[s.len()], &self.input_extent));
        }
        let data = slices.iter().flat_map(|s| s.iter().copied()).collect();
        DenseArray::new(vec![slices.len(), 1, self.input_extent[0], self.input_extent[1]], data)
    }
}

/// Embeds one slice (flat `H·W`, values in `[0,1]`).
pub fn encode_slice(params: &ParamStore, cfg: &EncoderConfig, slice: &[f64]) -> Result<Vec<f64>> {
    Ok(encode_batch(params, cfg, &[slice])?.into_data())
}

/// Embeds a batch of slices into a `[B, embed_dim]` matrix.
pub fn encode_batch(params: &ParamStore, cfg: &EncoderConfig, slices: &[&[f64]]) -> Result<DenseArray> {
    let images = cfg.batch_images(slices)?;
    forward_value(
        |g: &mut Graph, v: &ParamVars| {
            let x = g.constant(images.clone());
            cfg.forward(g, v, x)
        },
        params,
    )
}

/// Embeds every slice of a stack: `S ∈ R^{N_H × d_H}`. Slices whose extent
/// differs from the encoder input are resized bilinearly first.
pub fn encode_stack(params: &ParamStore, cfg: &EncoderConfig, stack: &SliceStack) -> Result<DenseArray> {
    let [h, w] = cfg.input_extent;
    let stack = stack.resized(h, w)?;
    let idx: Vec<usize> = (0..stack.num_slices()).collect();
    let chunks: Vec<DenseArray> = idx
        .par_chunks(ENCODE_CHUNK)
        .map(|c| {
            let slices: Vec<&[f64]> = c.iter().map(|&i| stack.slice(i)).collect();
            encode_batch(params, cfg, &slices)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&DenseArray> = chunks.iter().collect();
    DenseArray::concat_rows(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_extent: [8, 8],
            blocks: vec![ConvBlock { channels: 3, kernel: 3, pool: 2 }, ConvBlock { channels: 4, kernel: 3, pool: 2 }],
            embed_dim: 5,
            activation: Activation::Tanh,
            projection_hidden: 6,
            projection_dim: 4,
        }
    }

    #[test]
    fn zero_params_map_zero_slice_to_zero() {
        let cfg = small();
        let params = cfg.init_params(&mut Rng::new(0)).unwrap().zeros_like();
        let e = encode_slice(&params, &cfg, &[0.0; 64]).unwrap();
        assert_eq!(e, vec![0.0; 5]);
    }

    #[test]
    fn batch_shape_and_input_checks() {
        let cfg = small();
        let params = cfg.init_params(&mut Rng::new(1)).unwrap();
        let s = vec![0.5; 64];
        let out = encode_batch(&params, &cfg, &[&s, &s, &s]).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        assert!(encode_slice(&params, &cfg, &[0.5; 63]).is_err());
    }

    #[test]
    fn single_pixel_perturbation_changes_output() {
        let cfg = small();
        let params = cfg.init_params(&mut Rng::new(2)).unwrap();
        let mut rng = Rng::new(3);
        let a: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let mut b = a.clone();
        b[27] = 1.0 - b[27];
        assert_ne!(encode_slice(&params, &cfg, &a).unwrap(), encode_slice(&params, &cfg, &b).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small();
        cfg.embed_dim = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.blocks.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.input_extent = [2, 2];
        assert!(cfg.validate().is_err());
    }
}
