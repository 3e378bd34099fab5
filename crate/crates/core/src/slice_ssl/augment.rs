use serde::{Deserialize, Serialize};

use crate::ct_preprocess::resize_bilinear;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Stochastic view generation for two-view contrastive pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of crop area as a fraction of the slice, within `(0, 1]`.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    pub noise_sigma: f64,
    /// Uniform intensity offset drawn from `[-shift, shift]`.
    pub intensity_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.5, 1.0],
            flip_prob: 0.5,
            noise_sigma: 0.03,
            intensity_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            noise_sigma: 0.0,
            intensity_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.intensity_shift >= 0.0) {
            return Err(Error::invalid("noise_sigma and intensity_shift must be >= 0"));
        }
        Ok(())
    }
}

/// Mirrors a `h × w` plane left to right.
pub fn flip_horizontal(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h).flat_map(|y| (0..w).rev().map(move |x| src[y * w + x])).collect()
}

/// One random view of a slice, resized back to `h × w` and clamped to `[0, 1]`.
pub fn augment_view(slice: &[f64], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if slice.len() != h * w {
        return Err(Error::shape("augment", &[slice.len()], &[h, w]));
    }
    let [lo, hi] = cfg.crop_scale;
    let side = rng.uniform_range(lo, hi).sqrt();
    let ch = ((h as f64 * side).round() as usize).min(h);
    let cw = ((w as f64 * side).round() as usize).min(w);
    if ch < 2 || cw < 2 {
        return Err(Error::invalid(format!("crop of {ch}x{cw} px is degenerate")));
    }
    let y0 = rng.below(h - ch + 1);
    let x0 = rng.below(w - cw + 1);
    let mut view = if (ch, cw) == (h, w) {
        slice.to_vec()
    } else {
        let crop: Vec<f64> = (y0..y0 + ch)
            .flat_map(|y| slice[y * w + x0..y * w + x0 + cw].iter().copied())
            .collect();
        resize_bilinear(&crop, ch, cw, h, w)
    };
    if rng.bernoulli(cfg.flip_prob) {
        view = flip_horizontal(&view, h, w);
    }
    let shift = if cfg.intensity_shift > 0.0 {
        rng.uniform_range(-cfg.intensity_shift, cfg.intensity_shift)
    } else {
        0.0
    };
    for v in view.iter_mut() {
        let noise = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * rng.normal() } else { 0.0 };
        *v = (*v + shift + noise).clamp(0.0, 1.0);
    }
    Ok(view)
}

/// Two independent views of the same slice.
pub fn augment_pair(slice: &[f64], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if slice.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("augment input must lie in [0, 1]"));
    }
    let a = augment_view(slice, h, w, cfg, rng)?;
    let b = augment_view(slice, h, w, cfg, rng)?;
    Ok((a, b))
}
