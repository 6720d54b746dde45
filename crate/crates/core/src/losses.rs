//! Training losses: global noise reconstruction, mask prediction, and the
//! attention-weighted defect-region loss with its clamped ratio weight.

use crate::error::{Error, Result};
use crate::{Image, Mask};
use ndarray::{Array2, Array3};

/// Normalization convention for the mask and defect losses. The mean
/// convention keeps the loss weights meaningful across resolutions; the
/// sum convention is the literal squared-distance reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[derive(Default)]
pub enum LossNorm {
    #[default]
    Mean,
    Sum,
}


/// Per-step loss components. `total` is always
/// `recon + defect + lambda * mask`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub defect: f64,
    pub mask: f64,
    pub total: f64,
    pub ratio_r: f64,
}

/// Mean squared error over all elements.
pub fn recon_loss(eps_hat: &Image, eps: &Image) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::shape(eps.shape(), eps_hat.shape()));
    }
    let n = eps.len() as f64;
    Ok(eps_hat
        .iter()
        .zip(eps.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Squared distance between the mask feature and the true mask.
pub fn mask_loss(mask_feature: &Array2<f64>, true_mask: &Array2<f64>, norm: LossNorm) -> Result<f64> {
    if mask_feature.shape() != true_mask.shape() {
        return Err(Error::shape(true_mask.shape(), mask_feature.shape()));
    }
    let sum: f64 = mask_feature
        .iter()
        .zip(true_mask.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(match norm {
        LossNorm::Sum => sum,
        LossNorm::Mean => sum / mask_feature.len() as f64,
    })
}

/// Average the selected prompt-token columns over blocks, heads, and
/// tokens, reshaped to the square spatial grid.
pub fn average_attention(maps: &[Array3<f64>], token_indices: &[usize]) -> Result<Array2<f64>> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("no attention maps".into()));
    }
    if token_indices.is_empty() {
        return Err(Error::EmptyInput("no token indices".into()));
    }
    let (heads, s, l) = maps[0].dim();
    let side = (s as f64).sqrt().round() as usize;
    if side * side != s {
        return Err(Error::InvalidConfig(format!(
            "token count {s} is not a square grid"
        )));
    }
    for m in maps {
        if m.dim() != (heads, s, l) {
            return Err(Error::shape((heads, s, l), m.dim()));
        }
    }
    if let Some(&bad) = token_indices.iter().find(|&&i| i >= l) {
        return Err(Error::InvalidConfig(format!(
            "token index {bad} out of range for prompt length {l}"
        )));
    }
    let mut out = Array2::<f64>::zeros((side, side));
    let denom = (maps.len() * heads * token_indices.len()) as f64;
    for m in maps {
        for h in 0..heads {
            for pix in 0..s {
                let mut acc = 0.0;
                for &tok in token_indices {
                    acc += m[[h, pix, tok]];
                }
                out[[pix / side, pix % side]] += acc;
            }
        }
    }
    out /= denom;
    Ok(out)
}

/// Background-to-defect attention mass ratio.
pub fn attention_ratio(map: &Array2<f64>, mask: &Array2<f64>, alpha: f64) -> Result<f64> {
    if map.shape() != mask.shape() {
        return Err(Error::shape(mask.shape(), map.shape()));
    }
    let mut on = 0.0;
    let mut off = 0.0;
    for (&m, &k) in map.iter().zip(mask.iter()) {
        off += (1.0 - k) * m;
        on += k * m;
    }
    Ok(off / (on + alpha))
}

/// Clamp the attention ratio into [2, 8].
pub fn clamp_ratio(rat: f64) -> f64 {
    if rat >= 8.0 {
        8.0
    } else if rat > 2.0 {
        rat
    } else {
        2.0
    }
}

/// Defect-region reconstruction loss weighted by the (pre-computed,
/// gradient-detached) ratio `r`. The mask broadcasts over channels.
pub fn defect_loss(eps_hat: &Image, eps: &Image, mask: &Mask, r: f64, norm: LossNorm) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::shape(eps.shape(), eps_hat.shape()));
    }
    let (c, h, w) = eps.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape((h, w), mask.dim()));
    }
    let mut sum = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = mask[[y, x]] * (eps_hat[[ci, y, x]] - eps[[ci, y, x]]);
                sum += d * d;
            }
        }
    }
    let base = match norm {
        LossNorm::Sum => sum,
        LossNorm::Mean => sum / eps.len() as f64,
    };
    Ok(r * base)
}

/// Combined objective.
pub fn total_loss(recon: f64, defect: f64, mask: f64, lambda: f64) -> f64 {
    recon + defect + lambda * mask
}

/// Downsample a pixel mask to a square attention grid by box averaging,
/// then threshold at 0.5.
pub fn resize_mask_to_grid(mask: &Mask, side: usize) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::InvalidConfig(format!(
            "mask {h}x{w} not divisible into {side}x{side} grid"
        )));
    }
    let (by, bx) = (h / side, w / side);
    let mut out = Array2::<f64>::zeros((side, side));
    for gy in 0..side {
        for gx in 0..side {
            let mut acc = 0.0;
            for y in 0..by {
                for x in 0..bx {
                    acc += mask[[gy * by + y, gx * bx + x]];
                }
            }
            let frac = acc / (by * bx) as f64;
            out[[gy, gx]] = if frac >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}
