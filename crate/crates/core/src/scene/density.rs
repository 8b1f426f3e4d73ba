//! Ground-truth density maps from head annotations.
//!
//! Each head contributes a truncated Gaussian kernel rendered directly at the
//! density-map resolution (image coordinates divided by the downsample
//! factor). With renormalization on, every kernel sums to exactly 1 even at
//! map borders, so the map total equals the head count up to rounding.

use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    /// Gaussian sigma in density-map pixels.
    pub sigma: f64,
    /// Kernel box half-width in sigmas.
    pub truncation_sigmas: f64,
    /// Rescale each kernel to unit mass after truncation/border clipping.
    pub renormalize: bool,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            sigma: 1.0,
            truncation_sigmas: 4.0,
            renormalize: true,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.sigma > 0.0) {
            return Err(SceneError::Params("density sigma must be > 0".into()));
        }
        if !(self.truncation_sigmas > 0.0) {
            return Err(SceneError::Params("truncation_sigmas must be > 0".into()));
        }
        Ok(())
    }
}

/// Sum of per-head Gaussian kernels on an `(h, w)` map. Head coordinates are
/// image-resolution pixels, mapped to the density grid by `downsample`.
pub fn density_from_heads(
    heads: &[(f64, f64)],
    map_shape: (usize, usize),
    downsample: usize,
    cfg: &DensityConfig,
) -> Result<Tensor, SceneError> {
    cfg.validate()?;
    let (h, w) = map_shape;
    let img_h = h * downsample;
    let img_w = w * downsample;
    let mut map = vec![0.0f64; h * w];
    let radius = cfg.truncation_sigmas * cfg.sigma;
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    for &(x, y) in heads {
        if !(0.0..img_w as f64).contains(&x) || !(0.0..img_h as f64).contains(&y) {
            return Err(SceneError::HeadOutOfBounds {
                x,
                y,
                h: img_h,
                w: img_w,
            });
        }
        let mx = x / downsample as f64;
        let my = y / downsample as f64;
        // Pixels whose centers (i + 0.5, j + 0.5) fall within the box window.
        let mut row_lo = ((my - radius - 0.5).ceil().max(0.0)) as usize;
        let mut row_hi = ((my + radius - 0.5).floor().min(h as f64 - 1.0)) as usize;
        let mut col_lo = ((mx - radius - 0.5).ceil().max(0.0)) as usize;
        let mut col_hi = ((mx + radius - 0.5).floor().min(w as f64 - 1.0)) as usize;
        if row_lo > row_hi {
            // Window narrower than a pixel: use the nearest pixel center.
            let r = ((my - 0.5).round().max(0.0) as usize).min(h - 1);
            (row_lo, row_hi) = (r, r);
        }
        if col_lo > col_hi {
            let c = ((mx - 0.5).round().max(0.0) as usize).min(w - 1);
            (col_lo, col_hi) = (c, c);
        }
        let mut weights = Vec::with_capacity((row_hi + 1 - row_lo) * (col_hi + 1 - col_lo));
        let mut total = 0.0;
        for row in row_lo..=row_hi {
            let dy = row as f64 + 0.5 - my;
            for col in col_lo..=col_hi {
                let dx = col as f64 + 0.5 - mx;
                let wv = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                weights.push((row * w + col, wv));
                total += wv;
            }
        }
        let scale = if cfg.renormalize {
            1.0 / total
        } else {
            inv_two_sigma_sq / std::f64::consts::PI
        };
        for (idx, wv) in weights {
            map[idx] += wv * scale;
        }
    }
    Ok(Tensor::new(&[1, h, w], map)?)
}
