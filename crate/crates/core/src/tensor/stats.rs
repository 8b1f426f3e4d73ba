//! Per-channel statistics over `[B, D, H, W]` buffers.
//!
//! Shared by the graph's normalization op and the `norm` module so both
//! compute identical values.

/// Mean and biased variance per channel, reduced over batch and spatial dims.
pub fn channel_stats(
    data: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for d in 0..channels {
            let ch = &data[(b * channels + d) * spatial..][..spatial];
            let mut s = 0.0;
            for &v in ch {
                s += v;
            }
            mean[d] += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for b in 0..batch {
        for d in 0..channels {
            let ch = &data[(b * channels + d) * spatial..][..spatial];
            let m = mean[d];
            let mut s = 0.0;
            for &v in ch {
                let dv = v - m;
                s += dv * dv;
            }
            var[d] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// `gamma[d] * (x - mean[d]) / sqrt(var[d] + eps) + beta[d]` per channel.
pub fn normalize_affine(
    data: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        for d in 0..channels {
            let inv_std = 1.0 / (var[d] + eps).sqrt();
            let (m, g, be) = (mean[d], gamma[d], beta[d]);
            let src = &data[(b * channels + d) * spatial..][..spatial];
            let dst = &mut out[(b * channels + d) * spatial..][..spatial];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = g * (x - m) * inv_std + be;
            }
        }
    }
    out
}
