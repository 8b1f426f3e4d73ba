//! Direct 2-D cross-correlation kernels (forward and the three backward
//! passes) plus max/average pooling.
//!
//! Convolutions are decomposed per kernel tap into shifted row operations so
//! the stride-1 path reduces to contiguous slice AXPYs. Parallelism is over
//! independent output (or input) channels only, so results are bitwise
//! identical regardless of thread count.

use rayon::prelude::*;

use super::TensorError;

/// Static description of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent along one axis: `(n + 2p - d*(k-1) - 1) / s + 1`, floored.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> i64 {
    let span = n as i64 + 2 * padding as i64 - dilation as i64 * (k as i64 - 1) - 1;
    if span < 0 {
        return 0;
    }
    span / stride as i64 + 1
}

impl Conv2dDims {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self, TensorError> {
        const OP: &str = "conv2d";
        if input_shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                shape: input_shape.to_vec(),
            });
        }
        if weight_shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                shape: weight_shape.to_vec(),
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::invalid(OP, "stride and dilation must be >= 1"));
        }
        let (batch, c_in, h_in, w_in) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (c_out, wc_in, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if wc_in != c_in {
            return Err(TensorError::AxisMismatch {
                op: OP,
                axis: 1,
                expected: c_in,
                got: wc_in,
            });
        }
        let h_out = conv_out_extent(h_in, kh, stride, padding, dilation);
        let w_out = conv_out_extent(w_in, kw, stride, padding, dilation);
        if h_out < 1 || w_out < 1 {
            return Err(TensorError::EmptyOutput {
                op: OP,
                h: h_out,
                w: w_out,
            });
        }
        Ok(Conv2dDims {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            padding,
            dilation,
            h_out: h_out as usize,
            w_out: w_out as usize,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }
}

/// Cross-correlation forward pass.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let spatial_in = d.h_in * d.w_in;
    let spatial_out = d.h_out * d.w_out;
    let mut out = vec![0.0; d.batch * d.c_out * spatial_out];
    out.par_chunks_mut(spatial_out)
        .enumerate()
        .for_each(|(bo, chunk)| {
            let b = bo / d.c_out;
            let o = bo % d.c_out;
            chunk.fill(bias[o]);
            for c in 0..d.c_in {
                let x_ch = &x[(b * d.c_in + c) * spatial_in..][..spatial_in];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = w[((o * d.c_in + c) * d.kh + kh) * d.kw + kw];
                        let y_off = (kh * d.dilation) as i64 - d.padding as i64;
                        let x_off = (kw * d.dilation) as i64 - d.padding as i64;
                        for i in 0..d.h_out {
                            let y = i as i64 * d.stride as i64 + y_off;
                            if y < 0 || y >= d.h_in as i64 {
                                continue;
                            }
                            let xrow = &x_ch[y as usize * d.w_in..][..d.w_in];
                            let orow = &mut chunk[i * d.w_out..][..d.w_out];
                            if d.stride == 1 {
                                let j_lo = (-x_off).max(0) as usize;
                                let j_hi =
                                    ((d.w_in as i64 - x_off).min(d.w_out as i64)).max(0) as usize;
                                if j_lo >= j_hi {
                                    continue;
                                }
                                let src = &xrow[(j_lo as i64 + x_off) as usize..][..j_hi - j_lo];
                                for (ov, &xv) in orow[j_lo..j_hi].iter_mut().zip(src) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    let xx = j as i64 * d.stride as i64 + x_off;
                                    if xx >= 0 && xx < d.w_in as i64 {
                                        *ov += wv * xrow[xx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the input, gathered per input channel (race-free).
pub fn conv2d_input_grad(g: &[f64], w: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let spatial_in = d.h_in * d.w_in;
    let spatial_out = d.h_out * d.w_out;
    let mut dx = vec![0.0; d.batch * d.c_in * spatial_in];
    dx.par_chunks_mut(spatial_in)
        .enumerate()
        .for_each(|(bc, chunk)| {
            let b = bc / d.c_in;
            let c = bc % d.c_in;
            for o in 0..d.c_out {
                let g_ch = &g[(b * d.c_out + o) * spatial_out..][..spatial_out];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = w[((o * d.c_in + c) * d.kh + kh) * d.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let y_off = (kh * d.dilation) as i64 - d.padding as i64;
                        let x_off = (kw * d.dilation) as i64 - d.padding as i64;
                        for i in 0..d.h_out {
                            let y = i as i64 * d.stride as i64 + y_off;
                            if y < 0 || y >= d.h_in as i64 {
                                continue;
                            }
                            let grow = &g_ch[i * d.w_out..][..d.w_out];
                            let xrow = &mut chunk[y as usize * d.w_in..][..d.w_in];
                            if d.stride == 1 {
                                let j_lo = (-x_off).max(0) as usize;
                                let j_hi =
                                    ((d.w_in as i64 - x_off).min(d.w_out as i64)).max(0) as usize;
                                if j_lo >= j_hi {
                                    continue;
                                }
                                let dst =
                                    &mut xrow[(j_lo as i64 + x_off) as usize..][..j_hi - j_lo];
                                for (xv, &gv) in dst.iter_mut().zip(&grow[j_lo..j_hi]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let xx = j as i64 * d.stride as i64 + x_off;
                                    if xx >= 0 && xx < d.w_in as i64 {
                                        xrow[xx as usize] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient w.r.t. the weights, one output channel per task.
pub fn conv2d_weight_grad(g: &[f64], x: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let spatial_in = d.h_in * d.w_in;
    let spatial_out = d.h_out * d.w_out;
    let per_out = d.c_in * d.kh * d.kw;
    let mut dw = vec![0.0; d.c_out * per_out];
    dw.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(o, wchunk)| {
            for b in 0..d.batch {
                let g_ch = &g[(b * d.c_out + o) * spatial_out..][..spatial_out];
                for c in 0..d.c_in {
                    let x_ch = &x[(b * d.c_in + c) * spatial_in..][..spatial_in];
                    for kh in 0..d.kh {
                        let y_off = (kh * d.dilation) as i64 - d.padding as i64;
                        for kw in 0..d.kw {
                            let x_off = (kw * d.dilation) as i64 - d.padding as i64;
                            let mut acc = 0.0;
                            for i in 0..d.h_out {
                                let y = i as i64 * d.stride as i64 + y_off;
                                if y < 0 || y >= d.h_in as i64 {
                                    continue;
                                }
                                let grow = &g_ch[i * d.w_out..][..d.w_out];
                                let xrow = &x_ch[y as usize * d.w_in..][..d.w_in];
                                if d.stride == 1 {
                                    let j_lo = (-x_off).max(0) as usize;
                                    let j_hi = ((d.w_in as i64 - x_off).min(d.w_out as i64)).max(0)
                                        as usize;
                                    if j_lo >= j_hi {
                                        continue;
                                    }
                                    let src =
                                        &xrow[(j_lo as i64 + x_off) as usize..][..j_hi - j_lo];
                                    for (&gv, &xv) in grow[j_lo..j_hi].iter().zip(src) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        let xx = j as i64 * d.stride as i64 + x_off;
                                        if xx >= 0 && xx < d.w_in as i64 {
                                            acc += gv * xrow[xx as usize];
                                        }
                                    }
                                }
                            }
                            wchunk[(c * d.kh + kh) * d.kw + kw] += acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Gradient w.r.t. the bias: sum of upstream grad per output channel.
pub fn conv2d_bias_grad(g: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let spatial_out = d.h_out * d.w_out;
    let mut db = vec![0.0; d.c_out];
    for b in 0..d.batch {
        for (o, dbo) in db.iter_mut().enumerate() {
            let g_ch = &g[(b * d.c_out + o) * spatial_out..][..spatial_out];
            for &gv in g_ch {
                *dbo += gv;
            }
        }
    }
    db
}

/// Max-pool dims use floor semantics: trailing rows/cols that do not fill a
/// full window are dropped.
pub fn pool_out_extent(n: usize, k: usize, stride: usize) -> i64 {
    if n < k {
        return 0;
    }
    ((n - k) / stride) as i64 + 1
}

/// Per-window max with argmax capture (first row-major max wins ties).
/// Returns (output, flat argmax indices into the input).
pub fn maxpool2d_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    h_in: usize,
    w_in: usize,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
) -> (Vec<f64>, Vec<usize>) {
    let spatial_in = h_in * w_in;
    let spatial_out = h_out * w_out;
    let mut out = vec![0.0; batch * channels * spatial_out];
    let mut argmax = vec![0usize; batch * channels * spatial_out];
    for bc in 0..batch * channels {
        let base_in = bc * spatial_in;
        let base_out = bc * spatial_out;
        for i in 0..h_out {
            for j in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..k {
                    for dxw in 0..k {
                        let idx = base_in + (i * stride + dy) * w_in + (j * stride + dxw);
                        let v = x[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out[base_out + i * w_out + j] = best;
                argmax[base_out + i * w_out + j] = best_idx;
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_hand_formula() {
        // (8 + 2*2 - 2*(3-1) - 1)/1 + 1 == 8: dilation-2 3x3 with pad 2 preserves size
        assert_eq!(conv_out_extent(8, 3, 1, 2, 2), 8);
        assert_eq!(conv_out_extent(5, 3, 2, 0, 1), 2);
        assert_eq!(conv_out_extent(2, 3, 1, 0, 1), 0);
    }

    #[test]
    fn pool_extent_floors() {
        assert_eq!(pool_out_extent(5, 2, 2), 2);
        assert_eq!(pool_out_extent(4, 2, 2), 2);
        assert_eq!(pool_out_extent(1, 2, 2), 0);
    }
}
