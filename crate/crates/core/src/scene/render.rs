//! Image synthesis: a smooth per-scene background with people drawn as
//! anti-aliased filled ellipses, darker than the background. The head
//! annotation sits at the ellipse's top-center.
//!
//! Each scene's background also carries a fixed set of person-shaped
//! distractor blobs (same radius law, same darkness, no ground-truth mass) at
//! positions determined by the bg_seed alone. They are static scene content:
//! indistinguishable from people within a single frame, so a non-adaptive
//! counter inherits a per-scene count bias that only scene-level information
//! can remove.

use rand::Rng;

use super::SceneParams;
use crate::seeding;
use crate::tensor::Tensor;

/// Smooth background field plus the fixed distractor layout, fully
/// determined by the scene's bg_seed.
pub(crate) struct Background {
    base: f64,
    gx: f64,
    gy: f64,
    amp: f64,
    fx: f64,
    fy: f64,
    phase_x: f64,
    phase_y: f64,
    /// Unit-square anchor points of the static distractor blobs.
    distractors: Vec<(f64, f64)>,
}

impl Background {
    pub(crate) fn from_seed(bg_seed: u64) -> Self {
        let mut rng = seeding::stream(bg_seed, "scene-bg");
        let base = rng.gen_range(0.55..=0.80);
        let gx = rng.gen_range(-0.15..=0.15);
        let gy = rng.gen_range(-0.15..=0.15);
        let amp = rng.gen_range(0.0..=0.05);
        let fx = rng.gen_range(1.0..=3.0);
        let fy = rng.gen_range(1.0..=3.0);
        let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut d_rng = seeding::stream(bg_seed, "scene-bg/distractors");
        let n_distractors = d_rng.gen_range(0..=10);
        let distractors = (0..n_distractors)
            .map(|_| (d_rng.gen_range(0.0..1.0), d_rng.gen_range(0.0..1.0)))
            .collect();
        Background { base, gx, gy, amp, fx, fy, phase_x, phase_y, distractors }
    }

    fn at(&self, xf: f64, yf: f64) -> f64 {
        self.base
            + self.gx * (xf - 0.5)
            + self.gy * (yf - 0.5)
            + self.amp
                * (std::f64::consts::TAU * self.fx * xf + self.phase_x).sin()
                * (std::f64::consts::TAU * self.fy * yf + self.phase_y).sin()
    }
}

/// Largest head row at which a person's body still fits inside an
/// `h`-row frame: `y + 3 * (r0 + k * y / h) <= h - 1`.
pub(crate) fn max_head_row(params: &SceneParams, h: usize) -> f64 {
    ((h as f64 - 1.0 - 3.0 * params.base_radius)
        / (1.0 + 3.0 * params.perspective_slope / h as f64))
        .max(1.5)
}

/// Horizontal head bounds keeping the body fully visible at row `y`.
pub(crate) fn head_col_bounds(params: &SceneParams, y: f64, h: usize, w: usize) -> (f64, f64) {
    let rx = params.base_radius + params.perspective_slope * y / h as f64;
    if 2.0 * (rx + 1.0) < w as f64 {
        (1.0 + rx, w as f64 - 1.0 - rx)
    } else {
        (1.0, w as f64 - 1.0)
    }
}

/// Anti-aliased coverage of an ellipse at a pixel center: ~1 inside, ~0
/// outside, with a one-pixel soft edge.
fn ellipse_coverage(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let nx = (px - cx) / rx;
    let ny = (py - cy) / ry;
    let d = (nx * nx + ny * ny).sqrt();
    // Signed distance to the boundary in pixel units, approximated with the
    // smaller semi-axis as the local scale.
    let edge = (d - 1.0) * rx.min(ry);
    (0.5 - edge).clamp(0.0, 1.0)
}

fn draw_person(img: &mut [f64], params: &SceneParams, hx: f64, hy: f64, h: usize, w: usize) {
    let r = params.base_radius + params.perspective_slope * hy / h as f64;
    let rx = r;
    let ry = 1.5 * r;
    let cx = hx;
    let cy = hy + ry;
    let row_lo = ((cy - ry - 1.0).floor().max(0.0)) as usize;
    let row_hi = ((cy + ry + 1.0).ceil().min(h as f64 - 1.0)) as usize;
    let col_lo = ((cx - rx - 1.0).floor().max(0.0)) as usize;
    let col_hi = ((cx + rx + 1.0).ceil().min(w as f64 - 1.0)) as usize;
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let cov = ellipse_coverage(col as f64 + 0.5, row as f64 + 0.5, cx, cy, rx, ry);
            if cov > 0.0 {
                img[row * w + col] *= 1.0 - params.blob_intensity * cov;
            }
        }
    }
}

pub(crate) fn render_image(
    params: &SceneParams,
    bg: &Background,
    heads: &[(f64, f64)],
    h: usize,
    w: usize,
) -> Tensor {
    let mut img = vec![0.0f64; h * w];
    for row in 0..h {
        let yf = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let xf = (col as f64 + 0.5) / w as f64;
            img[row * w + col] = bg.at(xf, yf);
        }
    }
    // Static scene content first: distractor blobs anchored by bg_seed, drawn
    // exactly like people (same radius law and darkness), no annotation.
    let y_max = max_head_row(params, h);
    for &(ux, uy) in &bg.distractors {
        let y = 1.0 + uy * (y_max - 1.0);
        let (x_lo, x_hi) = head_col_bounds(params, y, h, w);
        let x = x_lo + ux * (x_hi - x_lo);
        draw_person(&mut img, params, x, y, h, w);
    }
    // People back-to-front in annotation order; overlaps multiply, so draw
    // order only matters in the overlap region and stays deterministic.
    for &(hx, hy) in heads {
        draw_person(&mut img, params, hx, hy, h, w);
    }
    // Global appearance: contrast around mid-gray, then brightness, clamped.
    for v in img.iter_mut() {
        *v = (params.contrast * (*v - 0.5) + 0.5 + params.brightness).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, h, w], img).expect("shape consistent")
}
