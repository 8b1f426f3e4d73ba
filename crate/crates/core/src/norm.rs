//! Batch normalization and the guided variant.
//!
//! Both share one normalization formula: per channel d over all batch and
//! spatial positions, `y = gamma_d * (x - mu_d) / sigma_d + beta_d` with
//! `sigma_d = sqrt(var_d + eps)` (biased variance, eps inside the root).
//! Plain BN learns `gamma`/`beta` and keeps running statistics; the guided
//! variant receives them as slices of a flat predicted vector `phi`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{stats, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("layer index {layer} out of range ({layers} layers in layout)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("phi length {got} does not match layout total {expected}")]
    PhiLength { got: usize, expected: usize },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered `(layer index, channel count)` pairs describing how a flat
/// parameter vector splits into per-layer `(gamma, beta)` pairs.
///
/// Layer `p` with `D_p` channels owns two contiguous ranges: `gamma` first,
/// then `beta`, so the total length is `sum(2 * D_p)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GbnLayout {
    entries: Vec<(usize, usize)>,
}

impl GbnLayout {
    pub fn new(entries: Vec<(usize, usize)>) -> Self {
        GbnLayout { entries }
    }

    /// Layout for layers `0..channels.len()` in order.
    pub fn from_channels(channels: &[usize]) -> Self {
        GbnLayout {
            entries: channels.iter().copied().enumerate().collect(),
        }
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn n_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, d)| 2 * d).sum()
    }

    /// Channel count of the layout position `pos` (0-based).
    pub fn channels_at(&self, pos: usize) -> Result<usize, NormError> {
        self.entries
            .get(pos)
            .map(|(_, d)| *d)
            .ok_or(NormError::LayerOutOfRange {
                layer: pos,
                layers: self.entries.len(),
            })
    }

    /// Offset of layer `pos`'s gamma range within the flat vector.
    pub fn gamma_offset(&self, pos: usize) -> Result<usize, NormError> {
        if pos >= self.entries.len() {
            return Err(NormError::LayerOutOfRange {
                layer: pos,
                layers: self.entries.len(),
            });
        }
        Ok(self.entries[..pos].iter().map(|(_, d)| 2 * d).sum())
    }

    /// Offset of layer `pos`'s beta range within the flat vector.
    pub fn beta_offset(&self, pos: usize) -> Result<usize, NormError> {
        Ok(self.gamma_offset(pos)? + self.entries[pos].1)
    }
}

/// The flat predicted parameter vector plus its per-layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GbnParams {
    pub phi: Vec<f64>,
    pub layout: GbnLayout,
}

impl GbnParams {
    pub fn new(phi: Vec<f64>, layout: GbnLayout) -> Result<Self, NormError> {
        if phi.len() != layout.total_len() {
            return Err(NormError::PhiLength {
                got: phi.len(),
                expected: layout.total_len(),
            });
        }
        Ok(GbnParams { phi, layout })
    }

    /// Identity transform: every gamma 1, every beta 0.
    pub fn identity(layout: GbnLayout) -> Self {
        let mut phi = vec![0.0; layout.total_len()];
        for pos in 0..layout.n_layers() {
            let off = layout.gamma_offset(pos).expect("pos in range");
            let d = layout.entries()[pos].1;
            for v in phi[off..off + d].iter_mut() {
                *v = 1.0;
            }
        }
        GbnParams { phi, layout }
    }

    /// The `(gamma, beta)` views for layout position `pos`.
    pub fn slice(&self, pos: usize) -> Result<(&[f64], &[f64]), NormError> {
        let d = self.layout.channels_at(pos)?;
        let g0 = self.layout.gamma_offset(pos)?;
        let b0 = self.layout.beta_offset(pos)?;
        Ok((&self.phi[g0..g0 + d], &self.phi[b0..b0 + d]))
    }

    /// Re-concatenate all slices in layout order (bijection check helper).
    pub fn concat_slices(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi.len());
        for pos in 0..self.layout.n_layers() {
            let (g, b) = self.slice(pos).expect("pos in range");
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }
}

/// The per-layer `(gamma, beta)` views of a flat parameter vector.
pub fn slice_phi(params: &GbnParams, pos: usize) -> Result<(&[f64], &[f64]), NormError> {
    params.slice(pos)
}

/// How normalization statistics are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Compute mean/std from the incoming activations (also at eval time).
    #[default]
    Batch,
    /// Use stored exponential-moving-average statistics.
    Running,
}

/// Configuration of one guided normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GbnLayerConfig {
    pub channels: usize,
    pub epsilon: f64,
    pub stats_mode: StatsMode,
}

impl GbnLayerConfig {
    pub fn new(channels: usize) -> Self {
        GbnLayerConfig {
            channels,
            epsilon: 1e-5,
            stats_mode: StatsMode::Batch,
        }
    }

    pub fn validate(&self) -> Result<(), NormError> {
        if self.channels == 0 {
            return Err(NormError::Invalid {
                what: "GbnLayerConfig",
                msg: "channels must be >= 1".into(),
            });
        }
        if !(self.epsilon >= 0.0) {
            return Err(NormError::Invalid {
                what: "GbnLayerConfig",
                msg: "epsilon must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Learned state of a plain batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerState {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnLayerState {
    pub fn new(channels: usize) -> Self {
        BnLayerState {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), NormError> {
        let c = self.channels;
        if [
            self.gamma.len(),
            self.beta.len(),
            self.running_mean.len(),
            self.running_var.len(),
        ]
        .iter()
        .any(|&l| l != c)
        {
            return Err(NormError::Invalid {
                what: "BnLayerState",
                msg: "field lengths must equal channels".into(),
            });
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(NormError::Invalid {
                what: "BnLayerState",
                msg: "running_var must be >= 0".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(NormError::Invalid {
                what: "BnLayerState",
                msg: "momentum must lie in [0, 1]".into(),
            });
        }
        if !(self.epsilon >= 0.0) {
            return Err(NormError::Invalid {
                what: "BnLayerState",
                msg: "epsilon must be >= 0".into(),
            });
        }
        Ok(())
    }

    /// Fold fresh batch statistics into the running averages:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for d in 0..self.channels {
            self.running_mean[d] =
                (1.0 - self.momentum) * self.running_mean[d] + self.momentum * batch_mean[d];
            self.running_var[d] =
                (1.0 - self.momentum) * self.running_var[d] + self.momentum * batch_var[d];
        }
    }
}

fn check_norm_input(
    x: &Tensor,
    channels: usize,
    what: &'static str,
) -> Result<(usize, usize, usize), NormError> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(NormError::Invalid {
            what,
            msg: format!("expected [B, D, H, W] input, got shape {shape:?}"),
        });
    }
    if shape[1] != channels {
        return Err(NormError::Invalid {
            what,
            msg: format!(
                "input has {} channels on axis 1, layer expects {channels}",
                shape[1]
            ),
        });
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Guided normalization forward pass over `[B, D, H, W]` with the provided
/// affine parameters. Statistics follow `cfg.stats_mode`; running mode takes
/// the stored statistics as an explicit argument.
pub fn gbn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    cfg: &GbnLayerConfig,
    running: Option<(&[f64], &[f64])>,
) -> Result<Tensor, NormError> {
    cfg.validate()?;
    let (b, d, spatial) = check_norm_input(x, cfg.channels, "gbn_forward")?;
    if gamma.len() != d || beta.len() != d {
        return Err(NormError::Invalid {
            what: "gbn_forward",
            msg: format!(
                "gamma/beta lengths {}/{} do not match {d} channels",
                gamma.len(),
                beta.len()
            ),
        });
    }
    let (mean, var) = match (cfg.stats_mode, running) {
        (StatsMode::Batch, _) => stats::channel_stats(x.data(), b, d, spatial),
        (StatsMode::Running, Some((m, v))) => (m.to_vec(), v.to_vec()),
        (StatsMode::Running, None) => {
            return Err(NormError::Invalid {
                what: "gbn_forward",
                msg: "running stats mode requires stored statistics".into(),
            })
        }
    };
    let out = stats::normalize_affine(
        x.data(),
        b,
        d,
        spatial,
        &mean,
        &var,
        cfg.epsilon,
        gamma,
        beta,
    );
    Ok(Tensor::new(x.shape(), out)?)
}

/// Plain batch normalization. Training mode normalizes with batch statistics
/// and folds them into the running averages; eval mode normalizes with the
/// stored running statistics and leaves the state untouched.
pub fn bn_forward(
    x: &Tensor,
    state: &mut BnLayerState,
    training: bool,
) -> Result<Tensor, NormError> {
    state.validate()?;
    let (b, d, spatial) = check_norm_input(x, state.channels, "bn_forward")?;
    let (mean, var) = if training {
        let (m, v) = stats::channel_stats(x.data(), b, d, spatial);
        state.update_running(&m, &v);
        (m, v)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let out = stats::normalize_affine(
        x.data(),
        b,
        d,
        spatial,
        &mean,
        &var,
        state.epsilon,
        &state.gamma,
        &state.beta,
    );
    Ok(Tensor::new(x.shape(), out)?)
}
