//! The counting network, the guiding network and feed-forward adaptation.
//!
//! The counting network is an encoder/decoder CNN producing a density map at
//! 1/8 input resolution. Its decoder normalization affine parameters are not
//! learned: a separate guiding network maps unlabeled scene images to the
//! flat parameter vector `phi`, which is sliced per decoder layer. A plain
//! batch-normalization decoder variant serves as the non-adaptive baseline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::norm::{GbnLayout, GbnParams, NormError};
use crate::seeding;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("model has no GBN layers")]
    NoGbnLayers,
    #[error("guide requires at least one input image")]
    EmptyGuideInput,
    #[error("input images must all have {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input spatial dims {h}x{w} must be divisible by 8")]
    Indivisible { h: usize, w: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norm(#[from] NormError),
}

fn default_input_channels() -> usize {
    1
}
fn default_encoder_channels() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_decoder_channels() -> Vec<usize> {
    vec![32, 32, 32, 16, 8, 8]
}
fn default_guiding_channels() -> Vec<usize> {
    vec![8, 16, 32]
}
fn default_n_gbn_layers() -> usize {
    6
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}

/// Architecture of the counting and guiding networks.
///
/// The encoder is three blocks of conv3x3 + ReLU + maxpool2x2 (stride 2), so
/// the density map lives at 1/8 input resolution. The decoder is a stack of
/// dilated conv3x3 (dilation 2) blocks followed by a 1x1 projection to one
/// channel; the first `n_gbn_layers` decoder blocks carry a guided
/// normalization layer between conv and ReLU. The guiding network is
/// conv7x7 + two strided conv4x4, global average pooling, and a linear layer
/// producing the flat normalization-parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_gbn_channels: Vec<usize>,
    pub guiding_channels: Vec<usize>,
    pub n_gbn_layers: usize,
    /// Expected guiding-net output width; `None` derives it from the layout.
    /// When set it must equal `sum(2 * D_p)` over the normalized layers.
    pub guide_output_width: Option<usize>,
    pub epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: default_input_channels(),
            encoder_channels: default_encoder_channels(),
            decoder_gbn_channels: default_decoder_channels(),
            guiding_channels: default_guiding_channels(),
            n_gbn_layers: default_n_gbn_layers(),
            guide_output_width: None,
            epsilon: default_epsilon(),
            bn_momentum: default_bn_momentum(),
        }
    }
}

impl ArchConfig {
    /// The reference full-scale shape: six decoder normalization layers of
    /// 512/512/512/256/128/64 channels, for 3968 predicted parameters.
    pub fn full_scale() -> Self {
        ArchConfig {
            input_channels: 3,
            encoder_channels: vec![128, 256, 512],
            decoder_gbn_channels: vec![512, 512, 512, 256, 128, 64],
            guiding_channels: vec![64, 128, 256],
            ..ArchConfig::default()
        }
    }

    /// Layout of the flat parameter vector: the first `n_gbn_layers` decoder
    /// blocks, in forward order.
    pub fn phi_layout(&self) -> GbnLayout {
        GbnLayout::from_channels(&self.decoder_gbn_channels[..self.n_gbn_layers])
    }

    pub fn phi_width(&self) -> usize {
        self.phi_layout().total_len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_channels == 0 {
            return Err(ModelError::Arch("input_channels must be >= 1".into()));
        }
        if self.encoder_channels.len() != 3 {
            return Err(ModelError::Arch(format!(
                "encoder needs exactly 3 blocks for /8 downsampling, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.guiding_channels.len() != 3 {
            return Err(ModelError::Arch(format!(
                "guiding network needs exactly 3 conv blocks, got {}",
                self.guiding_channels.len()
            )));
        }
        if self.decoder_gbn_channels.is_empty() {
            return Err(ModelError::Arch("decoder needs at least one block".into()));
        }
        if self.n_gbn_layers == 0 || self.n_gbn_layers > self.decoder_gbn_channels.len() {
            return Err(ModelError::Arch(format!(
                "n_gbn_layers must lie in 1..={}, got {}",
                self.decoder_gbn_channels.len(),
                self.n_gbn_layers
            )));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_gbn_channels)
            .chain(&self.guiding_channels)
            .any(|&c| c == 0)
        {
            return Err(ModelError::Arch("channel counts must be >= 1".into()));
        }
        if let Some(w) = self.guide_output_width {
            let expected = self.phi_width();
            if w != expected {
                return Err(ModelError::Arch(format!(
                    "guide_output_width {w} does not equal layout total {expected}"
                )));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(ModelError::Arch("epsilon must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(ModelError::Arch("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which decoder normalization the counting network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Normalization affine parameters predicted per scene by the guiding net.
    Guided,
    /// Conventional learned batch normalization, no adaptation.
    BnBaseline,
}

/// Ordered, canonically named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroup {
    entries: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// All state of one model: scene-shared counting weights `psi`, guiding
/// weights `theta` (empty for the baseline), and non-trainable normalization
/// buffers (baseline running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub psi: ParamGroup,
    pub theta: ParamGroup,
    pub buffers: ParamGroup,
    pub version: u32,
}

pub const MODEL_VERSION: u32 = 1;

impl ModelState {
    /// SHA-256 over kind, version and every named tensor (psi, theta,
    /// buffers). Used to assert that inference paths never mutate the model.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update([match self.kind {
            ModelKind::Guided => 0u8,
            ModelKind::BnBaseline => 1u8,
        }]);
        hasher.update(self.version.to_le_bytes());
        for (tag, group) in [
            ("psi", &self.psi),
            ("theta", &self.theta),
            ("buffers", &self.buffers),
        ] {
            hasher.update(tag.as_bytes());
            for (name, t) in group.entries() {
                hasher.update(name.as_bytes());
                for &d in t.shape() {
                    hasher.update((d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().into()
    }

    /// Mutable references to every trainable tensor, psi first then theta.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.psi
            .tensors_mut()
            .chain(self.theta.tensors_mut())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.psi.len() + self.theta.len()
    }
}

fn he_conv(name: &str, c_out: usize, c_in: usize, kh: usize, kw: usize, seed: u64) -> Tensor {
    let fan_in = (c_in * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let mut rng = seeding::stream(seed, &format!("init/{name}"));
    let data: Vec<f64> = (0..c_out * c_in * kh * kw)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(&[c_out, c_in, kh, kw], data)
        .expect("shape consistent")
        .with_grad()
}

fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(&[len]).with_grad()
}

fn push_conv(group: &mut ParamGroup, prefix: &str, c_out: usize, c_in: usize, k: usize, seed: u64) {
    let wname = format!("{prefix}.weight");
    group.push(wname.clone(), he_conv(&wname, c_out, c_in, k, k, seed));
    group.push(format!("{prefix}.bias"), zero_bias(c_out));
}

fn build_counting_params(arch: &ArchConfig, seed: u64, with_bn: bool) -> (ParamGroup, ParamGroup) {
    let mut psi = ParamGroup::default();
    let mut buffers = ParamGroup::default();
    let mut c_in = arch.input_channels;
    for (i, &c_out) in arch.encoder_channels.iter().enumerate() {
        push_conv(&mut psi, &format!("enc{i}.conv"), c_out, c_in, 3, seed);
        c_in = c_out;
    }
    for (p, &c_out) in arch.decoder_gbn_channels.iter().enumerate() {
        push_conv(&mut psi, &format!("dec{p}.conv"), c_out, c_in, 3, seed);
        c_in = c_out;
    }
    push_conv(&mut psi, "head.conv", 1, c_in, 1, seed);
    if with_bn {
        for (p, &d) in arch.decoder_gbn_channels.iter().enumerate() {
            psi.push(
                format!("dec{p}.bn.gamma"),
                Tensor::full(&[d], 1.0).with_grad(),
            );
            psi.push(format!("dec{p}.bn.beta"), Tensor::zeros(&[d]).with_grad());
            buffers.push(format!("dec{p}.bn.running_mean"), Tensor::zeros(&[d]));
            buffers.push(format!("dec{p}.bn.running_var"), Tensor::full(&[d], 1.0));
        }
    }
    (psi, buffers)
}

fn build_guiding_params(arch: &ArchConfig, seed: u64) -> ParamGroup {
    let mut theta = ParamGroup::default();
    let g = &arch.guiding_channels;
    let specs = [
        ("guide0.conv", g[0], arch.input_channels, 7),
        ("guide1.conv", g[1], g[0], 4),
        ("guide2.conv", g[2], g[1], 4),
    ];
    for (prefix, c_out, c_in, k) in specs {
        push_conv(&mut theta, prefix, c_out, c_in, k, seed);
    }
    // Final linear: near-zero weights with a bias of 1 on gamma slots and 0 on
    // beta slots, so a fresh model predicts the identity transform.
    let width = arch.phi_width();
    let f_in = g[2];
    let mut rng = seeding::stream(seed, "init/guide.linear.weight");
    let wdata: Vec<f64> = (0..width * f_in)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * 1e-4
        })
        .collect();
    theta.push(
        "guide.linear.weight",
        Tensor::new(&[width, f_in], wdata)
            .expect("shape consistent")
            .with_grad(),
    );
    let identity = GbnParams::identity(arch.phi_layout());
    theta.push(
        "guide.linear.bias",
        Tensor::new(&[width], identity.phi)
            .expect("shape consistent")
            .with_grad(),
    );
    theta
}

/// Deterministically initialize a guided model from a seed.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<ModelState, ModelError> {
    arch.validate()?;
    let (psi, buffers) = build_counting_params(arch, seed, false);
    let theta = build_guiding_params(arch, seed);
    Ok(ModelState {
        kind: ModelKind::Guided,
        arch: arch.clone(),
        psi,
        theta,
        buffers,
        version: MODEL_VERSION,
    })
}

/// Deterministically initialize the batch-normalization baseline.
pub fn build_baseline_model(arch: &ArchConfig, seed: u64) -> Result<ModelState, ModelError> {
    arch.validate()?;
    let (psi, buffers) = build_counting_params(arch, seed, true);
    Ok(ModelState {
        kind: ModelKind::BnBaseline,
        arch: arch.clone(),
        psi,
        theta: ParamGroup::default(),
        buffers,
        version: MODEL_VERSION,
    })
}

/// A model's parameters registered as leaves of a graph.
pub struct BoundModel<'a> {
    pub model: &'a ModelState,
    pub psi_nodes: Vec<NodeId>,
    pub theta_nodes: Vec<NodeId>,
}

fn bind_group(g: &mut Graph, group: &ParamGroup, trainable: bool) -> Vec<NodeId> {
    group
        .entries()
        .iter()
        .map(|(_, t)| {
            let mut leaf = t.clone();
            leaf.requires_grad = trainable;
            g.leaf(&leaf)
        })
        .collect()
}

fn group_node(group: &ParamGroup, nodes: &[NodeId], name: &str) -> Result<NodeId, ModelError> {
    group
        .index_of(name)
        .map(|i| nodes[i])
        .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
}

/// Guiding network forward: one `[1, C, H, W]` image to a flat `[L]`
/// parameter vector node.
pub fn guiding_forward(
    g: &mut Graph,
    z: NodeId,
    arch: &ArchConfig,
    theta: &ParamGroup,
    theta_nodes: &[NodeId],
) -> Result<NodeId, ModelError> {
    let node = |name: &str| group_node(theta, theta_nodes, name);
    let mut h = g.conv2d(
        z,
        node("guide0.conv.weight")?,
        node("guide0.conv.bias")?,
        1,
        3,
        1,
    )?;
    h = g.relu(h);
    h = g.conv2d(
        h,
        node("guide1.conv.weight")?,
        node("guide1.conv.bias")?,
        2,
        1,
        1,
    )?;
    h = g.relu(h);
    h = g.conv2d(
        h,
        node("guide2.conv.weight")?,
        node("guide2.conv.bias")?,
        2,
        1,
        1,
    )?;
    h = g.relu(h);
    let pooled = g.global_avg_pool(h)?;
    let phi = g.linear(
        pooled,
        node("guide.linear.weight")?,
        node("guide.linear.bias")?,
    )?;
    Ok(g.reshape(phi, &[arch.phi_width()])?)
}

fn encoder_forward(
    g: &mut Graph,
    x: NodeId,
    arch: &ArchConfig,
    psi: &ParamGroup,
    psi_nodes: &[NodeId],
) -> Result<NodeId, ModelError> {
    let mut h = x;
    for i in 0..arch.encoder_channels.len() {
        let w = group_node(psi, psi_nodes, &format!("enc{i}.conv.weight"))?;
        let b = group_node(psi, psi_nodes, &format!("enc{i}.conv.bias"))?;
        h = g.conv2d(h, w, b, 1, 1, 1)?;
        h = g.relu(h);
        h = g.maxpool2d(h, 2, 2)?;
    }
    Ok(h)
}

/// Counting network forward with guided normalization. `phi` is a flat `[L]`
/// node laid out per `arch.phi_layout()`.
pub fn counting_forward_gbn(
    g: &mut Graph,
    x: NodeId,
    phi: NodeId,
    arch: &ArchConfig,
    psi: &ParamGroup,
    psi_nodes: &[NodeId],
) -> Result<NodeId, ModelError> {
    let layout = arch.phi_layout();
    let mut h = encoder_forward(g, x, arch, psi, psi_nodes)?;
    for (p, &d) in arch.decoder_gbn_channels.iter().enumerate() {
        let w = group_node(psi, psi_nodes, &format!("dec{p}.conv.weight"))?;
        let b = group_node(psi, psi_nodes, &format!("dec{p}.conv.bias"))?;
        h = g.conv2d(h, w, b, 1, 2, 2)?;
        if p < arch.n_gbn_layers {
            let gamma = g.slice(phi, layout.gamma_offset(p)?, d)?;
            let beta = g.slice(phi, layout.beta_offset(p)?, d)?;
            h = g.channel_norm(h, gamma, beta, arch.epsilon)?;
        }
        h = g.relu(h);
    }
    let w = group_node(psi, psi_nodes, "head.conv.weight")?;
    let b = group_node(psi, psi_nodes, "head.conv.bias")?;
    Ok(g.conv2d(h, w, b, 1, 0, 1)?)
}

/// Counting network forward with plain batch normalization. Returns the
/// density node and the per-block normalization node ids (whose saved batch
/// statistics feed the trainer's running-average updates).
pub fn counting_forward_bn(
    g: &mut Graph,
    x: NodeId,
    arch: &ArchConfig,
    psi: &ParamGroup,
    psi_nodes: &[NodeId],
    buffers: &ParamGroup,
    use_running_stats: bool,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let mut norm_nodes = Vec::with_capacity(arch.decoder_gbn_channels.len());
    let mut h = encoder_forward(g, x, arch, psi, psi_nodes)?;
    for p in 0..arch.decoder_gbn_channels.len() {
        let w = group_node(psi, psi_nodes, &format!("dec{p}.conv.weight"))?;
        let b = group_node(psi, psi_nodes, &format!("dec{p}.conv.bias"))?;
        h = g.conv2d(h, w, b, 1, 2, 2)?;
        let gamma = group_node(psi, psi_nodes, &format!("dec{p}.bn.gamma"))?;
        let beta = group_node(psi, psi_nodes, &format!("dec{p}.bn.beta"))?;
        h = if use_running_stats {
            let mean = buffers
                .get(&format!("dec{p}.bn.running_mean"))
                .ok_or_else(|| ModelError::UnknownParam(format!("dec{p}.bn.running_mean")))?;
            let var = buffers
                .get(&format!("dec{p}.bn.running_var"))
                .ok_or_else(|| ModelError::UnknownParam(format!("dec{p}.bn.running_var")))?;
            g.channel_norm_fixed(h, gamma, beta, arch.epsilon, mean.data(), var.data())?
        } else {
            g.channel_norm(h, gamma, beta, arch.epsilon)?
        };
        norm_nodes.push(h);
        h = g.relu(h);
    }
    let w = group_node(psi, psi_nodes, "head.conv.weight")?;
    let b = group_node(psi, psi_nodes, "head.conv.bias")?;
    let out = g.conv2d(h, w, b, 1, 0, 1)?;
    Ok((out, norm_nodes))
}

impl<'a> BoundModel<'a> {
    pub fn bind(g: &mut Graph, model: &'a ModelState, trainable: bool) -> Self {
        let psi_nodes = bind_group(g, &model.psi, trainable);
        let theta_nodes = bind_group(g, &model.theta, trainable);
        BoundModel {
            model,
            psi_nodes,
            theta_nodes,
        }
    }

    pub fn guide_forward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, ModelError> {
        guiding_forward(g, z, &self.model.arch, &self.model.theta, &self.theta_nodes)
    }

    pub fn count_forward_gbn(
        &self,
        g: &mut Graph,
        x: NodeId,
        phi: NodeId,
    ) -> Result<NodeId, ModelError> {
        counting_forward_gbn(
            g,
            x,
            phi,
            &self.model.arch,
            &self.model.psi,
            &self.psi_nodes,
        )
    }

    pub fn count_forward_bn(
        &self,
        g: &mut Graph,
        x: NodeId,
        use_running_stats: bool,
    ) -> Result<(NodeId, Vec<NodeId>), ModelError> {
        counting_forward_bn(
            g,
            x,
            &self.model.arch,
            &self.model.psi,
            &self.psi_nodes,
            &self.model.buffers,
            use_running_stats,
        )
    }
}

fn check_guide_inputs(z_images: &[Tensor], arch: &ArchConfig) -> Result<(), ModelError> {
    if z_images.is_empty() {
        return Err(ModelError::EmptyGuideInput);
    }
    for z in z_images {
        let shape = z.shape();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(ModelError::Arch(format!(
                "guide inputs must be [1, C, H, W], got {shape:?}"
            )));
        }
        if shape[1] != arch.input_channels {
            return Err(ModelError::ChannelMismatch {
                expected: arch.input_channels,
                got: shape[1],
            });
        }
    }
    Ok(())
}

/// Mean of per-image vectors, centered on the first vector so that identical
/// inputs average to themselves exactly.
pub fn average_phi(vectors: &[Vec<f64>]) -> Vec<f64> {
    let k = vectors.len() as f64;
    let base = &vectors[0];
    let mut out = base.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let mut dev = 0.0;
        for v in vectors {
            dev += v[i] - base[i];
        }
        *o = base[i] + dev / k;
    }
    out
}

/// Predict the normalization parameters from K unlabeled images: the mean of
/// the per-image guiding-network outputs. Pure feed-forward.
pub fn guide(
    z_images: &[Tensor],
    theta: &ParamGroup,
    arch: &ArchConfig,
) -> Result<GbnParams, ModelError> {
    arch.validate()?;
    check_guide_inputs(z_images, arch)?;
    let mut per_image = Vec::with_capacity(z_images.len());
    for z in z_images {
        let mut g = Graph::new();
        let theta_nodes = bind_group(&mut g, theta, false);
        let z_node = g.leaf(z);
        let phi_node = guiding_forward(&mut g, z_node, arch, theta, &theta_nodes)?;
        per_image.push(g.value(phi_node).to_vec());
    }
    let phi = average_phi(&per_image);
    Ok(GbnParams::new(phi, arch.phi_layout())?)
}

/// Counting network forward pass (guided variant) outside any training graph.
pub fn count_forward(
    x: &Tensor,
    phi: &GbnParams,
    psi: &ParamGroup,
    arch: &ArchConfig,
) -> Result<Tensor, ModelError> {
    arch.validate()?;
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != arch.input_channels {
        return Err(ModelError::Arch(format!(
            "count input must be [B, {}, H, W], got {shape:?}",
            arch.input_channels
        )));
    }
    if shape[2] % 8 != 0 || shape[3] % 8 != 0 {
        return Err(ModelError::Indivisible {
            h: shape[2],
            w: shape[3],
        });
    }
    if phi.layout != arch.phi_layout() {
        return Err(ModelError::Arch(
            "phi layout does not match architecture".into(),
        ));
    }
    let mut g = Graph::new();
    let psi_nodes = bind_group(&mut g, psi, false);
    let x_node = g.leaf(x);
    let phi_tensor = Tensor::new(&[phi.phi.len()], phi.phi.clone())?;
    let phi_node = g.leaf(&phi_tensor);
    let out = counting_forward_gbn(&mut g, x_node, phi_node, arch, psi, &psi_nodes)?;
    Ok(g.tensor(out))
}

/// Total predicted count: the sum over all density-map entries.
pub fn predict_count(density: &Tensor) -> f64 {
    density.data().iter().sum()
}

/// Adapt to a new scene from unlabeled images. Identical to [`guide`] but
/// additionally verifies that no model state changed.
pub fn adapt(model: &ModelState, z_images: &[Tensor]) -> Result<GbnParams, ModelError> {
    if model.kind != ModelKind::Guided {
        return Err(ModelError::NoGbnLayers);
    }
    let before = model.checksum();
    let phi = guide(z_images, &model.theta, &model.arch)?;
    assert_eq!(
        before,
        model.checksum(),
        "adapt must not mutate model state"
    );
    Ok(phi)
}
