//! Count metrics, the multi-trial unlabeled-adaptation protocol, and the
//! guiding-output variance analysis.
//!
//! Counts are compared at whole-image level (density-map sums), never
//! rounded. Every trial draws K z-images per scene, adapts feed-forward only,
//! and scores the remaining images; the z and metric sets are disjoint by
//! construction and model parameters are checksum-verified unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, ModelError, ModelKind, ModelState};
use crate::norm::NormError;
use crate::scene::SceneDataset;
use crate::seeding;
use crate::tensor::{Graph, TensorError};
use crate::train::as_batch;

use rand::Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(
        "count lists must be equal-length and non-empty ({pred} predictions, {gt} ground truths)"
    )]
    BadLists { pred: usize, gt: usize },
    #[error("scene {scene_id} has {n} images; protocol needs more than {k}")]
    SceneTooSmall {
        scene_id: String,
        n: usize,
        k: usize,
    },
    #[error("analysis needs {need} {what}, got {got}")]
    Insufficient {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean absolute error between predicted and ground-truth counts.
pub fn mae(pred_counts: &[f64], gt_counts: &[f64]) -> Result<f64, EvalError> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(EvalError::BadLists {
            pred: pred_counts.len(),
            gt: gt_counts.len(),
        });
    }
    let n = pred_counts.len() as f64;
    Ok(pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

/// Root mean square error between predicted and ground-truth counts.
pub fn rmse(pred_counts: &[f64], gt_counts: &[f64]) -> Result<f64, EvalError> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(EvalError::BadLists {
            pred: pred_counts.len(),
            gt: gt_counts.len(),
        });
    }
    let n = pred_counts.len() as f64;
    Ok((pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Where adaptation inputs come from (currently always the scene's own pool,
/// excluded from metric computation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZPool {
    #[default]
    ScenePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Unlabeled images per adaptation.
    pub k: usize,
    pub trials: usize,
    pub z_pool: ZPool,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            k: 1,
            trials: 5,
            z_pool: ZPool::ScenePool,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 {
            return Err(EvalError::Protocol("k must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(EvalError::Protocol("trials must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub mae: f64,
    pub rmse: f64,
    /// Indices of the adaptation images (absent for the baseline).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z_indices: Option<Vec<usize>>,
    pub pred_counts: Vec<f64>,
    pub gt_counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEval {
    pub trial: usize,
    pub scenes: Vec<SceneEval>,
    /// Mean of the per-scene MAE values.
    pub mae: f64,
    /// Mean of the per-scene RMSE values.
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub kind: ModelKind,
    /// K for the adaptive pipeline; absent for the baseline (unused there).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub trials: usize,
    pub z_pool: ZPool,
    pub seed: u64,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: ReportConfig,
    pub per_trial: Vec<TrialEval>,
    pub aggregate: EvalAggregate,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_trials(trials: &[TrialEval]) -> EvalAggregate {
    let maes: Vec<f64> = trials.iter().map(|t| t.mae).collect();
    let rmses: Vec<f64> = trials.iter().map(|t| t.rmse).collect();
    let (mae_mean, mae_std) = mean_std(&maes);
    let (rmse_mean, rmse_std) = mean_std(&rmses);
    EvalAggregate {
        mae_mean,
        mae_std,
        rmse_mean,
        rmse_std,
    }
}

fn checksum_hex(model: &ModelState) -> String {
    let digest = model.checksum();
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Predicted count of one image under the guided pipeline.
fn predict_guided(
    model: &ModelState,
    phi: &crate::norm::GbnParams,
    image: &crate::tensor::Tensor,
) -> Result<f64, EvalError> {
    let density = models::count_forward(&as_batch(image), phi, &model.psi, &model.arch)?;
    Ok(models::predict_count(&density))
}

/// Predicted count of one image under the baseline (running statistics).
fn predict_baseline(model: &ModelState, image: &crate::tensor::Tensor) -> Result<f64, EvalError> {
    let mut g = Graph::new();
    let bound = models::BoundModel::bind(&mut g, model, false);
    let x = g.leaf(&as_batch(image));
    let (out, _) = bound.count_forward_bn(&mut g, x, true)?;
    Ok(g.value(out).iter().sum())
}

fn sample_distinct(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// The multi-trial adaptation protocol: per trial and scene, sample K
/// z-images, adapt feed-forward, and score the remaining images.
pub fn run_adaptation_eval(
    model: &ModelState,
    test_scenes: &[SceneDataset],
    protocol: &EvalProtocol,
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    if model.kind != ModelKind::Guided {
        return Err(EvalError::Model(ModelError::NoGbnLayers));
    }
    let before = model.checksum();
    for scene in test_scenes {
        if scene.n_images() <= protocol.k {
            return Err(EvalError::SceneTooSmall {
                scene_id: scene.params.scene_id.clone(),
                n: scene.n_images(),
                k: protocol.k,
            });
        }
    }
    let mut per_trial = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let mut scene_evals = Vec::with_capacity(test_scenes.len());
        for scene in test_scenes {
            let mut rng = seeding::stream(
                protocol.seed,
                &format!("eval/trial{trial}/scene/{}", scene.params.scene_id),
            );
            let z_indices = sample_distinct(&mut rng, scene.n_images(), protocol.k);
            let z_images: Vec<_> = z_indices
                .iter()
                .map(|&i| as_batch(&scene.images[i]))
                .collect();
            let phi = models::adapt(model, &z_images)?;
            let mut pred_counts = Vec::new();
            let mut gt_counts = Vec::new();
            for i in 0..scene.n_images() {
                if z_indices.contains(&i) {
                    continue;
                }
                pred_counts.push(predict_guided(model, &phi, &scene.images[i])?);
                gt_counts.push(models::predict_count(&scene.density_maps[i]));
            }
            scene_evals.push(SceneEval {
                scene_id: scene.params.scene_id.clone(),
                mae: mae(&pred_counts, &gt_counts)?,
                rmse: rmse(&pred_counts, &gt_counts)?,
                z_indices: Some(z_indices),
                pred_counts,
                gt_counts,
            });
        }
        let (trial_mae, _) = mean_std(&scene_evals.iter().map(|s| s.mae).collect::<Vec<_>>());
        let (trial_rmse, _) = mean_std(&scene_evals.iter().map(|s| s.rmse).collect::<Vec<_>>());
        per_trial.push(TrialEval {
            trial,
            scenes: scene_evals,
            mae: trial_mae,
            rmse: trial_rmse,
        });
    }
    assert_eq!(
        before,
        model.checksum(),
        "evaluation must not mutate model state"
    );
    let aggregate = aggregate_trials(&per_trial);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: ReportConfig {
            kind: model.kind,
            k: Some(protocol.k),
            trials: protocol.trials,
            z_pool: protocol.z_pool,
            seed: protocol.seed,
            model_checksum: checksum_hex(model),
        },
        per_trial,
        aggregate,
    })
}

/// Baseline evaluation: identical metric computation, no adaptation step.
/// Independent of `protocol.k` by construction.
pub fn run_baseline_eval(
    model: &ModelState,
    test_scenes: &[SceneDataset],
    protocol: &EvalProtocol,
) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    if model.kind != ModelKind::BnBaseline {
        return Err(EvalError::Protocol(
            "baseline eval requires a bn_baseline model".into(),
        ));
    }
    let before = model.checksum();
    // All images are metric images; precompute one prediction per image.
    let mut predictions = Vec::with_capacity(test_scenes.len());
    for scene in test_scenes {
        if scene.n_images() == 0 {
            return Err(EvalError::SceneTooSmall {
                scene_id: scene.params.scene_id.clone(),
                n: 0,
                k: 0,
            });
        }
        let mut preds = Vec::with_capacity(scene.n_images());
        let mut gts = Vec::with_capacity(scene.n_images());
        for i in 0..scene.n_images() {
            preds.push(predict_baseline(model, &scene.images[i])?);
            gts.push(models::predict_count(&scene.density_maps[i]));
        }
        predictions.push((preds, gts));
    }
    let mut per_trial = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let mut scene_evals = Vec::with_capacity(test_scenes.len());
        for (scene, (preds, gts)) in test_scenes.iter().zip(&predictions) {
            scene_evals.push(SceneEval {
                scene_id: scene.params.scene_id.clone(),
                mae: mae(preds, gts)?,
                rmse: rmse(preds, gts)?,
                z_indices: None,
                pred_counts: preds.clone(),
                gt_counts: gts.clone(),
            });
        }
        let (trial_mae, _) = mean_std(&scene_evals.iter().map(|s| s.mae).collect::<Vec<_>>());
        let (trial_rmse, _) = mean_std(&scene_evals.iter().map(|s| s.rmse).collect::<Vec<_>>());
        per_trial.push(TrialEval {
            trial,
            scenes: scene_evals,
            mae: trial_mae,
            rmse: trial_rmse,
        });
    }
    assert_eq!(
        before,
        model.checksum(),
        "evaluation must not mutate model state"
    );
    let aggregate = aggregate_trials(&per_trial);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: ReportConfig {
            kind: model.kind,
            k: None,
            trials: protocol.trials,
            z_pool: protocol.z_pool,
            seed: protocol.seed,
            model_checksum: checksum_hex(model),
        },
        per_trial,
        aggregate,
    })
}

/// Aggregate deltas (`ours - baseline`) for side-by-side reporting.
pub fn aggregate_delta(ours: &EvalAggregate, baseline: &EvalAggregate) -> EvalAggregate {
    EvalAggregate {
        mae_mean: ours.mae_mean - baseline.mae_mean,
        mae_std: ours.mae_std - baseline.mae_std,
        rmse_mean: ours.rmse_mean - baseline.rmse_mean,
        rmse_std: ours.rmse_std - baseline.rmse_std,
    }
}

/// Per-dimension variance of one normalization layer's predicted parameter
/// slice, within one scene vs. across scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiVariance {
    /// Layout position analyzed (0-based decoder normalization layer).
    pub layer: usize,
    pub within_scene: Vec<f64>,
    pub across_scene: Vec<f64>,
}

impl PhiVariance {
    /// `dimension<TAB>within_var<TAB>across_var` rows, header included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dimension\twithin_var\tacross_var\n");
        for (i, (wv, av)) in self.within_scene.iter().zip(&self.across_scene).enumerate() {
            out.push_str(&format!("{i}\t{wv}\t{av}\n"));
        }
        out
    }
}

fn per_dimension_variance(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let dims = vectors[0].len();
    let mut var = vec![0.0; dims];
    for d in 0..dims {
        let mean = vectors.iter().map(|v| v[d]).sum::<f64>() / n;
        var[d] = vectors
            .iter()
            .map(|v| (v[d] - mean) * (v[d] - mean))
            .sum::<f64>()
            / n;
    }
    var
}

fn phi_slice_for_layer(
    model: &ModelState,
    image: &crate::tensor::Tensor,
    layer: usize,
) -> Result<Vec<f64>, EvalError> {
    let phi = models::guide(&[as_batch(image)], &model.theta, &model.arch)?;
    let (gamma, beta) = phi.slice(layer)?;
    let mut v = Vec::with_capacity(gamma.len() + beta.len());
    v.extend_from_slice(gamma);
    v.extend_from_slice(beta);
    Ok(v)
}

/// Variance of the predicted parameters for one layer, computed (a) over
/// `n_images` images of the first scene and (b) over one image from each of
/// the first `n_images` scenes.
pub fn phi_variance_analysis(
    model: &ModelState,
    scenes: &[SceneDataset],
    n_images: usize,
    layer: usize,
) -> Result<PhiVariance, EvalError> {
    if model.kind != ModelKind::Guided {
        return Err(EvalError::Model(ModelError::NoGbnLayers));
    }
    if n_images < 2 {
        return Err(EvalError::Insufficient {
            what: "images (need >= 2 for a variance)",
            need: 2,
            got: n_images,
        });
    }
    if scenes.len() < n_images {
        return Err(EvalError::Insufficient {
            what: "scenes",
            need: n_images,
            got: scenes.len(),
        });
    }
    if scenes[0].n_images() < n_images {
        return Err(EvalError::Insufficient {
            what: "images in first scene",
            need: n_images,
            got: scenes[0].n_images(),
        });
    }
    let mut within_vecs = Vec::with_capacity(n_images);
    for i in 0..n_images {
        within_vecs.push(phi_slice_for_layer(model, &scenes[0].images[i], layer)?);
    }
    let mut across_vecs = Vec::with_capacity(n_images);
    for scene in scenes.iter().take(n_images) {
        across_vecs.push(phi_slice_for_layer(model, &scene.images[0], layer)?);
    }
    Ok(PhiVariance {
        layer,
        within_scene: per_dimension_variance(&within_vecs),
        across_scene: per_dimension_variance(&across_vecs),
    })
}
