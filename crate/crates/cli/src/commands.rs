//! The gen-data / train / adapt / eval / report commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crowdadapt_core::config::RunConfig;
use crowdadapt_core::eval::{
    aggregate_delta, phi_variance_analysis, run_adaptation_eval, run_baseline_eval, EvalAggregate,
    EvalProtocol, EvalReport,
};
use crowdadapt_core::models::{self, ModelKind, ModelState};
use crowdadapt_core::norm::GbnParams;
use crowdadapt_core::persist;
use crowdadapt_core::scene::{self, io as scene_io, SceneDataset};
use crowdadapt_core::seeding;
use crowdadapt_core::train::{train, TrainLog};

use rand::Rng;

use crate::CliError;

// ---------------------------------------------------------------------------
// gen-data

pub struct GenDataArgs {
    pub out: PathBuf,
    pub scenes: usize,
    pub images_per_scene: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Render the synthetic multi-scene dataset to disk.
pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.scenes == 0 {
        return Err(CliError::Validation("need at least one scene".into()));
    }
    if args.images_per_scene < 2 {
        return Err(CliError::Validation(
            "need at least 2 images per scene".into(),
        ));
    }
    if args.height == 0 || args.width == 0 || args.height % 8 != 0 || args.width % 8 != 0 {
        return Err(CliError::Validation(format!(
            "size {}x{} must be positive and divisible by 8",
            args.height, args.width
        )));
    }
    let scenes = scene::sample_benchmark(
        args.seed,
        args.scenes,
        args.images_per_scene,
        (args.height, args.width),
    )?;
    let manifest = scene_io::DatasetManifest {
        seed: args.seed,
        images_per_scene: args.images_per_scene,
        height: args.height,
        width: args.width,
        scene_ids: scenes.iter().map(|s| s.params.scene_id.clone()).collect(),
    };
    scene_io::save_dataset(&args.out, &scenes, &manifest)?;
    println!(
        "wrote {} scenes x {} images ({}x{}) to {}",
        args.scenes,
        args.images_per_scene,
        args.height,
        args.width,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub bn_baseline: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_split(
    data: &Path,
    cfg: &RunConfig,
) -> Result<(Vec<SceneDataset>, Vec<SceneDataset>), CliError> {
    let (all_scenes, _) = scene_io::load_dataset(data, &cfg.data.density)?;
    if cfg.data.n_train_scenes >= all_scenes.len() {
        return Err(CliError::Validation(format!(
            "dataset has {} scenes; cannot hold out a test split after {} train scenes",
            all_scenes.len(),
            cfg.data.n_train_scenes
        )));
    }
    Ok(scene::split_scenes(
        all_scenes,
        cfg.data.n_train_scenes,
        cfg.data.split_seed,
    )?)
}

/// Train a model and persist checkpoint plus log. Returns the trained model.
pub fn train_model(args: &TrainArgs) -> Result<(ModelState, TrainLog), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let (train_scenes, _) = load_split(&args.data, &cfg)?;
    let model = if args.bn_baseline {
        models::build_baseline_model(&cfg.arch, cfg.train.seed)?
    } else {
        models::build_model(&cfg.arch, cfg.train.seed)?
    };
    let (model, log) = train(&train_scenes, &cfg.train, model)?;
    persist::save_model(&args.out, &model, Some(&cfg.train))?;
    let log_json = serde_json::to_string_pretty(&log).expect("log serializes");
    fs::write(log_path(&args.out), log_json + "\n")?;
    print!("{}", log.text_lines());
    eprintln!(
        "trained {} epochs in {:.1}s; checkpoint at {}",
        log.epochs.len(),
        log.wall_clock_secs,
        args.out.display()
    );
    Ok((model, log))
}

pub fn log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log.json");
    ckpt.with_file_name(name)
}

// ---------------------------------------------------------------------------
// adapt

pub struct AdaptArgs {
    pub ckpt: PathBuf,
    pub scene: PathBuf,
    pub k: usize,
    pub out: PathBuf,
    pub seed: u64,
}

/// Predict the per-scene normalization parameters from K unlabeled images and
/// write them as a single-array checkpoint file.
pub fn adapt_scene(args: &AdaptArgs) -> Result<GbnParams, CliError> {
    if args.k == 0 {
        return Err(CliError::Validation("k must be >= 1".into()));
    }
    let (model, _) = persist::load_model(&args.ckpt)?;
    if model.kind != ModelKind::Guided {
        return Err(CliError::Validation("model has no GBN layers".into()));
    }
    let dataset = scene_io::load_scene(&args.scene, &Default::default())?;
    if args.k > dataset.n_images() {
        return Err(CliError::Validation(format!(
            "k = {} exceeds the scene's {} images",
            args.k,
            dataset.n_images()
        )));
    }
    let mut rng = seeding::stream(args.seed, "adapt/z");
    let mut pool: Vec<usize> = (0..dataset.n_images()).collect();
    for i in 0..args.k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(args.k);
    let z_images: Vec<crowdadapt_core::Tensor> = pool
        .iter()
        .map(|&i| crowdadapt_core::train::as_batch(&dataset.images[i]))
        .collect();
    let phi = models::adapt(&model, &z_images)?;
    persist::save_phi(&args.out, &phi, &model.arch, args.k, args.seed)?;
    println!("layer\tchannels\tgamma_mean\tgamma_min\tgamma_max\tbeta_mean\tbeta_min\tbeta_max");
    for (pos, &(layer, d)) in phi.layout.entries().iter().enumerate() {
        let (gamma, beta) = phi
            .slice(pos)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        let (gm, gl, gh) = stats(gamma);
        let (bm, bl, bh) = stats(beta);
        println!("{layer}\t{d}\t{gm:.6}\t{gl:.6}\t{gh:.6}\t{bm:.6}\t{bl:.6}\t{bh:.6}");
    }
    Ok(phi)
}

// ---------------------------------------------------------------------------
// eval

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub baseline_ckpt: Option<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

/// Side-by-side comparison written when `--baseline-ckpt` is given.
#[derive(Debug, Serialize)]
pub struct ComparisonReport {
    pub ours: EvalReport,
    pub baseline: EvalReport,
    /// `ours - baseline` aggregate deltas; negative MAE/RMSE means better.
    pub delta: EvalAggregate,
}

fn eval_one(
    model: &ModelState,
    scenes: &[SceneDataset],
    protocol: &EvalProtocol,
) -> Result<EvalReport, CliError> {
    Ok(match model.kind {
        ModelKind::Guided => run_adaptation_eval(model, scenes, protocol)?,
        ModelKind::BnBaseline => run_baseline_eval(model, scenes, protocol)?,
    })
}

/// Evaluate a checkpoint on the held-out test scenes. Returns the main report.
pub fn eval_model(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let (_, test_scenes) = load_split(&args.data, &cfg)?;
    let (model, _) = persist::load_model(&args.ckpt)?;
    let protocol = EvalProtocol {
        k: args.k,
        trials: args.trials,
        seed: args.seed,
        ..Default::default()
    };
    let report = eval_one(&model, &test_scenes, &protocol)?;
    let json = match &args.baseline_ckpt {
        Some(baseline_path) => {
            let (baseline, _) = persist::load_model(baseline_path)?;
            if baseline.kind != ModelKind::BnBaseline {
                return Err(CliError::Validation(
                    "--baseline-ckpt must hold a bn_baseline checkpoint".into(),
                ));
            }
            let baseline_report = eval_one(&baseline, &test_scenes, &protocol)?;
            let comparison = ComparisonReport {
                delta: aggregate_delta(&report.aggregate, &baseline_report.aggregate),
                ours: report.clone(),
                baseline: baseline_report,
            };
            serde_json::to_string_pretty(&comparison).expect("report serializes")
        }
        None => serde_json::to_string_pretty(&report).expect("report serializes"),
    };
    fs::write(report_json_path(&args.out), json + "\n")?;
    // The parameter-variance analysis only applies to the guided model.
    if model.kind == ModelKind::Guided {
        let n = test_scenes
            .len()
            .min(test_scenes.iter().map(|s| s.n_images()).min().unwrap_or(0))
            .min(10);
        if n >= 2 {
            let layer = model.arch.n_gbn_layers - 1;
            let pv = phi_variance_analysis(&model, &test_scenes, n, layer)?;
            fs::write(phi_variance_path(&args.out), pv.to_tsv())?;
        }
    }
    println!(
        "mae {:.4} +- {:.4}, rmse {:.4} +- {:.4} over {} trials",
        report.aggregate.mae_mean,
        report.aggregate.mae_std,
        report.aggregate.rmse_mean,
        report.aggregate.rmse_std,
        report.per_trial.len()
    );
    Ok(report)
}

pub fn report_json_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    prefix.with_file_name(name)
}

pub fn phi_variance_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push("_phi_variance.tsv");
    prefix.with_file_name(name)
}

// ---------------------------------------------------------------------------
// report (ablation sweeps)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Scenes,
    GbnLayers,
}

impl std::str::FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scenes" => Ok(SweepKind::Scenes),
            "gbn-layers" => Ok(SweepKind::GbnLayers),
            other => Err(format!(
                "unknown sweep {other:?} (expected scenes|gbn-layers)"
            )),
        }
    }
}

pub struct ReportArgs {
    pub sweep: SweepKind,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct SweepCell {
    sweep_value: usize,
    mae_mean: f64,
    mae_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
}

/// Train/evaluate across a sweep grid, one JSON cell file per grid point
/// (existing cells are reused, so interrupted sweeps resume) plus a TSV table.
pub fn run_sweep(args: &ReportArgs) -> Result<PathBuf, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let (train_scenes, test_scenes) = load_split(&args.data, &cfg)?;
    fs::create_dir_all(&args.out)?;
    let (grid, tag): (Vec<usize>, &str) = match args.sweep {
        SweepKind::Scenes => (vec![5, 10, 15, 20], "scenes"),
        SweepKind::GbnLayers => (vec![1, 2, 4, 6], "gbn_layers"),
    };
    let mut cells = Vec::with_capacity(grid.len());
    for &value in &grid {
        let cell_path = args.out.join(format!("{tag}_{value}.json"));
        if cell_path.exists() {
            let text = fs::read_to_string(&cell_path)?;
            let cell: SweepCell = serde_json::from_str(&text)
                .map_err(|e| CliError::Io(format!("{}: {e}", cell_path.display())))?;
            println!("skip {tag}={value} (cell file present)");
            cells.push(cell);
            continue;
        }
        let (arch, subset) = match args.sweep {
            SweepKind::Scenes => {
                if value > train_scenes.len() {
                    return Err(CliError::Validation(format!(
                        "sweep needs {value} train scenes, dataset split has {}",
                        train_scenes.len()
                    )));
                }
                (cfg.arch.clone(), &train_scenes[..value])
            }
            SweepKind::GbnLayers => {
                if value > cfg.arch.decoder_gbn_channels.len() {
                    return Err(CliError::Validation(format!(
                        "sweep needs {value} decoder blocks, arch has {}",
                        cfg.arch.decoder_gbn_channels.len()
                    )));
                }
                let arch = crowdadapt_core::models::ArchConfig {
                    n_gbn_layers: value,
                    ..cfg.arch.clone()
                };
                (arch, &train_scenes[..])
            }
        };
        let model = models::build_model(&arch, cfg.train.seed)?;
        let (model, _) = train(subset, &cfg.train, model)?;
        let report = run_adaptation_eval(&model, &test_scenes, &cfg.eval)?;
        let cell = SweepCell {
            sweep_value: value,
            mae_mean: report.aggregate.mae_mean,
            mae_std: report.aggregate.mae_std,
            rmse_mean: report.aggregate.rmse_mean,
            rmse_std: report.aggregate.rmse_std,
        };
        let json = serde_json::to_string_pretty(&cell).expect("cell serializes");
        fs::write(&cell_path, json + "\n")?;
        println!("done {tag}={value}: mae {:.4}", cell.mae_mean);
        cells.push(cell);
    }
    let mut tsv = format!("{tag}\tmae_mean\tmae_std\trmse_mean\trmse_std\n");
    for c in &cells {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            c.sweep_value, c.mae_mean, c.mae_std, c.rmse_mean, c.rmse_std
        ));
    }
    let tsv_path = args.out.join(format!("{tag}_sweep.tsv"));
    fs::write(&tsv_path, tsv)?;
    Ok(tsv_path)
}
