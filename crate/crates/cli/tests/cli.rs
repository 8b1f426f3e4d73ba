//! Command-surface tests: flags, exit codes, file layouts, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crowdadapt_core::persist;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crowdadapt"))
}

fn run_ok(args: &[&str], cwd: &Path) -> Output {
    let out = bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn crowdadapt");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str], cwd: &Path) -> i32 {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn crowdadapt")
        .status
        .code()
        .expect("exit code")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"{
        "arch": {
            "encoder_channels": [2, 3, 4],
            "decoder_gbn_channels": [4, 3, 2, 2, 2, 2],
            "guiding_channels": [2, 3, 4],
            "n_gbn_layers": 6
        },
        "train": {"epochs": 1, "images_per_episode": 1, "seed": 5},
        "data": {"n_train_scenes": 2},
        "eval": {"k": 1, "trials": 2}
    }"#;
    let path = dir.join("tiny.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn gen_tiny_data(dir: &Path, name: &str, scenes: usize) -> std::path::PathBuf {
    let data = dir.join(name);
    run_ok(
        &[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--scenes",
            &scenes.to_string(),
            "--images-per-scene",
            "3",
            "--size",
            "16x24",
            "--seed",
            "7",
        ],
        dir,
    );
    data
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            out.into(),
            "--scenes".into(),
            "26".into(),
            "--images-per-scene".into(),
            "20".into(),
            "--size".into(),
            "64x96".into(),
            "--seed".into(),
            "7".into(),
        ]
    };
    let to_refs = |v: &[String]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let a1 = to_refs(&args("d1"));
    run_ok(
        &a1.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        dir.path(),
    );
    let a2 = to_refs(&args("d2"));
    run_ok(
        &a2.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        dir.path(),
    );

    // 26 scene directories plus the manifest; 26 * 20 PGM files.
    let d1 = dir.path().join("d1");
    let scene_dirs: Vec<_> = fs::read_dir(&d1)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(scene_dirs.len(), 26);
    let mut pgm_count = 0;
    for entry in &scene_dirs {
        pgm_count += fs::read_dir(entry.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
            .count();
    }
    assert_eq!(pgm_count, 520);

    // Reruns are byte-identical, file by file.
    let d2 = dir.path().join("d2");
    for scene in ["scene_000", "scene_013", "scene_025"] {
        for file in ["annotations.json", "img_0.pgm", "img_19.pgm"] {
            assert_eq!(
                fs::read(d1.join(scene).join(file)).unwrap(),
                fs::read(d2.join(scene).join(file)).unwrap(),
                "{scene}/{file} differs between reruns"
            );
        }
    }
    assert_eq!(
        fs::read(d1.join("manifest.json")).unwrap(),
        fs::read(d2.join("manifest.json")).unwrap()
    );
}

#[test]
fn gen_data_rejects_indivisible_size() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(
        &[
            "gen-data",
            "--out",
            "bad",
            "--scenes",
            "2",
            "--images-per-scene",
            "2",
            "--size",
            "63x96",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(code, 1);
}

#[test]
fn train_writes_checkpoint_and_finite_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    let out = run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "model.ckpt",
        ],
        dir.path(),
    );
    // One `epoch, mean_loss, lr` line per epoch, all finite.
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    let fields: Vec<f64> = lines[0].split(", ").map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields.len(), 3);
    assert!(fields.iter().all(|v| v.is_finite()));
    assert!(dir.path().join("model.ckpt").exists());
    assert!(dir.path().join("model.ckpt.log.json").exists());
}

#[test]
fn baseline_checkpoint_has_no_guiding_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "bn.ckpt",
            "--bn-baseline",
        ],
        dir.path(),
    );
    let (model, _) = persist::load_model(&dir.path().join("bn.ckpt")).unwrap();
    assert!(model.theta.is_empty());
    assert!(model
        .psi
        .entries()
        .iter()
        .all(|(n, _)| !n.starts_with("guide")));
    // And the raw bytes carry no guiding-net array names either.
    let bytes = fs::read(dir.path().join("bn.ckpt")).unwrap();
    let hay = String::from_utf8_lossy(&bytes);
    assert!(!hay.contains("guide.linear.weight"));
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    for out in ["a.ckpt", "b.ckpt"] {
        run_ok(
            &[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out,
            ],
            dir.path(),
        );
    }
    assert_eq!(
        fs::read(dir.path().join("a.ckpt")).unwrap(),
        fs::read(dir.path().join("b.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("a.ckpt.log.json")).unwrap(),
        fs::read(dir.path().join("b.ckpt.log.json")).unwrap()
    );
}

#[test]
fn adapt_writes_deterministic_phi_of_right_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    let scene = data.join("scene_002");
    for out in ["p1.ckpt", "p2.ckpt"] {
        let stdout = run_ok(
            &[
                "adapt",
                "--ckpt",
                "m.ckpt",
                "--scene",
                scene.to_str().unwrap(),
                "--k",
                "1",
                "--out",
                out,
                "--seed",
                "3",
            ],
            dir.path(),
        );
        let text = String::from_utf8(stdout.stdout).unwrap();
        // Per-layer gamma/beta summary: header plus one row per layer.
        assert_eq!(text.lines().count(), 1 + 6);
    }
    assert_eq!(
        fs::read(dir.path().join("p1.ckpt")).unwrap(),
        fs::read(dir.path().join("p2.ckpt")).unwrap()
    );
    let (phi, arch, k, seed) = persist::load_phi(&dir.path().join("p1.ckpt")).unwrap();
    assert_eq!(phi.phi.len(), arch.phi_width());
    assert_eq!((k, seed), (1, 3));
}

#[test]
fn adapt_rejects_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "bn.ckpt",
            "--bn-baseline",
        ],
        dir.path(),
    );
    let scene = data.join("scene_000");
    let out = bin()
        .args([
            "adapt",
            "--ckpt",
            "bn.ckpt",
            "--scene",
            scene.to_str().unwrap(),
            "--k",
            "1",
            "--out",
            "p.ckpt",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("model has no GBN layers"),
        "stderr: {stderr}"
    );
}

#[test]
fn eval_reports_are_reproducible_and_recomputable() {
    let dir = tempfile::tempdir().unwrap();
    // Two held-out scenes: the variance analysis needs at least two.
    let data = gen_tiny_data(dir.path(), "data", 4);
    let cfg = write_tiny_config(dir.path());
    run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    let eval_args = |out: &str| {
        vec![
            "eval".to_string(),
            "--ckpt".into(),
            "m.ckpt".into(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--k".into(),
            "1".into(),
            "--trials".into(),
            "2".into(),
            "--seed".into(),
            "11".into(),
            "--out".into(),
            out.into(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
        ]
    };
    for out in ["r1", "r2"] {
        let args = eval_args(out);
        run_ok(
            &args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            dir.path(),
        );
    }
    let j1 = fs::read(dir.path().join("r1.json")).unwrap();
    let j2 = fs::read(dir.path().join("r2.json")).unwrap();
    assert_eq!(
        j1, j2,
        "same invocation must produce byte-identical reports"
    );

    let report: serde_json::Value = serde_json::from_slice(&j1).unwrap();
    assert_eq!(report["config"]["k"], 1);
    assert_eq!(report["config"]["trials"], 2);
    // Aggregate equals the recomputation from per-trial entries.
    let trials = report["per_trial"].as_array().unwrap();
    let mean: f64 = trials
        .iter()
        .map(|t| t["mae"].as_f64().unwrap())
        .sum::<f64>()
        / trials.len() as f64;
    let stored = report["aggregate"]["mae_mean"].as_f64().unwrap();
    assert!((mean - stored).abs() <= 1e-12);
    // The parameter-variance TSV exists for guided checkpoints.
    let tsv = fs::read_to_string(dir.path().join("r1_phi_variance.tsv")).unwrap();
    assert!(tsv.starts_with("dimension\twithin_var\tacross_var\n"));
}

#[test]
fn eval_records_k5_in_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    run_ok(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    // k=2 here (scenes have 3 images; k must stay below the image count).
    run_ok(
        &[
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            data.to_str().unwrap(),
            "--k",
            "2",
            "--trials",
            "1",
            "--seed",
            "0",
            "--out",
            "rk",
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("rk.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["k"], 2);
}

#[test]
fn gradcheck_passes_and_zero_tolerance_fails_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&["gradcheck", "--seed", "1", "--tol", "1e-4"], dir.path());
    let stdout = String::from_utf8(out.stdout).unwrap();
    // The report lists per-op worst-case errors.
    assert!(stdout.contains("op\tmax_rel_err\tstatus"));
    assert!(stdout.contains("conv2d"));
    assert!(stdout.contains("episode_loss"));
    assert!(stdout.lines().filter(|l| l.ends_with("pass")).count() >= 12);

    let code = exit_code(&["gradcheck", "--seed", "1", "--tol", "0"], dir.path());
    assert_eq!(code, 3, "an impossible tolerance must fail verification");
}

#[test]
fn sweep_emits_tables_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    // gbn-layers sweep needs >= 6 decoder blocks and a test split.
    let data = gen_tiny_data(dir.path(), "data", 3);
    let cfg = write_tiny_config(dir.path());
    let args = [
        "report",
        "--sweep",
        "gbn-layers",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "sweep",
    ];
    run_ok(&args, dir.path());
    let tsv = fs::read_to_string(dir.path().join("sweep/gbn_layers_sweep.tsv")).unwrap();
    assert_eq!(
        tsv.lines().count(),
        5,
        "header plus one row per grid point:\n{tsv}"
    );
    assert!(tsv.starts_with("gbn_layers\tmae_mean"));
    for p in [1, 2, 4, 6] {
        assert!(dir
            .path()
            .join(format!("sweep/gbn_layers_{p}.json"))
            .exists());
    }
    // Rerun: every cell is skipped, the table is reproduced byte-identically.
    let before = fs::read(dir.path().join("sweep/gbn_layers_sweep.tsv")).unwrap();
    let out = run_ok(&args, dir.path());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        stdout.matches("skip gbn_layers=").count(),
        4,
        "stdout: {stdout}"
    );
    let after = fs::read(dir.path().join("sweep/gbn_layers_sweep.tsv")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn scenes_sweep_table_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    // 21 scenes so the largest grid point (20 train scenes) still leaves
    // a held-out test scene.
    let data = gen_tiny_data(dir.path(), "data", 21);
    let cfg = r#"{
        "arch": {
            "encoder_channels": [2, 3, 4],
            "decoder_gbn_channels": [4, 3, 2, 2, 2, 2],
            "guiding_channels": [2, 3, 4],
            "n_gbn_layers": 6
        },
        "train": {"epochs": 1, "images_per_episode": 1, "seed": 5},
        "data": {"n_train_scenes": 20},
        "eval": {"k": 1, "trials": 1}
    }"#;
    let cfg_path = dir.path().join("sweep.json");
    fs::write(&cfg_path, cfg).unwrap();
    run_ok(
        &[
            "report",
            "--sweep",
            "scenes",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            "sweep",
        ],
        dir.path(),
    );
    let tsv = fs::read_to_string(dir.path().join("sweep/scenes_sweep.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5, "{tsv}");
    let values: Vec<&str> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(values, vec!["5", "10", "15", "20"]);
}

#[test]
fn missing_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(
        &[
            "eval",
            "--ckpt",
            "nope.ckpt",
            "--data",
            "nope",
            "--k",
            "1",
            "--trials",
            "1",
            "--seed",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(code, 2);
}
