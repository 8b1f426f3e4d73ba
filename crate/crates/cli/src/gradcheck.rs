//! The gradcheck command: finite-difference verification of every
//! differentiable op and of the full episode loss, end to end.

use crowdadapt_core::models::{self, ArchConfig, ModelState};
use crowdadapt_core::scene::{gen_scene, SceneDataset, SceneParams};
use crowdadapt_core::seeding;
use crowdadapt_core::tensor::{
    finite_diff_check, graph_fd_check, Graph, NodeId, Tensor, TensorError,
};
use crowdadapt_core::train::build_guided_episode;

use rand::Rng;
use serde::Serialize;

use crate::CliError;

pub struct GradcheckArgs {
    pub seed: u64,
    pub tol: f64,
}

#[derive(Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = String::from("op\tmax_rel_err\tstatus\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{}\t{:.3e}\t{}\n",
                c.op,
                c.max_rel_err,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape consistent")
}

/// Push values away from zero so ReLU stays locally linear under +-h.
fn nudge_from_kinks(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v += 2.0 * margin;
        }
    }
}

/// Enforce a top-2 gap in every disjoint k2 s2 pooling window.
fn separate_pool_windows(t: &mut Tensor, channels: usize, h: usize, w: usize) {
    for bc in 0..channels {
        for wi in 0..h / 2 {
            for wj in 0..w / 2 {
                let idxs: Vec<usize> = (0..2)
                    .flat_map(|dy| {
                        (0..2).map(move |dxw| bc * h * w + (wi * 2 + dy) * w + (wj * 2 + dxw))
                    })
                    .collect();
                let data = t.data_mut();
                let max_idx = *idxs
                    .iter()
                    .max_by(|&&a, &&b| data[a].partial_cmp(&data[b]).expect("finite"))
                    .expect("window non-empty");
                let second = idxs
                    .iter()
                    .filter(|&&i| i != max_idx)
                    .map(|&i| data[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if data[max_idx] - second < 0.05 {
                    data[max_idx] = second + 0.1;
                }
            }
        }
    }
}

struct Sweep<'a> {
    seed: u64,
    tol: f64,
    checks: &'a mut Vec<OpCheck>,
}

impl Sweep<'_> {
    fn run<F>(&mut self, name: &str, trials: usize, mut case: F)
    where
        F: FnMut(&mut seeding::ChaCha8Rng) -> (Vec<Tensor>, BuildFn),
    {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = seeding::stream(self.seed, &format!("gradcheck/{name}/{trial}"));
            let (params, build) = case(&mut rng);
            let report = graph_fd_check(|g, ids| build(g, ids), &params, 1e-5, self.tol);
            worst = worst.max(report.max_rel_err());
        }
        self.checks.push(OpCheck {
            op: name.to_string(),
            max_rel_err: worst,
            passed: worst < self.tol,
        });
    }
}

type BuildFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>>;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        encoder_channels: vec![2, 3, 4],
        decoder_gbn_channels: vec![4, 3, 2, 2, 2, 2],
        guiding_channels: vec![2, 3, 4],
        n_gbn_layers: 6,
        ..ArchConfig::default()
    }
}

fn gradcheck_scene(seed: u64) -> SceneDataset {
    let params = SceneParams {
        scene_id: "gradcheck".to_string(),
        bg_seed: seed ^ 0x9E37_79B9,
        brightness: -0.05,
        contrast: 1.05,
        base_radius: 2.5,
        perspective_slope: 1.5,
        count_range: (3, 6),
        blob_intensity: 0.55,
    };
    gen_scene(&params, 3, (16, 24), seed).expect("valid scene params")
}

/// Jitter all parameters off the symmetric init point, where pre-activations
/// of exactly 0.0 would sit on ReLU kinks and invalidate central differences.
fn generic_point_model(arch: &ArchConfig, seed: u64) -> Result<ModelState, CliError> {
    let mut model = models::build_model(arch, seed)?;
    let mut rng = seeding::stream(seed, "gradcheck-jitter");
    for t in model.trainable_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    Ok(model)
}

fn episode_check(seed: u64, tol: f64) -> Result<OpCheck, CliError> {
    let arch = tiny_arch();
    let model = generic_point_model(&arch, seed)?;
    let scene = gradcheck_scene(seed.wrapping_add(41));
    let labeled = vec![1usize, 2usize];
    // Scale to a mean-style loss: keeps f64 cancellation noise in the
    // difference quotient well under the relative-error floor.
    let scale = 1.0 / (labeled.len() * 2 * 3 * 64) as f64;
    let params: Vec<Tensor> = model
        .psi
        .entries()
        .iter()
        .chain(model.theta.entries())
        .map(|(_, t)| t.clone())
        .collect();
    let report = finite_diff_check(
        |ps: &[Tensor]| {
            let mut m = model.clone();
            let mut slots = m.trainable_mut();
            for (slot, src) in slots.iter_mut().zip(ps) {
                slot.data_mut().copy_from_slice(src.data());
            }
            drop(slots);
            let mut episode =
                build_guided_episode(&m, &scene, 0, &labeled, true).expect("episode builds");
            let scaled = episode.graph.scale(episode.loss, scale);
            let mut grads = episode.graph.backward(scaled).expect("scalar loss");
            let value = episode.graph.value(scaled)[0];
            let per_param = episode
                .psi_nodes
                .iter()
                .chain(&episode.theta_nodes)
                .map(|&id| grads.take(id).expect("trainable leaf gradient"))
                .collect();
            (value, per_param)
        },
        &params,
        1e-5,
        tol,
    );
    Ok(OpCheck {
        op: "episode_loss (guide -> gbn -> counting net)".to_string(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
    })
}

/// Check every differentiable op and the end-to-end loss; runtime is a few
/// seconds on one CPU core.
pub fn run_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport, CliError> {
    let mut checks = Vec::new();
    let mut sweep = Sweep {
        seed: args.seed,
        tol: args.tol,
        checks: &mut checks,
    };

    sweep.run("conv2d (s1 p0 d1)", 20, |rng| {
        let params = vec![
            rand_tensor(&[1, 2, 5, 6], rng),
            rand_tensor(&[3, 2, 3, 3], rng),
            rand_tensor(&[3], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2], 1, 0, 1)?;
                Ok(g.sum(c))
            }),
        )
    });
    sweep.run("conv2d (s1 p2 d2)", 20, |rng| {
        let params = vec![
            rand_tensor(&[1, 2, 8, 8], rng),
            rand_tensor(&[3, 2, 3, 3], rng),
            rand_tensor(&[3], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2], 1, 2, 2)?;
                Ok(g.sum(c))
            }),
        )
    });
    sweep.run("conv2d (k4 s2 p1)", 20, |rng| {
        let params = vec![
            rand_tensor(&[1, 2, 9, 11], rng),
            rand_tensor(&[3, 2, 4, 4], rng),
            rand_tensor(&[3], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2], 2, 1, 1)?;
                Ok(g.sum(c))
            }),
        )
    });
    sweep.run("conv2d (k7 s1 p3)", 10, |rng| {
        let params = vec![
            rand_tensor(&[1, 1, 9, 9], rng),
            rand_tensor(&[2, 1, 7, 7], rng),
            rand_tensor(&[2], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let c = g.conv2d(ids[0], ids[1], ids[2], 1, 3, 1)?;
                Ok(g.sum(c))
            }),
        )
    });
    sweep.run("relu", 20, |rng| {
        let mut x = rand_tensor(&[40], rng);
        nudge_from_kinks(&mut x, 1e-3);
        (
            vec![x],
            Box::new(|g, ids| {
                let r = g.relu(ids[0]);
                let sq = g.sq_diff_sum(r, ids[0])?;
                Ok(sq)
            }),
        )
    });
    sweep.run("maxpool2d (k2 s2)", 20, |rng| {
        let mut x = rand_tensor(&[1, 2, 4, 4], rng);
        separate_pool_windows(&mut x, 2, 4, 4);
        (
            vec![x],
            Box::new(|g, ids| {
                let p = g.maxpool2d(ids[0], 2, 2)?;
                Ok(g.sum(p))
            }),
        )
    });
    sweep.run("global_avg_pool", 20, |rng| {
        (
            vec![rand_tensor(&[2, 3, 4, 5], rng)],
            Box::new(|g, ids| {
                let p = g.global_avg_pool(ids[0])?;
                Ok(g.sum(p))
            }),
        )
    });
    sweep.run("linear", 20, |rng| {
        let params = vec![
            rand_tensor(&[2, 4], rng),
            rand_tensor(&[5, 4], rng),
            rand_tensor(&[5], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2])?;
                Ok(g.sum(y))
            }),
        )
    });
    sweep.run("channel_norm (batch stats)", 20, |rng| {
        let params = vec![
            rand_tensor(&[1, 3, 4, 5], rng),
            rand_tensor(&[3], rng),
            rand_tensor(&[3], rng),
        ];
        (
            params,
            Box::new(|g, ids| {
                let n = g.channel_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = g.sq_diff_sum(n, ids[0])?;
                Ok(sq)
            }),
        )
    });
    sweep.run("channel_norm (running stats)", 20, |rng| {
        let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let params = vec![
            rand_tensor(&[1, 3, 4, 5], rng),
            rand_tensor(&[3], rng),
            rand_tensor(&[3], rng),
        ];
        (
            params,
            Box::new(move |g, ids| {
                let n = g.channel_norm_fixed(ids[0], ids[1], ids[2], 1e-5, &mean, &var)?;
                Ok(g.sum(n))
            }),
        )
    });
    sweep.run("slice/reshape/scale/add", 20, |rng| {
        (
            vec![rand_tensor(&[10], rng)],
            Box::new(|g, ids| {
                let a = g.slice(ids[0], 0, 4)?;
                let b = g.slice(ids[0], 4, 4)?;
                let s = g.scale(a, 1.7);
                let sum2 = g.add(s, b)?;
                let flat = g.reshape(sum2, &[2, 2])?;
                Ok(g.sum(flat))
            }),
        )
    });
    sweep.run("sq_diff_sum", 20, |rng| {
        let params = vec![rand_tensor(&[12], rng), rand_tensor(&[12], rng)];
        (params, Box::new(|g, ids| g.sq_diff_sum(ids[0], ids[1])))
    });

    checks.push(episode_check(args.seed, args.tol)?);
    Ok(GradcheckReport {
        tol: args.tol,
        checks,
    })
}
