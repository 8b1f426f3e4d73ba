//! Shared fixtures for the pipeline benchmarks.

use crowdadapt_core::models::{build_model, ArchConfig, ModelState};
use crowdadapt_core::scene::{gen_scene, SceneDataset, SceneParams};

/// Default-architecture model plus one benchmark-sized scene.
pub fn default_fixture() -> (ModelState, SceneDataset) {
    let arch = ArchConfig::default();
    let model = build_model(&arch, 7).expect("model builds");
    let params = SceneParams {
        scene_id: "bench".to_string(),
        bg_seed: 3,
        brightness: 0.05,
        contrast: 1.1,
        base_radius: 3.0,
        perspective_slope: 1.5,
        count_range: (10, 20),
        blob_intensity: 0.6,
    };
    let scene = gen_scene(&params, 6, (64, 96), 11).expect("scene renders");
    (model, scene)
}
