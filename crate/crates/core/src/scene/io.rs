//! On-disk dataset layout.
//!
//! `<root>/<scene_id>/img_<k>.pgm` (binary P5, 8-bit) plus
//! `<root>/<scene_id>/annotations.json` with the scene params and per-image
//! head coordinates. A `manifest.json` at the root lists scene ids and the
//! generation seed. Density maps are derived on load, never stored.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DensityConfig, SceneDataset, SceneError, SceneParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub file: String,
    pub heads: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub params: SceneParams,
    pub images: Vec<ImageAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub images_per_scene: usize,
    pub height: usize,
    pub width: usize,
    pub scene_ids: Vec<String>,
}

fn malformed(path: &Path, msg: impl Into<String>) -> SceneError {
    SceneError::Malformed {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Write a `[1, H, W]` tensor with values in [0, 1] as binary PGM (maxval 255).
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<(), SceneError> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(malformed(
            path,
            format!("expected [1, H, W] image, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = Vec::with_capacity(h * w + 32);
    write!(&mut buf, "P5\n{w} {h}\n255\n")?;
    for &v in img.data() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read a binary PGM written by [`write_pgm`] back into a `[1, H, W]` tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor, SceneError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    // Header: magic, width, height, maxval; whitespace separated with
    // optional '#' comment lines.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(malformed(path, "truncated header"));
        }
        if bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| malformed(path, "non-UTF8 header"))?
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(malformed(
            path,
            format!("expected P5 magic, got {}", fields[0]),
        ));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| malformed(path, "bad width"))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| malformed(path, "bad height"))?;
    if fields[3] != "255" {
        return Err(malformed(
            path,
            format!("expected maxval 255, got {}", fields[3]),
        ));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(malformed(path, "truncated pixel data"));
    }
    let data: Vec<f64> = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Tensor::new(&[1, h, w], data)?)
}

/// Write one scene directory: PGM images plus annotations.json.
pub fn save_scene(dir: &Path, dataset: &SceneDataset) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(dataset.n_images());
    for (k, (img, heads)) in dataset.images.iter().zip(&dataset.heads).enumerate() {
        let file = format!("img_{k}.pgm");
        write_pgm(&dir.join(&file), img)?;
        images.push(ImageAnnotation {
            file,
            heads: heads.iter().map(|&(x, y)| [x, y]).collect(),
        });
    }
    let ann = SceneAnnotations {
        scene_id: dataset.params.scene_id.clone(),
        params: dataset.params.clone(),
        images,
    };
    let json = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    fs::write(dir.join("annotations.json"), json + "\n")?;
    Ok(())
}

/// Load one scene directory, deriving density maps with `cfg`.
pub fn load_scene(dir: &Path, cfg: &DensityConfig) -> Result<SceneDataset, SceneError> {
    let ann_path = dir.join("annotations.json");
    let ann: SceneAnnotations = serde_json::from_str(&fs::read_to_string(&ann_path)?)
        .map_err(|e| malformed(&ann_path, e.to_string()))?;
    let mut images = Vec::with_capacity(ann.images.len());
    let mut heads = Vec::with_capacity(ann.images.len());
    for img_ann in &ann.images {
        images.push(read_pgm(&dir.join(&img_ann.file))?);
        heads.push(img_ann.heads.iter().map(|&[x, y]| (x, y)).collect());
    }
    SceneDataset::from_parts(ann.params, images, heads, cfg)
}

/// Write a multi-scene dataset with its manifest.
pub fn save_dataset(
    root: &Path,
    scenes: &[SceneDataset],
    manifest: &DatasetManifest,
) -> Result<(), SceneError> {
    fs::create_dir_all(root)?;
    for scene in scenes {
        save_scene(&root.join(&scene.params.scene_id), scene)?;
    }
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialize");
    fs::write(root.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Load every scene listed in the manifest, in manifest order.
pub fn load_dataset(
    root: &Path,
    cfg: &DensityConfig,
) -> Result<(Vec<SceneDataset>, DatasetManifest), SceneError> {
    let manifest_path = root.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| malformed(&manifest_path, e.to_string()))?;
    let mut scenes = Vec::with_capacity(manifest.scene_ids.len());
    for id in &manifest.scene_ids {
        scenes.push(load_scene(&root.join(id), cfg)?);
    }
    Ok((scenes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, SceneParams};

    fn sample_scene(id: &str) -> crate::scene::SceneDataset {
        let params = SceneParams {
            scene_id: id.to_string(),
            bg_seed: 5,
            brightness: 0.05,
            contrast: 1.1,
            base_radius: 2.5,
            perspective_slope: 2.0,
            count_range: (4, 9),
            blob_intensity: 0.5,
        };
        gen_scene(&params, 3, (32, 40), 9).unwrap()
    }

    #[test]
    fn pgm_roundtrip_quantizes_once() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_scene("pgm");
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &ds.images[0]).unwrap();
        let loaded = read_pgm(&path).unwrap();
        assert_eq!(loaded.shape(), ds.images[0].shape());
        for (a, b) in loaded.data().iter().zip(ds.images[0].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Re-encoding the quantized image is lossless.
        let path2 = dir.path().join("img2.pgm");
        write_pgm(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn scene_roundtrip_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_scene("round");
        save_scene(dir.path(), &ds).unwrap();
        let loaded = load_scene(dir.path(), &crate::scene::DensityConfig::default()).unwrap();
        assert_eq!(loaded.params, ds.params);
        assert_eq!(loaded.heads, ds.heads);
        assert_eq!(loaded.n_images(), ds.n_images());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = sample_scene("bytes");
        save_scene(a.path(), &ds).unwrap();
        save_scene(b.path(), &ds).unwrap();
        for name in ["annotations.json", "img_0.pgm", "img_1.pgm", "img_2.pgm"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_follows_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![sample_scene("s1"), sample_scene("s0")];
        let manifest = DatasetManifest {
            seed: 4,
            images_per_scene: 3,
            height: 32,
            width: 40,
            scene_ids: vec!["s1".into(), "s0".into()],
        };
        save_dataset(dir.path(), &scenes, &manifest).unwrap();
        let (loaded, m2) =
            load_dataset(dir.path(), &crate::scene::DensityConfig::default()).unwrap();
        assert_eq!(m2.scene_ids, manifest.scene_ids);
        assert_eq!(loaded[0].params.scene_id, "s1");
        assert_eq!(loaded[1].params.scene_id, "s0");
    }

    #[test]
    fn read_pgm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P6\n2 2\n255\n0000").unwrap();
        assert!(matches!(read_pgm(&path), Err(SceneError::Malformed { .. })));
        fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_pgm(&path), Err(SceneError::Malformed { .. })));
    }
}
