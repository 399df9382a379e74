//! Scene documents: a JSON header plus one PPM per ground-truth view.
//!
//! The generator is deterministic, so `(spec, seed)` fully determines the
//! scene; loading regenerates it and checks the stored id and images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{ppm, IoError};
use crate::scene::{generate_scene, Camera, SceneBundle, SceneSpec};

pub const FORMAT: &str = "g4ds-scene";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub camera: usize,
    pub timestep: usize,
    /// Relative to the directory holding the JSON document.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub format: String,
    pub version: u32,
    /// Scene id as 16 hex digits.
    pub id: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
    pub images: Vec<ImageRef>,
}

fn image_name(camera: usize, k: usize) -> String {
    format!("images/cam{camera:02}_t{k:02}.ppm")
}

/// Writes `path` and the `images/` directory next to it.
pub fn save_scene(path: &Path, bundle: &SceneBundle) -> Result<(), IoError> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let nt = bundle.meta.timestamps.len();
    let mut images = Vec::new();
    for c in 0..bundle.meta.cameras.len() {
        for k in 0..nt {
            let rel = image_name(c, k);
            ppm::write(&dir.join(&rel), bundle.image(c, k))?;
            images.push(ImageRef { camera: c, timestep: k, path: rel });
        }
    }
    let doc = SceneDocument {
        format: FORMAT.into(),
        version: VERSION,
        id: format!("{:016x}", bundle.meta.id),
        seed: bundle.seed,
        spec: bundle.spec.clone(),
        cameras: bundle.meta.cameras.clone(),
        timestamps: bundle.meta.timestamps.clone(),
        images,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
    text.push('\n');
    crate::io::write_file(path, text.as_bytes())
}

pub fn read_document(path: &Path) -> Result<SceneDocument, IoError> {
    let bytes = crate::io::read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT) => {}
        other => {
            return Err(IoError::Magic { expected: FORMAT, found: other.unwrap_or("").as_bytes().to_vec() });
        }
    }
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| IoError::Missing("version".into()))?;
    if version != VERSION as u64 {
        return Err(IoError::Version { found: version as u32, supported: VERSION });
    }
    serde_json::from_value(value).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
}

/// Loads a scene document. The ground truth comes from the referenced PPM
/// files, which must match the regenerated scene to 8-bit precision.
pub fn load_scene(path: &Path) -> Result<SceneBundle, IoError> {
    let doc = read_document(path)?;
    let mut bundle = generate_scene(&doc.spec, doc.seed).map_err(|e| IoError::Invalid(e.to_string()))?;
    let id = format!("{:016x}", bundle.meta.id);
    if id != doc.id {
        return Err(IoError::Invalid(format!("scene id {} does not match regenerated {id}", doc.id)));
    }
    let nt = bundle.meta.timestamps.len();
    if doc.images.len() != bundle.ground_truth.len() {
        return Err(IoError::Invalid(format!(
            "scene lists {} images, expected {}",
            doc.images.len(),
            bundle.ground_truth.len()
        )));
    }
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for r in &doc.images {
        if r.camera >= bundle.meta.cameras.len() || r.timestep >= nt {
            return Err(IoError::Invalid(format!("image {} refers to a missing view", r.path)));
        }
        let img = ppm::read(&dir.join(&r.path))?;
        let slot = &mut bundle.ground_truth[r.camera * nt + r.timestep];
        if img.shape() != slot.shape() {
            return Err(IoError::Invalid(format!("{}: shape {:?}, expected {:?}", r.path, img.shape(), slot.shape())));
        }
        if img.max_abs_diff(slot) > 0.5 / 255.0 {
            return Err(IoError::Invalid(format!("{} differs from the regenerated scene", r.path)));
        }
        *slot = img;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { gaussians: 20, width: 16, height: 16, timesteps: 2, cameras: 2, ..SceneSpec::default() };
        let b = generate_scene(&spec, 11).unwrap();
        let p = dir.path().join("scene.json");
        save_scene(&p, &b).unwrap();
        let back = load_scene(&p).unwrap();
        assert_eq!(back.meta, b.meta);
        assert_eq!(back.params, b.params);
        for (x, y) in back.ground_truth.iter().zip(&b.ground_truth) {
            assert!(x.max_abs_diff(y) < 1e-15);
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"format\": \"g4ds-scene\""));
    }

    #[test]
    fn wrong_format_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        std::fs::write(&p, r#"{"format":"other","version":1}"#).unwrap();
        assert!(matches!(read_document(&p), Err(IoError::Magic { .. })));
        std::fs::write(&p, r#"{"format":"g4ds-scene","version":7}"#).unwrap();
        assert!(matches!(read_document(&p), Err(IoError::Version { found: 7, .. })));
    }
}
