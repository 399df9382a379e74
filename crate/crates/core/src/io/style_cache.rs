//! On-disk cache of style factors `(T_s, μ_s)`.
//!
//! One checkpoint file per entry, named by the SHA-256 of the style image
//! (shape and pixel bits) together with every parameter on the style path
//! (`revnet.`, `phi_s.`, `mlp_s.`), so retraining invalidates old entries.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::io::checkpoint::{self, Entry};
use crate::io::IoError;
use crate::model::Model;
use crate::pipeline::EncodedStyle;
use crate::tensor::Tensor;
use crate::wct::StyleTransform;

const STYLE_PATH: [&str; 3] = ["revnet.", "phi_s.", "mlp_s."];

pub fn cache_key(model: &Model, style: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in style.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in style.data() {
        h.update(v.to_le_bytes());
    }
    for (_, name, v) in model.store.iter().filter(|(_, n, _)| STYLE_PATH.iter().any(|p| n.starts_with(p))) {
        h.update(name.as_bytes());
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct StyleCache {
    dir: PathBuf,
}

impl StyleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.g4ds"))
    }

    pub fn get(&self, key: &str) -> Result<Option<(Tensor, Vec<f64>)>, IoError> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        let e = checkpoint::load(&p)?;
        let get = |n: &str| {
            e.iter().find(|x| x.name == n).map(|x| x.tensor.clone()).ok_or_else(|| IoError::Missing(n.into()))
        };
        Ok(Some((get("t_s")?, get("mu_s")?.into_data())))
    }

    pub fn put(&self, key: &str, t_s: &Tensor, mu_s: &[f64]) -> Result<(), IoError> {
        let entries = [Entry::f64("t_s", t_s.clone()), Entry::f64("mu_s", Tensor::new([mu_s.len()], mu_s.to_vec()))];
        checkpoint::save(&self.path(key), &entries)
    }

    /// The predicted transform for `style` (already fitted to size), reading
    /// or filling the cache.
    pub fn transform(&self, model: &Model, style: &Tensor) -> Result<StyleTransform, IoError> {
        let key = cache_key(model, style);
        if let Some((t_s, mu_s)) = self.get(&key)? {
            log::debug!("style cache hit {key}");
            return Ok(model.with_style_factor(t_s, mu_s));
        }
        let (t_s, mu_s) =
            model.style_factor(&EncodedStyle::new(model, style)).map_err(|e| IoError::Invalid(e.to_string()))?;
        self.put(&key, &t_s, &mu_s)?;
        Ok(model.with_style_factor(t_s, mu_s))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::fit_style;
    use crate::scene::{generate_scene, SceneSpec};
    use rand::SeedableRng;

    #[test]
    fn hit_equals_miss_and_key_tracks_parameters() {
        let spec = SceneSpec { gaussians: 20, width: 16, height: 16, timesteps: 1, cameras: 1, ..SceneSpec::default() };
        let cfg = ModelConfig { predictor_hidden: 8, revnet_blocks: 2, ..ModelConfig::default() };
        let mut m = Model::from_scene(&generate_scene(&spec, 1).unwrap(), cfg, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let style = fit_style(&Tensor::uniform([64, 64, 3], 0.0, 1.0, &mut rng), 64);
        let dir = tempfile::tempdir().unwrap();
        let cache = StyleCache::new(dir.path());
        let a = cache.transform(&m, &style).unwrap();
        let b = cache.transform(&m, &style).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, m.style_transform(&EncodedStyle::new(&m, &style)).unwrap());
        let k = cache_key(&m, &style);
        let id = m.store.find("phi_s.conv0.bias").or_else(|| m.store.with_prefix("phi_s.").next()).unwrap();
        m.store.get_mut(id).data_mut()[0] += 1.0;
        assert_ne!(cache_key(&m, &style), k);
        let cspn = m.store.with_prefix("cspn.").next().unwrap();
        let k2 = cache_key(&m, &style);
        m.store.get_mut(cspn).data_mut()[0] += 1.0;
        assert_eq!(cache_key(&m, &style), k2);
    }
}
