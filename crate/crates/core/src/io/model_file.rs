//! Models and style transforms as checkpoint entries.
//!
//! A model checkpoint holds every parameter under its store name as `f64`,
//! plus `scene.meta` and `model.config` as UTF-8 JSON bytes.

use std::path::Path;

use crate::io::checkpoint::{self, Entry};
use crate::io::IoError;
use crate::model::{Model, ModelConfig};
use crate::scene::SceneMeta;
use crate::tensor::Tensor;
use crate::wct::StyleTransform;

pub const META_ENTRY: &str = "scene.meta";
pub const CONFIG_ENTRY: &str = "model.config";

fn json_entry<T: serde::Serialize>(name: &str, value: &T) -> Entry {
    Entry::bytes(name, &serde_json::to_vec(value).expect("serializable"))
}

fn json_of<T: serde::de::DeserializeOwned>(entries: &[Entry], name: &str) -> Result<T, IoError> {
    let e = find(entries, name)?;
    let bytes = e.as_bytes().ok_or_else(|| IoError::Invalid(format!("`{name}` does not hold bytes")))?;
    serde_json::from_slice(&bytes).map_err(|err| IoError::Invalid(format!("`{name}`: {err}")))
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry, IoError> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| IoError::Missing(name.to_string()))
}

pub fn model_entries(model: &Model) -> Vec<Entry> {
    let mut out = vec![json_entry(META_ENTRY, &model.meta), json_entry(CONFIG_ENTRY, &model.config)];
    out.extend(model.store.iter().map(|(_, name, v)| Entry::f64(name, v.clone())));
    out
}

pub fn model_from_entries(entries: &[Entry]) -> Result<Model, IoError> {
    let meta: SceneMeta = json_of(entries, META_ENTRY)?;
    let config: ModelConfig = json_of(entries, CONFIG_ENTRY)?;
    let centers = find(entries, "gaussians.center")?;
    let &[n, 3] = centers.tensor.shape() else {
        return Err(IoError::Invalid(format!("gaussians.center has shape {:?}", centers.tensor.shape())));
    };
    let mut model = Model::skeleton(meta, config, n);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let e = find(entries, &name)?;
        if e.tensor.shape() != model.store.get(id).shape() {
            return Err(IoError::Invalid(format!(
                "`{name}` has shape {:?}, expected {:?}",
                e.tensor.shape(),
                model.store.get(id).shape()
            )));
        }
        model.store.set(id, e.tensor.clone());
    }
    let known = model.store.len() + 2;
    if entries.len() != known {
        let extra = entries
            .iter()
            .find(|e| e.name != META_ENTRY && e.name != CONFIG_ENTRY && model.store.find(&e.name).is_none());
        return Err(IoError::Invalid(format!(
            "unexpected tensor `{}` in model checkpoint",
            extra.map_or("?", |e| e.name.as_str())
        )));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), IoError> {
    checkpoint::save(path, &model_entries(model))
}

pub fn load_model(path: &Path) -> Result<Model, IoError> {
    model_from_entries(&checkpoint::load(path)?)
}

pub fn transform_entries(prefix: &str, t: &StyleTransform) -> Vec<Entry> {
    let v = |x: &[f64]| Tensor::new([x.len()], x.to_vec());
    vec![
        Entry::f64(format!("{prefix}t_c"), t.t_c.clone()),
        Entry::f64(format!("{prefix}t_s"), t.t_s.clone()),
        Entry::f64(format!("{prefix}mu_f"), v(&t.mu_f)),
        Entry::f64(format!("{prefix}mu_s"), v(&t.mu_s)),
    ]
}

pub fn transform_from_entries(prefix: &str, entries: &[Entry]) -> Result<StyleTransform, IoError> {
    let get = |k: &str| find(entries, &format!("{prefix}{k}")).map(|e| e.tensor.clone());
    let t = StyleTransform {
        t_c: get("t_c")?,
        t_s: get("t_s")?,
        mu_f: get("mu_f")?.into_data(),
        mu_s: get("mu_s")?.into_data(),
    };
    let d = t.mu_f.len();
    if t.t_c.shape() != [d, d] || t.t_s.shape() != [d, d] || t.mu_s.len() != d {
        return Err(IoError::Invalid(format!("inconsistent style transform shapes under `{prefix}`")));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn model_round_trip() {
        let spec = SceneSpec { gaussians: 40, width: 16, height: 16, timesteps: 2, cameras: 2, ..SceneSpec::default() };
        let bundle = generate_scene(&spec, 2).unwrap();
        let cfg = ModelConfig { predictor_hidden: 8, revnet_blocks: 2, ..ModelConfig::default() };
        let m = Model::from_scene(&bundle, cfg, 5);
        let bytes = checkpoint::encode(&model_entries(&m)).unwrap();
        let back = model_from_entries(&checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.config, m.config);
        assert_eq!(checkpoint::encode(&model_entries(&back)).unwrap(), bytes);
    }

    #[test]
    fn missing_parameter_is_named() {
        let spec = SceneSpec { gaussians: 10, width: 16, height: 16, timesteps: 1, cameras: 1, ..SceneSpec::default() };
        let m = Model::from_scene(
            &generate_scene(&spec, 0).unwrap(),
            ModelConfig { predictor_hidden: 4, ..ModelConfig::default() },
            0,
        );
        let entries: Vec<_> = model_entries(&m).into_iter().filter(|e| e.name != "cspn.temperature").collect();
        let err = model_from_entries(&entries).err().unwrap();
        assert!(matches!(&err, IoError::Missing(n) if n == "cspn.temperature"), "{err}");
    }

    #[test]
    fn transform_round_trip() {
        let t = StyleTransform {
            t_c: Tensor::from_fn([2, 2], |i| i as f64),
            t_s: Tensor::eye(2),
            mu_f: vec![0.1, 0.2],
            mu_s: vec![-1.0, 3.0],
        };
        let back = transform_from_entries("x.", &transform_entries("x.", &t)).unwrap();
        assert_eq!(back, t);
    }
}
