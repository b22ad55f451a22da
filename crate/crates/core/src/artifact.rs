//! Checkpoint packaging: HTCK parameter files that carry their own config.
//!
//! The config rides inside the checkpoint as a `_meta.json` pseudo-
//! parameter (one f32 per UTF-8 byte), so a single file is enough to
//! rebuild the model it belongs to. Byte values survive the f32 payload
//! exactly, and the entry round-trips like any other parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::GenConfig;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{ParamStore, Real, Tensor, TensorError};
use crate::vae::HierarchyConfig;

pub const META_PARAM: &str = "_meta.json";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint has no embedded config")]
    MissingMeta,
    #[error("embedded config is invalid: {0}")]
    BadMeta(String),
    #[error("checkpoint is a {got} checkpoint, expected {want}")]
    WrongKind { got: String, want: &'static str },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkptMeta {
    pub kind: String,
    pub hierarchy: HierarchyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
}

pub fn set_meta<T: Real>(store: &mut ParamStore<T>, meta: &CkptMeta) -> Result<(), ArtifactError> {
    let json = serde_json::to_string(meta).map_err(|e| ArtifactError::BadMeta(e.to_string()))?;
    let data: Vec<T> = json.bytes().map(|b| T::from_f64(b as f64)).collect();
    let n = data.len();
    store.insert(META_PARAM, Tensor::from_vec(&[n], data)?)?;
    Ok(())
}

pub fn get_meta<T: Real>(store: &ParamStore<T>) -> Result<CkptMeta, ArtifactError> {
    let t = store.get(META_PARAM).map_err(|_| ArtifactError::MissingMeta)?;
    let bytes: Vec<u8> = t.data().iter().map(|v| Real::to_f64(*v) as u8).collect();
    let json = String::from_utf8(bytes).map_err(|e| ArtifactError::BadMeta(e.to_string()))?;
    serde_json::from_str(&json).map_err(|e| ArtifactError::BadMeta(e.to_string()))
}

/// Writes params + embedded config as one HTCK file.
pub fn save_tokenizer(
    params: &ParamStore<f32>,
    hier: &HierarchyConfig,
    path: &Path,
) -> Result<(), ArtifactError> {
    let mut store = params.cast::<f32>();
    set_meta(
        &mut store,
        &CkptMeta {
            kind: "tokenizer".into(),
            hierarchy: hier.clone(),
            generator: None,
        },
    )?;
    checkpoint::save_to_path(&store, path)?;
    Ok(())
}

pub fn save_generator(
    params: &ParamStore<f32>,
    hier: &HierarchyConfig,
    gen_cfg: &GenConfig,
    path: &Path,
) -> Result<(), ArtifactError> {
    let mut store = params.cast::<f32>();
    set_meta(
        &mut store,
        &CkptMeta {
            kind: "generator".into(),
            hierarchy: hier.clone(),
            generator: Some(gen_cfg.clone()),
        },
    )?;
    checkpoint::save_to_path(&store, path)?;
    Ok(())
}

/// Loads a checkpoint of the expected kind; returns the parameters with
/// the meta entry removed plus the embedded config.
pub fn load(path: &Path, want: &'static str) -> Result<(ParamStore<f32>, CkptMeta), ArtifactError> {
    let store = checkpoint::load_from_path(path)?;
    let meta = get_meta(&store)?;
    if meta.kind != want {
        return Err(ArtifactError::WrongKind {
            got: meta.kind,
            want,
        });
    }
    let mut params = ParamStore::new();
    for (name, t) in store.iter() {
        if name != META_PARAM {
            params.insert(name, t.clone())?;
        }
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_checkpoint_round_trips_with_config() {
        let hier = HierarchyConfig::desk_default();
        let params = crate::vae::init_params::<f32>(&hier, 3).unwrap();
        let dir = std::env::temp_dir().join("hitok_artifact_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tok.htck");
        save_tokenizer(&params, &hier, &path).unwrap();
        let (loaded, meta) = load(&path, "tokenizer").unwrap();
        assert_eq!(meta.hierarchy, hier);
        assert_eq!(loaded.len(), params.len());
        for (name, t) in params.iter() {
            assert_eq!(loaded.get(name).unwrap().data(), t.data());
        }
        assert!(matches!(
            load(&path, "generator"),
            Err(ArtifactError::WrongKind { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generator_checkpoint_keeps_both_configs() {
        let hier = HierarchyConfig::desk_default();
        let gen_cfg = GenConfig::default();
        let params = crate::generator::init_params::<f32>(&gen_cfg, &hier, 4).unwrap();
        let dir = std::env::temp_dir().join("hitok_artifact_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gen.htck");
        save_generator(&params, &hier, &gen_cfg, &path).unwrap();
        let (_, meta) = load(&path, "generator").unwrap();
        assert_eq!(meta.generator.as_ref(), Some(&gen_cfg));
        assert_eq!(meta.hierarchy, hier);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
