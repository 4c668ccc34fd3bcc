//! Parameter checkpoints: a JSON archive of named, shape-tagged arrays plus
//! the model configuration as `key = value` text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MatrError, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: &str = "matr-toy/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    config: String,
    params: BTreeMap<String, ParamEntry>,
}

pub fn model_config_text(c: &ModelConfig) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("image_height", c.image_height.to_string()),
        ("image_width", c.image_width.to_string()),
        ("dim", c.dim.to_string()),
        ("num_detect", c.num_detect.to_string()),
        ("encoder_layers", c.encoder_layers.to_string()),
        ("decoder_layers", c.decoder_layers.to_string()),
        ("mat_layers", c.mat_layers.to_string()),
        ("heads", c.heads.to_string()),
        ("classes", c.classes.to_string()),
        ("ffn_width", c.ffn_width.to_string()),
        ("seed", c.seed.to_string()),
        ("track_update", c.track_update.to_string()),
    ] {
        let _ = writeln!(s, "model.{k} = {v}");
    }
    s
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| MatrError::Input(format!("bad checkpoint config line '{line}'")))?;
        let key = k.trim().trim_start_matches("model.");
        let v = v.trim();
        let bad = || MatrError::Input(format!("bad checkpoint config value '{v}' for {key}"));
        let n = || v.parse::<usize>().map_err(|_| bad());
        match key {
            "image_height" => c.image_height = n()?,
            "image_width" => c.image_width = n()?,
            "dim" => c.dim = n()?,
            "num_detect" => c.num_detect = n()?,
            "encoder_layers" => c.encoder_layers = n()?,
            "decoder_layers" => c.decoder_layers = n()?,
            "mat_layers" => c.mat_layers = n()?,
            "heads" => c.heads = n()?,
            "classes" => c.classes = n()?,
            "ffn_width" => c.ffn_width = n()?,
            "seed" => c.seed = v.parse().map_err(|_| bad())?,
            "track_update" => c.track_update = v.parse().map_err(|_| bad())?,
            other => return Err(MatrError::Input(format!("unknown checkpoint config key '{other}'"))),
        }
    }
    Ok(c)
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let params = model
        .params
        .ids()
        .map(|id| {
            let m = model.params.get(id);
            (
                model.params.name(id).to_string(),
                ParamEntry {
                    shape: [m.rows, m.cols],
                    data: m.data.clone(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        config: model_config_text(&model.config),
        params,
    };
    serde_json::to_vec(&file).map_err(|e| MatrError::Input(format!("cannot serialize checkpoint: {e}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| MatrError::Input(format!("malformed checkpoint: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(MatrError::Input(format!(
            "checkpoint version '{}' is not '{CHECKPOINT_VERSION}'",
            file.version
        )));
    }
    let mut model = Model::new(parse_model_config(&file.config)?)?;
    if file.params.len() != model.params.len() {
        return Err(MatrError::Input(format!(
            "checkpoint has {} parameters, model expects {}",
            file.params.len(),
            model.params.len()
        )));
    }
    for (name, entry) in file.params {
        let id = model
            .params
            .lookup(&name)
            .ok_or_else(|| MatrError::Input(format!("checkpoint parameter '{name}' is unknown")))?;
        let m = model.params.get_mut(id);
        if [m.rows, m.cols] != entry.shape || entry.data.len() != m.data.len() {
            return Err(MatrError::Input(format!(
                "parameter '{name}' has shape {:?}, expected [{}, {}]",
                entry.shape, m.rows, m.cols
            )));
        }
        m.data = entry.data;
    }
    Ok(model)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the checkpoint and returns its SHA-256.
pub fn save(model: &Model, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes).map_err(|e| MatrError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| MatrError::io(path, e))?;
    from_bytes(&bytes)
}
