use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::io::{load_param_set, save_param_set};
use crate::params::{load, named_tensors};

use super::config::RunConfig;
use super::model::{Model, ModelParams};

pub const PARAMS_FILE: &str = "params.swmt";
pub const MANIFEST_FILE: &str = "manifest.json";

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(PARAMS_FILE), dir.join(MANIFEST_FILE))
}

/// Write parameters, a manifest echoing the config, and per-group hashes.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (bin, json) = paths(dir);
    let meta = serde_json::json!({
        "config": cfg.to_toml_string(),
        "group_hashes": params.group_hashes(),
    });
    save_param_set(&bin, &json, &named_tensors(params, ""), meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let (bin, json) = paths(dir);
    let (tensors, meta) = load_param_set(&bin, &json)?;
    let text = meta["config"]
        .as_str()
        .ok_or_else(|| Error::Format("checkpoint lacks a config echo".into()))?;
    let cfg = RunConfig::from_toml_str(text)?;
    let source: BTreeMap<_, _> = tensors.into_iter().collect();
    let params = load(&ModelParams::init(&cfg), "", &source)?;
    let stored: BTreeMap<String, String> = serde_json::from_value(meta["group_hashes"].clone())?;
    if stored != params.group_hashes() {
        return Err(Error::Format("group hashes do not match the stored parameters".into()));
    }
    Ok(Model { cfg, params })
}
