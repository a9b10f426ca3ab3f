use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const FORMAT: &str = "rst-isp-checkpoint";
pub const VERSION: &str = "1";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

fn prefixed<'a>(out: &mut BTreeMap<String, Tensor>, prefix: &str, map: impl IntoIterator<Item = (&'a String, &'a Tensor)>) {
    for (k, t) in map {
        out.insert(format!("{prefix}{k}"), t.clone());
    }
}

fn strip(all: &HashMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    all.iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

/// Writes weights, optimizer moments, step and config to a safetensors file.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    prefixed(&mut tensors, "generator.", &state.generator.params().snapshot()?);
    prefixed(&mut tensors, "critic.", &state.critic.params().snapshot()?);
    for (name, opt) in [("opt_g", &state.opt_g), ("opt_d", &state.opt_d)] {
        let (m, v) = opt.moments();
        prefixed(&mut tensors, &format!("{name}.m."), m);
        prefixed(&mut tensors, &format!("{name}.v."), v);
    }
    let meta: HashMap<String, String> = [
        ("format", FORMAT.to_string()),
        ("version", VERSION.to_string()),
        ("step", state.step.to_string()),
        ("opt_g_t", state.opt_g.t.to_string()),
        ("opt_d_t", state.opt_d.t.to_string()),
        ("dtype", dtype_name(state.generator.params().dtype()).to_string()),
        ("config", serde_json::to_string(cfg)?),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("bin.partial");
    safetensors::serialize_to_file(&tensors, Some(meta), &tmp).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restores a [`TrainState`] and the config it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata `{k}`")));
    if field("format")? != FORMAT {
        return Err(bad("not a training checkpoint".into()));
    }
    if field("version")? != VERSION {
        return Err(bad(format!("unsupported version {}", field("version")?)));
    }
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
    let cfg: TrainConfig = serde_json::from_str(&field("config")?)?;
    let dtype = match field("dtype")?.as_str() {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(bad(format!("unsupported dtype {other}"))),
    };
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut state = TrainState::new(&cfg, dtype)?;
    state.step = num("step")?;
    state.generator.params().load(&strip(&all, "generator."))?;
    state.critic.params().load(&strip(&all, "critic."))?;
    state
        .opt_g
        .load_moments(strip(&all, "opt_g.m."), strip(&all, "opt_g.v."), num("opt_g_t")?)?;
    state
        .opt_d
        .load_moments(strip(&all, "opt_d.m."), strip(&all, "opt_d.v."), num("opt_d_t")?)?;
    Ok((state, cfg))
}

/// Checkpoints in `dir` sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_")?.strip_suffix(".bin")?.parse().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}
