//! Parameter snapshots: `params.bin` holds every value as little-endian
//! f64 in storage order, `manifest.json` the model config and block shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmaFormer, ModelConfig};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub blocks: Vec<BlockEntry>,
}

pub fn save(model: &EmaFormer, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        blocks: model
            .params()
            .iter()
            .map(|p| BlockEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), frozen: p.frozen })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(model.params().num_scalars() * 8);
    for p in model.params().iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::config(
            "checkpoint",
            format!("format version {} is not {FORMAT_VERSION}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest.
pub fn load(dir: impl AsRef<Path>) -> Result<EmaFormer> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut model = EmaFormer::new(manifest.model.clone())?;
    if manifest.blocks.len() != model.params().len() {
        return Err(Error::config(
            "checkpoint",
            format!("{} blocks in manifest, model has {}", manifest.blocks.len(), model.params().len()),
        ));
    }
    for (entry, p) in manifest.blocks.iter().zip(model.params().iter()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(Error::config(
                "checkpoint",
                format!("block `{}` {:?} does not match `{}` {:?}", entry.name, entry.shape, p.name, p.value.shape()),
            ));
        }
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = model.params().num_scalars() * 8;
    if bytes.len() != expected {
        return Err(Error::config(
            "checkpoint",
            format!("{} holds {} bytes, expected {expected}", path.display(), bytes.len()),
        ));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

/// Loads and checks that the stored architecture agrees with `expected`.
/// Fields that do not change parameter layout or the forward map (seed,
/// dropout) are ignored.
pub fn load_matching(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<EmaFormer> {
    let model = load(dir)?;
    let got = model.config();
    let checks: [(&str, bool); 14] = [
        ("lookback", got.lookback == expected.lookback),
        ("horizon", got.horizon == expected.horizon),
        ("channels", got.channels == expected.channels),
        ("period", got.period == expected.period),
        ("d_model", got.d_model == expected.d_model),
        ("n_layers", got.n_layers == expected.n_layers),
        ("n_heads", got.n_heads == expected.n_heads),
        ("d_ff", got.d_ff == expected.d_ff),
        ("norm_style", got.norm_style == expected.norm_style),
        ("revin", got.revin == expected.revin),
        ("ablation", got.ablation == expected.ablation),
        ("backbone", got.backbone == expected.backbone),
        ("head", got.head == expected.head),
        ("mean_input", got.mean_input == expected.mean_input),
    ];
    if let Some((key, _)) = checks.iter().find(|(_, ok)| !ok) {
        return Err(Error::config(*key, "checkpoint manifest disagrees with the configuration"));
    }
    Ok(model)
}
