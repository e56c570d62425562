//! Weight files, configs and pre-tokenized evaluation data.
//!
//! A checkpoint is a weight file in the safetensors layout plus a JSON
//! config. Given `weights.st` the config lives at `weights.json`; given a
//! directory, `config.json` sits beside `model.safetensors` or a
//! `model.safetensors.index.json` shard index. Directory configs in the
//! Hugging Face format are translated on load.

pub mod safetensors;
pub mod schema;
mod tokens;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{param_schema, ModelConfig, MoeConfig, NormKind, ParameterStore, Positional, ResidualVariant};
use crate::tensor::Tensor;

pub use safetensors::{Container, StorageDtype};
pub use tokens::{
    load_mc_items, load_token_stream, parse_token_stream, write_token_stream, McItem, TokenFormat, TokenStream,
};

/// On-disk config: the model fields plus the name-table version and family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub family: String,
    #[serde(flatten)]
    pub model: ModelConfig,
}

/// Everything recovered from a checkpoint, including what is needed to
/// write it back byte for byte.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub params: ParameterStore<f32>,
    pub family: String,
    /// Storage dtype of each internal tensor in the source file.
    pub dtypes: BTreeMap<String, StorageDtype>,
}

#[derive(Debug, Clone)]
pub struct SaveOptions {
    pub family: String,
    /// Default storage dtype.
    pub dtype: StorageDtype,
    /// Per-tensor overrides, keyed by internal name.
    pub dtypes: BTreeMap<String, StorageDtype>,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self {
            family: "toy".into(),
            dtype: StorageDtype::F32,
            dtypes: BTreeMap::new(),
        }
    }
}

impl LoadedCheckpoint {
    /// Options that reproduce the source file's names and dtypes.
    pub fn save_options(&self) -> SaveOptions {
        SaveOptions {
            family: self.family.clone(),
            dtype: StorageDtype::F32,
            dtypes: self.dtypes.clone(),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    // Temp files are created owner-only; outputs get ordinary file permissions.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Config path belonging to a weight file.
pub fn config_path_for(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Loads `(config, params)`; see [`load_checkpoint_full`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore<f32>)> {
    let ck = load_checkpoint_full(path)?;
    Ok((ck.config, ck.params))
}

pub fn load_checkpoint_full(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let (config_path, weight_files) = if path.is_dir() {
        let index = path.join("model.safetensors.index.json");
        let files = if index.exists() {
            shard_files(path, &index)?
        } else {
            vec![path.join("model.safetensors")]
        };
        (path.join("config.json"), files)
    } else {
        (config_path_for(path), vec![path.to_path_buf()])
    };
    let raw: Value = serde_json::from_slice(&read(&config_path)?)?;
    let (config, family_name) = parse_config_value(raw)?;
    config.validate()?;
    let family = schema::family(&family_name)?;

    let containers = weight_files
        .iter()
        .map(|f| Ok(Container::parse(read(f)?)?))
        .collect::<Result<Vec<_>>>()?;
    let locate = |name: &str| containers.iter().find(|c| c.contains(name));

    let mut params = ParameterStore::new();
    let mut dtypes = BTreeMap::new();
    for spec in param_schema(&config) {
        let external = family.external_name(&spec)?;
        let source = match locate(&external) {
            Some(c) => Some((c, external.clone())),
            None => family.tied_name(&spec).and_then(|t| locate(&t).map(|c| (c, t))),
        };
        let (container, name) = source.ok_or(CheckpointError::MissingTensor {
            tensor: external.clone(),
        })?;
        let (entry, _) = container.raw(&name)?;
        if entry.shape != spec.shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name,
                expected: spec.shape.clone(),
                found: entry.shape.clone(),
            }
            .into());
        }
        dtypes.insert(spec.name.clone(), entry.dtype);
        let t: Tensor<f32> = container.tensor_f32(&name)?;
        params.insert(spec.name, t);
    }
    Ok(LoadedCheckpoint {
        config,
        params,
        family: family_name,
        dtypes,
    })
}

fn shard_files(dir: &Path, index: &Path) -> Result<Vec<PathBuf>> {
    let v: Value = serde_json::from_slice(&read(index)?)?;
    let map = v
        .get("weight_map")
        .and_then(Value::as_object)
        .ok_or_else(|| CheckpointError::Schema("shard index lacks `weight_map`".into()))?;
    let mut files: Vec<String> = map.values().filter_map(|f| f.as_str().map(String::from)).collect();
    files.sort();
    files.dedup();
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

/// Parses either a native config file or a Hugging Face `config.json`.
pub fn parse_config_value(raw: Value) -> Result<(ModelConfig, String)> {
    if raw.get("schema_version").is_some() {
        let cf: ConfigFile = serde_json::from_value(raw)?;
        if cf.schema_version != schema::SCHEMA_VERSION {
            return Err(CheckpointError::Schema(format!(
                "config schema_version {} is not supported (expected {})",
                cf.schema_version,
                schema::SCHEMA_VERSION
            ))
            .into());
        }
        return Ok((cf.model, cf.family));
    }
    let model_type = raw
        .get("model_type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("config has neither `schema_version` nor `model_type`".into()))?;
    let (family_name, family) = schema::family_for_model_type(model_type)?;

    let int = |key: &str| -> Result<Option<usize>> {
        match raw.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|x| Some(x as usize))
                .ok_or_else(|| Error::Config(format!("`{key}` must be a non-negative integer"))),
        }
    };
    let need = |key: &str| -> Result<usize> { int(key)?.ok_or_else(|| Error::Config(format!("config lacks `{key}`"))) };

    let hidden_dim = need("hidden_size")?;
    let num_heads = need("num_attention_heads")?;
    let num_layers = need("num_hidden_layers")?;
    let head_dim = int("head_dim")?.unwrap_or(hidden_dim / num_heads.max(1));
    let kv = int("num_key_value_heads")?.filter(|&k| k != num_heads);
    let bos = match raw.get("bos_token_id") {
        Some(Value::Array(a)) => a.first().and_then(Value::as_u64),
        Some(v) => v.as_u64(),
        None => None,
    }
    .ok_or_else(|| Error::Config("config lacks `bos_token_id`".into()))?;
    let activation = raw
        .get("hidden_act")
        .or_else(|| raw.get("hidden_activation"))
        .and_then(Value::as_str)
        .unwrap_or("silu")
        .to_string();
    let residual = match family.residual.as_deref() {
        Some("sandwich_ln") => ResidualVariant::SandwichLn,
        _ => ResidualVariant::PreLn,
    };
    let moe = match int("num_local_experts")? {
        Some(n) if n > 0 => Some(MoeConfig {
            num_experts: n,
            top_t: int("num_experts_per_tok")?.unwrap_or(2),
            layers: (1..=num_layers).collect(),
        }),
        _ => None,
    };
    let config = ModelConfig {
        vocab_size: need("vocab_size")?,
        hidden_dim,
        ffn_dim: need("intermediate_size")?,
        num_layers,
        num_heads,
        head_dim,
        num_kv_heads: kv,
        residual,
        norm: NormKind::Rmsnorm,
        norm_eps: raw.get("rms_norm_eps").and_then(Value::as_f64).unwrap_or(1e-5),
        positional: Positional::Rope {
            theta: raw.get("rope_theta").and_then(Value::as_f64).unwrap_or(10_000.0),
        },
        bos_token_id: bos as u32,
        moe,
        activation,
    };
    Ok((config, family_name.to_string()))
}

/// Canonical weight-file bytes for `params` under `opts`.
pub fn serialize_weights(config: &ModelConfig, params: &ParameterStore<f32>, opts: &SaveOptions) -> Result<Vec<u8>> {
    params.validate(config)?;
    let family = schema::family(&opts.family)?;
    let mut tensors = BTreeMap::new();
    for spec in param_schema(config) {
        let t = params.get(&spec.name)?;
        let dtype = opts.dtypes.get(&spec.name).copied().unwrap_or(opts.dtype);
        let external = family.external_name(&spec)?;
        let raw = safetensors::RawTensor {
            dtype,
            shape: t.shape().to_vec(),
            bytes: safetensors::encode_f32(dtype, t.data()),
        };
        if tensors.insert(external.clone(), raw).is_some() {
            return Err(CheckpointError::DuplicateTensor { tensor: external }.into());
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("family".to_string(), opts.family.clone());
    metadata.insert("schema_version".to_string(), schema::SCHEMA_VERSION.to_string());
    Ok(safetensors::serialize(&tensors, &metadata))
}

/// Writes the weight file at `path` and its config beside it, both
/// atomically. A directory path gets `config.json` and `model.safetensors`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParameterStore<f32>,
    opts: &SaveOptions,
) -> Result<()> {
    let path = path.as_ref();
    let (weights, config_path) = if path.is_dir() {
        (path.join("model.safetensors"), path.join("config.json"))
    } else {
        (path.to_path_buf(), config_path_for(path))
    };
    let bytes = serialize_weights(config, params, opts)?;
    let cf = ConfigFile {
        schema_version: schema::SCHEMA_VERSION,
        family: opts.family.clone(),
        model: config.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&cf)?;
    json.push(b'\n');
    write_atomic(&weights, &bytes)?;
    write_atomic(&config_path, &json)
}
