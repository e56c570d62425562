//! Tensor-name tables for each supported checkpoint family, loaded from the
//! versioned `schema/families.json` data file.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::CheckpointError;
use crate::model::ParamSpec;

const FAMILIES_JSON: &str = include_str!("../../schema/families.json");

/// Version of the name tables this build understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
pub struct Family {
    /// Hugging Face `model_type` values that select this family.
    #[serde(default)]
    pub model_types: Vec<String>,
    /// Internal names are used verbatim.
    #[serde(default)]
    pub identity: bool,
    /// Residual layout implied by the family, for imported configs.
    #[serde(default)]
    pub residual: Option<String>,
    /// Internal template (with `{layer}`, `{expert}`) to external template.
    #[serde(default)]
    pub tensors: BTreeMap<String, String>,
    /// Internal template to the internal template it may fall back to when
    /// the file omits it.
    #[serde(default)]
    pub tied: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
pub struct SchemaTable {
    pub schema_version: u32,
    pub families: BTreeMap<String, Family>,
}

pub fn table() -> &'static SchemaTable {
    static TABLE: OnceLock<SchemaTable> = OnceLock::new();
    TABLE.get_or_init(|| serde_json::from_str(FAMILIES_JSON).expect("bundled families.json is valid"))
}

pub fn family(name: &str) -> Result<&'static Family, CheckpointError> {
    table()
        .families
        .get(name)
        .ok_or_else(|| CheckpointError::Schema(format!("unknown checkpoint family `{name}`")))
}

/// The family whose `model_types` lists `model_type`.
pub fn family_for_model_type(model_type: &str) -> Result<(&'static str, &'static Family), CheckpointError> {
    table()
        .families
        .iter()
        .find(|(_, f)| f.model_types.iter().any(|m| m == model_type))
        .map(|(n, f)| (n.as_str(), f))
        .ok_or_else(|| CheckpointError::Schema(format!("no checkpoint family handles model_type `{model_type}`")))
}

fn fill(template: &str, spec: &ParamSpec) -> String {
    let mut s = template.to_string();
    if let Some(l) = spec.layer {
        s = s.replace("{layer}", &l.to_string());
    }
    if let Some(e) = spec.expert {
        s = s.replace("{expert}", &e.to_string());
    }
    s
}

impl Family {
    /// External tensor name for an internal schema entry.
    pub fn external_name(&self, spec: &ParamSpec) -> Result<String, CheckpointError> {
        if self.identity {
            return Ok(spec.name.clone());
        }
        self.tensors
            .get(&spec.template)
            .map(|t| fill(t, spec))
            .ok_or_else(|| CheckpointError::Schema(format!("family has no name for `{}`", spec.template)))
    }

    /// External name of the tensor `spec` is tied to, if any.
    pub fn tied_name(&self, spec: &ParamSpec) -> Option<String> {
        let target = self.tied.get(&spec.template)?;
        if self.identity {
            return Some(fill(target, spec));
        }
        self.tensors.get(target).map(|t| fill(t, spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_schema, ModelConfig, MoeConfig};

    #[test]
    fn bundled_table_matches_build_version() {
        assert_eq!(table().schema_version, SCHEMA_VERSION);
        for name in ["toy", "llama-like", "moe-like", "sandwich-like"] {
            family(name).unwrap();
        }
    }

    #[test]
    fn llama_names_are_zero_based_hf_names() {
        let c = ModelConfig::toy(33, 16, 32, 2, 2);
        let fam = family("llama-like").unwrap();
        let names: Vec<String> = param_schema(&c).iter().map(|s| fam.external_name(s).unwrap()).collect();
        assert!(names.contains(&"model.layers.1.mlp.gate_proj.weight".to_string()));
        assert!(names.contains(&"model.layers.0.post_attention_layernorm.weight".to_string()));
        assert!(names.contains(&"lm_head.weight".to_string()));
    }

    #[test]
    fn moe_family_covers_experts_and_router() {
        let mut c = ModelConfig::toy(33, 16, 32, 2, 2);
        c.moe = Some(MoeConfig {
            num_experts: 3,
            top_t: 2,
            layers: vec![1, 2],
        });
        let fam = family("moe-like").unwrap();
        let names: Vec<String> = param_schema(&c).iter().map(|s| fam.external_name(s).unwrap()).collect();
        assert!(names.contains(&"model.layers.1.block_sparse_moe.experts.2.w3.weight".to_string()));
        assert!(names.contains(&"model.layers.0.block_sparse_moe.gate.weight".to_string()));
    }

    #[test]
    fn model_type_lookup() {
        assert_eq!(family_for_model_type("llama").unwrap().0, "llama-like");
        assert_eq!(family_for_model_type("mixtral").unwrap().0, "moe-like");
        assert!(family_for_model_type("phi3").is_err());
    }
}
