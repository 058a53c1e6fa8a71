//! JSON run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use boundmap_core::attacks::{AttackConfig, ConstraintSet};
use boundmap_core::datasets::{load_idx, transform_dataset, LabeledDataset, TransformOp};
use boundmap_core::experiments::ModelSpec;
use boundmap_core::margins::{direction_sequence, t1_probe_sequence};
use boundmap_core::subspace::{diagonal_subspaces, grid_subspaces, random_subspace_sequence, SubspaceSequence};
use boundmap_core::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// A dataset on disk plus transforms applied after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataRef {
    /// Binary dataset written by `gen-data` (with its JSON sidecar).
    Bin {
        path: PathBuf,
        #[serde(default)]
        transforms: Vec<TransformOp>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        transforms: Vec<TransformOp>,
    },
}

impl DataRef {
    pub fn load(&self) -> Result<LabeledDataset> {
        let (mut ds, ops) = match self {
            DataRef::Bin { path, transforms } => (LabeledDataset::load(path)?, transforms),
            DataRef::Idx { images, labels, transforms } => (load_idx(images, labels)?, transforms),
        };
        for &op in ops {
            ds = transform_dataset(&ds, op)?;
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Bin,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenSpec {
    T1 {
        epsilon: f64,
        sigma: f64,
        n_samples: usize,
        dim: usize,
        /// Extra samples drawn with the same rotation, written as `test.bin`.
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        identity_rotation: bool,
    },
    T2 {
        rho: f64,
        epsilon: f64,
        sigma: f64,
        k: i64,
        n_samples: usize,
        dim: usize,
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        identity_rotation: bool,
    },
    Transform {
        input: DataRef,
        ops: Vec<TransformOp>,
        #[serde(default)]
        output: OutputFormat,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub dataset: GenSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataRef,
    #[serde(default)]
    pub test: Option<DataRef>,
    pub model: ModelSpec,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainRunConfig {
    pub data: DataRef,
    #[serde(default)]
    pub test: Option<DataRef>,
    pub model: ModelSpec,
    #[serde(default)]
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub constraint: ConstraintSet,
    pub attack: AttackConfig,
    /// Subspaces for the per-perturbation energy log.
    #[serde(default)]
    pub log_subspaces: Option<SchemeConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    /// `u1`, `u1_perp`, `s_orth`, `s_rand` from the dataset rotation.
    T1Probes { subspace_dim: usize },
    /// The first `count` columns of the dataset rotation, one line each.
    Directions { count: usize },
    Diagonal { k: usize, t: usize },
    Grid { k: usize, t: usize },
    Random { dims: Vec<usize> },
}

impl SchemeConfig {
    pub fn build(&self, ds: &LabeledDataset, seed: u64) -> Result<SubspaceSequence> {
        let rotation = || ds.rotation.as_ref().ok_or_else(|| Error::InvalidParameter("scheme needs a dataset with a stored rotation".into()));
        let shape = || ds.image_shape.ok_or_else(|| Error::InvalidParameter("scheme needs an image dataset".into()));
        match self {
            SchemeConfig::T1Probes { subspace_dim } => t1_probe_sequence(rotation()?, *subspace_dim, seed),
            SchemeConfig::Directions { count } => direction_sequence(rotation()?, *count),
            SchemeConfig::Diagonal { k, t } => diagonal_subspaces(shape()?, *k, *t),
            SchemeConfig::Grid { k, t } => grid_subspaces(shape()?, *k, *t),
            SchemeConfig::Random { dims } => random_subspace_sequence(ds.dim(), dims, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureRunConfig {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    /// Measure only the first `n_obs` samples.
    #[serde(default)]
    pub n_obs: Option<usize>,
    pub subspaces: SchemeConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    pub seed: u64,
}

/// Parses a config file, applying a seed override to the top-level `seed`.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path, seed: Option<u64>) -> std::result::Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(seed) = seed {
        match value.as_object_mut() {
            Some(map) => {
                map.insert("seed".into(), seed.into());
            }
            None => return Err(format!("{}: top level must be an object", path.display())),
        }
    }
    serde_json::from_value(value).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"dataset":{"kind":"t1","epsilon":5,"sigma":1,"n_samples":10,"dim":4},"seed":1}"#;
        assert!(serde_json::from_str::<GenDataConfig>(ok).is_ok());
        let typo = r#"{"dataset":{"kind":"t1","epsilon":5,"sigma":1,"n_sampels":10,"dim":4},"seed":1}"#;
        assert!(serde_json::from_str::<GenDataConfig>(typo).is_err());
        let top = r#"{"dataset":{"kind":"t1","epsilon":5,"sigma":1,"n_samples":10,"dim":4},"seeed":1}"#;
        assert!(serde_json::from_str::<GenDataConfig>(top).is_err());
    }

    #[test]
    fn seed_override_replaces_config_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset":{"kind":"t1","epsilon":5,"sigma":1,"n_samples":10,"dim":4},"seed":1}"#).unwrap();
        let c: GenDataConfig = read_config(&path, Some(9)).unwrap();
        assert_eq!(c.seed, 9);
        let c: GenDataConfig = read_config(&path, None).unwrap();
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn transform_ops_parse() {
        let d: DataRef = serde_json::from_str(r#"{"format":"idx","images":"a","labels":"b","transforms":[{"low_pass":4},"flip"]}"#).unwrap();
        match d {
            DataRef::Idx { transforms, .. } => assert_eq!(transforms, vec![TransformOp::LowPass(4), TransformOp::Flip]),
            _ => panic!("wrong variant"),
        }
    }
}
