use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use less_core::cloud::kitti::{semantic_kitti_learning_map, SEMANTIC_KITTI_CLASSES};
use less_core::cloud::synth::{classes, SyntheticSceneSpec};
use less_core::labeling::AnnotationConfig;
use less_core::losses::LossConfig;
use less_core::model::{FeatureConfig, TrainConfig};
use less_core::pipeline::{FusionConfig, InputMode, WindowConfig};
use less_core::preseg::PresegConfig;
use less_core::{ClassId, UNLABELED};

use crate::CliError;

/// How raw `.label` ids become training classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMap {
    /// Ids are already the synthetic classes.
    #[default]
    Synthetic,
    SemanticKitti,
}

impl LabelMap {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelMap::Synthetic => &classes::NAMES,
            LabelMap::SemanticKitti => &SEMANTIC_KITTI_CLASSES,
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn map(self, raw: ClassId) -> ClassId {
        match self {
            LabelMap::Synthetic if (raw as usize) < classes::NUM_CLASSES => raw,
            LabelMap::Synthetic => UNLABELED,
            LabelMap::SemanticKitti => semantic_kitti_learning_map(raw).unwrap_or(UNLABELED),
        }
    }
}

/// Where the clicks of `label` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickPolicy {
    /// One click per class above the purity cutoff in every component.
    #[default]
    Component,
    /// As many clicks as the component policy, at random points.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub labels: LabelMap,
    pub policy: ClickPolicy,
    /// Input of the model trained by `train`.
    pub mode: InputMode,
    /// Unclicked points per scan used for weak and propagated losses.
    pub dense_samples: usize,
    /// Sequence scored after every epoch.
    pub val_input: Option<PathBuf>,
    /// Scans of `val_input`; empty means all.
    pub val_scans: Vec<usize>,
    pub monitor_points: usize,
    /// Scans scored by `eval`; empty means all.
    pub eval_scans: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labels: LabelMap::default(),
            policy: ClickPolicy::default(),
            mode: InputMode::default(),
            dense_samples: 2000,
            val_input: None,
            val_scans: Vec::new(),
            monitor_points: 4000,
            eval_scans: Vec::new(),
        }
    }
}

/// Every module's settings plus paths and the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every module seed when set.
    pub seed: Option<u64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SyntheticSceneSpec,
    pub window: WindowConfig,
    pub preseg: PresegConfig,
    pub annotation: AnnotationConfig,
    pub fusion: FusionConfig,
    pub features: FeatureConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
}

/// Recursively overlays `top` on `base`; objects merge key by key.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `key.path=value`; the value is read as JSON when it parses and as
/// a string otherwise.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set {assignment}: expected key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        if part.is_empty() {
            return Err(CliError::Usage(format!("--set {assignment}: empty key segment")));
        }
        if !slot.is_object() {
            return Err(CliError::Usage(format!("--set {assignment}: {part} is not inside an object")));
        }
        slot = slot
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

pub struct Overrides<'a> {
    pub config: Option<&'a Path>,
    pub sets: &'a [String],
    pub input: Option<&'a Path>,
    pub output: Option<&'a Path>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Defaults, then the config file, then `--set`, then explicit flags.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = o.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
            if !file.is_object() {
                return Err(CliError::Usage(format!("--config {}: expected a JSON object", path.display())));
            }
            merge(&mut value, file);
        }
        for s in o.sets {
            apply_set(&mut value, s)?;
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        if let Some(p) = o.input {
            config.input = Some(p.to_path_buf());
        }
        if let Some(p) = o.output {
            config.output = Some(p.to_path_buf());
        }
        if o.seed.is_some() {
            config.seed = o.seed;
        }
        if let Some(seed) = config.seed {
            config.synth.seed = seed;
            config.preseg.rng_seed = seed;
            config.annotation.rng_seed = seed;
            config.train.seed = seed;
        }
        Ok(config)
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        let p = self
            .input
            .as_deref()
            .ok_or_else(|| CliError::Usage("--in is required".into()))?;
        if !p.exists() {
            return Err(CliError::Usage(format!("--in {}: no such file or directory", p.display())));
        }
        Ok(p)
    }

    pub fn output(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}
