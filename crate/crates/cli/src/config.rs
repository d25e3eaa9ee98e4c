//! Run configuration: defaults, then a flat dotted-key JSON file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use stonecrack::cam::{Alignment, CamOptions, CamTarget, OverlayStyle};
use stonecrack::dataset::{Shortfall, DATA_ENV};
use stonecrack::scan::ScanOptions;
use stonecrack::train::TrainConfig;
use stonecrack::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Artifact directory read by eval, localize and scan.
    pub path: Option<PathBuf>,
    pub width: f64,
    pub input_size: usize,
    /// `None` loads pretrained weights exactly when the regime is transfer.
    pub pretrained: Option<bool>,
    pub weights_dir: Option<PathBuf>,
    pub sample_wise: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            path: None,
            width: 1.0,
            input_size: 224,
            pretrained: None,
            weights_dir: None,
            sample_wise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSection {
    pub align: Alignment,
    pub target: CamTarget,
    pub overlay: OverlayStyle,
}

impl CamSection {
    pub fn options(&self) -> CamOptions {
        CamOptions {
            align: self.align,
            target: self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    /// Empty means every registered backbone.
    pub backbones: Vec<String>,
    /// Empty means every test case.
    pub cases: Vec<u8>,
    /// Worker processes; 1 runs the cells in this process, one after another.
    pub jobs: usize,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            backbones: Vec::new(),
            cases: Vec::new(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub runs_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    pub backbone: Option<String>,
    pub case_id: Option<u8>,
    pub regime: String,
    pub shortfall: Shortfall,
    /// Saved split to use instead of drawing one from the data root.
    pub split: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub cam: CamSection,
    pub scan: ScanOptions,
    pub matrix: MatrixSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            runs_dir: PathBuf::from("runs"),
            data_root: None,
            backbone: None,
            case_id: None,
            regime: "scratch".into(),
            shortfall: Shortfall::Error,
            split: None,
            images: Vec::new(),
            reports: Vec::new(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            cam: CamSection::default(),
            scan: ScanOptions::default(),
            matrix: MatrixSection::default(),
        }
    }
}

/// Dotted keys to leaf values. Arrays are leaves.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

/// Sets `key` inside `root`. Every segment must already exist.
pub fn set_key(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a section")))?;
        let Some(child) = map.get_mut(part) else {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        };
        if parts.peek().is_none() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(Error::Config("empty configuration key".into()))
}

/// Value of a `key=value` override: JSON when it parses, a string otherwise.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{text}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(flatten(&value).into_iter().collect())
}

/// Layers overrides onto the defaults and fills environment fallbacks.
pub fn resolve(layers: &[(String, Value)]) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    for (k, v) in layers {
        set_key(&mut root, k, v.clone())?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.data_root.is_none() {
        cfg.data_root = std::env::var_os(DATA_ENV).map(PathBuf::from);
    }
    cfg.train.seed = cfg.seed;
    cfg.train.augmentation.seed = cfg.seed;
    Ok(cfg)
}

impl RunConfig {
    /// Snapshot in the same flat form the loader reads.
    pub fn to_flat_json(&self) -> Result<String> {
        let flat: Map<String, Value> = flatten(&serde_json::to_value(self)?).into_iter().collect();
        Ok(serde_json::to_string_pretty(&Value::Object(flat))?)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("no dataset root; pass --data or set {DATA_ENV}")))
    }
}
