//! Run configuration: model architecture, training schedule, data source and
//! loss weights.
//!
//! Configs are TOML files. A file may list `include = ["base.toml", ..]`;
//! included files are merged first (later ones win) and the including file is
//! merged on top. Dotted `key.path=value` overrides are applied last.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CONFIG_SCHEMA: &str = "nmrf-config/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfEdges {
    On,
    Off,
    /// Self-edge layers reuse the attention parameters of the preceding
    /// neighbour-edge layer.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stem_channels: usize,
    /// Output channels of the three residual blocks (strides 1, 2, 1).
    pub block_channels: [usize; 3],
    /// Channels of the shared projection applied at both levels.
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Candidate labels per coarse pixel.
    pub k: usize,
    /// Largest full-resolution disparity, a multiple of 8.
    pub max_disparity: usize,
    pub lookup_radius: usize,
    pub disparity_encoding_dim: usize,
    pub groups: usize,
    pub proposal_layers: usize,
    pub inference_layers: usize,
    pub refinement_layers: usize,
    pub inference_window: usize,
    pub refinement_window: usize,
    pub adaptive_bias: bool,
    pub position_aggregation: bool,
    pub self_edges: SelfEdges,
    /// Keep other seeds of the same pixel out of the proposal attention.
    pub proposal_mask_same_pixel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size architecture constants.
    pub fn full() -> Self {
        Self {
            stem_channels: 64,
            block_channels: [64, 96, 128],
            feature_channels: 256,
            embed_dim: 128,
            heads: 4,
            mlp_ratio: 2,
            k: 4,
            max_disparity: 192,
            lookup_radius: 4,
            disparity_encoding_dim: 32,
            groups: 8,
            proposal_layers: 5,
            inference_layers: 10,
            refinement_layers: 5,
            inference_window: 6,
            refinement_window: 4,
            adaptive_bias: true,
            position_aggregation: true,
            self_edges: SelfEdges::On,
            proposal_mask_same_pixel: false,
        }
    }

    /// Desk-scale preset: narrower backbone and shallower message passing.
    pub fn toy() -> Self {
        Self {
            stem_channels: 32,
            block_channels: [32, 48, 64],
            feature_channels: 64,
            embed_dim: 64,
            max_disparity: 96,
            proposal_layers: 2,
            inference_layers: 4,
            refinement_layers: 2,
            ..Self::full()
        }
    }

    pub fn coarse_shifts(&self) -> usize {
        self.max_disparity / 8
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(8) {
            return fail(format!("max_disparity {} must be a positive multiple of 8", self.max_disparity));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.heads == 0 || !self.heads.is_multiple_of(2) {
            return fail("heads must be even (half attend along rows, half along columns)".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) || !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.groups == 0 || !self.feature_channels.is_multiple_of(self.groups) {
            return fail(format!(
                "feature_channels {} must be divisible by groups {}",
                self.feature_channels, self.groups
            ));
        }
        if self.inference_window == 0 || self.refinement_window == 0 {
            return fail("window sizes must be positive".into());
        }
        if self.disparity_encoding_dim == 0 || !self.disparity_encoding_dim.is_multiple_of(2) {
            return fail("disparity_encoding_dim must be even and positive".into());
        }
        if self.proposal_layers == 0 {
            return fail("proposal_layers must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Random crop `[height, width]`; absent trains on whole images.
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Fraction of the schedule spent warming up.
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Single-threaded, fixed-order execution so runs are bit-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300_000,
            batch: 8,
            crop: Some([384, 768]),
            max_lr: 5e-4,
            weight_decay: 1e-5,
            pct_start: 0.01,
            div_factor: 25.0,
            final_div_factor: 100.0,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Dots,
    Gradients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    pub min_disparity: f64,
    pub max_disparity: f64,
    /// Allow slanted planes (otherwise fronto-parallel only).
    pub slanted: bool,
    pub integer_disparity: bool,
    pub texture: Texture,
    /// Lattice spacing of the dot texture in pixels.
    pub dot_size: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 256,
            min_layers: 2,
            max_layers: 5,
            min_disparity: 2.0,
            max_disparity: 48.0,
            slanted: true,
            integer_disparity: false,
            texture: Texture::Dots,
            dot_size: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisparityFormat {
    Pfm,
    #[serde(rename = "kitti-png16")]
    KittiPng16,
}

impl std::str::FromStr for DisparityFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfm" => Ok(Self::Pfm),
            "kitti-png16" => Ok(Self::KittiPng16),
            other => Err(Error::InvalidArgument(format!("unknown disparity format {other}"))),
        }
    }
}

/// One stereo pair on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFiles {
    pub left: String,
    pub right: String,
    pub disparity: Option<String>,
    pub format: Option<DisparityFormat>,
    /// Precomputed segment-label map of the left view.
    pub segments: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    /// Target superpixel spacing in pixels.
    pub step: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            step: 8,
            compactness: 0.4,
            iterations: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
    /// Disk pairs; when non-empty they replace the synthetic training split.
    pub train_files: Vec<PairFiles>,
    pub eval_files: Vec<PairFiles>,
    pub segmenter: SegmenterConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            train_scenes: 20,
            eval_scenes: 4,
            seed: 0,
            train_files: Vec::new(),
            eval_files: Vec::new(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub init: f64,
    pub proposal: f64,
    pub disparity: f64,
    /// Online ground-truth suppression radius in pixels.
    pub nms_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            init: 1.0,
            proposal: 1.0,
            disparity: 1.0,
            nms_threshold: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.to_string(),
            model: ModelConfig::full(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    /// Overfitting preset: 20 synthetic 128×256 scenes, 2000 steps on
    /// full-width 64-row crops.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig {
                steps: 2000,
                batch: 1,
                crop: Some([64, 256]),
                max_lr: 1e-3,
                weight_decay: 1e-5,
                pct_start: 0.05,
                div_factor: 10.0,
                final_div_factor: 20.0,
                grad_clip: 1.0,
                seed: 0,
                log_every: 50,
                checkpoint_every: 500,
                deterministic: true,
            },
            data: DataConfig {
                synthetic: SyntheticConfig {
                    min_layers: 2,
                    max_layers: 4,
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        self.model.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if let Some([h, w]) = self.train.crop {
            if h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0 {
                return Err(Error::Config(format!("crop {h}x{w} must be multiples of 8 and at least 32")));
            }
        }
        let s = &self.data.synthetic;
        if s.max_disparity > self.model.max_disparity as f64 {
            return Err(Error::Config(format!(
                "synthetic disparity range up to {} exceeds max_disparity {}",
                s.max_disparity, self.model.max_disparity
            )));
        }
        Ok(())
    }

    /// Loads a config file, resolving includes relative to the file.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = load_table(path, 0)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Starts from a named preset and applies overrides.
    pub fn from_preset(name: &str, overrides: &[String]) -> Result<Self> {
        Self::preset(name)?.with_overrides(overrides)
    }

    /// A copy with `key=value` overrides applied and re-validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        let preset = match table.remove("preset") {
            Some(toml::Value::String(p)) => Some(p),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => None,
        };
        table.remove("include");
        let cfg = match preset {
            Some(p) => {
                let mut base = toml::Table::try_from(Self::preset(&p)?).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut base, table);
                base
            }
            None => table,
        };
        let cfg: Self = cfg.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the architecture section; checkpoints record it so weights are
    /// never loaded into a differently shaped model.
    pub fn model_hash(&self) -> String {
        hash_json(&self.model)
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialises");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

const MAX_INCLUDE_DEPTH: usize = 8;

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::Config(format!("include depth exceeded at {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut own: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    let includes = match own.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(Error::Config("include entries must be strings".into())),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(Error::Config("include must be an array of paths".into())),
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, own);
    Ok(merged)
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal and falls back
/// to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
