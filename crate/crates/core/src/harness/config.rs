//! Experiment configuration: TOML file, dotted `key=value` overrides, and
//! derivation of the per-stage model configs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ClassifierConfig, MilTrainConfig, PretrainConfig, SegNetConfig};
use crate::synthdata::io::{DatasetManifest, SplitRange};
use crate::synthdata::SlideParams;
use crate::tensor::ResizeMode;
use crate::xai::{Aggregator, XaiConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every random draw in the experiment derives from this seed.
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub data: DataConfig,
    pub classifier: ClassifierSection,
    pub mil: MilSection,
    pub segnet: SegnetSection,
    pub xai: XaiConfig,
    pub evaluation: EvaluationSection,
    pub stability: StabilitySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub first_seed: u64,
    /// Slides with pixel annotations used for backbone pretraining and the segmentation model.
    pub annotated_slides: u64,
    pub train_slides: u64,
    pub val_slides: u64,
    pub test_slides: u64,
    pub positive_fraction: f64,
    pub max_lesions: usize,
    pub tile_size: usize,
    pub tissue_threshold: f64,
    /// Standard deviation of the random stain mixing; 0 disables it.
    pub stain_jitter: f64,
    /// Macenko-normalize every slide onto a fixed reference slide.
    pub stain_normalization: bool,
    pub slide: SlideParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            first_seed: 1000,
            annotated_slides: 32,
            train_slides: 40,
            val_slides: 16,
            test_slides: 24,
            positive_fraction: 0.5,
            max_lesions: 3,
            tile_size: 64,
            tissue_threshold: 0.8,
            stain_jitter: 0.05,
            stain_normalization: true,
            slide: SlideParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub conv_widths: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub hidden: [usize; 2],
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        ClassifierSection {
            conv_widths: c.conv_widths,
            pool_after: c.pool_after,
            hidden: c.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MilMode {
    /// Pretrain the backbone on the auxiliary tile task, freeze it, train the head with MIL.
    Frozen,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilSection {
    pub mode: MilMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    /// Auxiliary tiles count as lesion tiles from this lesion fraction on;
    /// tiles strictly between 0 and it are dropped.
    pub aux_lesion_fraction: f64,
    /// Re-initialize the head after pretraining instead of fine-tuning the
    /// pretrained tile head with the MIL objective.
    pub reset_head: bool,
}

impl Default for MilSection {
    fn default() -> Self {
        MilSection {
            mode: MilMode::Frozen,
            epochs: 40,
            learning_rate: 1e-3,
            pretrain_epochs: 15,
            pretrain_batch_size: 16,
            pretrain_learning_rate: 1e-3,
            aux_lesion_fraction: 0.01,
            reset_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegnetSection {
    pub widths: [usize; 3],
    pub upsample: ResizeMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_tiles: usize,
    /// Connected lesion regions smaller than this many pixels are dropped from
    /// the segmentation masks used as ground truth.
    pub min_component_area: usize,
}

impl Default for SegnetSection {
    fn default() -> Self {
        SegnetSection {
            widths: SegNetConfig::default().widths,
            upsample: ResizeMode::Nearest,
            epochs: 12,
            learning_rate: 5e-3,
            batch_size: 8,
            train_tiles: 400,
            min_component_area: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub aggregators: Vec<Aggregator>,
    /// Heatmaps are written for this many test tiles per aggregator.
    pub heatmap_tiles: usize,
    pub prediction_bins: Vec<f64>,
    pub annotation_bins: Vec<f64>,
    /// Label shuffles for the faithfulness control.
    pub shuffles: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            aggregators: Aggregator::ALL.to_vec(),
            heatmap_tiles: 8,
            prediction_bins: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            annotation_bins: vec![0.0, 0.05, 0.15, 0.3, 0.6, 1.0],
            shuffles: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    /// Pairs where either tile scores at or below this are excluded.
    pub prediction_floor: f64,
    /// Shifted grids as `"<δx><δy>"` codes.
    pub shifts: Vec<String>,
    pub overlap_bins: Vec<f64>,
    pub difference_bins: Vec<f64>,
    pub annotation_bins: Vec<f64>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            prediction_floor: 0.2,
            shifts: vec!["01".into(), "10".into(), "11".into()],
            overlap_bins: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8],
            difference_bins: vec![0.0, 0.1, 0.2, 0.3, 0.5, 1.0],
            annotation_bins: vec![0.0, 0.05, 0.15, 0.3, 0.6, 1.0],
        }
    }
}

pub fn parse_shift(code: &str) -> Result<(usize, usize)> {
    match code {
        "00" => Ok((0, 0)),
        "01" => Ok((0, 1)),
        "10" => Ok((1, 0)),
        "11" => Ok((1, 1)),
        _ => Err(Error::Config(format!("unknown grid shift `{code}` (01, 10, 11)"))),
    }
}

/// Named sub-seeds so that stages never share a random stream.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Classifier = 1,
    Pretrain = 2,
    Head = 3,
    Mil = 4,
    Segnet = 5,
    SegnetTiles = 6,
    Stain = 7,
    Shuffle = 8,
    Selection = 9,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `section.key=value`; the value is read as a TOML literal and
    /// falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config entry")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_owned(), value.clone());
                break;
            }
            slot = table
                .entry((*part).to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.tile_size == 0 || !d.tile_size.is_multiple_of(4) {
            return Err(Error::Config(format!("tile size {} is not a positive multiple of 4", d.tile_size)));
        }
        if !(0.0..=1.0).contains(&d.positive_fraction) || !(0.0..=1.0).contains(&d.tissue_threshold) {
            return Err(Error::Config("fractions must lie in [0,1]".into()));
        }
        if d.stain_jitter < 0.0 {
            return Err(Error::Config("stain jitter must be non-negative".into()));
        }
        d.slide.validate()?;
        self.classifier_config().validate()?;
        self.xai.validate()?;
        let layers = self.classifier.conv_widths.len();
        if let Some(l) = self.xai.layers.iter().find(|&&l| l == 0 || l > layers) {
            return Err(Error::Config(format!("xai layer {l} outside 1..={layers}")));
        }
        if self.evaluation.aggregators.is_empty() {
            return Err(Error::Config("no aggregators to evaluate".into()));
        }
        for s in &self.stability.shifts {
            if parse_shift(s)? == (0, 0) {
                return Err(Error::Config("the base grid is always included; list only shifted grids".into()));
            }
        }
        if !(0.0..1.0).contains(&self.stability.prediction_floor) {
            return Err(Error::Config("prediction floor outside [0,1)".into()));
        }
        for (name, edges) in [
            ("evaluation.prediction_bins", &self.evaluation.prediction_bins),
            ("evaluation.annotation_bins", &self.evaluation.annotation_bins),
            ("stability.overlap_bins", &self.stability.overlap_bins),
            ("stability.difference_bins", &self.stability.difference_bins),
            ("stability.annotation_bins", &self.stability.annotation_bins),
        ] {
            if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} must be strictly increasing with ≥ 2 edges")));
            }
        }
        let m = &self.mil;
        if m.learning_rate <= 0.0 || m.pretrain_learning_rate <= 0.0 || self.segnet.learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if m.pretrain_batch_size == 0 || self.segnet.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.manifest().validate()
    }

    pub fn derived_seed(&self, stream: Stream) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream as u64 * 0x1000_0001)
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            tile_size: self.data.tile_size,
            conv_widths: self.classifier.conv_widths.clone(),
            pool_after: self.classifier.pool_after.clone(),
            hidden: self.classifier.hidden,
            seed: self.derived_seed(Stream::Classifier),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.mil.pretrain_epochs,
            batch_size: self.mil.pretrain_batch_size,
            learning_rate: self.mil.pretrain_learning_rate,
            seed: self.derived_seed(Stream::Pretrain),
        }
    }

    pub fn mil_config(&self) -> MilTrainConfig {
        MilTrainConfig {
            epochs: self.mil.epochs,
            learning_rate: self.mil.learning_rate,
            seed: self.derived_seed(Stream::Mil),
        }
    }

    pub fn segnet_config(&self) -> SegNetConfig {
        SegNetConfig {
            tile_size: self.data.tile_size,
            widths: self.segnet.widths,
            classes: 2,
            upsample: self.segnet.upsample,
            seed: self.derived_seed(Stream::Segnet),
        }
    }

    /// Contiguous, disjoint seed ranges: annotated, train, val, test.
    pub fn manifest(&self) -> DatasetManifest {
        let d = &self.data;
        let mut next = d.first_seed;
        let mut split = |name: &str, count: u64| {
            let s = SplitRange {
                name: name.into(),
                first_seed: next,
                count,
            };
            next += count;
            s
        };
        DatasetManifest {
            base_params: d.slide.clone(),
            positive_fraction: d.positive_fraction,
            max_lesions: d.max_lesions,
            splits: vec![
                split("annotated", d.annotated_slides),
                split("train", d.train_slides),
                split("val", d.val_slides),
                split("test", d.test_slides),
            ],
        }
    }

    pub fn split_seeds(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.manifest().split(name)?.seeds().collect())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            threads: 0,
            data: DataConfig::default(),
            classifier: ClassifierSection::default(),
            mil: MilSection::default(),
            segnet: SegnetSection::default(),
            xai: XaiConfig::default(),
            evaluation: EvaluationSection::default(),
            stability: StabilitySection::default(),
        }
    }
}
