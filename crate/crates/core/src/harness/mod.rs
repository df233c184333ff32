//! End-to-end experiments: data generation, training, the explanation sweep
//! and the shifted-grid stability study, with all outputs under one directory.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod stability;
pub mod train;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, MilMode};
pub use evaluate::{EvaluationSummary, FaithfulnessEntry};
pub use stability::{OverlapRecord, StabilitySummary};

use crate::error::{Error, Result};
use crate::nets::{EpochLog, SegNet, TileClassifier};
use crate::synthdata::SyntheticSlide;

pub const SCORES_SCHEMA: &str = "# tilewise-xai scores v1";
pub const STABILITY_SCHEMA: &str = "# tilewise-xai stability v1";
pub const LOG_SCHEMA: &str = "# tilewise-xai epochs v1";

/// Writes `rows` as CSV preceded by a schema comment line.
pub fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let mut buf = format!("{schema}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub evaluation: EvaluationSummary,
    pub stability: StabilitySummary,
}

/// One experiment bound to an output directory; prepared slides are cached per split.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    slides: HashMap<String, Vec<SyntheticSlide>>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let exp = Experiment {
            cfg,
            out,
            slides: HashMap::new(),
        };
        let resolved = exp.out.join("config.resolved.toml");
        fs::write(&resolved, exp.cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;
        Ok(exp)
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn split(&mut self, name: &str) -> Result<&[SyntheticSlide]> {
        if !self.slides.contains_key(name) {
            let slides = data::prepare_split(&self.cfg, name)?;
            self.slides.insert(name.to_owned(), slides);
        }
        Ok(&self.slides[name])
    }

    pub fn checkpoint_path(&self, model: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{model}.json"))
    }

    /// Digest of the config sections a model depends on. The test split comes
    /// last in the manifest, so its size does not affect training.
    fn fingerprint(&self, model: &str) -> Result<String> {
        let c = &self.cfg;
        let mut data = c.data.clone();
        data.test_slides = 0;
        let value = match model {
            "segnet" => serde_json::json!({"seed": c.seed, "data": data, "segnet": c.segnet}),
            _ => serde_json::json!({"seed": c.seed, "data": data, "classifier": c.classifier, "mil": c.mil}),
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }

    fn fingerprint_path(&self, model: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{model}.fingerprint"))
    }

    fn checkpoint_is_current(&self, model: &str) -> Result<bool> {
        let path = self.fingerprint_path(model);
        Ok(self.checkpoint_path(model).exists()
            && fs::read_to_string(&path).is_ok_and(|f| f.trim() == self.fingerprint(model).unwrap_or_default()))
    }

    fn mark_checkpoint(&self, model: &str) -> Result<()> {
        let path = self.fingerprint_path(model);
        fs::write(&path, self.fingerprint(model)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn write_log(&self, name: &str, logs: &[EpochLog]) -> Result<()> {
        write_csv(&self.dir("logs")?.join(format!("{name}.csv")), LOG_SCHEMA, logs)
    }

    pub fn gen_data(&self) -> Result<usize> {
        data::write_dataset(&self.cfg, &self.out.join("data"))
    }

    pub fn train_segnet(&mut self) -> Result<SegNet> {
        let annotated = self.split("annotated")?.to_vec();
        let (net, logs) = train::train_segnet(&self.cfg, &annotated)?;
        self.dir("checkpoints")?;
        net.save(&self.checkpoint_path("segnet"))?;
        self.mark_checkpoint("segnet")?;
        self.write_log("segnet", &logs)?;
        Ok(net)
    }

    pub fn train_classifier(&mut self) -> Result<TileClassifier> {
        let annotated = self.split("annotated")?.to_vec();
        let train = self.split("train")?.to_vec();
        let val = self.split("val")?.to_vec();
        let (classifier, logs) = train::train_classifier(&self.cfg, &annotated, &train, &val)?;
        self.dir("checkpoints")?;
        classifier.save(&self.checkpoint_path("classifier"))?;
        self.mark_checkpoint("classifier")?;
        self.write_log("pretrain", &logs.pretrain)?;
        self.write_log("mil", &logs.mil)?;
        Ok(classifier)
    }

    /// Loads the checkpoint written for the same config, training otherwise.
    pub fn segnet(&mut self) -> Result<SegNet> {
        if self.checkpoint_is_current("segnet")? {
            return SegNet::load(&self.checkpoint_path("segnet"));
        }
        self.train_segnet()
    }

    pub fn classifier(&mut self) -> Result<TileClassifier> {
        if self.checkpoint_is_current("classifier")? {
            return TileClassifier::load(&self.checkpoint_path("classifier"));
        }
        self.train_classifier()
    }

    pub fn evaluate(&mut self) -> Result<EvaluationSummary> {
        let segnet = self.segnet()?;
        let classifier = self.classifier()?;
        let heatmaps = self.out.join("heatmaps");
        if heatmaps.exists() {
            fs::remove_dir_all(&heatmaps).map_err(|e| Error::io(&heatmaps, e))?;
        }
        let test = self.split("test")?.to_vec();
        let ev = evaluate::evaluate(&self.cfg, &classifier, &segnet, &test, Some(&heatmaps))?;
        write_csv(&self.out.join("scores.csv"), SCORES_SCHEMA, &ev.records)?;
        write_json(&self.out.join("summary.json"), &ev.summary)?;
        Ok(ev.summary)
    }

    pub fn stability(&mut self) -> Result<StabilitySummary> {
        let classifier = self.classifier()?;
        let test = self.split("test")?.to_vec();
        let study = stability::run_study(&self.cfg, &classifier, &test)?;
        write_csv(&self.out.join("stability.csv"), STABILITY_SCHEMA, &study.records)?;
        write_json(&self.out.join("stability_summary.json"), &study.summary)?;
        Ok(study.summary)
    }

    /// Full protocol: both models, the evaluation sweep and the stability study.
    pub fn run(&mut self) -> Result<PipelineReport> {
        let evaluation = self.evaluate()?;
        let stability = self.stability()?;
        Ok(PipelineReport { evaluation, stability })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u8,
        b: Option<f64>,
    }

    #[test]
    fn csv_has_schema_line_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&path, "# demo v1", &[Row { a: 1, b: None }, Row { a: 2, b: Some(0.5) }]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "# demo v1\na,b\n1,\n2,0.5\n");
    }
}
