//! Slide persistence (PNG image, PGM mask, JSON sidecar) and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LesionBlob, SlideParams, SyntheticSlide};
use crate::error::{Error, Result};
use crate::xai::{read_pgm, write_pgm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSidecar {
    pub seed: u64,
    pub label: u8,
    pub params: SlideParams,
    pub lesions: Vec<LesionBlob>,
}

pub fn slide_paths(dir: &Path, seed: u64) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("slide_{seed}.png")),
        dir.join(format!("slide_{seed}_mask.pgm")),
        dir.join(format!("slide_{seed}.json")),
    )
}

pub fn save_slide(dir: &Path, slide: &SyntheticSlide, params: &SlideParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (png, pgm, json) = slide_paths(dir, slide.seed);
    let side = slide.size as u32;
    image::RgbImage::from_raw(side, side, slide.image.clone())
        .ok_or_else(|| Error::Shape("slide buffer does not match its size".into()))?
        .save(&png)?;
    let mask: Vec<u8> = slide.lesion_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(&pgm, slide.size, slide.size, &mask)?;
    let sidecar = SlideSidecar {
        seed: slide.seed,
        label: slide.label,
        params: params.clone(),
        lesions: slide.lesions.clone(),
    };
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
}

pub fn load_slide(dir: &Path, seed: u64) -> Result<(SyntheticSlide, SlideParams)> {
    let (png, pgm, json) = slide_paths(dir, seed);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: SlideSidecar = serde_json::from_str(&text)?;
    let img = image::open(&png)?.to_rgb8();
    let (w, h, mask) = read_pgm(&pgm)?;
    if img.width() as usize != w || img.height() as usize != h || w != h {
        return Err(Error::Image(format!("slide {seed}: image and mask sizes differ")));
    }
    let mut slide = SyntheticSlide::from_parts(seed, w, img.into_raw(), mask.iter().map(|&v| v > 127).collect())?;
    if slide.label != sidecar.label {
        return Err(Error::Image(format!("slide {seed}: sidecar label disagrees with mask")));
    }
    slide.lesions = sidecar.lesions;
    Ok((slide, sidecar.params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRange {
    pub name: String,
    pub first_seed: u64,
    pub count: u64,
}

impl SplitRange {
    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.first_seed..self.first_seed + self.count
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_params: SlideParams,
    pub positive_fraction: f64,
    pub max_lesions: usize,
    pub splits: Vec<SplitRange>,
}

impl DatasetManifest {
    /// Rejects overlapping seed ranges.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.splits.iter().enumerate() {
            for b in &self.splits[i + 1..] {
                if a.count > 0 && b.count > 0 && a.first_seed < b.first_seed + b.count && b.first_seed < a.first_seed + a.count {
                    return Err(Error::Config(format!("splits `{}` and `{}` share seeds", a.name, b.name)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&SplitRange> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no split named `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}
