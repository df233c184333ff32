//! Slide preparation: generation, stain jitter, normalization and tiling.

use std::path::Path;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Stream};
use crate::error::Result;
use crate::synthdata::io::save_slide;
use crate::synthdata::stain::normalize_or_keep;
use crate::synthdata::{generate_slide, sample_params, stain_perturb, tile_grid, GridSpec, StainReference, SyntheticSlide, TileBag};

/// Generates slide `seed` exactly as stored by `gen-data` (no stain processing).
pub fn raw_slide(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticSlide> {
    let d = &cfg.data;
    let params = sample_params(seed, &d.slide, d.positive_fraction, d.max_lesions);
    generate_slide(seed, &params)
}

/// Raw slide with the configured stain jitter, then normalization onto the
/// default reference.
pub fn prepare_slide(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticSlide> {
    let mut slide = raw_slide(cfg, seed)?;
    if cfg.data.stain_jitter > 0.0 {
        let jitter_seed = cfg.derived_seed(Stream::Stain) ^ seed.wrapping_mul(0xA24B_AED4_963E_E407);
        slide.image = stain_perturb(&slide.image, jitter_seed, cfg.data.stain_jitter);
    }
    if cfg.data.stain_normalization {
        normalize_or_keep(&mut slide.image, &StainReference::default());
    }
    Ok(slide)
}

pub fn grid_spec(cfg: &ExperimentConfig, shift: (usize, usize)) -> Result<GridSpec> {
    GridSpec::new(cfg.data.tile_size, shift, cfg.data.tissue_threshold)
}

/// Prepared slides of a split, in seed order.
pub fn prepare_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<SyntheticSlide>> {
    cfg.split_seeds(split)?
        .par_iter()
        .map(|&seed| prepare_slide(cfg, seed))
        .collect()
}

pub fn bags(cfg: &ExperimentConfig, slides: &[SyntheticSlide], shift: (usize, usize)) -> Result<Vec<TileBag>> {
    let grid = grid_spec(cfg, shift)?;
    slides.par_iter().map(|s| tile_grid(s, &grid)).collect()
}

/// Writes every split's raw slides plus `manifest.json` under `dir`.
pub fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let manifest = cfg.manifest();
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    manifest.save(&dir.join("manifest.json"))?;
    let mut written = 0;
    for split in &manifest.splits {
        let sub = dir.join(&split.name);
        split.seeds().collect::<Vec<_>>().par_iter().try_for_each(|&seed| {
            let slide = raw_slide(cfg, seed)?;
            let params = sample_params(seed, &cfg.data.slide, cfg.data.positive_fraction, cfg.data.max_lesions);
            save_slide(&sub, &slide, &params)
        })?;
        written += split.count as usize;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.slide.size = 192;
        cfg.data.slide.margin = 32;
        cfg.data.slide.lesion_radius = [8.0, 12.0];
        cfg.data.tile_size = 32;
        cfg
    }

    #[test]
    fn prepared_slides_are_deterministic() {
        let cfg = small();
        assert_eq!(prepare_slide(&cfg, 1003).unwrap(), prepare_slide(&cfg, 1003).unwrap());
    }

    #[test]
    fn jitter_changes_pixels_but_not_masks() {
        let mut cfg = small();
        cfg.data.stain_normalization = false;
        let raw = raw_slide(&cfg, 1001).unwrap();
        let jittered = prepare_slide(&cfg, 1001).unwrap();
        assert_ne!(raw.image, jittered.image);
        assert_eq!(raw.lesion_mask, jittered.lesion_mask);
        cfg.data.stain_jitter = 0.0;
        assert_eq!(prepare_slide(&cfg, 1001).unwrap(), raw);
    }

    #[test]
    fn dataset_written_per_split() {
        let mut cfg = small();
        cfg.data.annotated_slides = 1;
        cfg.data.train_slides = 1;
        cfg.data.val_slides = 0;
        cfg.data.test_slides = 1;
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_dataset(&cfg, dir.path()).unwrap(), 3);
        let test_seed = cfg.split_seeds("test").unwrap()[0];
        assert!(dir.path().join("test").join(format!("slide_{test_seed}.png")).exists());
        assert!(dir.path().join("manifest.json").exists());
    }
}
