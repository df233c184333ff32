//! Explanation sweep over test tiles, agreement scores against both ground
//! truths, and the faithfulness report.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Stream};
use super::data::bags;
use crate::error::Result;
use crate::metrics::{
    binned_summary, intersection_score, iou_score, precision_score, rank_correlation, roc_auc, uniform_baseline, Bin,
    GtSource, ScoreRecord,
};
use crate::nets::{max_with_index, SegNet, TileClassifier};
use crate::synthdata::{SyntheticSlide, Tile};
use crate::xai::{explain_tile_with, mask_pixels, write_gray_png, write_pgm, Aggregator, BinaryMask, Explanation};

/// Fewer scored tiles than this make a correlation entry degenerate.
pub const MIN_FAITHFULNESS_TILES: usize = 30;

#[derive(Clone, Debug, Serialize)]
pub struct ScoreSummary {
    pub gt_source: GtSource,
    pub aggregator: Aggregator,
    pub threshold: f64,
    pub tiles: usize,
    pub intersection_rate: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_iou: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FaithfulnessEntry {
    pub gt_source: GtSource,
    pub aggregator: Aggregator,
    pub threshold: f64,
    pub tiles: usize,
    /// Spearman ρ between tile prediction and precision.
    pub rho_prediction_precision: Option<f64>,
    /// Spearman ρ between prediction-bin midpoints and per-bin hit rates.
    pub rho_prediction_hit_rate: Option<f64>,
    pub rho_annotation_precision: Option<f64>,
    /// Mean and largest |ρ| of prediction vs precision after shuffling predictions.
    pub shuffled_mean_rho: Option<f64>,
    pub shuffled_max_abs_rho: Option<f64>,
    pub degenerate: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BinnedCurve {
    pub gt_source: GtSource,
    pub aggregator: Aggregator,
    pub threshold: f64,
    pub bins: Vec<Bin>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineRow {
    pub threshold: f64,
    pub iou: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationSummary {
    pub schema: &'static str,
    pub xai_digest: String,
    pub test_slides: usize,
    pub test_tiles: usize,
    pub slide_auc: Option<f64>,
    pub slides: Vec<SlideScore>,
    /// Mean lesion-class dice of the segmentation masks on test tiles that carry lesions.
    pub segnet_dice: Option<f64>,
    pub scores: Vec<ScoreSummary>,
    pub faithfulness: Vec<FaithfulnessEntry>,
    pub precision_vs_prediction: Vec<BinnedCurve>,
    pub precision_vs_annotation: Vec<BinnedCurve>,
    pub uniform_baseline: Vec<BaselineRow>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlideScore {
    pub seed: u64,
    pub label: u8,
    pub score: f64,
    pub top_tile: String,
}

pub struct Evaluation {
    pub records: Vec<ScoreRecord>,
    pub summary: EvaluationSummary,
}

struct TileResult {
    records: Vec<ScoreRecord>,
    prediction: f64,
    dice: Option<f64>,
    heatmap: Option<Vec<Explanation>>,
}

fn mask_dice(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let inter = a.values.iter().zip(&b.values).filter(|(x, y)| **x && **y).count();
    let total = a.popcount() + b.popcount();
    (total > 0).then(|| 2.0 * inter as f64 / total as f64)
}

fn score_tile(
    cfg: &ExperimentConfig,
    classifier: &TileClassifier,
    segnet: &SegNet,
    tile: &Tile,
    slide_label: u8,
    keep_maps: bool,
) -> Result<TileResult> {
    let l = cfg.data.tile_size;
    let explanations = explain_tile_with(classifier, &tile.image, &cfg.xai, &cfg.evaluation.aggregators)?;
    let prediction = explanations[0].score;
    let seg = BinaryMask::new(l, l, segnet.predict_lesion_mask(&tile.image)?)?
        .without_small_components(cfg.segnet.min_component_area);
    let mut records = Vec::new();
    for gt_source in GtSource::ALL {
        let g = match gt_source {
            GtSource::ManualProxy => &tile.mask,
            GtSource::Segnet => &seg,
        };
        // agreement with an empty ground truth carries no information
        if g.is_empty() {
            continue;
        }
        for e in &explanations {
            for (t, a_t) in &e.masks {
                records.push(ScoreRecord {
                    tile_id: tile.id.clone(),
                    slide_label,
                    threshold: *t,
                    aggregator: e.aggregator,
                    gt_source,
                    intersection_hit: intersection_score(a_t, g)?,
                    precision: precision_score(a_t, g, *t)?,
                    popcount: a_t.popcount(),
                    iou: iou_score(a_t, g)?,
                    prediction,
                    annotated_fraction: g.fraction(),
                });
            }
        }
    }
    let dice = if tile.mask.is_empty() { None } else { mask_dice(&seg, &tile.mask) };
    Ok(TileResult {
        records,
        prediction,
        dice,
        heatmap: keep_maps.then_some(explanations),
    })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group(records: &[ScoreRecord], gt: GtSource, agg: Aggregator, t: f64) -> Vec<&ScoreRecord> {
    records
        .iter()
        .filter(|r| r.gt_source == gt && r.aggregator == agg && r.threshold == t)
        .collect()
}

/// Spearman correlations between predictions and agreement scores, with a
/// shuffled-prediction control.
pub fn faithfulness_entry(
    records: &[&ScoreRecord],
    prediction_bins: &[f64],
    shuffles: usize,
    seed: u64,
) -> Result<FaithfulnessEntry> {
    let first = records.first();
    let mut entry = FaithfulnessEntry {
        gt_source: first.map_or(GtSource::ManualProxy, |r| r.gt_source),
        aggregator: first.map_or(Aggregator::Abs, |r| r.aggregator),
        threshold: first.map_or(0.0, |r| r.threshold),
        tiles: records.len(),
        rho_prediction_precision: None,
        rho_prediction_hit_rate: None,
        rho_annotation_precision: None,
        shuffled_mean_rho: None,
        shuffled_max_abs_rho: None,
        degenerate: None,
    };
    if records.len() < MIN_FAITHFULNESS_TILES {
        entry.degenerate = Some(format!("{} scored tiles, need {MIN_FAITHFULNESS_TILES}", records.len()));
        return Ok(entry);
    }
    let s: Vec<f64> = records.iter().map(|r| r.prediction).collect();
    let p: Vec<f64> = records.iter().map(|r| r.precision).collect();
    let a: Vec<f64> = records.iter().map(|r| r.annotated_fraction).collect();
    entry.rho_prediction_precision = rank_correlation(&s, &p)?;
    entry.rho_annotation_precision = rank_correlation(&a, &p)?;
    let hits: Vec<(f64, f64)> = records.iter().map(|r| (r.prediction, f64::from(r.intersection_hit))).collect();
    let (mids, rates): (Vec<f64>, Vec<f64>) = binned_summary(&hits, prediction_bins)?
        .into_iter()
        .filter_map(|b| b.mean.map(|m| ((b.lo + b.hi) / 2.0, m)))
        .unzip();
    if mids.len() >= 3 {
        entry.rho_prediction_hit_rate = rank_correlation(&mids, &rates)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = s.clone();
    let mut rhos = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        shuffled.shuffle(&mut rng);
        if let Some(r) = rank_correlation(&shuffled, &p)? {
            rhos.push(r);
        }
    }
    entry.shuffled_mean_rho = mean(rhos.iter().copied());
    entry.shuffled_max_abs_rho = rhos.iter().map(|r| r.abs()).reduce(f64::max);
    if entry.rho_prediction_precision.is_none() {
        entry.degenerate = Some("constant prediction or precision series".into());
    }
    Ok(entry)
}

fn sanitize(id: &str) -> String {
    id.replace('/', "_")
}

fn write_heatmaps(dir: &Path, cfg: &ExperimentConfig, tile: &Tile, explanations: &[Explanation]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let l = cfg.data.tile_size;
    for e in explanations {
        let stem = format!("{}_{}", sanitize(&tile.id), e.aggregator);
        write_gray_png(&dir.join(format!("{stem}.png")), l, l, e.map.to_gray8())?;
        let masks: Vec<serde_json::Value> = e
            .masks
            .iter()
            .map(|(t, m)| {
                let name = format!("{stem}_t{:.0}.pgm", t * 100.0);
                write_pgm(&dir.join(&name), l, l, &mask_pixels(m))?;
                Ok(serde_json::json!({"threshold": t, "mask": name, "popcount": m.popcount()}))
            })
            .collect::<Result<_>>()?;
        let record = serde_json::json!({
            "tile_id": tile.id,
            "aggregator": e.aggregator,
            "prediction": e.score,
            "layers": cfg.xai.layers,
            "xai_digest": cfg.xai.digest(),
            "heatmap": format!("{stem}.png"),
            "masks": masks,
            "lesion_pixels": tile.mask.popcount(),
        });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| crate::Error::io(&path, e))?;
    }
    Ok(())
}

/// Scores every test tile; heatmaps go to `heatmap_dir` when given.
pub fn evaluate(
    cfg: &ExperimentConfig,
    classifier: &TileClassifier,
    segnet: &SegNet,
    test: &[SyntheticSlide],
    heatmap_dir: Option<&Path>,
) -> Result<Evaluation> {
    let test_bags = bags(cfg, test, (0, 0))?;
    let mut warnings = Vec::new();
    if test.is_empty() {
        warnings.push("no test slides configured; the report is empty".to_owned());
    }

    // the first lesion-bearing tiles in slide order get heatmaps
    let mut budget = cfg.evaluation.heatmap_tiles;
    let work: Vec<(&Tile, u8, bool)> = test_bags
        .iter()
        .flat_map(|b| b.tiles.iter().map(move |t| (t, b.label)))
        .map(|(t, label)| {
            let keep = budget > 0 && !t.mask.is_empty();
            if keep {
                budget -= 1;
            }
            (t, label, keep)
        })
        .collect();
    let results: Vec<TileResult> = work
        .par_iter()
        .map(|&(t, label, keep)| score_tile(cfg, classifier, segnet, t, label, keep && heatmap_dir.is_some()))
        .collect::<Result<_>>()?;

    if let Some(dir) = heatmap_dir {
        for ((tile, _, _), r) in work.iter().zip(&results) {
            if let Some(maps) = &r.heatmap {
                write_heatmaps(dir, cfg, tile, maps)?;
            }
        }
    }

    // slide scores are the max over each bag's tile scores, taken from the sweep
    let mut offset = 0;
    let mut slide_scores = Vec::new();
    let mut slide_labels = Vec::new();
    let mut slides = Vec::new();
    for b in &test_bags {
        let preds: Vec<f64> = results[offset..offset + b.tiles.len()].iter().map(|r| r.prediction).collect();
        offset += b.tiles.len();
        match max_with_index(&preds) {
            Some((s, i)) => {
                slide_scores.push(s);
                slide_labels.push(b.label == 1);
                slides.push(SlideScore {
                    seed: b.slide_seed,
                    label: b.label,
                    score: s,
                    top_tile: b.tiles[i].id.clone(),
                });
            }
            None => warnings.push(format!("test slide {} has no tissue tiles", b.slide_seed)),
        }
    }
    let slide_auc = roc_auc(&slide_scores, &slide_labels);
    if slide_auc.is_none() && !test.is_empty() {
        warnings.push("slide AUC undefined: the test split lacks one of the classes".to_owned());
    }

    let segnet_dice = mean(results.iter().filter_map(|r| r.dice));
    let records: Vec<ScoreRecord> = results.into_iter().flat_map(|r| r.records).collect();

    let mut scores = Vec::new();
    let mut faithfulness = Vec::new();
    let mut vs_prediction = Vec::new();
    let mut vs_annotation = Vec::new();
    let ev = &cfg.evaluation;
    let mut entry_index = 0u64;
    for gt in GtSource::ALL {
        for &agg in &ev.aggregators {
            for &t in &cfg.xai.thresholds {
                let rs = group(&records, gt, agg, t);
                scores.push(ScoreSummary {
                    gt_source: gt,
                    aggregator: agg,
                    threshold: t,
                    tiles: rs.len(),
                    intersection_rate: mean(rs.iter().map(|r| f64::from(r.intersection_hit))),
                    mean_precision: mean(rs.iter().map(|r| r.precision)),
                    mean_iou: mean(rs.iter().filter_map(|r| r.iou)),
                });
                let seed = cfg.derived_seed(Stream::Shuffle).wrapping_add(entry_index);
                entry_index += 1;
                let mut entry = faithfulness_entry(&rs, &ev.prediction_bins, ev.shuffles, seed)?;
                (entry.gt_source, entry.aggregator, entry.threshold) = (gt, agg, t);
                faithfulness.push(entry);
                let curve = |key: fn(&ScoreRecord) -> f64, edges: &[f64]| -> Result<BinnedCurve> {
                    let pts: Vec<(f64, f64)> = rs.iter().map(|r| (key(r), r.precision)).collect();
                    Ok(BinnedCurve {
                        gt_source: gt,
                        aggregator: agg,
                        threshold: t,
                        bins: binned_summary(&pts, edges)?,
                    })
                };
                vs_prediction.push(curve(|r| r.prediction, &ev.prediction_bins)?);
                vs_annotation.push(curve(|r| r.annotated_fraction, &ev.annotation_bins)?);
            }
        }
    }
    let uniform = cfg
        .xai
        .thresholds
        .iter()
        .map(|&t| {
            let b = uniform_baseline(t)?;
            Ok(BaselineRow {
                threshold: t,
                iou: b.iou,
                precision: b.precision,
            })
        })
        .collect::<Result<_>>()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Evaluation {
        summary: EvaluationSummary {
            schema: "tilewise-xai/summary/v1",
            xai_digest: cfg.xai.digest(),
            test_slides: test.len(),
            test_tiles: work.len(),
            slide_auc,
            slides,
            segnet_dice,
            scores,
            faithfulness,
            precision_vs_prediction: vs_prediction,
            precision_vs_annotation: vs_annotation,
            uniform_baseline: uniform,
            warnings,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record(prediction: f64, precision: f64, hit: u8) -> ScoreRecord {
        ScoreRecord {
            tile_id: "x".into(),
            slide_label: 1,
            threshold: 0.9,
            aggregator: Aggregator::Abs,
            gt_source: GtSource::Segnet,
            intersection_hit: hit,
            precision,
            popcount: 10,
            iou: None,
            prediction,
            annotated_fraction: precision / 2.0,
        }
    }

    #[test]
    fn noisy_increasing_scores_are_faithful() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rs: Vec<ScoreRecord> = (0..200)
            .map(|i| {
                let s = i as f64 / 200.0;
                let p = s + rng.random_range(-0.2..0.2);
                record(s, p, u8::from(p > 0.3))
            })
            .collect();
        let refs: Vec<&ScoreRecord> = rs.iter().collect();
        let e = faithfulness_entry(&refs, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], 20, 9).unwrap();
        assert!(e.rho_prediction_precision.unwrap() > 0.8);
        assert!(e.rho_prediction_hit_rate.unwrap() > 0.8);
        assert!(e.shuffled_mean_rho.unwrap().abs() < 0.1);
        assert!(e.degenerate.is_none());
    }

    #[test]
    fn too_few_tiles_flagged() {
        let rs: Vec<ScoreRecord> = (0..10).map(|i| record(i as f64 / 10.0, 0.5, 1)).collect();
        let refs: Vec<&ScoreRecord> = rs.iter().collect();
        let e = faithfulness_entry(&refs, &[0.0, 1.0], 5, 1).unwrap();
        assert!(e.degenerate.is_some());
        assert_eq!(e.rho_prediction_precision, None);
    }

    #[test]
    fn constant_series_flagged() {
        let rs: Vec<ScoreRecord> = (0..40).map(|i| record(i as f64 / 40.0, 0.5, 1)).collect();
        let refs: Vec<&ScoreRecord> = rs.iter().collect();
        let e = faithfulness_entry(&refs, &[0.0, 1.0], 5, 1).unwrap();
        assert!(e.degenerate.is_some());
    }

    #[test]
    fn dice_of_masks() {
        let a = BinaryMask::new(1, 4, vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new(1, 4, vec![true, false, false, false]).unwrap();
        assert_eq!(mask_dice(&a, &b), Some(2.0 / 3.0));
        assert_eq!(mask_dice(&BinaryMask::empty(1, 4), &BinaryMask::empty(1, 4)), None);
    }
}
