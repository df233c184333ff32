//! Shifted-grid stability: explanation agreement on the overlap of tiles from
//! grids offset by quarter tiles.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{parse_shift, ExperimentConfig};
use super::data::grid_spec;
use crate::error::Result;
use crate::metrics::{binned_summary, iou_score, uniform_baseline, Bin};
use crate::nets::TileClassifier;
use crate::synthdata::{overlap_rect, tile_grid, Rect, SyntheticSlide, Tile, TileBag};
use crate::xai::{explain_tile_with, Aggregator, BinaryMask, Explanation};

/// One scored pair: two tiles from different grids, one aggregator and threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapRecord {
    pub slide_seed: u64,
    pub tile_a: String,
    pub tile_b: String,
    pub shift_a: String,
    pub shift_b: String,
    pub overlap_y: usize,
    pub overlap_x: usize,
    pub overlap_h: usize,
    pub overlap_w: usize,
    pub overlap_fraction: f64,
    pub prediction_a: f64,
    pub prediction_b: f64,
    pub prediction_diff: f64,
    /// Ground-truth lesion share of the overlap region.
    pub annotated_fraction: f64,
    pub aggregator: Aggregator,
    pub threshold: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityGroup {
    pub aggregator: Aggregator,
    pub threshold: f64,
    pub pairs: usize,
    /// Pairs dropped because both cropped masks were empty.
    pub excluded_empty_union: usize,
    pub mean_iou: Option<f64>,
    pub uniform_iou: f64,
    pub by_overlap: Vec<Bin>,
    pub by_prediction_diff: Vec<Bin>,
    pub by_annotation: Vec<Bin>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilitySummary {
    pub schema: &'static str,
    pub xai_digest: String,
    pub shifts: Vec<String>,
    pub prediction_floor: f64,
    pub slides: usize,
    pub candidate_pairs: usize,
    pub excluded_prediction_floor: usize,
    pub groups: Vec<StabilityGroup>,
}

pub struct StabilityStudy {
    pub records: Vec<OverlapRecord>,
    pub summary: StabilitySummary,
}

struct ScoredTile<'a> {
    tile: &'a Tile,
    score: f64,
    explanations: Option<Vec<Explanation>>,
}

fn crop(mask: &BinaryMask, tile: &Tile, r: &Rect) -> Result<BinaryMask> {
    mask.crop(r.y - tile.y, r.x - tile.x, r.h, r.w)
}

struct SlidePairs {
    records: Vec<OverlapRecord>,
    candidates: usize,
    floor_excluded: usize,
    /// Empty-union exclusions per (aggregator, threshold) group, in group order.
    empty_union: Vec<usize>,
}

fn slide_pairs(
    cfg: &ExperimentConfig,
    classifier: &TileClassifier,
    slide: &SyntheticSlide,
    shifts: &[(usize, usize)],
) -> Result<SlidePairs> {
    let floor = cfg.stability.prediction_floor;
    let aggs = &cfg.evaluation.aggregators;
    let grids: Vec<TileBag> = shifts
        .iter()
        .map(|&s| tile_grid(slide, &grid_spec(cfg, s)?))
        .collect::<Result<_>>()?;
    let scored: Vec<Vec<ScoredTile>> = grids
        .iter()
        .map(|bag| {
            bag.tiles
                .par_iter()
                .map(|tile| {
                    let score = classifier.classify_tile(&tile.image)?;
                    let explanations = if score > floor {
                        Some(explain_tile_with(classifier, &tile.image, &cfg.xai, aggs)?)
                    } else {
                        None
                    };
                    Ok(ScoredTile {
                        tile,
                        score,
                        explanations,
                    })
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let l = cfg.data.tile_size;
    let groups = aggs.len() * cfg.xai.thresholds.len();
    let mut out = SlidePairs {
        records: Vec::new(),
        candidates: 0,
        floor_excluded: 0,
        empty_union: vec![0; groups],
    };
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            for a in &scored[i] {
                for b in &scored[j] {
                    let Some(rect) = overlap_rect((a.tile.y, a.tile.x), (b.tile.y, b.tile.x), l) else {
                        continue;
                    };
                    out.candidates += 1;
                    let (Some(ea), Some(eb)) = (&a.explanations, &b.explanations) else {
                        out.floor_excluded += 1;
                        continue;
                    };
                    let gt = crop(&a.tile.mask, a.tile, &rect)?;
                    for (k, (xa, xb)) in ea.iter().zip(eb).enumerate() {
                        for (m, ((t, ma), (_, mb))) in xa.masks.iter().zip(&xb.masks).enumerate() {
                            // masks come from the full tiles and are only cropped here
                            let ca = crop(ma, a.tile, &rect)?;
                            let cb = crop(mb, b.tile, &rect)?;
                            let Some(iou) = iou_score(&ca, &cb)? else {
                                out.empty_union[k * cfg.xai.thresholds.len() + m] += 1;
                                continue;
                            };
                            out.records.push(OverlapRecord {
                                slide_seed: slide.seed,
                                tile_a: a.tile.id.clone(),
                                tile_b: b.tile.id.clone(),
                                shift_a: grids[i].grid.shift_code(),
                                shift_b: grids[j].grid.shift_code(),
                                overlap_y: rect.y,
                                overlap_x: rect.x,
                                overlap_h: rect.h,
                                overlap_w: rect.w,
                                overlap_fraction: rect.area() as f64 / (l * l) as f64,
                                prediction_a: a.score,
                                prediction_b: b.score,
                                prediction_diff: (a.score - b.score).abs(),
                                annotated_fraction: gt.fraction(),
                                aggregator: xa.aggregator,
                                threshold: *t,
                                iou,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn run_study(cfg: &ExperimentConfig, classifier: &TileClassifier, test: &[SyntheticSlide]) -> Result<StabilityStudy> {
    let mut shifts = vec![(0, 0)];
    for code in &cfg.stability.shifts {
        shifts.push(parse_shift(code)?);
    }
    let per_slide: Vec<SlidePairs> = test
        .iter()
        .map(|s| slide_pairs(cfg, classifier, s, &shifts))
        .collect::<Result<_>>()?;

    let st = &cfg.stability;
    let tcount = cfg.xai.thresholds.len();
    let mut groups = Vec::new();
    for (k, &agg) in cfg.evaluation.aggregators.iter().enumerate() {
        for (m, &t) in cfg.xai.thresholds.iter().enumerate() {
            let rs: Vec<&OverlapRecord> = per_slide
                .iter()
                .flat_map(|p| &p.records)
                .filter(|r| r.aggregator == agg && r.threshold == t)
                .collect();
            let bins = |key: fn(&OverlapRecord) -> f64, edges: &[f64]| {
                let pts: Vec<(f64, f64)> = rs.iter().map(|r| (key(r), r.iou)).collect();
                binned_summary(&pts, edges)
            };
            let n = rs.len();
            groups.push(StabilityGroup {
                aggregator: agg,
                threshold: t,
                pairs: n,
                excluded_empty_union: per_slide.iter().map(|p| p.empty_union[k * tcount + m]).sum(),
                mean_iou: (n > 0).then(|| rs.iter().map(|r| r.iou).sum::<f64>() / n as f64),
                uniform_iou: uniform_baseline(t)?.iou,
                by_overlap: bins(|r| r.overlap_fraction, &st.overlap_bins)?,
                by_prediction_diff: bins(|r| r.prediction_diff, &st.difference_bins)?,
                by_annotation: bins(|r| r.annotated_fraction, &st.annotation_bins)?,
            });
        }
    }
    let summary = StabilitySummary {
        schema: "tilewise-xai/stability/v1",
        xai_digest: cfg.xai.digest(),
        shifts: shifts.iter().map(|s| format!("{}{}", s.0, s.1)).collect(),
        prediction_floor: st.prediction_floor,
        slides: test.len(),
        candidate_pairs: per_slide.iter().map(|p| p.candidates).sum(),
        excluded_prediction_floor: per_slide.iter().map(|p| p.floor_excluded).sum(),
        groups,
    };
    Ok(StabilityStudy {
        records: per_slide.into_iter().flat_map(|p| p.records).collect(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_iou_is_symmetric_and_uses_full_tile_masks() {
        let l = 8;
        let make = |y, x, on: &dyn Fn(usize, usize) -> bool| Tile {
            id: format!("{y}_{x}"),
            y,
            x,
            tissue_fraction: 1.0,
            image: crate::tensor::Tensor::zeros(&[l, l, 3]),
            mask: BinaryMask::new(l, l, (0..l * l).map(|i| on(y + i / l, x + i % l)).collect()).unwrap(),
        };
        // both masks mark the same slide pixels
        let on = |y: usize, x: usize| (y + x).is_multiple_of(3);
        let a = make(0, 0, &on);
        let b = make(0, 2, &on);
        let r = overlap_rect((a.y, a.x), (b.y, b.x), l).unwrap();
        let ca = crop(&a.mask, &a, &r).unwrap();
        let cb = crop(&b.mask, &b, &r).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(iou_score(&ca, &cb).unwrap(), Some(1.0));
        assert_eq!(iou_score(&cb, &ca).unwrap(), iou_score(&ca, &cb).unwrap());
    }
}
