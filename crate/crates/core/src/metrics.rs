//! Agreement scores between explanation masks and ground truth, the uniform
//! random-map baseline, rank statistics and binned summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::xai::{percentile_normalize, threshold_map, Aggregator, BinaryMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtSource {
    /// The generator's lesion mask, standing in for manual annotations.
    ManualProxy,
    /// Argmax mask of the segmentation network.
    Segnet,
}

impl GtSource {
    pub const ALL: [GtSource; 2] = [GtSource::ManualProxy, GtSource::Segnet];

    pub fn name(self) -> &'static str {
        match self {
            GtSource::ManualProxy => "manual-proxy",
            GtSource::Segnet => "segnet",
        }
    }
}

/// One evaluated (tile, threshold, aggregator, ground-truth source) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub tile_id: String,
    pub slide_label: u8,
    pub threshold: f64,
    pub aggregator: Aggregator,
    pub gt_source: GtSource,
    pub intersection_hit: u8,
    pub precision: f64,
    /// Selected pixels of the explanation mask.
    pub popcount: usize,
    pub iou: Option<f64>,
    pub prediction: f64,
    pub annotated_fraction: f64,
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "masks {}×{} and {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn overlap_count(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.values.iter().zip(&b.values).filter(|(x, y)| **x && **y).count()
}

/// 1 when the masks share at least one pixel.
pub fn intersection_score(a_t: &BinaryMask, g: &BinaryMask) -> Result<u8> {
    check_shapes(a_t, g)?;
    Ok(u8::from(a_t.values.iter().zip(&g.values).any(|(x, y)| *x && *y)))
}

/// `|a_t ∩ g| / ((1−t)·n)` with the nominal normalizer, unclamped.
pub fn precision_score(a_t: &BinaryMask, g: &BinaryMask, t: f64) -> Result<f64> {
    check_shapes(a_t, g)?;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0,1)")));
    }
    Ok(overlap_count(a_t, g) as f64 / ((1.0 - t) * a_t.values.len() as f64))
}

/// `|m1 ∩ m2| / |m1 ∪ m2|`; `None` when the union is empty.
pub fn iou_score(m1: &BinaryMask, m2: &BinaryMask) -> Result<Option<f64>> {
    check_shapes(m1, m2)?;
    let union = m1.values.iter().zip(&m2.values).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        return Ok(None);
    }
    Ok(Some(overlap_count(m1, m2) as f64 / union as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Baseline {
    pub iou: f64,
    pub precision: f64,
}

/// Expected scores of two independent uniform random maps thresholded at `t`.
pub fn uniform_baseline(t: f64) -> Result<Baseline> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0,1)")));
    }
    Ok(Baseline {
        iou: (1.0 - t) / (1.0 + t),
        precision: 1.0 - t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(MeanStderr { mean, stderr })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonteCarloBaseline {
    pub iou: MeanStderr,
    pub precision: MeanStderr,
    pub trials: usize,
}

/// Draws pairs of i.i.d. uniform `side×side` maps, normalizes, thresholds and
/// scores one against the other.
pub fn uniform_baseline_mc(t: f64, side: usize, trials: usize, seed: u64) -> Result<MonteCarloBaseline> {
    uniform_baseline(t)?;
    if trials == 0 || side == 0 {
        return Err(Error::InvalidArgument("Monte Carlo baseline needs trials ≥ 1 and side ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ious = Vec::with_capacity(trials);
    let mut precisions = Vec::with_capacity(trials);
    let draw = |rng: &mut ChaCha8Rng| -> Result<BinaryMask> {
        let vals: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        threshold_map(&percentile_normalize(&vals), side, t)
    };
    for _ in 0..trials {
        let r = draw(&mut rng)?;
        let s = draw(&mut rng)?;
        ious.push(iou_score(&r, &s)?.expect("t < 1 selects at least one pixel"));
        precisions.push(precision_score(&r, &s, t)?);
    }
    Ok(MonteCarloBaseline {
        iou: MeanStderr::of(&ious).expect("trials ≥ 1"),
        precision: MeanStderr::of(&precisions).expect("trials ≥ 1"),
        trials,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman ρ with average ranks for ties; `None` if either series is constant.
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("rank correlation needs at least 3 pairs".into()));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties counting one
/// half. `None` without both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

/// Groups `(key, value)` points into bins `[e_i, e_{i+1})`, the last bin
/// closed on the right. Points outside the edges are ignored. Reports the
/// population standard deviation per bin.
pub fn binned_summary(points: &[(f64, f64)], edges: &[f64]) -> Result<Vec<Bin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bin edges must be strictly increasing, at least two".into()));
    }
    let nb = edges.len() - 1;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); nb];
    for &(k, v) in points {
        let last = edges[nb];
        if k < edges[0] || k > last {
            continue;
        }
        let b = if k == last {
            nb - 1
        } else {
            edges.partition_point(|&e| e <= k) - 1
        };
        groups[b].push(v);
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, vals)| {
            let (mean, std) = if vals.is_empty() {
                (None, None)
            } else {
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                (Some(m), Some(var.sqrt()))
            };
            Bin {
                lo: edges[i],
                hi: edges[i + 1],
                count: vals.len(),
                mean,
                std,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(side: usize, on: &[usize]) -> BinaryMask {
        let mut v = vec![false; side * side];
        for &i in on {
            v[i] = true;
        }
        BinaryMask::new(side, side, v).unwrap()
    }

    #[test]
    fn intersection_examples() {
        let a = mask(2, &[0, 1]);
        assert_eq!(intersection_score(&a, &mask(2, &[1, 2])).unwrap(), 1);
        assert_eq!(intersection_score(&a, &mask(2, &[2, 3])).unwrap(), 0);
        let hits = [1u8, 0];
        assert_eq!(hits.iter().map(|&h| f64::from(h)).sum::<f64>() / 2.0, 0.5);
        assert!(intersection_score(&a, &BinaryMask::empty(3, 3)).is_err());
    }

    #[test]
    fn precision_examples() {
        // 4×4 tile at t = 0.75: nominal selection is 4 pixels
        let a = mask(4, &[0, 1, 2, 3]);
        assert_eq!(precision_score(&a, &mask(4, &[0, 1, 2, 3, 4]), 0.75).unwrap(), 1.0);
        assert_eq!(precision_score(&a, &mask(4, &[0, 1, 9]), 0.75).unwrap(), 0.5);
        assert!(precision_score(&a, &a, 1.0).is_err());
        // tie plateaus may select more than the nominal count
        let wide = mask(4, &(0..8).collect::<Vec<_>>());
        assert_eq!(precision_score(&wide, &wide, 0.75).unwrap(), 2.0);
    }

    #[test]
    fn iou_examples() {
        let a = mask(3, &[0, 4, 8]);
        assert_eq!(iou_score(&a, &a).unwrap(), Some(1.0));
        assert_eq!(iou_score(&a, &mask(3, &[1, 2])).unwrap(), Some(0.0));
        assert_eq!(iou_score(&a, &mask(3, &[0, 1])).unwrap(), Some(0.25));
        assert_eq!(iou_score(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), None);
    }

    #[test]
    fn closed_form_baseline() {
        let b = uniform_baseline(0.0).unwrap();
        assert_eq!((b.iou, b.precision), (1.0, 1.0));
        let b = uniform_baseline(0.5).unwrap();
        assert!((b.iou - 1.0 / 3.0).abs() < 1e-15 && b.precision == 0.5);
        let b = uniform_baseline(0.9).unwrap();
        assert_eq!(format!("{:.6} {:.6}", b.iou, b.precision), "0.052632 0.100000");
        assert!(uniform_baseline(1.0).is_err());
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        for t in [0.5, 0.9] {
            let mc = uniform_baseline_mc(t, 32, 60, 7).unwrap();
            let cf = uniform_baseline(t).unwrap();
            assert!((mc.iou.mean - cf.iou).abs() <= 3.0 * mc.iou.stderr + 1e-3, "{t} {mc:?}");
            assert!((mc.precision.mean - cf.precision).abs() <= 3.0 * mc.precision.stderr + 1e-3);
        }
        assert_eq!(uniform_baseline_mc(0.8, 8, 5, 1).unwrap(), uniform_baseline_mc(0.8, 8, 5, 1).unwrap());
        assert!(uniform_baseline_mc(0.5, 8, 0, 1).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((rank_correlation(&x, &[2.0, 4.0, 6.0, 9.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((rank_correlation(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        // d² = 1+1+1+1 → 1 − 6·4/(4·15)
        assert!((rank_correlation(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap().unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(rank_correlation(&x, &[1.0; 4]).unwrap(), None);
        assert!(rank_correlation(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), [2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        // pairs: (0.3 vs 0.1) win, (0.3 vs 0.4) loss, (0.6 vs both) win → 3/4
        assert_eq!(roc_auc(&[0.1, 0.4, 0.3, 0.6], &[false, false, true, true]), Some(0.75));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn bins() {
        let pts = [(0.05, 1.0), (0.15, 2.0), (0.15, 4.0), (0.2, 10.0), (0.5, 7.0), (1.5, 99.0)];
        let b = binned_summary(&pts, &[0.0, 0.1, 0.2, 0.5]).unwrap();
        assert_eq!(b.iter().map(|x| x.count).collect::<Vec<_>>(), [1, 2, 2]);
        assert_eq!(b[1].mean, Some(3.0));
        assert_eq!(b[1].std, Some(1.0));
        assert_eq!(b[2].mean, Some(8.5));
        let one = binned_summary(&pts[..3], &[0.0, 1.0]).unwrap();
        assert!((one[0].mean.unwrap() - 7.0 / 3.0).abs() < 1e-15);
        let empty = binned_summary(&[(0.05, 1.0)], &[0.0, 0.1, 0.2]).unwrap();
        assert_eq!((empty[1].count, empty[1].mean), (0, None));
        assert!(binned_summary(&pts, &[0.0]).is_err());
    }

    fn random_mask(side: usize) -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), side * side).prop_map(move |v| BinaryMask::new(side, side, v).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in random_mask(5), b in random_mask(5)) {
            let ab = iou_score(&a, &b).unwrap();
            prop_assert_eq!(ab, iou_score(&b, &a).unwrap());
            if let Some(v) = ab {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !a.is_empty() {
                prop_assert_eq!(iou_score(&a, &a).unwrap(), Some(1.0));
            }
        }

        #[test]
        fn precision_bounded_by_popcount(a in random_mask(5), g in random_mask(5), t in 0.0f64..0.99) {
            let p = precision_score(&a, &g, t).unwrap();
            let cap = a.popcount() as f64 / ((1.0 - t) * 25.0);
            prop_assert!(p <= cap + 1e-12);
            let subset = a.values.iter().zip(&g.values).all(|(x, y)| !*x || *y);
            prop_assert_eq!(subset, (p - cap).abs() < 1e-12);
            if p > 0.0 {
                prop_assert_eq!(intersection_score(&a, &g).unwrap(), 1);
            }
        }

        #[test]
        fn spearman_bounded(xs in prop::collection::vec(-10i32..10, 3..40), seed in any::<u64>()) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Some(r) = rank_correlation(&xs, &ys).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
