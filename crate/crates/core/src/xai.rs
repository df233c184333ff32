//! Layer-wise activation×gradient explanations: per-layer attributions,
//! channel aggregation, upscale-and-sum fusion, percentile-rank
//! normalization and thresholding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{GraphOptions, TileClassifier};
use crate::tensor::{kernels, Graph, NodeId, ResizeMode, Tensor};

/// A model whose score can be differentiated with respect to tapped layers.
pub trait Explainable {
    fn tile_size(&self) -> usize;
    /// Builds the forward graph for `tile` with taps registered and returns
    /// it together with the scalar score node.
    fn tapped_graph(&self, tile: &Tensor) -> Result<(Graph, NodeId)>;
}

impl Explainable for TileClassifier {
    fn tile_size(&self) -> usize {
        self.config.tile_size
    }

    fn tapped_graph(&self, tile: &Tensor) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let opts = GraphOptions {
            taps: true,
            ..Default::default()
        };
        let nodes = self.build_graph(&mut g, tile, opts)?;
        Ok((g, nodes.score))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Abs,
    Mean,
    Var,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Abs, Aggregator::Mean, Aggregator::Var];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Abs => "abs",
            Aggregator::Mean => "mean",
            Aggregator::Var => "var",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Aggregator::Abs),
            "mean" => Ok(Aggregator::Mean),
            "var" => Ok(Aggregator::Var),
            _ => Err(Error::Config(format!("unknown aggregator `{s}` (abs, mean, var)"))),
        }
    }
}

/// Per-channel attributions `ψ ⊙ ∂s/∂ψ` of one layer, `k×k×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttribution {
    pub layer: usize,
    pub values: Tensor,
}

/// Square attribution map, raw or percentile-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub side: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for a {height}×{width} mask",
                values.len()
            )));
        }
        Ok(BinaryMask { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.contains(&true)
    }

    pub fn fraction(&self) -> f64 {
        self.popcount() as f64 / self.values.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}×{w} at ({y0},{x0}) outside {}×{} mask",
                self.height, self.width
            )));
        }
        let values = (y0..y0 + h)
            .flat_map(|y| self.values[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        Ok(BinaryMask { height: h, width: w, values })
    }

    /// Clears 4-connected regions with fewer than `min_area` pixels.
    pub fn without_small_components(&self, min_area: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        let mut seen = vec![false; h * w];
        let mut region = Vec::new();
        for start in 0..h * w {
            if !self.values[start] || seen[start] {
                continue;
            }
            region.clear();
            region.push(start);
            seen[start] = true;
            let mut next = 0;
            while next < region.len() {
                let i = region[next];
                next += 1;
                let (y, x) = (i / w, i % w);
                let neighbours = [
                    (y > 0).then(|| i - w),
                    (y + 1 < h).then(|| i + w),
                    (x > 0).then(|| i - 1),
                    (x + 1 < w).then(|| i + 1),
                ];
                for j in neighbours.into_iter().flatten() {
                    if self.values[j] && !seen[j] {
                        seen[j] = true;
                        region.push(j);
                    }
                }
            }
            if region.len() < min_area {
                for &i in &region {
                    out.values[i] = false;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    /// 1-based conv layer indices whose attributions are fused.
    pub layers: Vec<usize>,
    pub aggregator: Aggregator,
    pub upscale: ResizeMode,
    pub thresholds: Vec<f64>,
    /// Divide each aggregated layer map by its maximum absolute value before summing.
    pub layer_max_norm: bool,
}

impl Default for XaiConfig {
    fn default() -> Self {
        XaiConfig {
            layers: vec![2, 4, 6, 8],
            aggregator: Aggregator::Abs,
            upscale: ResizeMode::Nearest,
            thresholds: vec![0.5, 0.8, 0.9, 0.95],
            layer_max_norm: false,
        }
    }
}

/// The differentiated quantity; recorded in the digest so runs stay comparable.
pub const TARGET: &str = "probability";

impl XaiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("xai layer set is empty".into()));
        }
        for &t in &self.thresholds {
            check_threshold(t).map_err(|_| Error::Config(format!("threshold {t} outside [0,1)")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, including the differentiation target.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "aggregator": self.aggregator,
            "layer_max_norm": self.layer_max_norm,
            "layers": self.layers,
            "target": TARGET,
            "thresholds": self.thresholds,
            "upscale": self.upscale,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0,1)")));
    }
    Ok(())
}

/// Runs one forward/backward pass and returns the score and the attributions
/// of every requested layer.
pub fn layer_attributions<M: Explainable + ?Sized>(
    model: &M,
    tile: &Tensor,
    layers: &[usize],
) -> Result<(f64, Vec<LayerAttribution>)> {
    let (mut g, score) = model.tapped_graph(tile)?;
    let tapped = g.tapped_layers();
    if let Some(l) = layers.iter().find(|l| !tapped.contains(l)) {
        return Err(Error::InvalidArgument(format!("layer {l} has no tap")));
    }
    g.backward(score)?;
    let s = g.value(score).item()?;
    let attrs = layers
        .iter()
        .map(|&l| {
            let tap = g.tap(l)?;
            let mut values = tap.activation;
            for (v, d) in values.data_mut().iter_mut().zip(tap.activation_gradient.data()) {
                *v *= d;
            }
            Ok(LayerAttribution { layer: l, values })
        })
        .collect::<Result<_>>()?;
    Ok((s, attrs))
}

pub fn layer_attribution<M: Explainable + ?Sized>(model: &M, tile: &Tensor, layer: usize) -> Result<LayerAttribution> {
    let (_, mut attrs) = layer_attributions(model, tile, &[layer])?;
    Ok(attrs.remove(0))
}

/// Reduces a `k×k×C` attribution across channels to a `k×k×1` map.
pub fn aggregate_channels(attr: &Tensor, agg: Aggregator) -> Result<Tensor> {
    let &[h, w, c] = attr.shape() else {
        return Err(Error::Shape(format!("attribution of shape {:?} is not k×k×C", attr.shape())));
    };
    let n = c as f64;
    let out = attr
        .data()
        .chunks(c)
        .map(|px| match agg {
            Aggregator::Abs => px.iter().map(|v| v.abs()).sum::<f64>() / n,
            Aggregator::Mean => px.iter().sum::<f64>() / n,
            Aggregator::Var => {
                let m = px.iter().sum::<f64>() / n;
                px.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
            }
        })
        .collect();
    Tensor::new(vec![h, w, 1], out)
}

/// Upscales each `k×k×1` map to `side×side` and sums them.
pub fn fuse_layers(maps: &[Tensor], side: usize, mode: ResizeMode, layer_max_norm: bool) -> Result<AttributionMap> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no layers to fuse".into()));
    }
    let mut sum = vec![0.0; side * side];
    for m in maps {
        let &[h, w, 1] = m.shape() else {
            return Err(Error::Shape(format!("layer map of shape {:?}", m.shape())));
        };
        if h != w || h > side {
            return Err(Error::Shape(format!("layer map {h}×{w} cannot be upscaled to {side}×{side}")));
        }
        let up = kernels::resize(m, side, side, mode)?;
        let scale = if layer_max_norm {
            let mx = up.max_abs();
            if mx > 0.0 {
                1.0 / mx
            } else {
                0.0
            }
        } else {
            1.0
        };
        for (s, v) in sum.iter_mut().zip(up.data()) {
            *s += scale * v;
        }
    }
    Ok(AttributionMap {
        side,
        values: sum,
        normalized: false,
    })
}

/// Replaces every value by the fraction of entries strictly smaller than it.
pub fn percentile_normalize(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .map(|&v| sorted.partition_point(|&x| x < v) as f64 / n)
        .collect()
}

impl AttributionMap {
    pub fn normalize(&self) -> AttributionMap {
        AttributionMap {
            side: self.side,
            values: percentile_normalize(&self.values),
            normalized: true,
        }
    }

    pub fn threshold(&self, t: f64) -> Result<BinaryMask> {
        if !self.normalized {
            return Err(Error::InvalidArgument("thresholding needs a normalized map".into()));
        }
        threshold_map(&self.values, self.side, t)
    }

    /// 8-bit grayscale rendering, `round(255·v)` clamped.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// `mask = normalized ≥ t`.
pub fn threshold_map(normalized: &[f64], side: usize, t: f64) -> Result<BinaryMask> {
    check_threshold(t)?;
    BinaryMask::new(side, side, normalized.iter().map(|&v| v >= t).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub aggregator: Aggregator,
    pub score: f64,
    pub map: AttributionMap,
    /// One mask per configured threshold, in config order.
    pub masks: Vec<(f64, BinaryMask)>,
}

/// Explains one tile once per aggregator, sharing the backward pass.
pub fn explain_tile_with<M: Explainable + ?Sized>(
    model: &M,
    tile: &Tensor,
    cfg: &XaiConfig,
    aggregators: &[Aggregator],
) -> Result<Vec<Explanation>> {
    cfg.validate()?;
    let (score, attrs) = layer_attributions(model, tile, &cfg.layers)?;
    aggregators
        .iter()
        .map(|&agg| {
            let maps = attrs
                .iter()
                .map(|a| aggregate_channels(&a.values, agg))
                .collect::<Result<Vec<_>>>()?;
            let map = fuse_layers(&maps, model.tile_size(), cfg.upscale, cfg.layer_max_norm)?.normalize();
            let masks = cfg
                .thresholds
                .iter()
                .map(|&t| Ok((t, map.threshold(t)?)))
                .collect::<Result<_>>()?;
            Ok(Explanation {
                aggregator: agg,
                score,
                map,
                masks,
            })
        })
        .collect()
}

pub fn explain_tile<M: Explainable + ?Sized>(model: &M, tile: &Tensor, cfg: &XaiConfig) -> Result<Explanation> {
    Ok(explain_tile_with(model, tile, cfg, &[cfg.aggregator])?.remove(0))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape("pixel buffer does not match image size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape("pixel buffer does not match image size".into()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Image(format!("{} is not a binary PGM", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, data))
}

pub fn mask_pixels(mask: &BinaryMask) -> Vec<u8> {
    mask.values.iter().map(|&m| if m { 255 } else { 0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Score = Σ w ⊙ ψ over one tapped `k×k×C` input, so attribution = w ⊙ ψ.
    struct LinearProbe {
        side: usize,
        weights: Tensor,
    }

    impl Explainable for LinearProbe {
        fn tile_size(&self) -> usize {
            self.side
        }

        fn tapped_graph(&self, tile: &Tensor) -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let x = g.input(tile.clone())?;
            g.register_tap(1, x)?;
            let s = g.weighted_sum(x, self.weights.clone())?;
            Ok((g, s))
        }
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_head_attribution_is_weight_times_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probe = LinearProbe {
            side: 4,
            weights: random_tensor(&[4, 4, 3], &mut rng),
        };
        let tile = random_tensor(&[4, 4, 3], &mut rng);
        let a = layer_attribution(&probe, &tile, 1).unwrap();
        for ((v, w), x) in a.values.data().iter().zip(probe.weights.data()).zip(tile.data()) {
            assert_eq!(*v, w * x);
        }
        assert!(layer_attribution(&probe, &tile, 2).is_err());
    }

    #[test]
    fn zero_weights_give_zero_attribution() {
        let probe = LinearProbe {
            side: 2,
            weights: Tensor::zeros(&[2, 2, 1]),
        };
        let tile = Tensor::full(&[2, 2, 1], 3.0);
        let a = layer_attribution(&probe, &tile, 1).unwrap();
        assert!(a.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_attribution_matches_finite_differences() {
        let cfg = crate::nets::ClassifierConfig {
            tile_size: 8,
            conv_widths: vec![2, 3, 3, 4],
            pool_after: vec![2, 4],
            hidden: [6, 4],
            seed: 3,
        };
        cfg.validate().unwrap();
        let clf = TileClassifier::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tile = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
        let (s, attrs) = layer_attributions(&clf, &tile, &[2, 4]).unwrap();
        assert!((s - clf.classify_tile(&tile).unwrap()).abs() == 0.0);

        // Oracle: perturb the tapped pre-activation through an extra additive leaf.
        for a in &attrs {
            let mut g = Graph::new();
            let nodes = clf
                .build_graph(&mut g, &tile, GraphOptions { taps: true, ..Default::default() })
                .unwrap();
            g.backward(nodes.score).unwrap();
            let tap = g.tap(a.layer).unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for i in 0..tap.activation.len() {
                let psi = tap.activation.data()[i];
                if psi.abs() < 1e-3 {
                    continue;
                }
                let fd = shifted_score(&clf, &tile, a.layer, i, h) - shifted_score(&clf, &tile, a.layer, i, -h);
                let expected = psi * fd / (2.0 * h);
                let got = a.values.data()[i];
                let rel = (got - expected).abs() / (got.abs() + 1e-12);
                assert!(rel < 1e-4 || (got - expected).abs() < 1e-10, "layer {} entry {i}: {got} vs {expected}", a.layer);
                checked += 1;
            }
            assert!(checked > 0);
        }
    }

    /// Score with `delta` added to one entry of layer `layer`'s pre-activation.
    fn shifted_score(clf: &TileClassifier, tile: &Tensor, layer: usize, entry: usize, delta: f64) -> f64 {
        let mut g = Graph::new();
        let mut h = g.input(crate::nets::classifier::standardize_tile(tile)).unwrap();
        for l in &clf.backbone {
            let k = g.input(l.kernel.clone()).unwrap();
            let b = g.input(l.bias.clone()).unwrap();
            let z = g.conv2d(h, k, 1, 1).unwrap();
            let mut z = g.add_bias(z, b).unwrap();
            if l.index == layer {
                let mut bump = Tensor::zeros(g.value(z).shape());
                bump.data_mut()[entry] = delta;
                let bump = g.input(bump).unwrap();
                z = g.concat(&[z, bump]).unwrap();
                // fold the two channel blocks back together with a 1×1 conv
                let c = g.value(bump).shape()[2];
                let mut eye = Tensor::zeros(&[1, 1, 2 * c, c]);
                for j in 0..c {
                    eye.data_mut()[j * c + j] = 1.0;
                    eye.data_mut()[(c + j) * c + j] = 1.0;
                }
                let eye = g.input(eye).unwrap();
                z = g.conv2d(z, eye, 1, 0).unwrap();
            }
            h = g.relu(z).unwrap();
            if l.pool_after {
                h = g.max_pool2(h).unwrap();
            }
        }
        let n = g.value(h).len();
        let f = g.reshape(h, &[n]).unwrap();
        let (logits, _) = clf.build_head(&mut g, f, false).unwrap();
        let p = g.softmax(logits).unwrap();
        g.value(p).data()[1]
    }

    #[test]
    fn small_components_are_cleared() {
        #[rustfmt::skip]
        let grid = [
            1, 1, 0, 0, 1,
            1, 1, 0, 0, 0,
            0, 0, 0, 1, 0,
            0, 0, 1, 1, 1,
            1, 0, 0, 1, 0,
        ];
        let m = BinaryMask::new(5, 5, grid.iter().map(|&v| v == 1).collect()).unwrap();
        let kept = m.without_small_components(4);
        // the 2×2 block and the plus sign survive; diagonal neighbours do not connect
        let expected: Vec<bool> = grid
            .iter()
            .enumerate()
            .map(|(i, &v)| v == 1 && !matches!(i, 4 | 20))
            .collect();
        assert_eq!(kept.values, expected);
        assert_eq!(m.without_small_components(0), m);
        assert!(m.without_small_components(6).is_empty());
    }

    #[test]
    fn cancellation_case() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(aggregate_channels(&t, Aggregator::Mean).unwrap().data(), &[0.0]);
        assert_eq!(aggregate_channels(&t, Aggregator::Abs).unwrap().data(), &[1.0]);
        assert_eq!(aggregate_channels(&t, Aggregator::Var).unwrap().data(), &[1.0]);
    }

    #[test]
    fn single_channel_aggregation() {
        let t = Tensor::new(vec![1, 2, 1], vec![-2.0, 3.0]).unwrap();
        assert_eq!(aggregate_channels(&t, Aggregator::Mean).unwrap().data(), &[-2.0, 3.0]);
        assert_eq!(aggregate_channels(&t, Aggregator::Abs).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(aggregate_channels(&t, Aggregator::Var).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn aggregation_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_tensor(&[5, 5, 4], &mut rng);
        let abs = aggregate_channels(&t, Aggregator::Abs).unwrap();
        let mean = aggregate_channels(&t, Aggregator::Mean).unwrap();
        let var = aggregate_channels(&t, Aggregator::Var).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let (mut s, mut sa, mut sq) = (0.0, 0.0, 0.0);
                for c in 0..4 {
                    let v = t.get(&[y, x, c]);
                    s += v;
                    sa += v.abs();
                    sq += v * v;
                }
                let m = s / 4.0;
                assert!((mean.get(&[y, x, 0]) - m).abs() < 1e-12);
                assert!((abs.get(&[y, x, 0]) - sa / 4.0).abs() < 1e-12);
                assert!((var.get(&[y, x, 0]) - (sq / 4.0 - m * m)).abs() < 1e-12);
                assert!(mean.get(&[y, x, 0]).abs() <= abs.get(&[y, x, 0]));
            }
        }
    }

    #[test]
    fn fusion_cases() {
        let m = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = fuse_layers(std::slice::from_ref(&m), 4, ResizeMode::Nearest, false).unwrap();
        #[rustfmt::skip]
        let expected = [1.0, 1.0, 2.0, 2.0,
                        1.0, 1.0, 2.0, 2.0,
                        3.0, 3.0, 4.0, 4.0,
                        3.0, 3.0, 4.0, 4.0];
        assert_eq!(f.values, expected);
        let same = fuse_layers(std::slice::from_ref(&m), 2, ResizeMode::Nearest, false).unwrap();
        assert_eq!(same.values, m.data());
        let twice = fuse_layers(&[m.clone(), m.clone()], 4, ResizeMode::Nearest, false).unwrap();
        assert!(twice.values.iter().zip(&f.values).all(|(a, b)| *a == 2.0 * b));
        let zero = Tensor::zeros(&[4, 4, 1]);
        let with_zero = fuse_layers(&[m.clone(), zero], 4, ResizeMode::Nearest, false).unwrap();
        assert_eq!(with_zero.values, f.values);
        assert!(fuse_layers(&[], 4, ResizeMode::Nearest, false).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(percentile_normalize(&[1.0, 2.0, 3.0, 4.0]), [0.0, 0.25, 0.5, 0.75]);
        assert_eq!(percentile_normalize(&[7.0; 9]), [0.0; 9]);
        assert_eq!(percentile_normalize(&[2.0, 1.0, 2.0, 3.0]), [0.25, 0.0, 0.25, 0.75]);
    }

    #[test]
    fn threshold_examples() {
        let m = threshold_map(&[0.0, 0.25, 0.5, 0.75], 2, 0.5).unwrap();
        assert_eq!(m.values, [false, false, true, true]);
        assert!(threshold_map(&[0.0, 0.25, 0.5, 0.75], 2, 0.0).unwrap().values.iter().all(|&v| v));
        assert!(threshold_map(&[0.0], 1, 1.0).is_err());
        assert!(threshold_map(&[0.0], 1, -0.1).is_err());
    }

    #[test]
    fn distinct_map_at_point_nine_selects_409_or_410() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..4096).map(|_| rng.random::<f64>()).collect();
        let n = threshold_map(&percentile_normalize(&vals), 64, 0.9).unwrap().popcount();
        assert!(n == 409 || n == 410, "{n}");
    }

    #[test]
    fn digest_tracks_every_field() {
        let a = XaiConfig::default();
        let mut b = a.clone();
        b.upscale = ResizeMode::Bilinear;
        assert_eq!(a.digest(), XaiConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn mask_crop() {
        let m = BinaryMask::new(3, 3, (0..9).map(|i| i % 2 == 0).collect()).unwrap();
        let c = m.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.values, [true, false, false, true]);
        assert!(m.crop(2, 2, 2, 2).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (4, 3, px));
    }

    proptest! {
        #[test]
        fn rank_invariance(vals in prop::collection::vec(-1e3f64..1e3, 1..200), c in 0.01f64..100.0, d in -50.0f64..50.0) {
            let moved: Vec<f64> = vals.iter().map(|v| c * v + d).collect();
            // rounding may merge nearly equal values; only order-preserving draws count
            let n = vals.len();
            prop_assume!((0..n).all(|i| (0..n).all(|j| (vals[i] < vals[j]) == (moved[i] < moved[j]))));
            prop_assert_eq!(percentile_normalize(&vals), percentile_normalize(&moved));
        }

        #[test]
        fn normalized_values_match_brute_force(vals in prop::collection::vec(-5i32..5, 1..80)) {
            let vals: Vec<f64> = vals.into_iter().map(f64::from).collect();
            let n = vals.len() as f64;
            let got = percentile_normalize(&vals);
            for (i, v) in vals.iter().enumerate() {
                let below = vals.iter().filter(|w| *w < v).count() as f64;
                prop_assert_eq!(got[i], below / n);
                prop_assert!(got[i] <= (n - 1.0) / n);
            }
        }

        #[test]
        fn distinct_values_give_rank_permutation(seed in any::<u64>(), side in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = side * side;
            let vals: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
            let mut shuffled = vals.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let mut got = percentile_normalize(&shuffled);
            got.sort_by(f64::total_cmp);
            let expected: Vec<f64> = (0..n).map(|r| r as f64 / n as f64).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn threshold_monotone(seed in any::<u64>(), side in 1usize..12, t1 in 0.0f64..0.99, dt in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t2 = (t1 + dt).min(0.999);
            let norm = percentile_normalize(&vals);
            let a = threshold_map(&norm, side, t1).unwrap();
            let b = threshold_map(&norm, side, t2).unwrap();
            prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| !*y || *x));
        }
    }
}
