//! Toy U-Net: two encoder stages, a bottleneck, two decoder stages that
//! concatenate the matching encoder output, and a per-pixel softmax head.
//! Channel 0 is parenchyma, channel 1 is lesion.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{he_tensor, standardize_tile};
use super::mil::mean_grads;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ResizeMode, Tensor};

pub const PARENCHYMA: usize = 0;
pub const LESION: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub tile_size: usize,
    /// Channel widths `[stage 1, stage 2, bottleneck]`.
    pub widths: [usize; 3],
    pub classes: usize,
    pub upsample: ResizeMode,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            tile_size: 64,
            widths: [8, 12, 16],
            classes: 2,
            upsample: ResizeMode::Nearest,
            seed: 29,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegConv {
    pub name: &'static str,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub layers: Vec<SegConv>,
}

const LAYER_NAMES: [&str; 7] = ["enc1a", "enc1b", "enc2", "bottleneck", "dec2", "dec1", "out"];

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        if !config.tile_size.is_multiple_of(4) || config.tile_size == 0 {
            return Err(Error::Config("segnet tile size must be a positive multiple of 4".into()));
        }
        if config.classes < 2 || config.widths.contains(&0) {
            return Err(Error::Config("segnet needs ≥ 2 classes and positive widths".into()));
        }
        let [w1, w2, w3] = config.widths;
        let specs = [
            (3, 3, w1),
            (3, w1, w1),
            (3, w1, w2),
            (3, w2, w3),
            (3, w3 + w2, w2),
            (3, w2 + w1, w1),
            (1, w1, config.classes),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = specs
            .iter()
            .zip(LAYER_NAMES)
            .map(|(&(k, cin, cout), name)| {
                // small output layer so an untrained net predicts near-uniform classes
                let gain = if name == "out" { 0.01 } else { 1.0 };
                SegConv {
                    name,
                    kernel: he_tensor(&[k, k, cin, cout], k * k * cin, gain, &mut rng),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        Ok(SegNet { config, layers })
    }

    fn check_tile(&self, tile: &Tensor) -> Result<()> {
        let l = self.config.tile_size;
        if tile.shape() != [l, l, 3] {
            return Err(Error::Shape(format!("segnet expects {l}×{l}×3, got {:?}", tile.shape())));
        }
        Ok(())
    }

    /// Returns the per-pixel class-probability node and the parameter leaves.
    pub fn build_graph(&self, g: &mut Graph, tile: &Tensor, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_tile(tile)?;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut conv = |g: &mut Graph, x: NodeId, i: usize, relu: bool| -> Result<NodeId> {
            let layer = &self.layers[i];
            let (k, b) = if trainable {
                (g.param(layer.kernel.clone())?, g.param(layer.bias.clone())?)
            } else {
                (g.input(layer.kernel.clone())?, g.input(layer.bias.clone())?)
            };
            params.extend([k, b]);
            let pad = layer.kernel.shape()[0] / 2;
            let z = g.conv2d(x, k, 1, pad)?;
            let z = g.add_bias(z, b)?;
            if relu {
                g.relu(z)
            } else {
                Ok(z)
            }
        };
        let l = self.config.tile_size;
        let mode = self.config.upsample;
        let x = g.input(standardize_tile(tile))?;
        let e1 = conv(g, x, 0, true)?;
        let skip1 = conv(g, e1, 1, true)?;
        let p1 = g.max_pool2(skip1)?;
        let skip2 = conv(g, p1, 2, true)?;
        let p2 = g.max_pool2(skip2)?;
        let bott = conv(g, p2, 3, true)?;
        let u2 = g.resize(bott, l / 2, l / 2, mode)?;
        let c2 = g.concat(&[u2, skip2])?;
        let d2 = conv(g, c2, 4, true)?;
        let u1 = g.resize(d2, l, l, mode)?;
        let c1 = g.concat(&[u1, skip1])?;
        let d1 = conv(g, c1, 5, true)?;
        let logits = conv(g, d1, 6, false)?;
        let probs = g.softmax(logits)?;
        Ok((probs, params))
    }

    /// Per-pixel class probabilities, `L×L×C`.
    pub fn predict(&self, tile: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (probs, _) = self.build_graph(&mut g, tile, false)?;
        Ok(g.value(probs).clone())
    }

    /// Lesion-class probability map, `L×L`.
    pub fn lesion_probability(&self, tile: &Tensor) -> Result<Vec<f64>> {
        let probs = self.predict(tile)?;
        let c = self.config.classes;
        Ok(probs.data().chunks(c).map(|p| p[LESION]).collect())
    }

    /// Per-pixel argmax equals the lesion class (lowest class index wins ties).
    pub fn predict_lesion_mask(&self, tile: &Tensor) -> Result<Vec<bool>> {
        let probs = self.predict(tile)?;
        let c = self.config.classes;
        Ok(probs
            .data()
            .chunks(c)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                best == LESION
            })
            .collect())
    }

    /// Dice loss of a whole minibatch and its parameter gradients. The class
    /// sums run over every pixel of every tile, so lesion-free tiles still
    /// penalize lesion predictions.
    pub fn batch_loss_grads(&self, batch: &[&(Tensor, Tensor)]) -> Result<(f64, Vec<Tensor>)> {
        let c = self.config.classes;
        let mut graphs: Vec<(Graph, NodeId, Vec<NodeId>)> = batch
            .par_iter()
            .map(|(tile, _)| {
                let mut g = Graph::new();
                let (probs, params) = self.build_graph(&mut g, tile, true)?;
                Ok((g, probs, params))
            })
            .collect::<Result<_>>()?;
        let mut num = vec![0.0; c];
        let mut den = vec![0.0; c];
        for ((g, probs, _), (_, target)) in graphs.iter().zip(batch) {
            let p = g.value(*probs);
            if p.shape() != target.shape() {
                return Err(Error::Shape(format!("target {:?} vs prediction {:?}", target.shape(), p.shape())));
            }
            for (pp, gg) in p.data().chunks(c).zip(target.data().chunks(c)) {
                for k in 0..c {
                    num[k] += pp[k] * gg[k];
                    den[k] += pp[k] * pp[k] + gg[k] * gg[k];
                }
            }
        }
        let loss = (0..c)
            .map(|k| if den[k] == 0.0 { 0.0 } else { 1.0 - 2.0 * num[k] / den[k] })
            .sum::<f64>()
            / c as f64;
        // ∂D/∂p_k = −(2/C)·(g_k·den_k − 2·p_k·num_k) / den_k²
        let per_tile: Vec<Vec<Tensor>> = graphs
            .par_iter_mut()
            .zip(batch)
            .map(|((g, probs, params), (_, target))| {
                let p = g.value(*probs);
                let mut w = Tensor::zeros(p.shape());
                for (i, (pv, gv)) in p.data().iter().zip(target.data()).enumerate() {
                    let k = i % c;
                    if den[k] > 0.0 {
                        w.data_mut()[i] = -2.0 / c as f64 * (gv * den[k] - 2.0 * pv * num[k]) / (den[k] * den[k]);
                    }
                }
                let surrogate = g.weighted_sum(*probs, w)?;
                g.backward(surrogate)?;
                Ok(params.iter().map(|&id| g.grad(id).cloned().expect("trainable")).collect())
            })
            .collect::<Result<_>>()?;
        let n = per_tile.len() as f64;
        let mut grads = mean_grads(per_tile)?;
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|v| *v *= n);
        }
        Ok((loss, grads))
    }

    /// One pass of minibatch updates over `(tile, one-hot target)` pairs in a
    /// seeded shuffled order. Returns the mean batch dice loss, weighted by
    /// batch size.
    pub fn train_epoch(
        &mut self,
        data: &[(Tensor, Tensor)],
        optimizer: &mut Adam,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<f64> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::InvalidArgument("segmentation epoch needs data and batch size".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&(Tensor, Tensor)> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = self.batch_loss_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("dice loss became {loss}")));
            }
            total += loss * batch.len() as f64;
            let params = self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect();
            optimizer.step(params, &grads)?;
        }
        Ok(total / data.len() as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "segnet", "config": self.config});
        let named: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .flat_map(|l| [(format!("{}.kernel", l.name), &l.kernel), (format!("{}.bias", l.name), &l.bias)])
            .collect();
        crate::tensor::checkpoint::save(path, meta, &named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = crate::tensor::checkpoint::load(path)?;
        if ck.meta["kind"] != "segnet" {
            return Err(Error::Checkpoint("not a segnet checkpoint".into()));
        }
        let config: SegNetConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut net = SegNet::new(config)?;
        for l in &mut net.layers {
            l.kernel = ck.get(&format!("{}.kernel", l.name))?.clone();
            l.bias = ck.get(&format!("{}.bias", l.name))?.clone();
        }
        Ok(net)
    }
}

/// One-hot `L×L×2` target from a binary lesion mask (unmarked pixels are parenchyma).
pub fn onehot_target(mask: &[bool], side: usize) -> Result<Tensor> {
    if mask.len() != side * side {
        return Err(Error::Shape("mask does not match tile side".into()));
    }
    let mut t = Tensor::zeros(&[side, side, 2]);
    for (i, &m) in mask.iter().enumerate() {
        t.data_mut()[2 * i + usize::from(m)] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> SegNet {
        SegNet::new(SegNetConfig {
            tile_size: 8,
            widths: [3, 4, 4],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn untrained_predictions_near_uniform_and_normalized() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tile = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
        let p = net.predict(&tile).unwrap();
        assert_eq!(p.shape(), &[8, 8, 2]);
        for px in p.data().chunks(2) {
            assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
            assert!((px[1] - 0.5).abs() < 0.05, "{px:?}");
        }
    }

    #[test]
    fn segnet_gradients_match_finite_differences() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tile = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
        let mask: Vec<bool> = (0..64).map(|i| i % 8 < 3).collect();
        let target = onehot_target(&mask, 8).unwrap();
        let mut g = Graph::new();
        let (probs, params) = net.build_graph(&mut g, &tile, true).unwrap();
        let loss = g.dice_loss(probs, target).unwrap();
        for &p in params.iter().step_by(3) {
            let r = g.finite_difference_check(loss, p, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn batch_dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<(Tensor, Tensor)> = (0..3)
            .map(|i| {
                let tile = Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap();
                // the last tile has no lesion pixels
                let mask: Vec<bool> = (0..64).map(|p| i < 2 && (p % 8) < 2 + i).collect();
                (tile, onehot_target(&mask, 8).unwrap())
            })
            .collect();
        let batch: Vec<&(Tensor, Tensor)> = data.iter().collect();
        // oracle: plain dice loss of all predictions stacked into one tensor
        let stacked = |net: &SegNet| -> f64 {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for (tile, target) in &data {
                p.extend_from_slice(net.predict(tile).unwrap().data());
                g.extend_from_slice(target.data());
            }
            let n = p.len() / 2;
            crate::nets::dice_loss(&Tensor::new(vec![n, 2], p).unwrap(), &Tensor::new(vec![n, 2], g).unwrap()).unwrap()
        };
        let net = small();
        let (loss, grads) = net.batch_loss_grads(&batch).unwrap();
        assert!((loss - stacked(&net)).abs() < 1e-12);
        let h = 1e-5;
        for (layer, entry) in [(0, 0), (3, 5), (6, 1)] {
            let mut plus = net.clone();
            plus.layers[layer].kernel.data_mut()[entry] += h;
            let mut minus = net.clone();
            minus.layers[layer].kernel.data_mut()[entry] -= h;
            let fd = (stacked(&plus) - stacked(&minus)) / (2.0 * h);
            let analytic = grads[2 * layer].data()[entry];
            assert!((analytic - fd).abs() / (analytic.abs() + 1e-12) < 1e-4, "{analytic} vs {fd}");
        }
    }

    #[test]
    fn training_reduces_loss_on_color_task() {
        let mut net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<(Tensor, Tensor)> = (0..12)
            .map(|_| {
                let mask: Vec<bool> = (0..64).map(|_| rng.random_bool(0.3)).collect();
                let mut tile = Vec::with_capacity(192);
                for &m in &mask {
                    let base = if m { [220.0, 60.0, 200.0] } else { [120.0, 80.0, 160.0] };
                    tile.extend(base.iter().map(|v| v + rng.random_range(-10.0..10.0)));
                }
                (Tensor::new(vec![8, 8, 3], tile).unwrap(), onehot_target(&mask, 8).unwrap())
            })
            .collect();
        let mut opt = Adam::new(0.01).unwrap();
        let first = net.train_epoch(&data, &mut opt, 4, 0).unwrap();
        let mut last = first;
        for e in 1..15 {
            last = net.train_epoch(&data, &mut opt, 4, e).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = small();
        let path = dir.path().join("seg.json");
        net.save(&path).unwrap();
        assert_eq!(SegNet::load(&path).unwrap(), net);
    }
}
