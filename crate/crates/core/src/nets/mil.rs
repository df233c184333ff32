//! Max-pooling multi-instance model over a tile classifier, and its trainers.
//!
//! The slide score is the highest tile score. During training only the
//! highest-scoring tile of each bag is back-propagated.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{GraphOptions, TileClassifier};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Mean bag loss on the validation set.
    pub val_loss: Option<f64>,
    /// Slide-level validation ROC AUC.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilOutput {
    pub slide_score: f64,
    pub argmax: usize,
    pub tile_scores: Vec<f64>,
}

/// Maximum and its position; the lowest index wins ties.
pub fn max_with_index(scores: &[f64]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((b, _)) if s <= b => {}
            _ => best = Some((s, i)),
        }
    }
    best
}

pub(crate) fn check_label(label: usize) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label {label} is not 0 or 1")));
    }
    Ok(())
}

pub(crate) fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    Ok(())
}

pub(crate) fn sgd_update(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.into_iter().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

/// Sums per-sample gradient lists in sample order, then divides by the count.
pub(crate) fn mean_grads(per_sample: Vec<Vec<Tensor>>) -> Result<Vec<Tensor>> {
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.axpy(1.0, g)?;
        }
    }
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

/// Cross-entropy loss of one tile and its gradients: backbone params first
/// (when `train_backbone`), then head params.
pub fn tile_loss_grads(
    model: &TileClassifier,
    tile: &Tensor,
    label: usize,
    train_backbone: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let opts = GraphOptions {
        train_backbone,
        train_head: true,
        ..Default::default()
    };
    let nodes = model.build_graph(&mut g, tile, opts)?;
    let loss = g.cross_entropy_logits(nodes.logits, label)?;
    g.backward(loss)?;
    let ids = if train_backbone {
        nodes.backbone_params.iter().chain(&nodes.head_params).copied().collect()
    } else {
        nodes.head_params.clone()
    };
    let grads = ids.iter().map(|&id| g.grad(id).cloned().expect("trainable leaf")).collect();
    Ok((g.value(loss).item()?, grads))
}

fn head_loss_grads(model: &TileClassifier, features: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let f = g.input(features.clone())?;
    let (logits, params) = model.build_head(&mut g, f, true)?;
    let loss = g.cross_entropy_logits(logits, label)?;
    g.backward(loss)?;
    let grads = params.iter().map(|&id| g.grad(id).cloned().expect("trainable leaf")).collect();
    Ok((g.value(loss).item()?, grads))
}

fn finite_loss(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence(format!("{what} loss became {loss}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub classifier: TileClassifier,
}

impl MilModel {
    pub fn new(classifier: TileClassifier) -> Self {
        MilModel { classifier }
    }

    pub fn tile_scores(&self, tiles: &[Tensor]) -> Result<Vec<f64>> {
        tiles.par_iter().map(|t| self.classifier.classify_tile(t)).collect()
    }

    pub fn forward(&self, tiles: &[Tensor]) -> Result<MilOutput> {
        if tiles.is_empty() {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        let tile_scores = self.tile_scores(tiles)?;
        let (slide_score, argmax) = max_with_index(&tile_scores).expect("non-empty");
        Ok(MilOutput {
            slide_score,
            argmax,
            tile_scores,
        })
    }

    /// Slide score from cached backbone features.
    pub fn forward_features(&self, features: &[Tensor]) -> Result<MilOutput> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        let tile_scores: Vec<f64> = features
            .par_iter()
            .map(|f| self.classifier.head_score(f))
            .collect::<Result<_>>()?;
        let (slide_score, argmax) = max_with_index(&tile_scores).expect("non-empty");
        Ok(MilOutput {
            slide_score,
            argmax,
            tile_scores,
        })
    }

    /// Cross-entropy of the top tile of a bag and its gradients. With a frozen
    /// backbone only head gradients are returned.
    pub fn bag_loss_grads(&self, tiles: &[Tensor], label: usize) -> Result<(f64, Vec<Tensor>)> {
        check_label(label)?;
        if self.classifier.frozen_backbone {
            let features: Vec<Tensor> = tiles
                .par_iter()
                .map(|t| self.classifier.backbone_features(t))
                .collect::<Result<_>>()?;
            return self.feature_loss_grads(&features, label);
        }
        let out = self.forward(tiles)?;
        let (loss, grads) = tile_loss_grads(&self.classifier, &tiles[out.argmax], label, true)?;
        Ok((finite_loss(loss, "MIL")?, grads))
    }

    /// Head-only loss and gradients from cached backbone features.
    pub fn feature_loss_grads(&self, features: &[Tensor], label: usize) -> Result<(f64, Vec<Tensor>)> {
        check_label(label)?;
        let out = self.forward_features(features)?;
        let (loss, grads) = head_loss_grads(&self.classifier, &features[out.argmax], label)?;
        Ok((finite_loss(loss, "MIL")?, grads))
    }

    fn trainable_params(&mut self) -> Vec<&mut Tensor> {
        if self.classifier.frozen_backbone {
            self.classifier.head_params_mut()
        } else {
            self.classifier.all_params_mut()
        }
    }

    /// One SGD step on one bag. Returns the cross-entropy of the top tile.
    /// With a frozen backbone only the head moves.
    pub fn train_step(&mut self, tiles: &[Tensor], label: usize, lr: f64) -> Result<f64> {
        check_lr(lr)?;
        let (loss, grads) = self.bag_loss_grads(tiles, label)?;
        sgd_update(self.trainable_params(), &grads, lr)?;
        Ok(loss)
    }

    /// Head-only SGD step from cached backbone features.
    pub fn train_step_features(&mut self, features: &[Tensor], label: usize, lr: f64) -> Result<f64> {
        check_lr(lr)?;
        let (loss, grads) = self.feature_loss_grads(features, label)?;
        sgd_update(self.classifier.head_params_mut(), &grads, lr)?;
        Ok(loss)
    }

    /// Builds one graph over the whole bag (max-selection node included) and
    /// returns the loss and its gradient with respect to every tile's input.
    pub fn input_gradients(&self, tiles: &[Tensor], label: usize) -> Result<(f64, usize, Vec<Tensor>)> {
        check_label(label)?;
        if tiles.is_empty() {
            return Err(Error::InvalidArgument("empty bag".into()));
        }
        let mut g = Graph::new();
        let opts = GraphOptions {
            input_grad: true,
            ..Default::default()
        };
        let per_tile = tiles
            .iter()
            .map(|t| self.classifier.build_graph(&mut g, t, opts))
            .collect::<Result<Vec<_>>>()?;
        let probs: Vec<_> = per_tile.iter().map(|n| n.probs).collect();
        let logits: Vec<_> = per_tile.iter().map(|n| n.logits).collect();
        let top = g.select_max(&probs, 1)?;
        let argmax = g.selected_index(top).expect("select_max node");
        let loss = g.cross_entropy_logits(logits[argmax], label)?;
        g.backward(loss)?;
        let grads = per_tile
            .iter()
            .map(|n| g.grad(n.input).cloned().expect("input tracked"))
            .collect();
        Ok((g.value(loss).item()?, argmax, grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 101,
        }
    }
}

/// Supervised tile-level training of the whole classifier (backbone + head).
pub fn pretrain_classifier(
    model: &mut TileClassifier,
    samples: &[(Tensor, usize)],
    cfg: &PretrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut opt = Adam::new(cfg.learning_rate)?;
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("pretraining needs samples and a positive batch size".into()));
    }
    for (_, label) in samples {
        check_label(*label)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| tile_loss_grads(model, &samples[i].0, samples[i].1, true))
                .collect::<Result<_>>()?;
            let mut per_sample = Vec::with_capacity(results.len());
            for (loss, grads) in results {
                total += finite_loss(loss, "pretraining")?;
                per_sample.push(grads);
            }
            let grads = mean_grads(per_sample)?;
            opt.step(model.all_params_mut(), &grads)?;
        }
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss: total / samples.len() as f64,
            val_loss: None,
            val_metric: None,
        });
    }
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        MilTrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            seed: 202,
        }
    }
}

/// A bag of cached backbone features with its slide label.
#[derive(Clone, Debug)]
pub struct FeatureBag {
    pub features: Vec<Tensor>,
    pub label: usize,
}

/// Slide-level ROC AUC of the model on feature bags; `None` if one class is absent.
pub fn feature_bag_auc(model: &MilModel, bags: &[FeatureBag]) -> Result<Option<f64>> {
    let scores: Vec<f64> = bags
        .iter()
        .map(|b| model.forward_features(&b.features).map(|o| o.slide_score))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = bags.iter().map(|b| b.label == 1).collect();
    Ok(roc_auc(&scores, &labels))
}

/// Mean bag cross-entropy on feature bags.
pub fn feature_bag_loss(model: &MilModel, bags: &[FeatureBag]) -> Result<f64> {
    let mut total = 0.0;
    for b in bags {
        let out = model.forward_features(&b.features)?;
        let p = if b.label == 1 { out.slide_score } else { 1.0 - out.slide_score };
        total -= p.max(1e-300).ln();
    }
    Ok(total / bags.len().max(1) as f64)
}

/// Head-only MIL training on cached features. Keeps the head with the lowest
/// validation bag loss (earliest on ties, the starting head included) when a
/// validation set is given.
pub fn train_mil_head(
    model: &mut MilModel,
    train: &[FeatureBag],
    val: &[FeatureBag],
    cfg: &MilTrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut opt = Adam::new(cfg.learning_rate)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("MIL training needs at least one bag".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<super::classifier::Dense>)> = None;
    if !val.is_empty() {
        best = Some((feature_bag_loss(model, val)?, model.classifier.head.clone()));
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.feature_loss_grads(&train[i].features, train[i].label)?;
            opt.step(model.classifier.head_params_mut(), &grads)?;
            total += loss;
        }
        let (val_loss, val_metric) = if val.is_empty() {
            (None, None)
        } else {
            (Some(feature_bag_loss(model, val)?), feature_bag_auc(model, val)?)
        };
        if let Some(l) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, model.classifier.head.clone()));
            }
        }
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss: total / train.len() as f64,
            val_loss,
            val_metric,
        });
    }
    if let Some((_, head)) = best {
        model.classifier.head = head;
    }
    Ok(logs)
}

/// End-to-end MIL training on raw tile bags (backbone and head both move
/// unless the backbone is frozen).
pub fn train_mil_end_to_end(
    model: &mut MilModel,
    bags: &[(Vec<Tensor>, usize)],
    cfg: &MilTrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut opt = Adam::new(cfg.learning_rate)?;
    if bags.is_empty() {
        return Err(Error::InvalidArgument("MIL training needs at least one bag".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.bag_loss_grads(&bags[i].0, bags[i].1)?;
            opt.step(model.trainable_params(), &grads)?;
            total += loss;
        }
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss: total / bags.len() as f64,
            val_loss: None,
            val_metric: None,
        });
    }
    Ok(logs)
}
