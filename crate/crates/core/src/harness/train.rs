//! Training stages: segmentation oracle, auxiliary backbone pretraining and
//! MIL head training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, MilMode, Stream};
use super::data::bags;
use crate::error::{Error, Result};
use crate::nets::{
    onehot_target, pretrain_classifier, Adam, train_mil_end_to_end, train_mil_head, EpochLog, FeatureBag, MilModel, SegNet,
    TileClassifier,
};
use crate::synthdata::{SyntheticSlide, Tile, TileBag};
use crate::tensor::Tensor;

/// Tiles of the base grid and the diagonal shift, which doubles the number of
/// lesion-bearing tiles seen in training.
fn annotated_tiles(cfg: &ExperimentConfig, annotated: &[SyntheticSlide]) -> Result<Vec<Tile>> {
    let mut tiles = Vec::new();
    for shift in [(0, 0), (1, 1)] {
        for bag in bags(cfg, annotated, shift)? {
            tiles.extend(bag.tiles);
        }
    }
    Ok(tiles)
}

/// Lesion-bearing tiles first up to half of `limit`, then lesion-free ones.
fn balanced_selection(tiles: Vec<Tile>, limit: usize, seed: u64) -> Vec<Tile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<Tile>, Vec<Tile>) = tiles.into_iter().partition(|t| !t.mask.is_empty());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(limit / 2);
    neg.truncate(limit - pos.len());
    pos.extend(neg);
    pos
}

pub fn segnet_training_set(cfg: &ExperimentConfig, annotated: &[SyntheticSlide]) -> Result<Vec<(Tensor, Tensor)>> {
    let tiles = balanced_selection(
        annotated_tiles(cfg, annotated)?,
        cfg.segnet.train_tiles,
        cfg.derived_seed(Stream::SegnetTiles),
    );
    let l = cfg.data.tile_size;
    tiles
        .into_iter()
        .map(|t| Ok((t.image, onehot_target(&t.mask.values, l)?)))
        .collect()
}

pub fn train_segnet(cfg: &ExperimentConfig, annotated: &[SyntheticSlide]) -> Result<(SegNet, Vec<EpochLog>)> {
    let data = segnet_training_set(cfg, annotated)?;
    if data.is_empty() {
        return Err(Error::Config("no annotated tissue tiles to train the segmentation model".into()));
    }
    log::info!("training the segmentation model on {} tiles", data.len());
    let mut net = SegNet::new(cfg.segnet_config())?;
    let seed = cfg.derived_seed(Stream::Segnet);
    let mut opt = Adam::new(cfg.segnet.learning_rate)?;
    let mut logs = Vec::with_capacity(cfg.segnet.epochs);
    for epoch in 0..cfg.segnet.epochs {
        let loss = net.train_epoch(&data, &mut opt, cfg.segnet.batch_size, seed.wrapping_add(epoch as u64))?;
        log::info!("segnet epoch {}: dice loss {loss:.4}", epoch + 1);
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss,
            val_loss: None,
            val_metric: None,
        });
    }
    Ok((net, logs))
}

/// Tile-level auxiliary samples: label 1 from the configured lesion fraction
/// on, label 0 for lesion-free tiles, class-balanced.
pub fn auxiliary_samples(cfg: &ExperimentConfig, annotated: &[SyntheticSlide]) -> Result<Vec<(Tensor, usize)>> {
    let cut = cfg.mil.aux_lesion_fraction;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in annotated_tiles(cfg, annotated)? {
        let f = t.mask.fraction();
        if f == 0.0 {
            neg.push((t.image, 0));
        } else if f >= cut {
            pos.push((t.image, 1));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed(Stream::Selection));
    neg.shuffle(&mut rng);
    neg.truncate(pos.len().max(1));
    pos.extend(neg);
    Ok(pos)
}

#[derive(Clone, Debug, Default)]
pub struct ClassifierLogs {
    pub pretrain: Vec<EpochLog>,
    pub mil: Vec<EpochLog>,
}

fn feature_bags(model: &TileClassifier, bags: &[TileBag]) -> Result<Vec<FeatureBag>> {
    bags.iter()
        .filter(|b| !b.tiles.is_empty())
        .map(|b| {
            let features = b
                .tiles
                .par_iter()
                .map(|t| model.backbone_features(&t.image))
                .collect::<Result<_>>()?;
            Ok(FeatureBag {
                features,
                label: usize::from(b.label),
            })
        })
        .collect()
}

pub fn train_classifier(
    cfg: &ExperimentConfig,
    annotated: &[SyntheticSlide],
    train: &[SyntheticSlide],
    val: &[SyntheticSlide],
) -> Result<(TileClassifier, ClassifierLogs)> {
    let mut classifier = TileClassifier::new(cfg.classifier_config())?;
    let mut logs = ClassifierLogs::default();
    let train_bags = bags(cfg, train, (0, 0))?;
    if train_bags.iter().all(|b| b.tiles.is_empty()) {
        return Err(Error::Config("no training slide has tissue tiles".into()));
    }
    match cfg.mil.mode {
        MilMode::Frozen => {
            let samples = auxiliary_samples(cfg, annotated)?;
            if samples.len() < 2 {
                return Err(Error::Config("too few annotated tiles for backbone pretraining".into()));
            }
            log::info!("pretraining the backbone on {} auxiliary tiles", samples.len());
            logs.pretrain = pretrain_classifier(&mut classifier, &samples, &cfg.pretrain_config())?;
            for l in &logs.pretrain {
                log::info!("pretrain epoch {}: loss {:.4}", l.epoch, l.loss);
            }
            classifier.frozen_backbone = true;
            if cfg.mil.reset_head {
                classifier.reset_head(cfg.derived_seed(Stream::Head));
            }
            // every shifted grid of a training slide is one more bag with the slide label
            let mut train_features = feature_bags(&classifier, &train_bags)?;
            for shift in [(0, 1), (1, 0), (1, 1)] {
                train_features.extend(feature_bags(&classifier, &bags(cfg, train, shift)?)?);
            }
            let val_features = feature_bags(&classifier, &bags(cfg, val, (0, 0))?)?;
            let mut model = MilModel::new(classifier);
            logs.mil = train_mil_head(&mut model, &train_features, &val_features, &cfg.mil_config())?;
            classifier = model.classifier;
        }
        MilMode::EndToEnd => {
            let raw: Vec<(Vec<Tensor>, usize)> = train_bags
                .iter()
                .filter(|b| !b.tiles.is_empty())
                .map(|b| (b.images(), usize::from(b.label)))
                .collect();
            let mut model = MilModel::new(classifier);
            logs.mil = train_mil_end_to_end(&mut model, &raw, &cfg.mil_config())?;
            classifier = model.classifier;
        }
    }
    for l in &logs.mil {
        log::info!(
            "mil epoch {}: loss {:.4} val loss {:?} val auc {:?}",
            l.epoch,
            l.loss,
            l.val_loss,
            l.val_metric
        );
    }
    Ok((classifier, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xai::BinaryMask;

    fn tile(id: usize, lesion: bool) -> Tile {
        let mut mask = BinaryMask::empty(4, 4);
        mask.values[0] = lesion;
        Tile {
            id: id.to_string(),
            y: 0,
            x: 0,
            tissue_fraction: 1.0,
            image: Tensor::zeros(&[4, 4, 3]),
            mask,
        }
    }

    #[test]
    fn balanced_selection_prefers_half_positives() {
        let tiles: Vec<Tile> = (0..20).map(|i| tile(i, i < 3)).collect();
        let picked = balanced_selection(tiles.clone(), 10, 1);
        assert_eq!(picked.len(), 10);
        assert_eq!(picked.iter().filter(|t| !t.mask.is_empty()).count(), 3);
        let picked = balanced_selection(tiles, 4, 1);
        assert_eq!(picked.iter().filter(|t| !t.mask.is_empty()).count(), 2);
    }
}
