//! Tile classifier, max-pooling MIL slide model, and toy segmentation network.

pub mod classifier;
pub mod mil;
pub mod optim;
pub mod segnet;

pub use classifier::{ClassifierConfig, ClassifierNodes, GraphOptions, TileClassifier};
pub use mil::{
    max_with_index, pretrain_classifier, train_mil_end_to_end, train_mil_head, EpochLog, FeatureBag,
    MilModel, MilOutput, MilTrainConfig, PretrainConfig,
};
pub use optim::Adam;
pub use segnet::{onehot_target, SegNet, SegNetConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multiclass dice loss: the mean over classes (last axis) of
/// `D_c = 1 − 2Σ p·g / (Σ p² + Σ g²)`. A class whose denominator is zero
/// (nothing predicted, nothing present) contributes 0.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() == 0 {
        return Err(Error::Shape(format!(
            "dice loss between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let classes = *pred.shape().last().unwrap();
    let mut num = vec![0.0; classes];
    let mut den = vec![0.0; classes];
    for (p, g) in pred.data().chunks(classes).zip(target.data().chunks(classes)) {
        for c in 0..classes {
            num[c] += p[c] * g[c];
            den[c] += p[c] * p[c] + g[c] * g[c];
        }
    }
    let total: f64 = num
        .iter()
        .zip(&den)
        .map(|(&a, &b)| if b == 0.0 { 0.0 } else { 1.0 - 2.0 * a / b })
        .sum();
    Ok(total / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let g = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dice_loss(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_prediction_on_present_class_is_one() {
        let p = t(&[3, 1], &[0.0, 0.0, 0.0]);
        let g = t(&[3, 1], &[1.0, 0.0, 1.0]);
        assert_eq!(dice_loss(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn half_probabilities_single_class() {
        // 1 − 2·0.5 / (0.25 + 0.25 + 1) = 1 − 1/1.5
        let p = t(&[2, 1], &[0.5, 0.5]);
        let g = t(&[2, 1], &[1.0, 0.0]);
        assert!((dice_loss(&p, &g).unwrap() - (1.0 - 1.0 / 1.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_class_counts_as_perfect() {
        let p = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(dice_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(dice_loss(&t(&[2, 1], &[0.0, 1.0]), &t(&[1, 2], &[0.0, 1.0])).is_err());
    }
}
