//! Stain perturbation and Macenko stain normalization on RGB byte buffers.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EOSIN, HEMATOXYLIN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Incident light level in the optical-density transform.
pub const IO: f64 = 256.0;
/// Pixels whose OD vector is shorter than this are treated as background.
pub const OD_THRESHOLD: f64 = 0.15;
/// Angle percentile used for the robust stain extremes.
pub const ALPHA: f64 = 1.0;

fn od(v: u8) -> f64 {
    -((f64::from(v) + 1.0) / IO).ln()
}

fn from_od(d: f64) -> u8 {
    (IO * (-d).exp() - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Random near-identity mixing applied in OD space plus a brightness factor.
pub fn stain_perturb(pixels: &[u8], seed: u64, strength: f64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, strength).expect("valid sigma");
    let mix = Matrix3::from_fn(|i, j| f64::from(u8::from(i == j)) + n.sample(&mut rng));
    let brightness = if strength > 0.0 { 1.0 + rng.random_range(-strength..strength) } else { 1.0 };
    pixels
        .chunks(3)
        .flat_map(|px| {
            let d = mix * Vector3::new(od(px[0]), od(px[1]), od(px[2]));
            [0, 1, 2].map(|c| from_od(d[c].max(0.0) * brightness))
        })
        .collect()
}

/// Target stain basis and 99th-percentile concentrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainReference {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub max_concentrations: [f64; 2],
}

impl Default for StainReference {
    /// The generator's stain vectors with concentrations typical of its tissue.
    fn default() -> Self {
        StainReference {
            hematoxylin: HEMATOXYLIN,
            eosin: EOSIN,
            max_concentrations: [1.3, 1.25],
        }
    }
}

impl StainReference {
    pub fn fit(pixels: &[u8]) -> Result<Self> {
        let fit = MacenkoFit::estimate(pixels)?;
        let col = |j: usize| [fit.basis[(0, j)], fit.basis[(1, j)], fit.basis[(2, j)]];
        Ok(StainReference {
            hematoxylin: col(0),
            eosin: col(1),
            max_concentrations: fit.max_concentrations,
        })
    }

    fn basis(&self) -> Matrix3x2<f64> {
        Matrix3x2::from_columns(&[Vector3::from(self.hematoxylin), Vector3::from(self.eosin)])
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

struct MacenkoFit {
    basis: Matrix3x2<f64>,
    max_concentrations: [f64; 2],
    /// Least-squares concentrations of every pixel.
    concentrations: Vec<Vector2<f64>>,
}

impl MacenkoFit {
    fn estimate(pixels: &[u8]) -> Result<Self> {
        if pixels.is_empty() || !pixels.len().is_multiple_of(3) {
            return Err(Error::Shape("pixel buffer is not RGB".into()));
        }
        let all: Vec<Vector3<f64>> = pixels.chunks(3).map(|p| Vector3::new(od(p[0]), od(p[1]), od(p[2]))).collect();
        let tissue: Vec<&Vector3<f64>> = all.iter().filter(|v| v.norm() >= OD_THRESHOLD).collect();
        if tissue.len() < 16 {
            return Err(Error::Normalization(format!("only {} stained pixels", tissue.len())));
        }
        let n = tissue.len() as f64;
        let mean = tissue.iter().fold(Vector3::zeros(), |acc, v| acc + **v) / n;
        let cov = tissue
            .iter()
            .fold(Matrix3::zeros(), |acc, v| acc + (**v - mean) * (**v - mean).transpose())
            / n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
        if l0 <= 0.0 || l1 <= 1e-9 * l0 {
            return Err(Error::Normalization("optical densities span less than a plane".into()));
        }
        let mut e0: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
        let mut e1: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
        if e0.sum() < 0.0 {
            e0 = -e0;
        }
        if e1.sum() < 0.0 {
            e1 = -e1;
        }
        let mut angles: Vec<f64> = tissue.iter().map(|v| v.dot(&e1).atan2(v.dot(&e0))).collect();
        angles.sort_by(f64::total_cmp);
        let lo = percentile(&angles, ALPHA);
        let hi = percentile(&angles, 100.0 - ALPHA);
        let v_lo = e0 * lo.cos() + e1 * lo.sin();
        let v_hi = e0 * hi.cos() + e1 * hi.sin();
        // hematoxylin absorbs more red than eosin
        let (h, e) = if v_lo[0] > v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
        let basis = Matrix3x2::from_columns(&[h.normalize(), e.normalize()]);
        let gram: Matrix2<f64> = basis.transpose() * basis;
        let inv = gram
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Normalization("stain vectors are collinear".into()))?;
        let pinv = inv * basis.transpose();
        let concentrations: Vec<Vector2<f64>> = all.iter().map(|v| pinv * v).collect();
        let mut max_concentrations = [0.0; 2];
        for (k, m) in max_concentrations.iter_mut().enumerate() {
            let mut c: Vec<f64> = concentrations.iter().map(|v| v[k]).collect();
            c.sort_by(f64::total_cmp);
            *m = percentile(&c, 99.0);
        }
        if max_concentrations.iter().any(|&m| m <= 1e-6) {
            return Err(Error::Normalization("a stain has no positive concentration".into()));
        }
        Ok(MacenkoFit {
            basis,
            max_concentrations,
            concentrations,
        })
    }
}

/// Macenko normalization of an RGB byte buffer onto `reference`.
pub fn normalize_pixels(pixels: &[u8], reference: &StainReference) -> Result<Vec<u8>> {
    let fit = MacenkoFit::estimate(pixels)?;
    let target = reference.basis();
    let scale = Vector2::new(
        reference.max_concentrations[0] / fit.max_concentrations[0],
        reference.max_concentrations[1] / fit.max_concentrations[1],
    );
    Ok(fit
        .concentrations
        .iter()
        .flat_map(|c| {
            let d = target * c.component_mul(&scale);
            [0, 1, 2].map(|k| from_od(d[k]))
        })
        .collect())
}

fn tensor_to_bytes(tile: &Tensor) -> Result<Vec<u8>> {
    if tile.rank() != 3 || tile.shape()[2] != 3 {
        return Err(Error::Shape(format!("RGB tile expected, got {:?}", tile.shape())));
    }
    Ok(tile.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
}

/// Normalizes an `h×w×3` tile with values in `[0,255]`.
pub fn macenko_normalize(tile: &Tensor, reference: &StainReference) -> Result<Tensor> {
    let out = normalize_pixels(&tensor_to_bytes(tile)?, reference)?;
    Tensor::new(tile.shape().to_vec(), out.into_iter().map(f64::from).collect())
}

/// Normalizes in place when possible; returns `false` (pixels untouched)
/// when the input is degenerate.
pub fn normalize_or_keep(pixels: &mut [u8], reference: &StainReference) -> bool {
    match normalize_pixels(pixels, reference) {
        Ok(out) => {
            pixels.copy_from_slice(&out);
            true
        }
        Err(e) => {
            log::warn!("stain normalization skipped: {e}");
            false
        }
    }
}

/// Per-channel mean and standard deviation.
pub fn channel_stats(pixels: &[u8]) -> [(f64, f64); 3] {
    let n = (pixels.len() / 3) as f64;
    std::array::from_fn(|c| {
        let vals = pixels.iter().skip(c).step_by(3).map(|&v| f64::from(v));
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    })
}

/// Sum over channels of `|Δmean| + |Δstd|`.
pub fn stats_distance(a: &[(f64, f64); 3], b: &[(f64, f64); 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.0 - y.0).abs() + (x.1 - y.1).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_slide, SlideParams};

    fn tissue_patch(seed: u64) -> Vec<u8> {
        let p = SlideParams {
            size: 256,
            lesion_count: 2,
            margin: 32,
            ..Default::default()
        };
        let slide = generate_slide(seed, &p).unwrap();
        let mut out = Vec::new();
        for y in 64..192 {
            out.extend_from_slice(&slide.image[3 * (y * 256 + 64)..3 * (y * 256 + 192)]);
        }
        out
    }

    #[test]
    fn self_normalization_is_near_identity() {
        let px = tissue_patch(1);
        let reference = StainReference::fit(&px).unwrap();
        let out = normalize_pixels(&px, &reference).unwrap();
        let mad = px.iter().zip(&out).map(|(a, b)| f64::from(a.abs_diff(*b))).sum::<f64>() / px.len() as f64;
        assert!(mad <= 2.0, "mean absolute difference {mad}");
    }

    #[test]
    fn fitted_basis_recovers_generator_stains() {
        let r = StainReference::fit(&tissue_patch(2)).unwrap();
        let dot = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        assert!(dot(r.hematoxylin, HEMATOXYLIN) > 0.95, "{r:?}");
        assert!(dot(r.eosin, EOSIN) > 0.95, "{r:?}");
    }

    #[test]
    fn white_and_gray_tiles_fail() {
        let white = vec![250u8; 3 * 400];
        assert!(matches!(
            normalize_pixels(&white, &StainReference::default()),
            Err(Error::Normalization(_))
        ));
        let gray: Vec<u8> = (0..400).flat_map(|i| [(i % 200) as u8; 3]).collect();
        assert!(matches!(
            normalize_pixels(&gray, &StainReference::default()),
            Err(Error::Normalization(_))
        ));
        let mut kept = gray.clone();
        assert!(!normalize_or_keep(&mut kept, &StainReference::default()));
        assert_eq!(kept, gray);
    }

    #[test]
    fn normalization_undoes_perturbation() {
        for seed in 0..5 {
            let original = tissue_patch(10 + seed);
            let reference = StainReference::fit(&original).unwrap();
            let target = channel_stats(&original);
            let perturbed = stain_perturb(&original, seed, 0.1);
            let normalized = normalize_pixels(&perturbed, &reference).unwrap();
            let before = stats_distance(&channel_stats(&perturbed), &target);
            let after = stats_distance(&channel_stats(&normalized), &target);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn perturbation_is_seeded() {
        let px = tissue_patch(4);
        assert_eq!(stain_perturb(&px, 1, 0.05), stain_perturb(&px, 1, 0.05));
        assert_ne!(stain_perturb(&px, 1, 0.05), stain_perturb(&px, 2, 0.05));
        assert_eq!(stain_perturb(&px, 1, 0.0), stain_perturb(&px, 9, 0.0));
    }

    #[test]
    fn tensor_wrapper_keeps_shape() {
        let px = tissue_patch(5);
        let t = Tensor::new(vec![128, 128, 3], px.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let out = macenko_normalize(&t, &StainReference::default()).unwrap();
        assert_eq!(out.shape(), t.shape());
        assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v) && v.fract() == 0.0));
    }
}
