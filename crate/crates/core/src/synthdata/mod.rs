//! Deterministic synthetic H&E-like slides with pixel-level lesion masks.
//!
//! Colors follow a Beer–Lambert model: every tissue pixel carries a
//! hematoxylin and an eosin concentration, and intensity is
//! `250·exp(−OD)` with `OD = h·H + e·E`. Tissue is a superellipse on a
//! near-white background. A lesion is a pale, eosinophilic, irregular core
//! with nuclear debris and a graded boundary, ringed by a band of dense
//! inflammatory nuclei; the lesion mask covers core and band.

pub mod grid;
pub mod io;
pub mod stain;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use grid::{overlap_rect, tile_grid, GridSpec, Rect, Tile, TileBag};
pub use stain::{macenko_normalize, stain_perturb, StainReference};

/// Unit optical-density vectors of the two stains.
pub const HEMATOXYLIN: [f64; 3] = [0.651, 0.701, 0.290];
pub const EOSIN: [f64; 3] = [0.070, 0.991, 0.110];

/// A pixel whose channel mean exceeds this is background.
pub const BACKGROUND_LEVEL: f64 = 240.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlideParams {
    pub size: usize,
    pub lesion_count: usize,
    /// Mean blob radius range in pixels.
    pub lesion_radius: [f64; 2],
    /// Lesions stay this far from the slide edge (one tile side).
    pub margin: usize,
    /// Superellipse half-width of the tissue as a fraction of `size`.
    pub tissue_radius: f64,
    /// Expected nuclei per tissue pixel.
    pub nuclei_density: f64,
    /// Relative amplitude of the smooth stain-concentration noise.
    pub texture_amplitude: f64,
    pub parenchyma_stain: [f64; 2],
    pub lesion_stain: [f64; 2],
    /// Width of the graded lesion boundary in pixels.
    pub boundary_band: f64,
}

impl Default for SlideParams {
    fn default() -> Self {
        SlideParams {
            size: 512,
            lesion_count: 0,
            lesion_radius: [12.0, 26.0],
            margin: 64,
            tissue_radius: 0.46,
            nuclei_density: 1.0 / 220.0,
            texture_amplitude: 0.15,
            parenchyma_stain: [0.35, 0.9],
            lesion_stain: [0.1, 1.2],
            boundary_band: 6.0,
        }
    }
}

impl SlideParams {
    pub fn validate(&self) -> Result<()> {
        let [rmin, rmax] = self.lesion_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Config(format!("lesion radius range [{rmin}, {rmax}] is invalid")));
        }
        let free = self.size as f64 - 2.0 * (self.margin as f64 + lesion_extent(rmax, self.boundary_band));
        if free <= 0.0 {
            return Err(Error::Config(format!(
                "lesions of radius {rmax} do not fit a {} slide with margin {}",
                self.size, self.margin
            )));
        }
        if self.tissue_radius <= 0.0 || self.tissue_radius > 0.5 || self.size < 16 {
            return Err(Error::Config("tissue radius must lie in (0, 0.5] and size ≥ 16".into()));
        }
        Ok(())
    }
}

/// Largest distance from the blob centre that the lesion still affects.
fn lesion_extent(radius: f64, band: f64) -> f64 {
    radius * (1.0 + HARMONIC_MAX * 3.0) + band.max(RIM_WIDTH)
}

const HARMONIC_MAX: f64 = 0.1;
/// Lesion area per debris fragment, in pixels.
const DEBRIS_SPACING: f64 = 30.0;
/// Width of the inflammatory band around each core, in pixels.
const RIM_WIDTH: f64 = 6.0;

/// Irregular blob with radius `R(θ) = r·(1 + Σ_k a_k sin(kθ + φ_k))`, `k = 2..4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionBlob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub harmonics: [(f64, f64); 3],
}

impl LesionBlob {
    pub fn radius_at(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(a, phase))| a * ((i as f64 + 2.0) * theta + phase).sin())
            .sum();
        self.radius * (1.0 + wobble)
    }

    /// Radial signed distance of the pixel centre: negative inside.
    pub fn signed_distance(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx.hypot(dy) - self.radius_at(dy.atan2(dx))
    }

    /// Whether the pixel belongs to the lesion: the core or its inflammatory band.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.signed_distance(x, y) <= RIM_WIDTH
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub seed: u64,
    pub size: usize,
    /// Row-major RGB bytes, `size·size·3`.
    pub image: Vec<u8>,
    pub lesion_mask: Vec<bool>,
    pub label: u8,
    pub lesions: Vec<LesionBlob>,
}

impl SyntheticSlide {
    pub fn from_parts(seed: u64, size: usize, image: Vec<u8>, lesion_mask: Vec<bool>) -> Result<Self> {
        if image.len() != size * size * 3 || lesion_mask.len() != size * size {
            return Err(Error::Shape(format!("slide buffers do not match size {size}")));
        }
        let label = u8::from(lesion_mask.contains(&true));
        Ok(SyntheticSlide {
            seed,
            size,
            image,
            lesion_mask,
            label,
            lesions: Vec::new(),
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = 3 * (y * self.size + x);
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }

    pub fn is_background(&self, y: usize, x: usize) -> bool {
        is_background(self.pixel(y, x))
    }

    /// `h×w×3` tensor of the region at `(y0, x0)`.
    pub fn crop_tensor(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.size || x0 + w > self.size {
            return Err(Error::Shape(format!("crop at ({y0},{x0}) leaves the slide")));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = 3 * (y * self.size + x0);
            data.extend(self.image[row..row + 3 * w].iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![h, w, 3], data)
    }

    pub fn lesion_pixels(&self) -> usize {
        self.lesion_mask.iter().filter(|&&m| m).count()
    }
}

pub fn is_background(px: [u8; 3]) -> bool {
    (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / 3.0 > BACKGROUND_LEVEL
}

/// Bilinearly interpolated lattice noise in `[0,1]`.
struct ValueNoise {
    cell: f64,
    side: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let side = (size as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            cell,
            side,
            lattice: (0..side * side).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let fy = y as f64 / self.cell;
        let fx = x as f64 / self.cell;
        let (iy, ix) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let v = |a: usize, b: usize| self.lattice[a * self.side + b];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn smoothstep(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    v * v * (3.0 - 2.0 * v)
}

fn stamp_disk(field: &mut [f64], size: usize, cy: f64, cx: f64, r: f64, amount: f64) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(size - 1);
    let x1 = ((cx + r).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx);
            // soft edge over one pixel
            let w = (r + 0.5 - d).clamp(0.0, 1.0);
            field[y * size + x] += amount * w;
        }
    }
}

/// Generates one slide; identical `(seed, params)` give bit-identical output.
pub fn generate_slide(seed: u64, params: &SlideParams) -> Result<SyntheticSlide> {
    params.validate()?;
    let s = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centre = s as f64 / 2.0;
    let tcx = centre + rng.random_range(-4.0..4.0);
    let tcy = centre + rng.random_range(-4.0..4.0);
    let tr = params.tissue_radius * s as f64;
    let lobes = rng.random_range(3..=5) as f64;
    let lobe_phase = rng.random_range(0.0..TAU);
    let in_tissue = |y: usize, x: usize| -> bool {
        let dx = x as f64 + 0.5 - tcx;
        let dy = y as f64 + 0.5 - tcy;
        let r = tr * (1.0 + 0.03 * (lobes * dy.atan2(dx) + lobe_phase).sin());
        (dx / r).abs().powi(6) + (dy / r).abs().powi(6) <= 1.0
    };

    let [rmin, rmax] = params.lesion_radius;
    let lo = params.margin as f64 + lesion_extent(rmax, params.boundary_band);
    let hi = s as f64 - lo;
    let lesions: Vec<LesionBlob> = (0..params.lesion_count)
        .map(|_| LesionBlob {
            cx: rng.random_range(lo..=hi),
            cy: rng.random_range(lo..=hi),
            radius: rng.random_range(rmin..=rmax),
            harmonics: std::array::from_fn(|_| (rng.random_range(0.0..HARMONIC_MAX), rng.random_range(0.0..TAU))),
        })
        .collect();

    let coarse = ValueNoise::new(s, 48.0, &mut rng);
    let fine = ValueNoise::new(s, 12.0, &mut rng);
    let eosin_noise = ValueNoise::new(s, 32.0, &mut rng);

    // core blend weight, lesion mask and distance outside the nearest core
    let mut blend = vec![0.0; s * s];
    let mut rim = vec![f64::INFINITY; s * s];
    let mut mask = vec![false; s * s];
    let band = params.boundary_band;
    for blob in &lesions {
        let reach = lesion_extent(blob.radius, band).ceil() as usize;
        let (cy, cx) = (blob.cy as usize, blob.cx as usize);
        for y in cy.saturating_sub(reach)..(cy + reach + 1).min(s) {
            for x in cx.saturating_sub(reach)..(cx + reach + 1).min(s) {
                let d = blob.signed_distance(x, y);
                let i = y * s + x;
                blend[i] = f64::max(blend[i], smoothstep((band / 2.0 - d) / band));
                rim[i] = rim[i].min(d);
                mask[i] |= blob.contains(x, y);
            }
        }
    }

    let mut nuclei = vec![0.0; s * s];
    let count = (params.nuclei_density * (s * s) as f64).round() as usize;
    for _ in 0..count {
        let y = rng.random_range(0.0..s as f64);
        let x = rng.random_range(0.0..s as f64);
        let r = rng.random_range(1.5..3.0);
        let i = (y as usize) * s + x as usize;
        // necrotic cores keep only scattered nuclear debris
        if blend[i] > 0.5 && rng.random::<f64>() < 0.85 {
            continue;
        }
        stamp_disk(&mut nuclei, s, y, x, r, rng.random_range(0.7..1.1));
    }
    for blob in &lesions {
        let area = std::f64::consts::PI * blob.radius * blob.radius;
        for _ in 0..(area / DEBRIS_SPACING) as usize {
            let theta = rng.random_range(0.0..TAU);
            let rho = (blob.radius_at(theta) - 1.5).max(0.0) * rng.random::<f64>().sqrt();
            let (y, x) = (blob.cy + rho * theta.sin(), blob.cx + rho * theta.cos());
            stamp_disk(&mut nuclei, s, y, x, rng.random_range(0.5..1.0), rng.random_range(0.8..1.2));
        }
        let perimeter = TAU * blob.radius;
        for _ in 0..(perimeter * 0.5) as usize {
            let theta = rng.random_range(0.0..TAU);
            let rho = blob.radius_at(theta) + rng.random_range(1.0..RIM_WIDTH - 1.0);
            let (y, x) = (blob.cy + rho * theta.sin(), blob.cx + rho * theta.cos());
            stamp_disk(&mut nuclei, s, y, x, rng.random_range(1.0..2.0), rng.random_range(0.9..1.3));
        }
    }

    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let [hp, ep] = params.parenchyma_stain;
    let [hl, el] = params.lesion_stain;
    let amp = params.texture_amplitude;
    let mut image = vec![0u8; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let px = &mut image[3 * i..3 * i + 3];
            if !in_tissue(y, x) {
                let base = rng.random_range(246.0..254.0);
                for c in px.iter_mut() {
                    *c = (base + rng.random_range(-1.0f64..1.0)).round().clamp(0.0, 255.0) as u8;
                }
                continue;
            }
            let tex = 0.7 * coarse.at(y, x) + 0.3 * fine.at(y, x) - 0.5;
            let w = blend[i];
            let mut h = (1.0 - w) * hp + w * hl;
            if rim[i] > 0.0 && rim[i] <= RIM_WIDTH {
                h += 0.08;
            }
            let mut e = (1.0 - w) * ep + w * el;
            h *= 1.0 + 2.0 * amp * tex;
            e *= 1.0 + amp * (eosin_noise.at(y, x) - 0.5);
            // nuclei displace eosinophilic cytoplasm
            let nuc = nuclei[i].min(1.4);
            h += nuc;
            e *= 1.0 - 0.6 * nuc.min(1.0);
            for (c, out) in px.iter_mut().enumerate() {
                let od = h * HEMATOXYLIN[c] + e * EOSIN[c] + noise.sample(&mut rng);
                *out = (250.0 * (-od).exp()).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let label = u8::from(mask.contains(&true));
    Ok(SyntheticSlide {
        seed,
        size: s,
        image,
        lesion_mask: mask,
        label,
        lesions,
    })
}

/// Per-slide parameters derived from a seed: about half of the slides carry
/// between one and `max_lesions` lesions.
pub fn sample_params(seed: u64, base: &SlideParams, positive_fraction: f64, max_lesions: usize) -> SlideParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1AB5_0F5E_ED00);
    let positive = rng.random::<f64>() < positive_fraction;
    SlideParams {
        lesion_count: if positive { rng.random_range(1..=max_lesions.max(1)) } else { 0 },
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(lesions: usize) -> SlideParams {
        SlideParams {
            size: 256,
            lesion_count: lesions,
            margin: 32,
            ..Default::default()
        }
    }

    #[test]
    fn lesion_free_slide_has_empty_mask() {
        let slide = generate_slide(3, &small_params(0)).unwrap();
        assert_eq!(slide.label, 0);
        assert_eq!(slide.lesion_pixels(), 0);
    }

    #[test]
    fn mask_is_union_of_blobs() {
        let slide = generate_slide(11, &small_params(3)).unwrap();
        assert_eq!(slide.label, 1);
        assert_eq!(slide.lesions.len(), 3);
        let s = slide.size;
        let union = (0..s * s)
            .filter(|i| slide.lesions.iter().any(|b| b.contains(i % s, i / s)))
            .count();
        assert_eq!(slide.lesion_pixels(), union);
        assert!(union > 0);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let p = small_params(2);
        assert_eq!(generate_slide(5, &p).unwrap(), generate_slide(5, &p).unwrap());
        assert_ne!(generate_slide(5, &p).unwrap().image, generate_slide(6, &p).unwrap().image);
    }

    #[test]
    fn lesions_lie_inside_margin_and_tissue() {
        for seed in 0..6 {
            let slide = generate_slide(seed, &small_params(3)).unwrap();
            let s = slide.size;
            for i in 0..s * s {
                let (y, x) = (i / s, i % s);
                if slide.lesion_mask[i] {
                    assert!((32..s - 32).contains(&y) && (32..s - 32).contains(&x));
                    assert!(!slide.is_background(y, x));
                }
            }
        }
    }

    #[test]
    fn lesion_cores_are_paler_in_red_than_parenchyma() {
        let slide = generate_slide(21, &small_params(3)).unwrap();
        let (mut les, mut par, mut nl, mut np) = (0.0, 0.0, 0, 0);
        for i in 0..slide.size * slide.size {
            let (y, x) = (i / slide.size, i % slide.size);
            if slide.is_background(y, x) {
                continue;
            }
            let r = f64::from(slide.image[3 * i]);
            if slide.lesions.iter().any(|b| b.signed_distance(x, y) <= 0.0) {
                les += r;
                nl += 1;
            } else if !slide.lesion_mask[i] {
                par += r;
                np += 1;
            }
        }
        assert!(les / nl as f64 > par / np as f64 + 10.0);
    }

    #[test]
    fn infeasible_params_rejected() {
        let p = SlideParams {
            size: 128,
            lesion_radius: [40.0, 60.0],
            ..Default::default()
        };
        assert!(matches!(generate_slide(0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn sampled_params_are_deterministic() {
        let base = SlideParams::default();
        let a: Vec<usize> = (0..40).map(|s| sample_params(s, &base, 0.5, 3).lesion_count).collect();
        let b: Vec<usize> = (0..40).map(|s| sample_params(s, &base, 0.5, 3).lesion_count).collect();
        assert_eq!(a, b);
        assert!(a.contains(&0) && a.iter().any(|&c| c > 0));
        assert!(a.iter().all(|&c| c <= 3));
    }
}
