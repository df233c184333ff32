//! Tiling with a tissue filter and quarter-tile grid shifts.

use serde::{Deserialize, Serialize};

use super::SyntheticSlide;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::xai::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tile_size: usize,
    /// `(δx, δy)` in units of `L/4`, each 0 or 1.
    pub shift: (usize, usize),
    pub tissue_threshold: f64,
}

impl GridSpec {
    pub fn new(tile_size: usize, shift: (usize, usize), tissue_threshold: f64) -> Result<Self> {
        if tile_size == 0 || !tile_size.is_multiple_of(4) {
            return Err(Error::Config(format!("tile size {tile_size} is not a positive multiple of 4")));
        }
        if shift.0 > 1 || shift.1 > 1 {
            return Err(Error::Config(format!("grid shift {shift:?} outside {{0,1}}²")));
        }
        if !(0.0..=1.0).contains(&tissue_threshold) {
            return Err(Error::Config(format!("tissue threshold {tissue_threshold} outside [0,1]")));
        }
        Ok(GridSpec {
            tile_size,
            shift,
            tissue_threshold,
        })
    }

    /// Pixel offset `(y, x)` of the grid.
    pub fn offset(&self) -> (usize, usize) {
        let q = self.tile_size / 4;
        (self.shift.1 * q, self.shift.0 * q)
    }

    /// Origins `(y, x)` of all tiles lying fully inside a `slide_size` slide, row-major.
    pub fn origins(&self, slide_size: usize) -> Vec<(usize, usize)> {
        let l = self.tile_size;
        let (oy, ox) = self.offset();
        let along = |o: usize| -> Vec<usize> { (0..).map(|i| o + i * l).take_while(|&p| p + l <= slide_size).collect() };
        let xs = along(ox);
        along(oy)
            .into_iter()
            .flat_map(|y| xs.iter().map(move |&x| (y, x)))
            .collect()
    }

    pub fn shift_code(&self) -> String {
        format!("{}{}", self.shift.0, self.shift.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    /// `"<slide seed>/<shift code>/<y>_<x>"`.
    pub id: String,
    pub y: usize,
    pub x: usize,
    pub tissue_fraction: f64,
    pub image: Tensor,
    /// Ground-truth lesion sub-mask.
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileBag {
    pub slide_seed: u64,
    pub label: u8,
    pub grid: GridSpec,
    pub tiles: Vec<Tile>,
}

impl TileBag {
    pub fn images(&self) -> Vec<Tensor> {
        self.tiles.iter().map(|t| t.image.clone()).collect()
    }
}

/// Share of non-background pixels in the `l×l` region at `(y, x)`.
pub fn tissue_fraction(slide: &SyntheticSlide, y: usize, x: usize, l: usize) -> f64 {
    let mut tissue = 0;
    for yy in y..y + l {
        for xx in x..x + l {
            if !slide.is_background(yy, xx) {
                tissue += 1;
            }
        }
    }
    tissue as f64 / (l * l) as f64
}

pub fn tile_grid(slide: &SyntheticSlide, grid: &GridSpec) -> Result<TileBag> {
    let l = grid.tile_size;
    if l > slide.size {
        return Err(Error::InvalidArgument(format!("tile size {l} exceeds slide size {}", slide.size)));
    }
    let mut tiles = Vec::new();
    for (y, x) in grid.origins(slide.size) {
        let tissue = tissue_fraction(slide, y, x, l);
        if tissue < grid.tissue_threshold {
            continue;
        }
        let mask = (y..y + l)
            .flat_map(|yy| slide.lesion_mask[yy * slide.size + x..yy * slide.size + x + l].iter().copied())
            .collect();
        tiles.push(Tile {
            id: format!("{}/{}/{y}_{x}", slide.seed, grid.shift_code()),
            y,
            x,
            tissue_fraction: tissue,
            image: slide.crop_tensor(y, x, l, l)?,
            mask: BinaryMask::new(l, l, mask)?,
        });
    }
    Ok(TileBag {
        slide_seed: slide.seed,
        label: slide.label,
        grid: *grid,
        tiles,
    })
}

/// Axis-aligned rectangle `[y, y+h) × [x, x+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Intersection of the `l×l` tiles at origins `a` and `b`, if non-empty.
pub fn overlap_rect(a: (usize, usize), b: (usize, usize), l: usize) -> Option<Rect> {
    let y0 = a.0.max(b.0);
    let x0 = a.1.max(b.1);
    let y1 = (a.0 + l).min(b.0 + l);
    let x1 = (a.1 + l).min(b.1 + l);
    (y1 > y0 && x1 > x0).then(|| Rect {
        y: y0,
        x: x0,
        h: y1 - y0,
        w: x1 - x0,
    })
}
