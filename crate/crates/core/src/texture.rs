//! Texture-aware localization.
//!
//! Every pixel gets an 8-neighbour local binary pattern computed on the
//! channel-mean luminance (replicate padding at the image border). A block's
//! texture complexity is the Shannon entropy, in bits, of the 256-bin
//! histogram of its pixels' codes. Blocks at or above the threshold carry the
//! perturbation.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 4.5;
pub const ENTROPY_EPSILON: f64 = 1e-12;
/// Relative gap below which two luminances count as equal. Channel means of
/// the same intensities summed in different orders, or rescaled, differ only
/// in the last bits; treating them as ties keeps codes scale invariant.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Neighbour offsets `(dy, dx)` in bit order: left to right, then top to
/// bottom. Bit `k` of a code is set when neighbour `k` is not darker than the
/// centre, up to `TIE_TOLERANCE`.
pub const NEIGHBOUR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Single-channel plane of intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Luminance {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Luminance {
    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.luminance(),
        }
    }

    #[inline]
    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }
}

pub fn lbp_code(lum: &Luminance, i: usize, j: usize) -> u8 {
    let centre = lum.data[i * lum.width + j];
    NEIGHBOUR_OFFSETS
        .iter()
        .enumerate()
        .fold(0u8, |code, (k, &(dy, dx))| {
            let n = lum.at_clamped(i as isize + dy, j as isize + dx);
            if n >= centre || centre - n <= TIE_TOLERANCE * centre.abs() {
                code | (1 << k)
            } else {
                code
            }
        })
}

/// Histogram entropy in bits; empty bins contribute nothing. Floored at zero
/// because the epsilon inside the logarithm pushes a one-bin histogram
/// fractionally below it.
pub fn block_entropy(codes: &[u8]) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::InvalidParameter("entropy of an empty block".into()));
    }
    let mut hist = [0usize; 256];
    for &c in codes {
        hist[c as usize] += 1;
    }
    let n = codes.len() as f64;
    let mut o = 0.0;
    for &count in hist.iter() {
        if count > 0 {
            let p = count as f64 / n;
            o -= p * (p + ENTROPY_EPSILON).log2();
        }
    }
    Ok(o.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn for_dims(height: usize, width: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || !height.is_multiple_of(block_size) || !width.is_multiple_of(block_size) {
            return Err(Error::Dimensions(format!(
                "{height}x{width} is not divisible into {block_size}x{block_size} blocks"
            )));
        }
        Ok(Self {
            block_size,
            rows: height / block_size,
            cols: width / block_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.block_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.block_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityMap {
    pub grid: BlockGrid,
    pub values: Vec<f64>,
}

impl ComplexityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }

    pub fn threshold(&self, threshold: f64) -> BlockMask {
        BlockMask {
            grid: self.grid,
            selected: self.values.iter().map(|&o| o >= threshold).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub grid: BlockGrid,
    pub selected: Vec<bool>,
}

impl BlockMask {
    /// Every block selected; used when localization is switched off.
    pub fn full(grid: BlockGrid) -> Self {
        Self {
            grid,
            selected: vec![true; grid.len()],
        }
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.selected[row * self.grid.cols + col]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.grid.len() as f64
    }

    #[inline]
    pub fn covers_pixel(&self, y: usize, x: usize) -> bool {
        let bs = self.grid.block_size;
        self.is_selected(y / bs, x / bs)
    }

    /// Row-major per-pixel mask over the full frame.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let (h, w) = (self.grid.height(), self.grid.width());
        (0..h * w).map(|i| self.covers_pixel(i / w, i % w)).collect()
    }

    /// Zero every element of `t` outside selected blocks.
    pub fn apply(&self, t: &mut Tensor) {
        let pix = self.pixel_mask();
        let n = pix.len();
        debug_assert_eq!(t.plane_len(), n);
        for c in 0..t.channels() {
            for (v, &keep) in t.plane_mut(c).iter_mut().zip(&pix) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    /// SHA-256 over the grid shape and one byte per block.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.grid.block_size as u32).to_le_bytes());
        h.update((self.grid.rows as u32).to_le_bytes());
        h.update((self.grid.cols as u32).to_le_bytes());
        let bytes: Vec<u8> = self.selected.iter().map(|&s| s as u8).collect();
        h.update(&bytes);
        hex::encode(h.finalize())
    }

    /// White where selected.
    pub fn to_image(&self) -> ImageTensor {
        let (h, w) = (self.grid.height(), self.grid.width());
        let data = self
            .pixel_mask()
            .into_iter()
            .map(|s| if s { 1.0 } else { 0.0 })
            .collect();
        ImageTensor::from_vec(1, h, w, data).expect("mask dimensions")
    }
}

/// Entropy of every block's LBP histogram.
pub fn complexity_map(img: &ImageTensor, block_size: usize) -> Result<ComplexityMap> {
    let grid = BlockGrid::for_dims(img.height(), img.width(), block_size)?;
    let lum = Luminance::from_image(img);
    let mut values = Vec::with_capacity(grid.len());
    let mut codes = Vec::with_capacity(block_size * block_size);
    for br in 0..grid.rows {
        for bc in 0..grid.cols {
            codes.clear();
            for y in br * block_size..(br + 1) * block_size {
                for x in bc * block_size..(bc + 1) * block_size {
                    codes.push(lbp_code(&lum, y, x));
                }
            }
            values.push(block_entropy(&codes)?);
        }
    }
    Ok(ComplexityMap { grid, values })
}

pub fn select_blocks(
    img: &ImageTensor,
    block_size: usize,
    threshold: f64,
) -> Result<(ComplexityMap, BlockMask)> {
    let map = complexity_map(img, block_size)?;
    let mask = map.threshold(threshold);
    Ok((map, mask))
}
