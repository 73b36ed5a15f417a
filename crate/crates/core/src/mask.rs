//! Binary image masks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::BBox;

/// Row-major `height × width` binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("Mask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Mask { height, width, bits }
    }

    /// Thresholds probabilities at 0.5 (strictly greater is foreground).
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::from_bits(height, width, probs.iter().map(|&p| p > 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn intersection(&self, other: &Mask) -> Result<usize> {
        self.check_same(other, "mask intersection")?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union(&self, other: &Mask) -> Result<usize> {
        self.check_same(other, "mask union")?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    /// Foreground pixels with at least one 4-neighbour outside the mask
    /// (pixels on the image border count as touching the outside).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let interior = y > 0
                    && x > 0
                    && y + 1 < self.height
                    && x + 1 < self.width
                    && self.get(y - 1, x)
                    && self.get(y + 1, x)
                    && self.get(y, x - 1)
                    && self.get(y, x + 1);
                if !interior {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Tight exclusive-end bounding box of the foreground.
    pub fn bbox(&self) -> Result<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return Err(Error::Empty("bbox_from_mask"));
        }
        BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)
    }
}
