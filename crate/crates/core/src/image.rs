use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size {
            return Err(Error::Shape(format!(
                "{} pixels for a {size}x{size} image",
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.size + col] = v;
    }
}

/// Binary foreground mask (`true` = foreground), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} bits for a {rows}x{cols} mask",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}
