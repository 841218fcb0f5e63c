//! Single-channel images and binary masks.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4D};

/// Pixel size used when a dataset carries no spacing of its own.
pub const DEFAULT_SPACING_MM: f64 = 1.35;

/// Physical pixel size in millimetres, `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Spacing {
    pub fn new(row: f64, col: f64) -> Result<Self> {
        if !(row > 0.0 && col > 0.0 && row.is_finite() && col.is_finite()) {
            return Err(Error::Contract(format!("spacing must be positive, got ({row}, {col})")));
        }
        Ok(Spacing { row, col })
    }

    pub fn isotropic(mm: f64) -> Result<Self> {
        Self::new(mm, mm)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing {
            row: DEFAULT_SPACING_MM,
            col: DEFAULT_SPACING_MM,
        }
    }
}

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grayscale2D {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
    spacing: Spacing,
}

impl Grayscale2D {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("image dims must be positive, got {h}x{w}")));
        }
        if pixels.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} image needs {} pixels, got {}",
                h * w,
                pixels.len()
            )));
        }
        Ok(Grayscale2D { h, w, pixels, spacing })
    }

    pub fn from_fn(h: usize, w: usize, spacing: Spacing, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..h * w).map(|i| f(i / w.max(1), i % w.max(1))).collect();
        Self::new(h, w, pixels, spacing)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }
}

/// Row-major binary mask; every pixel is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskImage {
    h: usize,
    w: usize,
    pixels: Vec<u8>,
}

impl MaskImage {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("mask dims must be positive, got {h}x{w}")));
        }
        if pixels.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} mask needs {} pixels, got {}",
                h * w,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|&p| p > 1) {
            return Err(Error::Contract(format!(
                "mask pixel {i} has value {}, expected 0 or 1",
                pixels[i]
            )));
        }
        Ok(MaskImage { h, w, pixels })
    }

    pub fn empty(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![0; h * w])
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let pixels = (0..h * w).map(|i| f(i / w.max(1), i % w.max(1)) as u8).collect();
        Self::new(h, w, pixels)
    }

    /// Foreground wherever `values[i] > threshold`.
    pub fn threshold(h: usize, w: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(h, w, values.iter().map(|&v| (v > threshold) as u8).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.w + x] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// Central `th × tw` window; an odd margin leaves the extra row (column)
    /// at the bottom (right).
    pub fn crop_center(&self, th: usize, tw: usize) -> Result<Self> {
        if th > self.h || tw > self.w || th == 0 || tw == 0 {
            return Err(Error::shape(format!(
                "cannot crop {}x{} mask to {th}x{tw}",
                self.h, self.w
            )));
        }
        let (top, left) = ((self.h - th) / 2, (self.w - tw) / 2);
        Self::from_fn(th, tw, |y, x| self.get(top + y, left + x))
    }

    /// The mask as a 0.0 / 1.0 image.
    pub fn to_image(&self, spacing: Spacing) -> Grayscale2D {
        Grayscale2D {
            h: self.h,
            w: self.w,
            pixels: self.pixels.iter().map(|&p| p as f64).collect(),
            spacing,
        }
    }
}

fn stack<T>(items: &[T], dims: impl Fn(&T) -> (usize, usize), values: impl Fn(&T) -> Vec<f64>) -> Result<Tensor4D> {
    let first = items
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty list".into()))?;
    let (h, w) = dims(first);
    let mut data = Vec::with_capacity(items.len() * h * w);
    for (i, item) in items.iter().enumerate() {
        if dims(item) != (h, w) {
            let (ih, iw) = dims(item);
            return Err(Error::shape(format!("item {i} is {ih}x{iw}, expected {h}x{w}")));
        }
        data.extend(values(item));
    }
    Tensor4D::new(Dims::new(items.len(), 1, h, w), data)
}

/// Stacks images into an `[n, 1, h, w]` tensor.
pub fn images_to_tensor(images: &[Grayscale2D]) -> Result<Tensor4D> {
    stack(images, |i| (i.h, i.w), |i| i.pixels.clone())
}

/// Stacks masks into an `[n, 1, h, w]` tensor of 0.0 / 1.0.
pub fn masks_to_tensor(masks: &[MaskImage]) -> Result<Tensor4D> {
    stack(masks, |m| (m.h, m.w), |m| m.pixels.iter().map(|&p| p as f64).collect())
}
