//! Dense row-major image buffers used across the crate.

use crate::error::{Error, Result};
use crate::math::Vec3;

/// RGB image with f64 channels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, fill: Vec3) -> Self {
        ImageRgb { width, height, data: vec![fill; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Vec3) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ImageRgb { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "image buffer has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(ImageRgb { width, height, data })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Vec3 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut Vec3 {
        &mut self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// One scalar plane of the image.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[ch]).collect()
    }
}

pub fn check_same_shape(a: &ImageRgb, b: &ImageRgb, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "{}: {}x{} vs {}x{}",
            what, a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}
