//! Deterministic synthetic scenes with known motion.

use std::fs;
use std::path::Path;

use crate::dataset::{annotations_dir, frames_dir, write_image_png, write_mask_png};
use crate::error::Result;
use crate::imaging::{BinaryMask, Image};

/// Smooth texture with values in roughly [0.05, 0.95].
pub fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (0.31 * x + 0.17 * y).sin() + 0.15 * (0.23 * y - 0.11 * x).cos() + 0.1 * (0.9 * x).sin() * (0.7 * y).cos()
}

/// Gray frames `(a, b)` with `b(x, y) = a(x - dx, y - dy)`, so the true
/// forward flow is `(dx, dy)` everywhere. Samples of `b` that fall outside
/// `a` come from the same analytic texture.
pub fn shifted_pair(height: usize, width: usize, dx: f64, dy: f64) -> (Image, Image) {
    let a = Image::gray_from_fn(height, width, |x, y| texture(x as f64, y as f64));
    let b = Image::gray_from_fn(height, width, |x, y| texture(x as f64 - dx, y as f64 - dy));
    (a, b)
}

/// Moving-square sequence: a textured square sliding over a static
/// textured background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingSquare {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub side: usize,
    /// Top-left corner in frame 0.
    pub start: (usize, usize),
    /// Whole-pixel displacement per frame.
    pub step: (usize, usize),
}

impl Default for MovingSquare {
    fn default() -> Self {
        Self { height: 64, width: 64, frames: 3, side: 20, start: (18, 20), step: (2, 1) }
    }
}

impl MovingSquare {
    pub const NAME: &'static str = "moving-square";

    fn corner(&self, t: usize) -> (usize, usize) {
        (self.start.0 + t * self.step.0, self.start.1 + t * self.step.1)
    }

    fn inside(&self, t: usize, x: usize, y: usize) -> bool {
        let (x0, y0) = self.corner(t);
        (x0..x0 + self.side).contains(&x) && (y0..y0 + self.side).contains(&y)
    }

    /// RGB frame `t`, quantised to multiples of 1/255.
    pub fn frame(&self, t: usize) -> Image {
        let (x0, y0) = self.corner(t);
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let (xf, yf) = (x as f64, y as f64);
                let v = if self.inside(t, x, y) {
                    let (sx, sy) = (xf - x0 as f64, yf - y0 as f64);
                    0.15 + 0.7 * (0.5 + 0.5 * (0.8 * sx).sin() * (0.6 * sy).cos())
                } else {
                    0.3 * texture(0.5 * xf, 0.5 * yf)
                };
                let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                out.extend_from_slice(&[q, q, q]);
            }
        }
        Image::new(self.height, self.width, 3, out).expect("frame buffer matches its shape")
    }

    pub fn mask(&self, t: usize) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |x, y| self.inside(t, x, y))
    }

    /// Writes the sequence as a dataset tree: PNG frames and annotations.
    pub fn write_dataset(&self, root: &Path) -> Result<()> {
        let fdir = frames_dir(root).join(Self::NAME);
        let adir = annotations_dir(root).join(Self::NAME);
        fs::create_dir_all(&fdir)?;
        fs::create_dir_all(&adir)?;
        for t in 0..self.frames {
            write_image_png(&fdir.join(format!("{t:05}.png")), &self.frame(t))?;
            write_mask_png(&adir.join(format!("{t:05}.png")), &self.mask(t))?;
        }
        Ok(())
    }
}
