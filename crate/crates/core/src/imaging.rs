//! Dense-grid primitives: images, flow fields, masks, and the resampling
//! operations the solver is built on.
//!
//! All grids are row-major. Sampling outside the image rectangle clamps to the
//! nearest edge pixel.

use crate::error::{Error, Result};

/// Luma weights used by [`to_grayscale`].
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A real-valued `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }
}

/// `height × width × channels` intensities in `[0, 1]`, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Builds an image, checking the length and the `[0, 1]` range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Single-channel image from a function of `(x, y)`; values are clamped to `[0, 1]`.
    pub fn gray_from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let grid = Grid::from_fn(height, width, |x, y| f(x, y).clamp(0.0, 1.0));
        Self { height, width, channels: 1, data: grid.data }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn require_gray(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::UnsupportedChannels(self.channels));
        }
        Ok(())
    }

    /// The single channel as a grid. Fails for colour images.
    pub fn to_grid(&self) -> Result<Grid> {
        self.require_gray()?;
        Ok(Grid { height: self.height, width: self.width, data: self.data.clone() })
    }
}

/// Per-pixel displacement `(u, v)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, u: vec![0.0; height * width], v: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self { height, width, u: vec![u; height * width], v: vec![v; height * width] }
    }

    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if u.len() != n || v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "flow {height}x{width} needs {n} values per component, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("flow contains non-finite values".into()));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut flow = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                flow.u[y * width + x] = u;
                flow.v[y * width + x] = v;
            }
        }
        flow
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// Largest absolute component over both fields.
    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Boolean foreground mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: vec![value; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { height, width, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "masks {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }
}

/// Converts to a single channel with Rec. 601 luma weights.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| {
                    (LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
                        .clamp(0.0, 1.0)
                })
                .collect();
            Ok(Image { height: img.height, width: img.width, channels: 1, data })
        }
        c => Err(Error::UnsupportedChannels(c)),
    }
}

/// Central differences in the interior, one-sided differences on the border.
pub fn spatial_gradients(img: &Image) -> Result<(Grid, Grid)> {
    img.require_gray()?;
    if img.height < 3 || img.width < 3 {
        return Err(Error::TooSmall(format!(
            "gradients need at least 3x3, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(grid_gradients(&img.data, img.height, img.width))
}

pub(crate) fn grid_gradients(data: &[f64], height: usize, width: usize) -> (Grid, Grid) {
    let at = |x: usize, y: usize| data[y * width + x];
    let mut gx = Grid::zeros(height, width);
    let mut gy = Grid::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let dx = if width < 2 {
                0.0
            } else if x == 0 {
                at(1, y) - at(0, y)
            } else if x == width - 1 {
                at(x, y) - at(x - 1, y)
            } else {
                0.5 * (at(x + 1, y) - at(x - 1, y))
            };
            let dy = if height < 2 {
                0.0
            } else if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == height - 1 {
                at(x, y) - at(x, y - 1)
            } else {
                0.5 * (at(x, y + 1) - at(x, y - 1))
            };
            gx.set(x, y, dx);
            gy.set(x, y, dy);
        }
    }
    (gx, gy)
}

/// Cell origin and fractional offset for a clamped sample coordinate along one axis.
#[inline]
fn cell(pos: f64, len: usize) -> (usize, f64, bool) {
    let max = (len - 1) as f64;
    if len == 1 {
        return (0, 0.0, true);
    }
    if pos <= 0.0 {
        return (0, 0.0, pos < 0.0);
    }
    if pos >= max {
        return (len - 2, 1.0, pos > max);
    }
    let base = (pos.floor() as usize).min(len - 2);
    (base, pos - base as f64, false)
}

/// Bilinear sample at `(x, y)` with clamp-to-edge.
#[inline]
pub(crate) fn sample(data: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    sample_with_grad(data, height, width, x, y).0
}

/// Bilinear sample and its partial derivatives with respect to the sample
/// position. Outside the rectangle the clamped coordinate does not move, so the
/// corresponding derivative is zero.
#[inline]
pub(crate) fn sample_with_grad(
    data: &[f64],
    height: usize,
    width: usize,
    x: f64,
    y: f64,
) -> (f64, f64, f64) {
    let (x0, fx, x_clamped) = cell(x, width);
    let (y0, fy, y_clamped) = cell(y, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let a = data[y0 * width + x0];
    let b = data[y0 * width + x1];
    let c = data[y1 * width + x0];
    let d = data[y1 * width + x1];
    let top = (1.0 - fx) * a + fx * b;
    let bottom = (1.0 - fx) * c + fx * d;
    let value = (1.0 - fy) * top + fy * bottom;
    let dx = if x_clamped { 0.0 } else { (1.0 - fy) * (b - a) + fy * (d - c) };
    let dy = if y_clamped { 0.0 } else { bottom - top };
    (value, dx, dy)
}

/// Samples `img` at `(x + u, y + v)` for every pixel.
pub fn backward_warp(img: &Image, flow: &FlowField) -> Result<Image> {
    img.require_gray()?;
    if !flow.same_shape(img.height, img.width) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs flow {}x{}",
            img.height, img.width, flow.height, flow.width
        )));
    }
    let data = warp_grid(&img.data, img.height, img.width, flow);
    Ok(Image { height: img.height, width: img.width, channels: 1, data })
}

pub(crate) fn warp_grid(data: &[f64], height: usize, width: usize, flow: &FlowField) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = flow.at(x, y);
            out.push(sample(data, height, width, x as f64 + u, y as f64 + v));
        }
    }
    out
}

/// 2×2 box average followed by stride-2 subsampling. Odd trailing rows and
/// columns average over the pixels that exist.
pub fn downsample_half(img: &Image) -> Result<Image> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::TooSmall(format!(
            "cannot halve a {}x{} image",
            img.height, img.width
        )));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut data = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut sum = 0.0;
                let mut n = 0usize;
                for y in (2 * oy)..(2 * oy + 2).min(h) {
                    for x in (2 * ox)..(2 * ox + 2).min(w) {
                        sum += img.get(x, y, ch);
                        n += 1;
                    }
                }
                data.push(sum / n as f64);
            }
        }
    }
    Ok(Image { height: oh, width: ow, channels: c, data })
}

/// Source coordinate for destination index `dst` under pixel-centre alignment.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

fn resize_grid(data: &[f64], height: usize, width: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let sy = source_coord(y, height, new_h);
        for x in 0..new_w {
            let sx = source_coord(x, width, new_w);
            out.push(sample(data, height, width, sx, sy));
        }
    }
    out
}

/// Bilinear upsampling of a flow field with displacements rescaled to the new
/// pixel size.
pub fn upsample_flow(flow: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if new_h < flow.height || new_w < flow.width {
        return Err(Error::InvalidArgument(format!(
            "upsample_flow cannot shrink {}x{} to {new_h}x{new_w}",
            flow.height, flow.width
        )));
    }
    resize_flow(flow, new_h, new_w)
}

/// Bilinear resize of a flow field in either direction, rescaling displacements.
pub fn resize_flow(flow: &FlowField, new_h: usize, new_w: usize) -> Result<FlowField> {
    if flow.height == 0 || flow.width == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument("empty flow field".into()));
    }
    let sx = new_w as f64 / flow.width as f64;
    let sy = new_h as f64 / flow.height as f64;
    let u = resize_grid(&flow.u, flow.height, flow.width, new_h, new_w)
        .into_iter()
        .map(|x| x * sx)
        .collect();
    let v = resize_grid(&flow.v, flow.height, flow.width, new_h, new_w)
        .into_iter()
        .map(|x| x * sy)
        .collect();
    Ok(FlowField { height: new_h, width: new_w, u, v })
}

/// Bilinear resize of every channel. Output values are convex combinations of
/// input values.
pub fn resize_bilinear(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if img.height == 0 || img.width == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let c = img.channels;
    let mut data = vec![0.0; new_h * new_w * c];
    for ch in 0..c {
        let plane: Vec<f64> = img.data.iter().skip(ch).step_by(c).copied().collect();
        let resized = resize_grid(&plane, img.height, img.width, new_h, new_w);
        for (i, value) in resized.into_iter().enumerate() {
            data[i * c + ch] = value;
        }
    }
    Ok(Image { height: new_h, width: new_w, channels: c, data })
}

/// Nearest-neighbour resize, label-preserving.
pub fn resize_mask_nearest(mask: &BinaryMask, new_h: usize, new_w: usize) -> BinaryMask {
    if mask.height == new_h && mask.width == new_w {
        return mask.clone();
    }
    let pick = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    BinaryMask::from_fn(new_h, new_w, |x, y| {
        mask.get(pick(x, mask.width, new_w), pick(y, mask.height, new_h))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::gray_from_fn(h, w, |x, _| x as f64 / (w - 1) as f64)
    }

    #[test]
    fn grayscale_weights() {
        let white = Image::constant(2, 2, 3, 1.0);
        let g = to_grayscale(&white).unwrap();
        assert!(g.data.iter().all(|v| (*v - 1.0).abs() < 1e-12));

        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).unwrap().data[0] - 0.299).abs() < 1e-15);

        let gray = ramp(3, 4);
        assert_eq!(to_grayscale(&gray).unwrap(), gray);

        let two = Image { height: 1, width: 1, channels: 2, data: vec![0.0, 0.0] };
        assert!(matches!(to_grayscale(&two), Err(Error::UnsupportedChannels(2))));
    }

    #[test]
    fn gradients_of_ramps() {
        let c = Image::constant(5, 6, 1, 0.3);
        let (gx, gy) = spatial_gradients(&c).unwrap();
        assert!(gx.data.iter().chain(&gy.data).all(|v| *v == 0.0));

        let (h, w) = (5, 7);
        let (gx, gy) = spatial_gradients(&ramp(h, w)).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((gx.get(x, y) - 1.0 / (w - 1) as f64).abs() < 1e-12);
                assert_eq!(gy.get(x, y), 0.0);
            }
        }
        let t = Image::gray_from_fn(h, w, |_, y| y as f64 / (h - 1) as f64);
        let (gx, gy) = spatial_gradients(&t).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((gy.get(x, y) - 1.0 / (h - 1) as f64).abs() < 1e-12);
                assert_eq!(gx.get(x, y), 0.0);
            }
        }
        assert!(matches!(spatial_gradients(&Image::constant(2, 5, 1, 0.0)), Err(Error::TooSmall(_))));
    }

    #[test]
    fn warp_cases() {
        let img = Image::gray_from_fn(4, 4, |x, y| (x + 4 * y) as f64 / 15.0);
        assert_eq!(backward_warp(&img, &FlowField::zeros(4, 4)).unwrap(), img);

        let shifted = backward_warp(&img, &FlowField::constant(4, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                assert!((shifted.get(x, y, 0) - img.get(x + 1, y, 0)).abs() < 1e-15);
            }
        }

        // Hand evaluation on a 4x4 ramp: sample at x + 0.5 is the neighbour midpoint.
        let r = ramp(4, 4);
        let half = backward_warp(&r, &FlowField::constant(4, 4, 0.5, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                let mid = 0.5 * (r.get(x, y, 0) + r.get(x + 1, y, 0));
                assert!((half.get(x, y, 0) - mid).abs() < 1e-15);
            }
            assert_eq!(half.get(3, y, 0), 1.0);
        }

        assert!(matches!(
            backward_warp(&img, &FlowField::zeros(3, 4)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn downsample_cases() {
        let c = Image::constant(6, 4, 1, 0.7);
        let d = downsample_half(&c).unwrap();
        assert_eq!((d.height, d.width), (3, 2));
        assert!(d.data.iter().all(|v| (*v - 0.7).abs() < 1e-15));

        let two = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(downsample_half(&two).unwrap().data, vec![0.5]);

        let checker = Image::gray_from_fn(4, 4, |x, y| ((x + y) % 2) as f64);
        let d = downsample_half(&checker).unwrap();
        assert_eq!(d.data, vec![0.5; 4]);

        let odd = Image::constant(5, 3, 1, 0.25);
        let d = downsample_half(&odd).unwrap();
        assert_eq!((d.height, d.width), (3, 2));

        assert!(downsample_half(&Image::constant(1, 1, 1, 0.0)).is_err());
    }

    #[test]
    fn upsample_cases() {
        let up = upsample_flow(&FlowField::constant(3, 3, 2.0, 0.0), 6, 6).unwrap();
        assert!(up.u.iter().all(|u| *u == 4.0) && up.v.iter().all(|v| *v == 0.0));

        let z = upsample_flow(&FlowField::zeros(2, 3), 7, 9).unwrap();
        assert_eq!(z.max_abs(), 0.0);

        // Pixel-centre mapping: destination columns sample source x = 0, .25, .75, 1.
        let f = FlowField::new(2, 2, vec![0.0, 2.0, 0.0, 2.0], vec![0.0; 4]).unwrap();
        let up = upsample_flow(&f, 2, 4).unwrap();
        for y in 0..2 {
            let row: Vec<f64> = (0..4).map(|x| up.at(x, y).0).collect();
            assert_eq!(row, vec![0.0, 1.0, 3.0, 4.0]);
        }

        assert!(upsample_flow(&f, 1, 4).is_err());
    }

    #[test]
    fn nearest_mask_resize_keeps_labels() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let r = resize_mask_nearest(&m, 8, 8);
        assert_eq!(r.count(), 32);
        assert!(r.get(3, 0) && !r.get(4, 0));
    }
}
