//! Moving-object proposals from a flow field.
//!
//! Flow magnitude is thresholded (Otsu or a fixed value), cleaned with a
//! morphological opening followed by a closing, and split into 8-connected
//! components. Each surviving component is a proposal.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, FlowField, Grid, Image};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Otsu,
    /// Foreground iff magnitude exceeds this many pixels.
    Fixed(f64),
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Otsu => f.write_str("otsu"),
            ThresholdMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(ThresholdMode::Otsu);
        }
        let value = s
            .strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::Config(format!("threshold mode must be `otsu` or `fixed:<px>`, got `{s}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fixed threshold `{value}`")))?;
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::Config(format!("fixed threshold must be >= 0, got {value}")));
        }
        Ok(ThresholdMode::Fixed(value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MopConfig {
    pub threshold_mode: ThresholdMode,
    pub morph_radius: usize,
    pub min_area: usize,
}

impl Default for MopConfig {
    fn default() -> Self {
        Self { threshold_mode: ThresholdMode::Otsu, morph_radius: 2, min_area: 64 }
    }
}

impl MopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_area < 1 {
            return Err(Error::InvalidArgument("mop.min_area must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mask: BinaryMask,
    pub area: usize,
    pub bbox: BoundingBox,
    pub mean_motion: (f64, f64),
}

/// Per-pixel flow magnitude in pixels.
pub fn flow_magnitude(flow: &FlowField) -> Grid {
    let data = flow.u.iter().zip(&flow.v).map(|(u, v)| u.hypot(*v)).collect();
    Grid { height: flow.height, width: flow.width, data }
}

/// Histogram bin of `value` over `[lo, hi]`, with `hi` landing in the last bin.
#[inline]
fn bin_of(value: f64, lo: f64, hi: f64) -> usize {
    let t = (value - lo) / (hi - lo);
    ((t * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Otsu split over a 256-bin histogram spanning the observed range.
///
/// Returns the last background bin and the matching magnitude threshold, or
/// `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Option<(usize, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if values.is_empty() || hi <= lo {
        return None;
    }
    let mut hist = [0u64; HISTOGRAM_BINS];
    for v in values {
        hist[bin_of(*v, lo, hi)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (k, count) in hist.iter().enumerate().take(HISTOGRAM_BINS - 1) {
        w0 += *count as f64;
        sum0 += k as f64 * *count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mean0 = sum0 / w0;
        let mean1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mean0 - mean1) * (mean0 - mean1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((k, between));
        }
    }
    best.map(|(k, _)| (k, lo + (k + 1) as f64 * (hi - lo) / HISTOGRAM_BINS as f64))
}

/// Foreground iff the magnitude lies above the threshold.
pub fn foreground_threshold(mag: &Grid, cfg: &MopConfig) -> BinaryMask {
    match cfg.threshold_mode {
        ThresholdMode::Fixed(t) => {
            BinaryMask { height: mag.height, width: mag.width, bits: mag.data.iter().map(|m| *m > t).collect() }
        }
        ThresholdMode::Otsu => match otsu_threshold(&mag.data) {
            None => BinaryMask::new(mag.height, mag.width),
            Some((k, _)) => {
                let lo = mag.data.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = mag.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                BinaryMask {
                    height: mag.height,
                    width: mag.width,
                    bits: mag.data.iter().map(|m| bin_of(*m, lo, hi) > k).collect(),
                }
            }
        },
    }
}

/// Offsets of the discrete disc `dx^2 + dy^2 <= r^2`.
pub fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn neighbours<'a>(mask: &'a BinaryMask, x: usize, y: usize, offsets: &'a [(isize, isize)]) -> impl Iterator<Item = bool> + 'a {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let (x, y) = (x as isize, y as isize);
    offsets.iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| mask.get(nx as usize, ny as usize))
    })
}

/// Erosion with the disc; neighbours outside the grid are ignored.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let offsets = disc_offsets(radius);
    BinaryMask::from_fn(mask.height, mask.width, |x, y| {
        mask.get(x, y) && neighbours(mask, x, y, &offsets).all(|b| b)
    })
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let offsets = disc_offsets(radius);
    BinaryMask::from_fn(mask.height, mask.width, |x, y| neighbours(mask, x, y, &offsets).any(|b| b))
}

/// Opening then closing with a disc of `cfg.morph_radius`.
pub fn refine_mask(mask: &BinaryMask, cfg: &MopConfig) -> BinaryMask {
    let r = cfg.morph_radius;
    if r == 0 {
        return mask.clone();
    }
    let opened = dilate(&erode(mask, r), r);
    erode(&dilate(&opened, r), r)
}

/// 8-connected components in first-seen (row-major) order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

/// Components of at least `min_area` pixels, largest first.
pub fn extract_proposals(mask: &BinaryMask, flow: &FlowField, cfg: &MopConfig) -> Result<Vec<Proposal>> {
    if !flow.same_shape(mask.height, mask.width) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs flow {}x{}",
            mask.height, mask.width, flow.height, flow.width
        )));
    }
    let w = mask.width;
    let mut proposals: Vec<Proposal> = connected_components(mask)
        .into_iter()
        .filter(|pixels| pixels.len() >= cfg.min_area)
        .map(|pixels| {
            let mut m = BinaryMask::new(mask.height, mask.width);
            let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
            let (mut su, mut sv) = (0.0, 0.0);
            for &i in &pixels {
                m.bits[i] = true;
                let (x, y) = (i % w, i / w);
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
                su += flow.u[i];
                sv += flow.v[i];
            }
            let area = pixels.len();
            Proposal {
                mask: m,
                area,
                bbox: BoundingBox { top, left, height: bottom - top + 1, width: right - left + 1 },
                mean_motion: (su / area as f64, sv / area as f64),
            }
        })
        .collect();
    proposals.sort_by_key(|p| std::cmp::Reverse(p.area));
    Ok(proposals)
}

/// Union of proposal masks on a `height × width` grid.
pub fn proposals_union(proposals: &[Proposal], height: usize, width: usize) -> BinaryMask {
    let mut out = BinaryMask::new(height, width);
    for p in proposals {
        for (o, b) in out.bits.iter_mut().zip(&p.mask.bits) {
            *o |= *b;
        }
    }
    out
}

/// Full proposal pipeline: magnitude, threshold, morphology, components.
/// Returns the final foreground mask (union of proposals) and the proposals.
pub fn segment_flow(flow: &FlowField, cfg: &MopConfig) -> Result<(BinaryMask, Vec<Proposal>)> {
    cfg.validate()?;
    let mask = refine_mask(&foreground_threshold(&flow_magnitude(flow), cfg), cfg);
    let proposals = extract_proposals(&mask, flow, cfg)?;
    Ok((proposals_union(&proposals, flow.height, flow.width), proposals))
}

/// Colour-wheel rendering: hue follows the flow direction, saturation the
/// magnitude relative to `max_mag` (default: largest observed). Zero flow is
/// white.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> Image {
    let scale = max_mag
        .filter(|m| *m > 0.0)
        .unwrap_or_else(|| flow_magnitude(flow).data.into_iter().fold(0.0, f64::max));
    let mut data = Vec::with_capacity(flow.u.len() * 3);
    for (u, v) in flow.u.iter().zip(&flow.v) {
        let mag = u.hypot(*v);
        let saturation = if scale > 0.0 { (mag / scale).min(1.0) } else { 0.0 };
        let hue = v.atan2(*u).rem_euclid(2.0 * PI) / (2.0 * PI) * 6.0;
        let rgb = hsv_to_rgb(hue, saturation, 1.0);
        data.extend_from_slice(&rgb);
    }
    Image { height: flow.height, width: flow.width, channels: 3, data }
}

/// `hue` in sextants `[0, 6)`.
fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let c = value * saturation;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnitude_examples() {
        assert!(flow_magnitude(&FlowField::zeros(3, 3)).data.iter().all(|m| *m == 0.0));
        assert!(flow_magnitude(&FlowField::constant(2, 4, 3.0, 4.0)).data.iter().all(|m| *m == 5.0));
    }

    #[test]
    fn threshold_examples() {
        let cfg = MopConfig::default();
        let constant = Grid::from_vec(2, 2, vec![3.0; 4]).unwrap();
        assert!(foreground_threshold(&constant, &cfg).is_empty());

        let bimodal = Grid::from_fn(4, 4, |x, _| if x < 2 { 0.0 } else { 10.0 });
        let fg = foreground_threshold(&bimodal, &cfg);
        assert_eq!(fg, BinaryMask::from_fn(4, 4, |x, _| x >= 2));

        let fixed = MopConfig { threshold_mode: ThresholdMode::Fixed(2.5), ..cfg };
        let g = Grid::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(foreground_threshold(&g, &fixed).bits, vec![false, false, true, true]);
    }

    #[test]
    fn threshold_mode_parsing() {
        assert_eq!("otsu".parse::<ThresholdMode>().unwrap(), ThresholdMode::Otsu);
        assert_eq!("fixed:2.5".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(2.5));
        assert_eq!("fixed(1)".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(1.0));
        assert!("median".parse::<ThresholdMode>().is_err());
        let m = ThresholdMode::Fixed(0.125);
        assert_eq!(m.to_string().parse::<ThresholdMode>().unwrap(), m);
    }

    #[test]
    fn morphology_examples() {
        let cfg = MopConfig::default();
        let mut dot = BinaryMask::new(7, 7);
        dot.set(3, 3, true);
        assert_eq!(refine_mask(&dot, &MopConfig { morph_radius: 0, ..cfg }), dot);
        assert!(refine_mask(&dot, &cfg).is_empty());

        let full = BinaryMask::filled(20, 20, true);
        assert_eq!(refine_mask(&full, &cfg), full);
    }

    #[test]
    fn proposal_examples() {
        let flow = FlowField::constant(16, 16, 1.0, -2.0);
        assert!(extract_proposals(&BinaryMask::new(16, 16), &flow, &MopConfig::default()).unwrap().is_empty());

        let mask = BinaryMask::from_fn(16, 16, |x, y| (x < 5 && y < 5) || ((10..13).contains(&x) && (10..13).contains(&y)));
        let cfg = MopConfig { min_area: 4, ..Default::default() };
        let props = extract_proposals(&mask, &flow, &cfg).unwrap();
        assert_eq!(props.iter().map(|p| p.area).collect::<Vec<_>>(), vec![25, 9]);
        assert_eq!(props[1].bbox, BoundingBox { top: 10, left: 10, height: 3, width: 3 });
        assert_eq!(props[0].mean_motion, (1.0, -2.0));

        let cfg = MopConfig { min_area: 10, ..Default::default() };
        assert_eq!(extract_proposals(&mask, &flow, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn color_wheel() {
        let white = flow_to_color(&FlowField::zeros(2, 2), None);
        assert!(white.data.iter().all(|c| *c == 1.0));

        let c = flow_to_color(&FlowField::constant(2, 3, 1.5, -0.5), None);
        assert!(c.data.chunks(3).all(|p| p == &c.data[..3]));

        let right = flow_to_color(&FlowField::constant(1, 1, 2.0, 0.0), Some(2.0));
        let left = flow_to_color(&FlowField::constant(1, 1, -2.0, 0.0), Some(2.0));
        assert_eq!(right.data, vec![1.0, 0.0, 0.0]);
        assert_eq!(left.data, vec![0.0, 1.0, 1.0]);
    }
}
