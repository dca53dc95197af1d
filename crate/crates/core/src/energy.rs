//! Charbonnier variational energy for a flow field between two gray frames.
//!
//! The data term compares frame 1 with frame 2 sampled along the flow, both in
//! brightness and in spatial gradient (gradient constancy). The smoothness term
//! penalises the four forward differences of the flow components. Both use the
//! same robust penalty `psi(x) = sqrt(x^2 + eps^2)`.

use crate::error::{Error, Result};
use crate::imaging::{grid_gradients, sample_with_grad, BinaryMask, FlowField, Image};

/// Default Charbonnier constant.
pub const DEFAULT_EPSILON: f64 = 0.001;

/// Default data-term weight for intensities in `[0, 1]`.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub epsilon: f64,
    /// Weight of the data term.
    pub lambda: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, lambda: DEFAULT_LAMBDA }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Charbonnier penalty.
#[inline]
pub fn charbonnier(x: f64, epsilon: f64) -> f64 {
    (x * x + epsilon * epsilon).sqrt()
}

#[inline]
fn charbonnier_prime(x: f64, epsilon: f64) -> f64 {
    x / charbonnier(x, epsilon)
}

/// A frame pair prepared for repeated energy evaluation: intensities and
/// spatial gradients of both frames.
#[derive(Debug, Clone)]
pub struct EnergyProblem {
    height: usize,
    width: usize,
    first: [Vec<f64>; 3],
    second: [Vec<f64>; 3],
    cfg: EnergyConfig,
}

impl EnergyProblem {
    pub fn new(first: &Image, second: &Image, cfg: EnergyConfig) -> Result<Self> {
        cfg.validate()?;
        first.require_gray()?;
        second.require_gray()?;
        if first.height != second.height || first.width != second.width {
            return Err(Error::ShapeMismatch(format!(
                "frames {}x{} and {}x{}",
                first.height, first.width, second.height, second.width
            )));
        }
        let (h, w) = (first.height, first.width);
        if h == 0 || w == 0 {
            return Err(Error::TooSmall("empty frames".into()));
        }
        let channels = |img: &Image| {
            let (gx, gy) = grid_gradients(&img.data, h, w);
            [img.data.clone(), gx.data, gy.data]
        };
        Ok(Self { height: h, width: w, first: channels(first), second: channels(second), cfg })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn config(&self) -> EnergyConfig {
        self.cfg
    }

    fn check(&self, flow: &FlowField, occl: Option<&BinaryMask>) -> Result<()> {
        if !flow.same_shape(self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "frames {}x{} vs flow {}x{}",
                self.height, self.width, flow.height, flow.width
            )));
        }
        if let Some(m) = occl {
            if m.height != self.height || m.width != self.width {
                return Err(Error::ShapeMismatch(format!(
                    "frames {}x{} vs occlusion mask {}x{}",
                    self.height, self.width, m.height, m.width
                )));
            }
        }
        Ok(())
    }

    /// Unweighted data term; occluded pixels contribute nothing.
    pub fn data_term(&self, flow: &FlowField, occl: Option<&BinaryMask>) -> Result<f64> {
        self.check(flow, occl)?;
        Ok(self.data_pass(flow, occl, None))
    }

    pub fn breakdown(&self, flow: &FlowField, occl: Option<&BinaryMask>) -> Result<EnergyBreakdown> {
        self.check(flow, occl)?;
        let data = self.data_pass(flow, occl, None);
        let smooth = smoothness_pass(flow, self.cfg.epsilon, None);
        Ok(self.combine(data, smooth))
    }

    /// Energy breakdown together with its gradient with respect to `u` and `v`.
    pub fn breakdown_and_gradient(
        &self,
        flow: &FlowField,
        occl: Option<&BinaryMask>,
    ) -> Result<(EnergyBreakdown, FlowField)> {
        self.check(flow, occl)?;
        let mut grad = FlowField::zeros(self.height, self.width);
        let data = self.data_pass(flow, occl, Some(&mut grad));
        let smooth = smoothness_pass(flow, self.cfg.epsilon, Some(&mut grad));
        Ok((self.combine(data, smooth), grad))
    }

    fn combine(&self, data: f64, smooth: f64) -> EnergyBreakdown {
        EnergyBreakdown { data, smooth, total: self.cfg.lambda * data + smooth }
    }

    fn data_pass(&self, flow: &FlowField, occl: Option<&BinaryMask>, mut grad: Option<&mut FlowField>) -> f64 {
        let (h, w) = (self.height, self.width);
        let eps = self.cfg.epsilon;
        let lambda = self.cfg.lambda;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if occl.is_some_and(|m| m.bits[i]) {
                    continue;
                }
                let px = x as f64 + flow.u[i];
                let py = y as f64 + flow.v[i];
                let mut du = 0.0;
                let mut dv = 0.0;
                for (reference, moving) in self.first.iter().zip(&self.second) {
                    let (value, sx, sy) = sample_with_grad(moving, h, w, px, py);
                    let r = reference[i] - value;
                    total += charbonnier(r, eps);
                    if grad.is_some() {
                        let d = charbonnier_prime(r, eps);
                        du -= d * sx;
                        dv -= d * sy;
                    }
                }
                if let Some(g) = grad.as_deref_mut() {
                    g.u[i] += lambda * du;
                    g.v[i] += lambda * dv;
                }
            }
        }
        total
    }
}

/// Sum of the penalised forward differences of both components. Differences
/// that would leave the grid are skipped.
fn smoothness_pass(flow: &FlowField, eps: f64, mut grad: Option<&mut FlowField>) -> f64 {
    let (h, w) = (flow.height, flow.width);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let j = i + 1;
                let du = flow.u[i] - flow.u[j];
                let dv = flow.v[i] - flow.v[j];
                total += charbonnier(du, eps) + charbonnier(dv, eps);
                if let Some(g) = grad.as_deref_mut() {
                    let pu = charbonnier_prime(du, eps);
                    let pv = charbonnier_prime(dv, eps);
                    g.u[i] += pu;
                    g.u[j] -= pu;
                    g.v[i] += pv;
                    g.v[j] -= pv;
                }
            }
            if y + 1 < h {
                let j = i + w;
                let du = flow.u[j] - flow.u[i];
                let dv = flow.v[j] - flow.v[i];
                total += charbonnier(du, eps) + charbonnier(dv, eps);
                if let Some(g) = grad.as_deref_mut() {
                    let pu = charbonnier_prime(du, eps);
                    let pv = charbonnier_prime(dv, eps);
                    g.u[j] += pu;
                    g.u[i] -= pu;
                    g.v[j] += pv;
                    g.v[i] -= pv;
                }
            }
        }
    }
    total
}

/// Number of forward differences counted by [`smoothness_term`].
pub fn forward_difference_count(height: usize, width: usize) -> usize {
    2 * height * width.saturating_sub(1) + 2 * width * height.saturating_sub(1)
}

/// Data term (without the `lambda` weight).
pub fn data_term(
    first: &Image,
    second: &Image,
    flow: &FlowField,
    cfg: &EnergyConfig,
    occl: Option<&BinaryMask>,
) -> Result<f64> {
    EnergyProblem::new(first, second, *cfg)?.data_term(flow, occl)
}

pub fn smoothness_term(flow: &FlowField, cfg: &EnergyConfig) -> Result<f64> {
    cfg.validate()?;
    if flow.height < 2 && flow.width < 2 {
        return Err(Error::TooSmall(format!(
            "smoothness needs more than one pixel, got {}x{}",
            flow.height, flow.width
        )));
    }
    Ok(smoothness_pass(flow, cfg.epsilon, None))
}

pub fn total_energy(
    first: &Image,
    second: &Image,
    flow: &FlowField,
    cfg: &EnergyConfig,
    occl: Option<&BinaryMask>,
) -> Result<EnergyBreakdown> {
    EnergyProblem::new(first, second, *cfg)?.breakdown(flow, occl)
}

/// Analytic gradient of [`total_energy`] with respect to every flow component.
pub fn energy_gradient(
    first: &Image,
    second: &Image,
    flow: &FlowField,
    cfg: &EnergyConfig,
    occl: Option<&BinaryMask>,
) -> Result<FlowField> {
    Ok(EnergyProblem::new(first, second, *cfg)?.breakdown_and_gradient(flow, occl)?.1)
}
