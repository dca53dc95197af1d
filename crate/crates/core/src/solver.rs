//! Coarse-to-fine minimisation of the flow energy.
//!
//! Each pyramid level runs Adam-style first-order updates on the flow
//! variables. A step is kept only if it does not increase the total energy;
//! a rejected step is undone and the step size halved, so the recorded energy
//! trace never increases.

use crate::energy::{EnergyBreakdown, EnergyConfig, EnergyProblem};
use crate::error::{Error, Result};
use crate::imaging::{downsample_half, sample, upsample_flow, BinaryMask, FlowField, Image};

const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub levels: usize,
    pub steps_per_level: usize,
    /// Initial Adam step, in pixels, at every level.
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub occlusion_alpha1: f64,
    pub occlusion_alpha2: f64,
    pub bidirectional: bool,
    /// Re-solve each direction once at full resolution with occluded pixels
    /// removed from the data term.
    pub occlusion_refine: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            steps_per_level: 250,
            step_size: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            occlusion_alpha1: 0.01,
            occlusion_alpha2: 0.5,
            bidirectional: true,
            occlusion_refine: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.levels < 1 {
            return bad("solver.levels must be >= 1".into());
        }
        if self.steps_per_level < 1 {
            return bad("solver.steps_per_level must be >= 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("solver.step_size must be > 0, got {}", self.step_size));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("solver.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.occlusion_alpha1 >= 0.0 && self.occlusion_alpha2 >= 0.0) {
            return bad("occlusion constants must be non-negative".into());
        }
        Ok(())
    }
}

/// Output of a frame-pair solve.
#[derive(Debug, Clone)]
pub struct FlowPairResult {
    pub forward: FlowField,
    pub backward: Option<FlowField>,
    pub occlusion_fwd: Option<BinaryMask>,
    pub occlusion_bwd: Option<BinaryMask>,
    /// Energies of the last full-resolution forward solve: the initial value
    /// followed by one entry per step.
    pub energy_trace: Vec<EnergyBreakdown>,
}

/// Runs `steps_per_level` accept-only Adam steps from `init`.
///
/// The returned trace starts with the energy of `init` and has one entry per
/// step after that.
pub fn solve_level(
    first: &Image,
    second: &Image,
    init: &FlowField,
    cfg: &EnergyConfig,
    scfg: &SolverConfig,
    occl: Option<&BinaryMask>,
) -> Result<(FlowField, Vec<EnergyBreakdown>)> {
    scfg.validate()?;
    let problem = EnergyProblem::new(first, second, *cfg)?;
    minimize(&problem, init, scfg, occl)
}

fn minimize(
    problem: &EnergyProblem,
    init: &FlowField,
    scfg: &SolverConfig,
    occl: Option<&BinaryMask>,
) -> Result<(FlowField, Vec<EnergyBreakdown>)> {
    let n = problem.height() * problem.width();
    let mut flow = init.clone();
    let (mut energy, mut grad) = problem.breakdown_and_gradient(&flow, occl)?;
    if !energy.total.is_finite() {
        return Err(Error::NonFinite { what: "energy", iteration: 0 });
    }
    let mut trace = Vec::with_capacity(scfg.steps_per_level + 1);
    trace.push(energy);

    let mut m = vec![0.0; 2 * n];
    let mut v = vec![0.0; 2 * n];
    let mut lr = scfg.step_size;
    let (b1, b2) = (scfg.adam_beta1, scfg.adam_beta2);
    let mut candidate = flow.clone();

    for t in 1..=scfg.steps_per_level {
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for k in 0..2 * n {
            let (g, current, next) = if k < n {
                (grad.u[k], flow.u[k], &mut candidate.u[k])
            } else {
                (grad.v[k - n], flow.v[k - n], &mut candidate.v[k - n])
            };
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            *next = current - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPSILON);
        }
        let (next, next_grad) = problem.breakdown_and_gradient(&candidate, occl)?;
        if !next.total.is_finite() {
            return Err(Error::NonFinite { what: "energy", iteration: t });
        }
        if next.total <= energy.total {
            std::mem::swap(&mut flow, &mut candidate);
            energy = next;
            grad = next_grad;
        } else {
            lr *= 0.5;
        }
        trace.push(energy);
    }
    Ok((flow, trace))
}

fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    let mut pyramid = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample_half(pyramid.last().expect("nonempty"))?;
        pyramid.push(next);
    }
    Ok(pyramid)
}

/// Coarse-to-fine solve from zero flow, returning the finest flow and the
/// finest-level trace.
pub fn solve_pyramid_traced(
    first: &Image,
    second: &Image,
    cfg: &EnergyConfig,
    scfg: &SolverConfig,
) -> Result<(FlowField, Vec<EnergyBreakdown>)> {
    scfg.validate()?;
    cfg.validate()?;
    first.require_gray()?;
    second.require_gray()?;
    if first.height != second.height || first.width != second.width {
        return Err(Error::ShapeMismatch(format!(
            "frames {}x{} and {}x{}",
            first.height, first.width, second.height, second.width
        )));
    }
    let needed = 1usize << (scfg.levels - 1).min(63);
    if first.height.min(first.width) < needed {
        return Err(Error::TooSmall(format!(
            "{}x{} frames cannot hold {} pyramid levels (need min dimension {needed})",
            first.height, first.width, scfg.levels
        )));
    }
    let p1 = build_pyramid(first, scfg.levels)?;
    let p2 = build_pyramid(second, scfg.levels)?;

    let coarsest = p1.last().expect("nonempty");
    let mut flow = FlowField::zeros(coarsest.height, coarsest.width);
    let mut trace = Vec::new();
    for (level, (a, b)) in p1.iter().zip(&p2).enumerate().rev() {
        if flow.height != a.height || flow.width != a.width {
            flow = upsample_flow(&flow, a.height, a.width)?;
        }
        let problem = EnergyProblem::new(a, b, *cfg)?;
        let (next, level_trace) = minimize(&problem, &flow, scfg, None).map_err(|e| match e {
            Error::NonFinite { what, iteration } => Error::NonFinite {
                what,
                iteration: iteration + (scfg.levels - 1 - level) * scfg.steps_per_level,
            },
            other => other,
        })?;
        flow = next;
        trace = level_trace;
    }
    Ok((flow, trace))
}

/// Coarse-to-fine solve from zero flow.
pub fn solve_pyramid(first: &Image, second: &Image, cfg: &EnergyConfig, scfg: &SolverConfig) -> Result<FlowField> {
    solve_pyramid_traced(first, second, cfg, scfg).map(|(flow, _)| flow)
}

/// Forward-backward consistency check.
///
/// A pixel is occluded when the forward vector and the backward vector found
/// at its forward target fail to cancel:
/// `|wf + wb|^2 > alpha1 * (|wf|^2 + |wb|^2) + alpha2`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField, alpha1: f64, alpha2: f64) -> Result<BinaryMask> {
    if fwd.height != bwd.height || fwd.width != bwd.width {
        return Err(Error::ShapeMismatch(format!(
            "forward {}x{} vs backward {}x{}",
            fwd.height, fwd.width, bwd.height, bwd.width
        )));
    }
    let (h, w) = (fwd.height, fwd.width);
    Ok(BinaryMask::from_fn(h, w, |x, y| {
        let (uf, vf) = fwd.at(x, y);
        let (sx, sy) = (x as f64 + uf, y as f64 + vf);
        let ub = sample(&bwd.u, h, w, sx, sy);
        let vb = sample(&bwd.v, h, w, sx, sy);
        let (du, dv) = (uf + ub, vf + vb);
        let lhs = du * du + dv * dv;
        let rhs = alpha1 * (uf * uf + vf * vf + ub * ub + vb * vb) + alpha2;
        lhs > rhs
    }))
}

/// Solves both directions, marks inconsistent pixels, and optionally refines
/// each direction once with its occluded pixels left out of the data term.
pub fn solve_bidirectional(
    first: &Image,
    second: &Image,
    cfg: &EnergyConfig,
    scfg: &SolverConfig,
) -> Result<FlowPairResult> {
    if !scfg.bidirectional {
        return Err(Error::InvalidArgument("solve_bidirectional requires solver.bidirectional = true".into()));
    }
    let (fwd, bwd) = rayon::join(
        || solve_pyramid_traced(first, second, cfg, scfg),
        || solve_pyramid_traced(second, first, cfg, scfg),
    );
    let (fwd, fwd_trace) = fwd?;
    let (bwd, _) = bwd?;
    let occ_f = occlusion_mask(&fwd, &bwd, scfg.occlusion_alpha1, scfg.occlusion_alpha2)?;
    let occ_b = occlusion_mask(&bwd, &fwd, scfg.occlusion_alpha1, scfg.occlusion_alpha2)?;

    if !scfg.occlusion_refine {
        return Ok(FlowPairResult {
            forward: fwd,
            backward: Some(bwd),
            occlusion_fwd: Some(occ_f),
            occlusion_bwd: Some(occ_b),
            energy_trace: fwd_trace,
        });
    }
    let (refined_f, refined_b) = rayon::join(
        || solve_level(first, second, &fwd, cfg, scfg, Some(&occ_f)),
        || solve_level(second, first, &bwd, cfg, scfg, Some(&occ_b)),
    );
    let (forward, trace) = refined_f?;
    let (backward, _) = refined_b?;
    Ok(FlowPairResult {
        forward,
        backward: Some(backward),
        occlusion_fwd: Some(occ_f),
        occlusion_bwd: Some(occ_b),
        energy_trace: trace,
    })
}

/// Bidirectional solve when configured, forward-only otherwise.
pub fn solve_pair(first: &Image, second: &Image, cfg: &EnergyConfig, scfg: &SolverConfig) -> Result<FlowPairResult> {
    if scfg.bidirectional {
        return solve_bidirectional(first, second, cfg, scfg);
    }
    let (forward, energy_trace) = solve_pyramid_traced(first, second, cfg, scfg)?;
    Ok(FlowPairResult { forward, backward: None, occlusion_fwd: None, occlusion_bwd: None, energy_trace })
}
