//! Quick synthetic checks runnable from the command line.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{energy_gradient, total_energy, EnergyConfig};
use crate::error::Result;
use crate::imaging::{FlowField, Image};
use crate::segnet::{cross_entropy, forward, loss_and_grad, Mode, NetParams, Tensor};
use crate::solver::{solve_pyramid, SolverConfig};
use crate::synthetic::shifted_pair;

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    /// Interior EPE for a 1 px shift, single level.
    pub shift_epe: f64,
    /// Interior EPE for a 6 px shift with the configured pyramid.
    pub pyramid_epe: f64,
    /// Same shift, single level.
    pub single_level_epe: f64,
    pub energy_grad_max_rel: f64,
    pub energy_grad_checked: usize,
    pub network_grad_max_rel: f64,
    pub network_grad_checked: usize,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.shift_epe < 0.5
            && self.pyramid_epe < 1.0
            && self.single_level_epe > self.pyramid_epe
            && self.energy_grad_max_rel < 1e-4
            && self.network_grad_max_rel < 1e-3
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shift 1px EPE         {:.6}", self.shift_epe)?;
        writeln!(f, "shift 6px EPE pyramid {:.6}", self.pyramid_epe)?;
        writeln!(f, "shift 6px EPE single  {:.6}", self.single_level_epe)?;
        writeln!(f, "energy grad max rel   {:.3e} ({} components)", self.energy_grad_max_rel, self.energy_grad_checked)?;
        write!(f, "network grad max rel  {:.3e} ({} parameters)", self.network_grad_max_rel, self.network_grad_checked)
    }
}

fn interior_epe(flow: &FlowField, u: f64, v: f64, border: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in border..flow.height - border {
        for x in border..flow.width - border {
            let (fu, fv) = flow.at(x, y);
            sum += (fu - u).hypot(fv - v);
            n += 1;
        }
    }
    sum / n as f64
}

fn five_point(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Energy gradient against finite differences of the total energy.
/// Components whose stencil crosses a bilinear kink are skipped.
fn energy_check(seed: u64, cfg: &EnergyConfig) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..3 {
        let (rows, cols) = (rng.gen_range(4..9), rng.gen_range(4..9));
        let a = Image::new(rows, cols, 1, (0..rows * cols).map(|_| rng.gen()).collect())?;
        let b = Image::new(rows, cols, 1, (0..rows * cols).map(|_| rng.gen()).collect())?;
        let flow = FlowField::from_fn(rows, cols, |_, _| (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)));
        let grad = energy_gradient(&a, &b, &flow, cfg, None)?;
        for comp in 0..2 {
            for i in 0..rows * cols {
                let (x, y) = (i % cols, i / cols);
                let base = if comp == 0 { flow.u[i] + x as f64 } else { flow.v[i] + y as f64 };
                if (base - 2.0 * h).floor() != (base + 2.0 * h).floor() {
                    continue;
                }
                let numeric = five_point(
                    |d| {
                        let mut f = flow.clone();
                        if comp == 0 { f.u[i] += d } else { f.v[i] += d }
                        total_energy(&a, &b, &f, cfg, None).map(|e| e.total).unwrap_or(f64::NAN)
                    },
                    h,
                );
                let exact = if comp == 0 { grad.u[i] } else { grad.v[i] };
                worst = worst.max(rel_err(exact, numeric, 1e-3));
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

/// Backprop against finite differences on every `stride`-th parameter.
fn network_check(seed: u64, stride: usize) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::init(seed);
    let x = Tensor::from_vec(2, 8, 8, (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let target = crate::imaging::BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
    let (_, grads) = loss_and_grad(&params, &x, &target)?;
    let grads: Vec<Vec<f64>> = grads.trainable().into_iter().map(|(_, g)| g.to_vec()).collect();
    let pattern = forward(&params, &x, Mode::Train)?.1.activation_pattern();

    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut flat = 0usize;
    for (ti, g) in grads.iter().enumerate() {
        for (k, &exact) in g.iter().enumerate() {
            flat += 1;
            if !flat.is_multiple_of(stride) {
                continue;
            }
            let original = params.trainable()[ti].1[k];
            let mut h = 1e-3;
            let numeric = loop {
                let mut stable = true;
                let mut loss = |d: f64| -> Result<f64> {
                    params.trainable_mut()[ti][k] = original + d;
                    let (probs, cache) = forward(&params, &x, Mode::Train)?;
                    stable &= cache.activation_pattern() == pattern;
                    cross_entropy(&probs, &target)
                };
                let v = [loss(h)?, loss(-h)?, loss(2.0 * h)?, loss(-2.0 * h)?];
                if stable {
                    break Some((8.0 * (v[0] - v[1]) - (v[2] - v[3])) / (12.0 * h));
                }
                if h < 1e-7 {
                    break None;
                }
                h /= 10.0;
            };
            params.trainable_mut()[ti][k] = original;
            if let Some(n) = numeric {
                worst = worst.max(rel_err(exact, n, 1e-6));
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

/// Runs every check. `seed` drives the random instances.
pub fn run(cfg: &EnergyConfig, scfg: &SolverConfig, seed: u64) -> Result<SelftestReport> {
    let single = SolverConfig { levels: 1, ..*scfg };
    let (a, b) = shifted_pair(64, 64, 1.0, 0.0);
    let shift_epe = interior_epe(&solve_pyramid(&a, &b, cfg, &single)?, 1.0, 0.0, 8);
    let (a, b) = shifted_pair(64, 64, 6.0, 0.0);
    let pyramid_epe = interior_epe(&solve_pyramid(&a, &b, cfg, scfg)?, 6.0, 0.0, 8);
    let single_level_epe = interior_epe(&solve_pyramid(&a, &b, cfg, &single)?, 6.0, 0.0, 8);
    let (energy_grad_max_rel, energy_grad_checked) = energy_check(seed, cfg)?;
    let (network_grad_max_rel, network_grad_checked) = network_check(seed, 97)?;
    Ok(SelftestReport {
        shift_epe,
        pyramid_epe,
        single_level_epe,
        energy_grad_max_rel,
        energy_grad_checked,
        network_grad_max_rel,
        network_grad_checked,
    })
}
