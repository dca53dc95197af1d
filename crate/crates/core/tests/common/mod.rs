//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use mopflow::energy::{energy_gradient, EnergyConfig};
use mopflow::imaging::{BinaryMask, FlowField, Image};
use mopflow::segnet::{cross_entropy, forward, loss_and_grad, Mode, NetParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth band-limited test texture in roughly [0.05, 0.95].
pub fn smooth_pattern(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (0.31 * x + 0.17 * y).sin() + 0.15 * (0.23 * y - 0.11 * x).cos() + 0.1 * (0.9 * x).sin() * (0.7 * y).cos()
}

/// Mean endpoint error over pixels at least `border` away from every edge.
pub fn interior_epe(flow: &FlowField, u: f64, v: f64, border: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in border..flow.height - border {
        for x in border..flow.width - border {
            let (a, b) = flow.at(x, y);
            sum += ((a - u).powi(2) + (b - v).powi(2)).sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

// ---------------------------------------------------------------------------
// Flow energy reference

fn psi(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

fn px(img: &[f64], w: usize, x: usize, y: usize) -> f64 {
    img[y * w + x]
}

/// Central differences inside, one-sided differences on the border.
fn reference_gradients(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gx[y * w + x] = if x == 0 {
                px(img, w, 1, y) - px(img, w, 0, y)
            } else if x == w - 1 {
                px(img, w, w - 1, y) - px(img, w, w - 2, y)
            } else {
                (px(img, w, x + 1, y) - px(img, w, x - 1, y)) / 2.0
            };
            gy[y * w + x] = if y == 0 {
                px(img, w, x, 1) - px(img, w, x, 0)
            } else if y == h - 1 {
                px(img, w, x, h - 1) - px(img, w, x, h - 2)
            } else {
                (px(img, w, x, y + 1) - px(img, w, x, y - 1)) / 2.0
            };
        }
    }
    (gx, gy)
}

/// Bilinear lookup with the position clamped to the grid.
fn reference_sample(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = px(img, w, x0, y0) * (1.0 - fx) + px(img, w, x1, y0) * fx;
    let bottom = px(img, w, x0, y1) * (1.0 - fx) + px(img, w, x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Every penalised argument with its weight: three data residuals per
/// visible pixel, then the forward differences of `u` and `v`.
pub fn reference_terms(a: &Image, b: &Image, flow: &FlowField, cfg: &EnergyConfig, occl: Option<&BinaryMask>) -> Vec<(f64, f64)> {
    let (h, w) = (a.height, a.width);
    let (ax, ay) = reference_gradients(&a.data, h, w);
    let (bx, by) = reference_gradients(&b.data, h, w);
    let mut terms = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if occl.is_some_and(|m| m.get(x, y)) {
                continue;
            }
            let (u, v) = flow.at(x, y);
            let (sx, sy) = (x as f64 + u, y as f64 + v);
            let i = y * w + x;
            terms.push((cfg.lambda, a.data[i] - reference_sample(&b.data, h, w, sx, sy)));
            terms.push((cfg.lambda, ax[i] - reference_sample(&bx, h, w, sx, sy)));
            terms.push((cfg.lambda, ay[i] - reference_sample(&by, h, w, sx, sy)));
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(x, y);
            if x + 1 < w {
                let (u2, v2) = flow.at(x + 1, y);
                terms.push((1.0, u2 - u));
                terms.push((1.0, v2 - v));
            }
            if y + 1 < h {
                let (u2, v2) = flow.at(x, y + 1);
                terms.push((1.0, u2 - u));
                terms.push((1.0, v2 - v));
            }
        }
    }
    terms
}

/// Brute-force `lambda * data + smooth`, enumerating every penalised term.
pub fn reference_energy(a: &Image, b: &Image, flow: &FlowField, cfg: &EnergyConfig, occl: Option<&BinaryMask>) -> f64 {
    reference_terms(a, b, flow, cfg, occl).iter().map(|(wt, r)| wt * psi(*r, cfg.epsilon)).sum()
}

/// Fourth-order central difference `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`.
pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

pub fn random_energy_instance(rng: &mut ChaCha8Rng, max_side: usize) -> (Image, Image, FlowField) {
    let h = rng.gen_range(4..=max_side);
    let w = rng.gen_range(4..=max_side);
    let a = Image::gray_from_fn(h, w, |_, _| rng.gen::<f64>());
    let b = Image::gray_from_fn(h, w, |_, _| rng.gen::<f64>());
    let flow = FlowField::from_fn(h, w, |_, _| (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)));
    (a, b, flow)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Components whose difference stencil crosses a sampling-cell edge.
    pub skipped: usize,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Relative error with a denominator floor for gradients that vanish.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Analytic flow gradient against central differences of the reference
/// energy. A component is skipped when its stencil crosses an integer
/// sample coordinate, where bilinear interpolation has a kink.
pub fn energy_gradient_check(a: &Image, b: &Image, flow: &FlowField, cfg: &EnergyConfig, step: f64) -> GradCheck {
    let analytic = energy_gradient(a, b, flow, cfg, None).unwrap();
    let (h, w) = (flow.height, flow.width);
    let mut out = GradCheck::default();
    for i in 0..h * w {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        for axis in 0..2 {
            let (base, pos) = if axis == 0 { (flow.u[i], x + flow.u[i]) } else { (flow.v[i], y + flow.v[i]) };
            if (pos - 2.0 * step).floor() != (pos + 2.0 * step).floor() {
                out.skipped += 1;
                continue;
            }
            let perturbed = |d: f64| {
                let mut p = flow.clone();
                if axis == 0 {
                    p.u[i] = base + d;
                } else {
                    p.v[i] = base + d;
                }
                p
            };
            // Summing per-term changes keeps independent terms from adding
            // roundoff to the difference.
            let base_terms = reference_terms(a, b, flow, cfg, None);
            let delta = |d: f64| {
                reference_terms(a, b, &perturbed(d), cfg, None)
                    .iter()
                    .zip(&base_terms)
                    .map(|((wt, r), (_, r0))| wt * (psi(*r, cfg.epsilon) - psi(*r0, cfg.epsilon)))
                    .sum::<f64>()
            };
            let numeric = central_difference(delta, step);
            let exact = if axis == 0 { analytic.u[i] } else { analytic.v[i] };
            out.max_rel_err = out.max_rel_err.max(rel_err(exact, numeric, 1e-6));
            out.checked += 1;
        }
    }
    out
}

/// Gradient check over `count` random instances of side at most `max_side`.
pub fn energy_gradient_suite(seed: u64, count: usize, max_side: usize, cfg: &EnergyConfig, step: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::default();
    for _ in 0..count {
        let (a, b, flow) = random_energy_instance(&mut rng, max_side);
        total.merge(energy_gradient_check(&a, &b, &flow, cfg, step));
    }
    total
}

// ---------------------------------------------------------------------------
// Network gradient check

/// Every trainable parameter against central differences of the training
/// loss. Where the `±h`/`±2h` stencil changes a ReLU sign or a pooling argmax,
/// the step is shrunk until it stays inside one smooth piece of the loss.
/// Only every `stride`-th component of each tensor is visited.
pub fn network_gradient_check(seed: u64, step: f64, stride: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::init(seed);
    let x = Tensor::from_vec(2, 8, 8, (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
    let (_, grads) = loss_and_grad(&params, &x, &target).unwrap();
    let grads: Vec<Vec<f64>> = grads.trainable().into_iter().map(|(_, g)| g.to_vec()).collect();
    let pattern = forward(&params, &x, Mode::Train).unwrap().1.activation_pattern();

    let mut out = GradCheck::default();
    for (ti, g) in grads.iter().enumerate() {
        for (k, &exact) in g.iter().enumerate().step_by(stride) {
            let original = params.trainable()[ti].1[k];
            let mut eval = |d: f64| {
                params.trainable_mut()[ti][k] = original + d;
                let (probs, cache) = forward(&params, &x, Mode::Train).unwrap();
                (cross_entropy(&probs, &target).unwrap(), cache.activation_pattern() == pattern)
            };
            let mut h = step;
            let numeric = loop {
                let vals: Vec<(f64, bool)> = [h, -h, 2.0 * h, -2.0 * h].into_iter().map(&mut eval).collect();
                if vals.iter().all(|(_, same)| *same) {
                    break Some((8.0 * (vals[0].0 - vals[1].0) - (vals[2].0 - vals[3].0)) / (12.0 * h));
                }
                if h < 1e-7 {
                    break None;
                }
                h /= 10.0;
            };
            params.trainable_mut()[ti][k] = original;
            match numeric {
                Some(n) => {
                    out.max_rel_err = out.max_rel_err.max(rel_err(exact, n, 1e-6));
                    out.checked += 1;
                }
                None => out.skipped += 1,
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Masks

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// IoU by explicit bit counting.
pub fn brute_force_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0u32;
    let mut union = 0u32;
    for y in 0..a.height {
        for x in 0..a.width {
            if a.get(x, y) && b.get(x, y) {
                inter += 1;
            }
            if a.get(x, y) || b.get(x, y) {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `side × side` square with top-left corner `(left, top)`.
pub fn square(h: usize, w: usize, left: usize, top: usize, side: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| x >= left && x < left + side && y >= top && y < top + side)
}
