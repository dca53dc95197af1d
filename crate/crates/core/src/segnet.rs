//! A small encoder-decoder for two-class motion segmentation.
//!
//! Three encoder stages (3×3 conv, batch norm, ReLU, 2×2 max pool) record the
//! argmax position of every pooling window. The mirrored decoder upsamples
//! by scattering values back to those positions, then applies conv, batch
//! norm and ReLU. A 1×1 convolution produces two logits per pixel, followed
//! by a softmax.
//!
//! Batch norm statistics are taken over the spatial dimensions of a single
//! sample. Everything is `f64`; checkpoints store `f32`.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{resize_flow, resize_mask_nearest, BinaryMask, FlowField};

/// Encoder channel plan; the decoder mirrors it.
pub const ENCODER_CHANNELS: [usize; 4] = [2, 16, 32, 64];
pub const CLASSES: usize = 2;
const BN_EPSILON: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ADAM_EPSILON: f64 = 1e-8;
const CHECKPOINT_MAGIC: &str = "mopflow-segnet 1";

/// `channels × height × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Two-channel `(u, v)` input from a flow field.
    pub fn from_flow(flow: &FlowField) -> Self {
        let mut data = flow.u.clone();
        data.extend_from_slice(&flow.v);
        Self { channels: 2, height: flow.height, width: flow.width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Argmax `(row, col)` of every 2×2 pooling window, in input coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub positions: Vec<(usize, usize)>,
}

/// 2×2 stride-2 max pool. Ties go to the smallest row, then the smallest
/// column.
pub fn maxpool2_with_indices(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "max pool needs even dimensions, got {}x{}",
            x.height, x.width
        )));
    }
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, oh, ow);
    let mut positions = Vec::with_capacity(x.channels * oh * ow);
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy, 2 * ox);
                let mut best_value = x.get(c, best.0, best.1);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (r, col) = (2 * oy + dy, 2 * ox + dx);
                    let value = x.get(c, r, col);
                    if value > best_value {
                        best_value = value;
                        best = (r, col);
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = best_value;
                positions.push(best);
            }
        }
    }
    let idx = PoolIndices {
        channels: x.channels,
        in_height: x.height,
        in_width: x.width,
        out_height: oh,
        out_width: ow,
        positions,
    };
    Ok((out, idx))
}

/// Scatters each value to its recorded argmax position; everything else is zero.
pub fn max_unpool2(x: &Tensor, idx: &PoolIndices, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.channels != idx.channels || x.height != idx.out_height || x.width != idx.out_width {
        return Err(Error::ShapeMismatch(format!(
            "unpool input {}x{}x{} vs indices for {}x{}x{}",
            x.channels, x.height, x.width, idx.channels, idx.out_height, idx.out_width
        )));
    }
    if out_h != idx.in_height || out_w != idx.in_width {
        return Err(Error::ShapeMismatch(format!(
            "unpool target {out_h}x{out_w} vs pooled input {}x{}",
            idx.in_height, idx.in_width
        )));
    }
    let mut out = Tensor::zeros(x.channels, out_h, out_w);
    let n = x.height * x.width;
    for c in 0..x.channels {
        for k in 0..n {
            let (r, col) = idx.positions[c * n + k];
            out.data[(c * out_h + r) * out_w + col] = x.data[c * n + k];
        }
    }
    Ok(out)
}

/// Gradient of [`max_unpool2`] with respect to its input: gathers at the indices.
fn unpool_backward(grad_out: &Tensor, idx: &PoolIndices) -> Tensor {
    let mut g = Tensor::zeros(idx.channels, idx.out_height, idx.out_width);
    let n = idx.out_height * idx.out_width;
    for c in 0..idx.channels {
        for k in 0..n {
            let (r, col) = idx.positions[c * n + k];
            g.data[c * n + k] = grad_out.data[(c * idx.in_height + r) * idx.in_width + col];
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *w = rng.gen_range(-bound..=bound);
        }
        conv
    }

    /// Length of one unrolled input patch.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unrolls the receptive fields of output row `y` into `patch`, one
    /// `[in][ky][kx]` block per output column; taps outside the input are zero.
    fn fill_row_patches(&self, x: &Tensor, y: usize, patch: &mut [f64]) {
        let (h, w, k) = (x.height, x.width, self.kernel);
        let pad = k / 2;
        let len = self.patch_len();
        patch.fill(0.0);
        for i in 0..self.in_channels {
            let input = x.plane(i);
            for ky in 0..k {
                let sy = y + ky;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                let row = &input[(sy - pad) * w..(sy - pad + 1) * w];
                for kx in 0..k {
                    let tap = (i * k + ky) * k + kx;
                    let (x0, x1) = valid_range(kx, pad, w);
                    for ox in x0..x1 {
                        patch[ox * len + tap] = row[ox + kx - pad];
                    }
                }
            }
        }
    }

    /// Same-size convolution with zero padding `kernel / 2`.
    fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.height, x.width);
        let len = self.patch_len();
        let mut out = Tensor::zeros(self.out_channels, h, w);
        let mut patch = vec![0.0; w * len];
        for y in 0..h {
            self.fill_row_patches(x, y, &mut patch);
            for o in 0..self.out_channels {
                let wrow = &self.weight[o * len..(o + 1) * len];
                let dst = &mut out.data[(o * h + y) * w..(o * h + y + 1) * w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = self.bias[o] + dot(wrow, &patch[ox * len..(ox + 1) * len]);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &Tensor, grad_out: &Tensor, grad: &mut Conv) -> Tensor {
        let (h, w, k) = (x.height, x.width, self.kernel);
        let pad = k / 2;
        let len = self.patch_len();
        let mut grad_in = Tensor::zeros(self.in_channels, h, w);
        let mut patch = vec![0.0; w * len];
        let mut grad_patch = vec![0.0; w * len];
        for o in 0..self.out_channels {
            grad.bias[o] += grad_out.plane(o).iter().sum::<f64>();
        }
        for y in 0..h {
            self.fill_row_patches(x, y, &mut patch);
            grad_patch.fill(0.0);
            for o in 0..self.out_channels {
                let wrow = &self.weight[o * len..(o + 1) * len];
                let gw = &mut grad.weight[o * len..(o + 1) * len];
                let go = &grad_out.data[(o * h + y) * w..(o * h + y + 1) * w];
                for (ox, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &patch[ox * len..(ox + 1) * len], gw);
                    axpy(g, wrow, &mut grad_patch[ox * len..(ox + 1) * len]);
                }
            }
            for i in 0..self.in_channels {
                for ky in 0..k {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let row = &mut grad_in.data[(i * h + sy - pad) * w..(i * h + sy - pad + 1) * w];
                    for kx in 0..k {
                        let tap = (i * k + ky) * k + kx;
                        let (x0, x1) = valid_range(kx, pad, w);
                        for ox in x0..x1 {
                            row[ox + kx - pad] += grad_patch[ox * len + tap];
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (d, v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// Output rows (or columns) whose kernel tap `k` lands inside the input.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = pad.saturating_sub(k);
    let end = (len + pad).saturating_sub(k).min(len);
    (start, end.max(start))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn zeros(channels: usize) -> Self {
        Self {
            gamma: vec![0.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![0.0; channels],
        }
    }
}

/// Convolution, batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub encoder: Vec<Stage>,
    pub decoder: Vec<Stage>,
    pub classifier: Conv,
}

/// `(in, out)` channels of every decoder stage, deepest first.
fn decoder_plan() -> Vec<(usize, usize)> {
    let c = ENCODER_CHANNELS;
    let stages = c.len() - 1;
    (0..stages)
        .rev()
        .map(|s| {
            let out = if s == 0 { c[1] } else { c[s] };
            (c[s + 1], out)
        })
        .collect()
}

impl NetParams {
    /// Fan-in uniform initialisation from `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = ENCODER_CHANNELS;
        let encoder = c
            .windows(2)
            .map(|p| Stage { conv: Conv::init(p[0], p[1], 3, &mut rng), bn: BatchNorm::new(p[1]) })
            .collect();
        let decoder = decoder_plan()
            .into_iter()
            .map(|(i, o)| Stage { conv: Conv::init(i, o, 3, &mut rng), bn: BatchNorm::new(o) })
            .collect();
        let classifier = Conv::init(c[1], CLASSES, 1, &mut rng);
        Self { encoder, decoder, classifier }
    }

    /// All-zero parameters with the same layout (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        let stage = |s: &Stage| Stage {
            conv: Conv::zeros(s.conv.in_channels, s.conv.out_channels, s.conv.kernel),
            bn: BatchNorm::zeros(s.bn.gamma.len()),
        };
        Self {
            encoder: self.encoder.iter().map(stage).collect(),
            decoder: self.decoder.iter().map(stage).collect(),
            classifier: Conv::zeros(self.classifier.in_channels, self.classifier.out_channels, 1),
        }
    }

    fn stage_names(&self) -> impl Iterator<Item = (String, &Stage)> {
        let enc = self.encoder.iter().enumerate().map(|(i, s)| (format!("enc{}", i + 1), s));
        let n = self.decoder.len();
        let dec = self.decoder.iter().enumerate().map(move |(i, s)| (format!("dec{}", n - i), s));
        enc.chain(dec)
    }

    /// Trainable tensors in a fixed order: per stage conv weight, conv bias,
    /// bn gamma, bn beta; then the classifier weight and bias.
    pub fn trainable(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, s) in self.stage_names() {
            out.push((format!("{name}.conv.weight"), s.conv.weight.as_slice()));
            out.push((format!("{name}.conv.bias"), s.conv.bias.as_slice()));
            out.push((format!("{name}.bn.gamma"), s.bn.gamma.as_slice()));
            out.push((format!("{name}.bn.beta"), s.bn.beta.as_slice()));
        }
        out.push(("classifier.weight".into(), self.classifier.weight.as_slice()));
        out.push(("classifier.bias".into(), self.classifier.bias.as_slice()));
        out
    }

    /// Mutable view of [`NetParams::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            out.push(&mut s.bn.gamma);
            out.push(&mut s.bn.beta);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every stored tensor with its shape, including running statistics.
    fn checkpoint_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, s) in self.stage_names() {
            let c = &s.conv;
            out.push((format!("{name}.conv.weight"), vec![c.out_channels, c.in_channels, c.kernel, c.kernel], c.weight.as_slice()));
            out.push((format!("{name}.conv.bias"), vec![c.out_channels], c.bias.as_slice()));
            let n = s.bn.gamma.len();
            out.push((format!("{name}.bn.gamma"), vec![n], s.bn.gamma.as_slice()));
            out.push((format!("{name}.bn.beta"), vec![n], s.bn.beta.as_slice()));
            out.push((format!("{name}.bn.running_mean"), vec![n], s.bn.running_mean.as_slice()));
            out.push((format!("{name}.bn.running_var"), vec![n], s.bn.running_var.as_slice()));
        }
        let c = &self.classifier;
        out.push(("classifier.weight".into(), vec![c.out_channels, c.in_channels, 1, 1], c.weight.as_slice()));
        out.push(("classifier.bias".into(), vec![c.out_channels], c.bias.as_slice()));
        out
    }

    fn checkpoint_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for s in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            out.push(&mut s.bn.gamma);
            out.push(&mut s.bn.beta);
            out.push(&mut s.bn.running_mean);
            out.push(&mut s.bn.running_var);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Plain-text header listing every tensor and its shape, then the values
    /// as little-endian `f32` in header order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let tensors = self.checkpoint_tensors();
        let mut header = String::new();
        writeln!(header, "{CHECKPOINT_MAGIC}").expect("string write");
        writeln!(header, "tensors {}", tensors.len()).expect("string write");
        for (name, shape, _) in &tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(header, "{name} {}", dims.join(" ")).expect("string write");
        }
        writeln!(header, "end").expect("string write");
        w.write_all(header.as_bytes())?;
        for (_, _, data) in &tensors {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in *data {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut params = NetParams::init(0);
        let expected: Vec<(String, Vec<usize>)> =
            params.checkpoint_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();

        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing `mopflow-segnet 1` header".into()));
        }
        let count_line = next_line()?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor count line `{count_line}`")))?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, header lists {count}", expected.len())));
        }
        for (name, shape) in &expected {
            let line = next_line()?;
            let mut parts = line.split_whitespace();
            let got_name = parts.next().unwrap_or_default();
            let got_shape: Vec<usize> = parts.map(|p| p.parse().unwrap_or(usize::MAX)).collect();
            if got_name != name || &got_shape != shape {
                return Err(Error::Checkpoint(format!("expected `{name} {shape:?}`, found `{line}`")));
            }
        }
        if next_line()? != "end" {
            return Err(Error::Checkpoint("header not terminated by `end`".into()));
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let payload = &bytes[pos..];
        if payload.len() != total * 4 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                total * 4
            )));
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for t in params.checkpoint_tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        crate::dataset::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses the statistics of the current sample.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor,
    normalized: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    activated: Tensor,
}

/// Intermediates of a forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: Vec<StageCache>,
    pools: Vec<PoolIndices>,
    decoder: Vec<StageCache>,
    logits: Tensor,
}

impl ForwardCache {
    pub fn pool_indices(&self) -> &[PoolIndices] {
        &self.pools
    }

    /// Signs of every ReLU input plus every pooling argmax. Two parameter
    /// settings with the same pattern lie in the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<(usize, usize)>) {
        let signs = self
            .encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|s| s.activated.data.iter().map(|v| *v > 0.0))
            .collect();
        let argmax = self.pools.iter().flat_map(|p| p.positions.iter().copied()).collect();
        (signs, argmax)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

fn stage_forward(stage: &Stage, x: &Tensor, mode: Mode) -> StageCache {
    let z = stage.conv.forward(x);
    let n = (z.height * z.width) as f64;
    let channels = z.channels;
    let mut normalized = Tensor::zeros(channels, z.height, z.width);
    let mut activated = Tensor::zeros(channels, z.height, z.width);
    let mut inv_std = vec![0.0; channels];
    let mut batch_mean = vec![0.0; channels];
    let mut batch_var = vec![0.0; channels];
    for c in 0..channels {
        let plane = z.plane(c);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = plane.iter().sum::<f64>() / n;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var)
            }
            Mode::Eval => (stage.bn.running_mean[c], stage.bn.running_var[c]),
        };
        batch_mean[c] = mean;
        batch_var[c] = var;
        let is = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[c] = is;
        let (g, b) = (stage.bn.gamma[c], stage.bn.beta[c]);
        for ((xn, a), v) in normalized.plane_mut(c).iter_mut().zip(activated.plane_mut(c).iter_mut()).zip(plane) {
            *xn = (v - mean) * is;
            *a = (g * *xn + b).max(0.0);
        }
    }
    StageCache { input: x.clone(), normalized, inv_std, batch_mean, batch_var, activated }
}

/// Backward through ReLU, batch norm (training statistics) and the conv.
fn stage_backward(stage: &Stage, cache: &StageCache, grad_out: &Tensor, grad: &mut Stage) -> Tensor {
    let channels = grad_out.channels;
    let n = (grad_out.height * grad_out.width) as f64;
    let mut grad_z = Tensor::zeros(channels, grad_out.height, grad_out.width);
    for c in 0..channels {
        let gamma = stage.bn.gamma[c];
        let act = cache.activated.plane(c);
        let xn = cache.normalized.plane(c);
        let go = grad_out.plane(c);
        // dL/dy through the ReLU.
        let dy: Vec<f64> = go.iter().zip(act).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xn: f64 = dy.iter().zip(xn).map(|(d, x)| d * x).sum();
        grad.bn.gamma[c] += sum_dy_xn;
        grad.bn.beta[c] += sum_dy;
        let scale = gamma * cache.inv_std[c] / n;
        for ((gz, d), x) in grad_z.plane_mut(c).iter_mut().zip(&dy).zip(xn) {
            *gz = scale * (n * d - sum_dy - x * sum_dy_xn);
        }
    }
    stage.conv.backward(&cache.input, &grad_z, &mut grad.conv)
}

fn softmax_pixels(logits: &Tensor) -> Tensor {
    let n = logits.height * logits.width;
    let mut probs = Tensor::zeros(CLASSES, logits.height, logits.width);
    for i in 0..n {
        let (a, b) = (logits.data[i], logits.data[n + i]);
        // Each probability is computed from its own logit difference so that
        // swapping the logits swaps the probabilities exactly.
        probs.data[i] = 1.0 / (1.0 + (b - a).exp());
        probs.data[n + i] = 1.0 / (1.0 + (a - b).exp());
    }
    probs
}

/// Forward pass. Height and width must be divisible by 8.
pub fn forward(params: &NetParams, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
    let depth = params.encoder.len();
    let factor = 1usize << depth;
    if x.channels != ENCODER_CHANNELS[0] {
        return Err(Error::ShapeMismatch(format!("network expects {} input channels, got {}", ENCODER_CHANNELS[0], x.channels)));
    }
    if x.height == 0 || x.width == 0 || !x.height.is_multiple_of(factor) || !x.width.is_multiple_of(factor) {
        return Err(Error::ShapeMismatch(format!(
            "spatial dimensions {}x{} must be nonzero multiples of {factor}",
            x.height, x.width
        )));
    }
    let mut encoder = Vec::with_capacity(depth);
    let mut pools = Vec::with_capacity(depth);
    let mut current = x.clone();
    for stage in &params.encoder {
        let cache = stage_forward(stage, &current, mode);
        let (pooled, idx) = maxpool2_with_indices(&cache.activated)?;
        encoder.push(cache);
        pools.push(idx);
        current = pooled;
    }
    let mut decoder = Vec::with_capacity(depth);
    for (stage, idx) in params.decoder.iter().zip(pools.iter().rev()) {
        let up = max_unpool2(&current, idx, idx.in_height, idx.in_width)?;
        let cache = stage_forward(stage, &up, mode);
        current = cache.activated.clone();
        decoder.push(cache);
    }
    let logits = params.classifier.forward(&current);
    let probs = softmax_pixels(&logits);
    Ok((probs, ForwardCache { encoder, pools, decoder, logits }))
}

/// Eval-mode forward over several inputs; items never interact.
pub fn forward_batch(params: &NetParams, batch: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
    batch.iter().map(|x| forward(params, x, mode).map(|(p, _)| p)).collect()
}

/// Mean per-pixel cross-entropy of class probabilities against a mask.
pub fn cross_entropy(probs: &Tensor, target: &BinaryMask) -> Result<f64> {
    if probs.height != target.height || probs.width != target.width {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {}x{} vs target {}x{}",
            probs.height, probs.width, target.height, target.width
        )));
    }
    let n = probs.height * probs.width;
    let loss: f64 = (0..n)
        .map(|i| {
            let p = probs.data[if target.bits[i] { n + i } else { i }];
            -p.max(f64::MIN_POSITIVE).ln()
        })
        .sum();
    Ok(loss / n as f64)
}

/// Training-mode loss and the gradient of every trainable parameter.
pub fn loss_and_grad(params: &NetParams, x: &Tensor, target: &BinaryMask) -> Result<(f64, NetParams)> {
    let (loss, grads, _) = loss_grad_cache(params, x, target)?;
    Ok((loss, grads))
}

fn loss_grad_cache(params: &NetParams, x: &Tensor, target: &BinaryMask) -> Result<(f64, NetParams, ForwardCache)> {
    if x.height != target.height || x.width != target.width {
        return Err(Error::ShapeMismatch(format!(
            "input {}x{} vs target {}x{}",
            x.height, x.width, target.height, target.width
        )));
    }
    let (probs, cache) = forward(params, x, Mode::Train)?;
    let loss = cross_entropy(&probs, target)?;
    let n = probs.height * probs.width;

    let mut grads = params.zeros_like();
    let mut grad_logits = Tensor::zeros(CLASSES, probs.height, probs.width);
    for i in 0..n {
        let t = target.bits[i] as usize;
        for c in 0..CLASSES {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad_logits.data[c * n + i] = (probs.data[c * n + i] - onehot) / n as f64;
        }
    }
    let last = cache.decoder.last().expect("decoder stages");
    let mut g = params.classifier.backward(&last.activated, &grad_logits, &mut grads.classifier);

    let depth = params.decoder.len();
    for j in (0..depth).rev() {
        let gin = stage_backward(&params.decoder[j], &cache.decoder[j], &g, &mut grads.decoder[j]);
        let idx = &cache.pools[depth - 1 - j];
        g = unpool_backward(&gin, idx);
    }
    for s in (0..depth).rev() {
        let idx = &cache.pools[s];
        let mut g_act = Tensor::zeros(idx.channels, idx.in_height, idx.in_width);
        let n_out = idx.out_height * idx.out_width;
        for c in 0..idx.channels {
            for k in 0..n_out {
                let (r, col) = idx.positions[c * n_out + k];
                g_act.data[(c * idx.in_height + r) * idx.in_width + col] += g.data[c * n_out + k];
            }
        }
        g = stage_backward(&params.encoder[s], &cache.encoder[s], &g_act, &mut grads.encoder[s]);
    }
    Ok((loss, grads, cache))
}

/// Moves running batch-norm statistics towards those seen in `cache`.
fn update_running_stats(params: &mut NetParams, cache: &ForwardCache) {
    let stages = params.encoder.iter_mut().chain(params.decoder.iter_mut());
    for (stage, sc) in stages.zip(cache.encoder.iter().chain(&cache.decoder)) {
        let n = (sc.activated.height * sc.activated.width) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..stage.bn.gamma.len() {
            stage.bn.running_mean[c] = (1.0 - BN_MOMENTUM) * stage.bn.running_mean[c] + BN_MOMENTUM * sc.batch_mean[c];
            stage.bn.running_var[c] =
                (1.0 - BN_MOMENTUM) * stage.bn.running_var[c] + BN_MOMENTUM * sc.batch_var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub start_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub iterations: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            start_lr: 5e-4,
            decay_factor: 0.5,
            decay_every: 2000,
            iterations: 10_000,
            batch: 1,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate `start_lr * decay_factor^floor(t / decay_every)`.
    pub fn learning_rate(&self, t: usize) -> f64 {
        self.start_lr * self.decay_factor.powi((t / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.start_lr > 0.0 && self.start_lr.is_finite()) {
            return bad(format!("train.start_lr must be > 0, got {}", self.start_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("train.decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("train.decay_every must be >= 1".into());
        }
        if self.batch != 1 {
            return bad(format!("only batch size 1 is supported, got {}", self.batch));
        }
        Ok(())
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetParams,
    pub v: NetParams,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// Bias-corrected Adam update of one buffer.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: usize, lr: f64, beta1: f64, beta2: f64) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
    }
}

/// One Adam step at (1-based) step `t` with the scheduled learning rate.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut AdamState, t: usize, cfg: &TrainConfig) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("Adam steps are numbered from 1".into()));
    }
    let lr = cfg.learning_rate(t);
    let grads = grads.trainable();
    let ms = state.m.trainable_mut();
    let vs = state.v.trainable_mut();
    for (((p, (_, g)), m), v) in params.trainable_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        adam_update(p, g, m, v, t, lr, cfg.beta1, cfg.beta2);
    }
    Ok(())
}

/// One recorded training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains from a seeded initialisation on `(flow, mask)` pairs, visiting
/// samples in a seeded shuffled order each epoch.
pub fn train(pairs: &[(FlowField, BinaryMask)], cfg: &TrainConfig, seed: u64) -> Result<(NetParams, Vec<LossRecord>)> {
    train_from(NetParams::init(seed), pairs, cfg, seed)
}

/// Like [`train`], starting from given parameters.
pub fn train_from(
    mut params: NetParams,
    pairs: &[(FlowField, BinaryMask)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(NetParams, Vec<LossRecord>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let factor = 1usize << params.encoder.len();
    let mut inputs = Vec::with_capacity(pairs.len());
    for (k, (flow, mask)) in pairs.iter().enumerate() {
        if flow.height % factor != 0 || flow.width % factor != 0 {
            return Err(Error::ShapeMismatch(format!(
                "training flow {k} is {}x{}; dimensions must be multiples of {factor}",
                flow.height, flow.width
            )));
        }
        if mask.height != flow.height || mask.width != flow.width {
            return Err(Error::ShapeMismatch(format!("training pair {k}: mask and flow shapes differ")));
        }
        inputs.push(Tensor::from_flow(flow));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3e_0f0e_d5e7);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new(&params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            order.reverse();
        }
        let k = order.pop().expect("refilled");
        let (loss, grads, cache) = loss_grad_cache(&params, &inputs[k], &pairs[k].1)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", iteration: t });
        }
        update_running_stats(&mut params, &cache);
        adam_step(&mut params, &grads, &mut state, t, cfg)?;
        trace.push(LossRecord { step: t, lr: cfg.learning_rate(t), loss });
    }
    Ok((params, trace))
}

/// Loss trace as `step,lr,loss` CSV.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        writeln!(out, "{},{},{}", r.step, r.lr, r.loss).expect("string write");
    }
    out
}

/// Foreground iff the class-1 probability exceeds 0.5. Inputs whose sides
/// are not multiples of 8 are resized up for inference and the mask is
/// resized back.
pub fn predict_mask(params: &NetParams, flow: &FlowField) -> Result<BinaryMask> {
    let factor = 1usize << params.encoder.len();
    let (h, w) = (flow.height, flow.width);
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let input = if (ph, pw) == (h, w) { flow.clone() } else { resize_flow(flow, ph, pw)? };
    let (probs, _) = forward(params, &Tensor::from_flow(&input), Mode::Eval)?;
    let n = ph * pw;
    let mask = BinaryMask { height: ph, width: pw, bits: (0..n).map(|i| probs.data[n + i] > 0.5).collect() };
    Ok(if (ph, pw) == (h, w) { mask } else { resize_mask_nearest(&mask, h, w) })
}
