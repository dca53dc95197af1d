//! Intersection-over-union scoring and the DAVIS comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Published mean IoU (percent) of reference methods on DAVIS, in table order.
pub const BASELINES: [(&str, f64); 6] = [
    ("PCM", 40.1),
    ("CVOS", 48.2),
    ("KEY", 49.8),
    ("NLC", 55.1),
    ("FST", 55.8),
    ("PaperOurs", 41.9),
];

/// `|a ∩ b| / |a ∪ b|`, or 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "iou of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-frame IoU.
pub fn evaluate_sequence(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("sequence has no frames to score".into()));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += iou(p, g)?;
    }
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sequence: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub baselines: BTreeMap<String, f64>,
}

fn baseline_map() -> BTreeMap<String, f64> {
    BASELINES.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl EvalReport {
    /// Report from per-sequence scores; the mean is unweighted over sequences.
    pub fn from_scores(per_sequence: BTreeMap<String, f64>) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(Error::InvalidArgument("no sequences to report".into()));
        }
        if let Some((name, v)) = per_sequence.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("IoU for `{name}` is {v}, outside [0, 1]")));
        }
        // Summing in sorted order makes the mean independent of how scores
        // are assigned to names.
        let mut values: Vec<f64> = per_sequence.values().copied().collect();
        values.sort_by(f64::total_cmp);
        let mean_iou = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self { per_sequence, mean_iou, baselines: baseline_map() })
    }

    /// `sequence,iou` rows. Values use shortest round-trip formatting, so
    /// [`EvalReport::from_csv`] recovers them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,iou\n");
        for (name, v) in &self.per_sequence {
            writeln!(out, "{name},{v}").expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("sequence,iou") {
            return Err(Error::InvalidArgument("report CSV must start with `sequence,iou`".into()));
        }
        let mut per_sequence = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("report line {}: `{line}`", n + 2)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("report line {}: bad IoU `{value}`", n + 2)))?;
            if per_sequence.insert(name.to_string(), value).is_some() {
                return Err(Error::InvalidArgument(format!("sequence `{name}` listed twice")));
            }
        }
        Self::from_scores(per_sequence)
    }

    /// Plain-text comparison table: one column per method, mean IoU in percent.
    pub fn table(&self) -> String {
        let mut cols: Vec<(String, String)> =
            BASELINES.iter().map(|(k, _)| (k.to_string(), format!("{:.1}", self.baselines[*k]))).collect();
        cols.push(("This run".into(), format!("{:.1}", 100.0 * self.mean_iou)));
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: Vec<&str>, first: &str| {
            let mut line = format!("{first:<10}");
            for (c, w) in cells.iter().zip(&widths) {
                write!(line, " | {c:>w$}").expect("string write");
            }
            line
        };
        let mut out = String::new();
        writeln!(out, "{}", row(cols.iter().map(|(h, _)| h.as_str()).collect(), "Method")).expect("string write");
        writeln!(out, "{}", row(cols.iter().map(|(_, v)| v.as_str()).collect(), "Mean IOU")).expect("string write");
        writeln!(out).expect("string write");
        for (name, v) in &self.per_sequence {
            writeln!(out, "{name:<24} {:>6.2}", 100.0 * v).expect("string write");
        }
        out
    }
}

/// Scores every sequence and averages over sequences.
pub fn evaluate_dataset(results: &BTreeMap<String, (Vec<BinaryMask>, Vec<BinaryMask>)>) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no sequences to evaluate".into()));
    }
    let mut per_sequence = BTreeMap::new();
    for (name, (pred, gt)) in results {
        let score = evaluate_sequence(pred, gt).map_err(|e| Error::InvalidArgument(format!("sequence `{name}`: {e}")))?;
        per_sequence.insert(name.clone(), score);
    }
    EvalReport::from_scores(per_sequence)
}
