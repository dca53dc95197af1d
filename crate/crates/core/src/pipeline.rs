//! File-based pipeline stages driven by a [`PipelineConfig`].
//!
//! Layout under the output directory:
//!
//! ```text
//! flow/<seq>/<frame>.flo      forward flow from <frame> to the next frame
//! flow/<seq>/<frame>.png      colour-coded flow
//! masks/<seq>/<frame>.png     motion proposals
//! predict/<seq>/<frame>.png   network masks
//! segnet.ckpt, loss.csv       training outputs
//! report.csv, report.txt      evaluation
//! ```
//!
//! A pair `(t, t + 1)` is attributed to frame `t`, so the last frame of each
//! sequence has no flow, proposal or prediction and is not scored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::dataset::{
    annotations_dir, binarize_annotation, load_davis_index, load_davis_index_filtered, load_frame_pair, read_flo,
    read_label_mask, write_atomic, write_flo, write_image_png, write_mask_png, DatasetIndex, FrameSize,
};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{evaluate_dataset, EvalReport};
use crate::imaging::{resize_mask_nearest, to_grayscale, FlowField};
use crate::mop::{flow_to_color, segment_flow};
use crate::segnet::{loss_trace_csv, predict_mask, train, NetParams};
use crate::solver::solve_pair;

pub const FLOW_DIR: &str = "flow";
pub const MASK_DIR: &str = "masks";
pub const PREDICT_DIR: &str = "predict";
pub const CHECKPOINT_FILE: &str = "segnet.ckpt";

fn dataset_index(cfg: &PipelineConfig) -> Result<DatasetIndex> {
    let root = cfg.root.as_deref().ok_or_else(|| Error::Config("dataset.root is not set".into()))?;
    match (&cfg.sequences, &cfg.split) {
        (Some(names), _) => load_davis_index_filtered(root, Some(names)),
        (None, split) => load_davis_index(root, split.as_deref()),
    }
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Dataset(format!("unusable file name {}", path.display())))
}

/// Sorted `(stem, path)` of files with extension `ext` directly inside `dir`.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push((stem(&path)?, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted sequence subdirectories of `dir`, filtered by `cfg.sequences`.
fn sequence_dirs(dir: &Path, cfg: &PipelineConfig) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).map(str::to_string).unwrap_or_default();
        if cfg.sequences.as_ref().is_none_or(|s| s.contains(&name)) {
            out.push((name, path));
        }
    }
    out.sort();
    if let Some(wanted) = &cfg.sequences {
        if let Some(missing) = wanted.iter().find(|w| !out.iter().any(|(n, _)| n == *w)) {
            return Err(Error::Dataset(format!("no sequence `{missing}` under {}", dir.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no sequences under {}", dir.display())));
    }
    Ok(out)
}

/// `(sequence, [(frame, flow)])` in name and frame order.
type SequenceFlows = Vec<(String, Vec<(String, FlowField)>)>;

/// Flow fields written by [`run_flow`].
fn read_flows(flow_dir: &Path, cfg: &PipelineConfig) -> Result<SequenceFlows> {
    let mut out = Vec::new();
    for (name, dir) in sequence_dirs(flow_dir, cfg)? {
        let files = files_with_ext(&dir, "flo")?;
        let flows = files
            .par_iter()
            .map(|(s, p)| Ok((s.clone(), read_flo(p)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, flows));
    }
    Ok(out)
}

/// Estimates forward flow for every consecutive frame pair.
///
/// Returns the written `.flo` paths.
pub fn run_flow(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate().stage("flow: config")?;
    let index = dataset_index(cfg).stage("flow: inputs")?;
    let out_root = cfg.output.join(FLOW_DIR);
    let jobs: Vec<(&str, usize, String)> = index
        .sequences
        .iter()
        .flat_map(|s| (0..s.frames.len().saturating_sub(1)).map(move |t| (s.name.as_str(), t, &s.frames[t])))
        .map(|(n, t, p)| Ok((n, t, stem(p)?)))
        .collect::<Result<_>>()
        .stage("flow: inputs")?;
    if jobs.is_empty() {
        return Err(Error::Dataset("no sequence has two frames".into()).in_stage("flow: inputs"));
    }

    jobs.par_iter()
        .map(|(seq, t, frame)| {
            let tag = format!("flow: {seq}/{frame}");
            let (a, b) = load_frame_pair(&index, seq, *t, cfg.frame_size).stage(&tag)?;
            let (a, b) = (to_grayscale(&a).stage(&tag)?, to_grayscale(&b).stage(&tag)?);
            let result = solve_pair(&a, &b, &cfg.energy, &cfg.solver).stage(&tag)?;
            let dir = out_root.join(seq);
            fs::create_dir_all(&dir).map_err(Error::from).stage(&tag)?;
            let flo = dir.join(format!("{frame}.flo"));
            write_flo(&flo, &result.forward).stage(&tag)?;
            write_image_png(&dir.join(format!("{frame}.png")), &flow_to_color(&result.forward, None))
                .stage(&tag)?;
            Ok(flo)
        })
        .collect()
}

/// Motion proposals from the flows in `flow_dir` (default `<output>/flow`).
///
/// Writes one mask PNG per flow and a `proposals.csv` per sequence; returns
/// the mask paths.
pub fn run_segment(cfg: &PipelineConfig, flow_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate().stage("segment: config")?;
    let default_dir = cfg.output.join(FLOW_DIR);
    let flows = read_flows(flow_dir.unwrap_or(&default_dir), cfg).stage("segment: reading flows")?;
    let mut written = Vec::new();
    for (seq, frames) in flows {
        let tag = format!("segment: {seq}");
        let dir = cfg.output.join(MASK_DIR).join(&seq);
        fs::create_dir_all(&dir).map_err(Error::from).stage(&tag)?;
        let results =
            frames.par_iter().map(|(s, f)| segment_flow(f, &cfg.mop).map(|r| (s, r))).collect::<Result<Vec<_>>>();
        let mut csv = String::from("frame,rank,area,top,left,height,width,mean_u,mean_v\n");
        for (frame, (mask, proposals)) in results.stage(&tag)? {
            let path = dir.join(format!("{frame}.png"));
            write_mask_png(&path, &mask).stage(&tag)?;
            written.push(path);
            for (rank, p) in proposals.iter().enumerate() {
                let b = p.bbox;
                writeln!(
                    csv,
                    "{frame},{rank},{},{},{},{},{},{},{}",
                    p.area, b.top, b.left, b.height, b.width, p.mean_motion.0, p.mean_motion.1
                )
                .expect("string write");
            }
        }
        write_atomic(&dir.join("proposals.csv"), csv.as_bytes()).stage(&tag)?;
    }
    Ok(written)
}

/// Trains the network on flows paired with the annotation of the same frame.
///
/// Writes `segnet.ckpt` and `loss.csv` and returns the checkpoint path.
pub fn run_train(cfg: &PipelineConfig, flow_dir: Option<&Path>) -> Result<PathBuf> {
    cfg.validate().stage("train: config")?;
    let index = dataset_index(cfg).stage("train: inputs")?;
    let default_dir = cfg.output.join(FLOW_DIR);
    let flows = read_flows(flow_dir.unwrap_or(&default_dir), cfg).stage("train: reading flows")?;
    let mut pairs = Vec::new();
    for (seq, frames) in flows {
        let tag = format!("train: {seq}");
        let ann = annotations_dir(&index.root).join(&seq);
        for (frame, flow) in frames {
            let path = ann.join(format!("{frame}.png"));
            if !path.is_file() {
                return Err(Error::Dataset(format!("no annotation {}", path.display())).in_stage(tag));
            }
            let size = FrameSize { height: flow.height, width: flow.width };
            pairs.push((flow, binarize_annotation(&path, size).stage(&tag)?));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()).in_stage("train: inputs"));
    }
    let (params, trace) = train(&pairs, &cfg.train, cfg.seed).stage("train: optimisation")?;
    fs::create_dir_all(&cfg.output).map_err(Error::from).stage("train: output")?;
    let ckpt = cfg.output.join(CHECKPOINT_FILE);
    params.save(&ckpt).stage("train: output")?;
    write_atomic(&cfg.output.join("loss.csv"), loss_trace_csv(&trace).as_bytes()).stage("train: output")?;
    Ok(ckpt)
}

/// Network masks for every flow, written under `<output>/predict`.
pub fn run_predict(cfg: &PipelineConfig, checkpoint: &Path, flow_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate().stage("predict: config")?;
    let params = NetParams::load(checkpoint).stage("predict: checkpoint")?;
    let default_dir = cfg.output.join(FLOW_DIR);
    let flows = read_flows(flow_dir.unwrap_or(&default_dir), cfg).stage("predict: reading flows")?;
    let mut written = Vec::new();
    for (seq, frames) in flows {
        let tag = format!("predict: {seq}");
        let dir = cfg.output.join(PREDICT_DIR).join(&seq);
        fs::create_dir_all(&dir).map_err(Error::from).stage(&tag)?;
        let masks = frames.par_iter().map(|(_, f)| predict_mask(&params, f)).collect::<Result<Vec<_>>>();
        for ((frame, _), mask) in frames.iter().zip(masks.stage(&tag)?) {
            let path = dir.join(format!("{frame}.png"));
            write_mask_png(&path, &mask).stage(&tag)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Scores every mask in `pred_dir/<seq>/` against the same-named annotation
/// in `gt_dir/<seq>/` (default: the dataset's annotation directory).
///
/// Annotations are resized to the prediction size by nearest neighbour.
/// Writes `report.csv` and `report.txt`.
pub fn run_eval(cfg: &PipelineConfig, pred_dir: &Path, gt_dir: Option<&Path>) -> Result<EvalReport> {
    let gt_root = match (gt_dir, &cfg.root) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(root)) => annotations_dir(root),
        (None, None) => {
            return Err(Error::Config("pass --gt or set dataset.root".into()).in_stage("eval: inputs"));
        }
    };
    let mut results = BTreeMap::new();
    for (seq, dir) in sequence_dirs(pred_dir, cfg).stage("eval: predictions")? {
        let tag = format!("eval: {seq}");
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (frame, path) in files_with_ext(&dir, "png").stage(&tag)? {
            let p = read_label_mask(&path).stage(&tag)?;
            let gt_path = gt_root.join(&seq).join(format!("{frame}.png"));
            if !gt_path.is_file() {
                return Err(Error::Dataset(format!("no ground truth {}", gt_path.display())).in_stage(tag));
            }
            let g = read_label_mask(&gt_path).stage(&tag)?;
            let g = if g.same_shape(&p) { g } else { resize_mask_nearest(&g, p.height, p.width) };
            pred.push(p);
            gt.push(g);
        }
        results.insert(seq, (pred, gt));
    }
    let report = evaluate_dataset(&results).stage("eval: scoring")?;
    fs::create_dir_all(&cfg.output).map_err(Error::from).stage("eval: output")?;
    write_atomic(&cfg.output.join("report.csv"), report.to_csv().as_bytes()).stage("eval: output")?;
    write_atomic(&cfg.output.join("report.txt"), report.table().as_bytes()).stage("eval: output")?;
    Ok(report)
}
