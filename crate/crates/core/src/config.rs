//! Flat `key = value` pipeline configuration.
//!
//! ```text
//! # comments start with '#'
//! energy.lambda = 10
//! solver.levels = 4
//! mop.threshold_mode = fixed:0.5
//! dataset.sequences = bear,camel
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::FrameSize;
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::mop::MopConfig;
use crate::segnet::TrainConfig;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub energy: EnergyConfig,
    pub solver: SolverConfig,
    pub mop: MopConfig,
    pub train: TrainConfig,
    pub frame_size: FrameSize,
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub sequences: Option<Vec<String>>,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            energy: EnergyConfig::default(),
            solver: SolverConfig::default(),
            mop: MopConfig::default(),
            train: TrainConfig::default(),
            frame_size: FrameSize::default(),
            root: None,
            split: None,
            sequences: None,
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "energy.epsilon",
    "energy.lambda",
    "solver.levels",
    "solver.steps_per_level",
    "solver.step_size",
    "solver.adam_beta1",
    "solver.adam_beta2",
    "solver.occlusion_alpha1",
    "solver.occlusion_alpha2",
    "solver.bidirectional",
    "solver.occlusion_refine",
    "mop.threshold_mode",
    "mop.morph_radius",
    "mop.min_area",
    "train.beta1",
    "train.beta2",
    "train.start_lr",
    "train.decay_factor",
    "train.decay_every",
    "train.iterations",
    "train.batch",
    "dataset.root",
    "dataset.split",
    "dataset.sequences",
    "dataset.height",
    "dataset.width",
    "output",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "energy.epsilon" => self.energy.epsilon = parse(key, v)?,
            "energy.lambda" => self.energy.lambda = parse(key, v)?,
            "solver.levels" => self.solver.levels = parse(key, v)?,
            "solver.steps_per_level" => self.solver.steps_per_level = parse(key, v)?,
            "solver.step_size" => self.solver.step_size = parse(key, v)?,
            "solver.adam_beta1" => self.solver.adam_beta1 = parse(key, v)?,
            "solver.adam_beta2" => self.solver.adam_beta2 = parse(key, v)?,
            "solver.occlusion_alpha1" => self.solver.occlusion_alpha1 = parse(key, v)?,
            "solver.occlusion_alpha2" => self.solver.occlusion_alpha2 = parse(key, v)?,
            "solver.bidirectional" => self.solver.bidirectional = parse(key, v)?,
            "solver.occlusion_refine" => self.solver.occlusion_refine = parse(key, v)?,
            "mop.threshold_mode" => self.mop.threshold_mode = parse(key, v)?,
            "mop.morph_radius" => self.mop.morph_radius = parse(key, v)?,
            "mop.min_area" => self.mop.min_area = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.start_lr" => self.train.start_lr = parse(key, v)?,
            "train.decay_factor" => self.train.decay_factor = parse(key, v)?,
            "train.decay_every" => self.train.decay_every = parse(key, v)?,
            "train.iterations" => self.train.iterations = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "dataset.root" => self.root = opt_path(v),
            "dataset.split" => self.split = opt_path(v),
            "dataset.sequences" => {
                let names: Vec<String> =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                self.sequences = (!names.is_empty()).then_some(names);
            }
            "dataset.height" => self.frame_size.height = parse(key, v)?,
            "dataset.width" => self.frame_size.width = parse(key, v)?,
            "output" => self.output = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        match key {
            "energy.epsilon" => self.energy.epsilon.to_string(),
            "energy.lambda" => self.energy.lambda.to_string(),
            "solver.levels" => self.solver.levels.to_string(),
            "solver.steps_per_level" => self.solver.steps_per_level.to_string(),
            "solver.step_size" => self.solver.step_size.to_string(),
            "solver.adam_beta1" => self.solver.adam_beta1.to_string(),
            "solver.adam_beta2" => self.solver.adam_beta2.to_string(),
            "solver.occlusion_alpha1" => self.solver.occlusion_alpha1.to_string(),
            "solver.occlusion_alpha2" => self.solver.occlusion_alpha2.to_string(),
            "solver.bidirectional" => self.solver.bidirectional.to_string(),
            "solver.occlusion_refine" => self.solver.occlusion_refine.to_string(),
            "mop.threshold_mode" => self.mop.threshold_mode.to_string(),
            "mop.morph_radius" => self.mop.morph_radius.to_string(),
            "mop.min_area" => self.mop.min_area.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.start_lr" => self.train.start_lr.to_string(),
            "train.decay_factor" => self.train.decay_factor.to_string(),
            "train.decay_every" => self.train.decay_every.to_string(),
            "train.iterations" => self.train.iterations.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "dataset.root" => show_path(&self.root),
            "dataset.split" => show_path(&self.split),
            "dataset.sequences" => self.sequences.as_ref().map(|s| s.join(",")).unwrap_or_default(),
            "dataset.height" => self.frame_size.height.to_string(),
            "dataset.width" => self.frame_size.width.to_string(),
            "output" => self.output.display().to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("key list and accessor out of sync: {key}"),
        }
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its effective value; [`PipelineConfig::parse`] reads it back to an equal config.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.value(key)).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |e: Error| Error::Config(e.to_string());
        self.energy.validate().map_err(tag)?;
        self.solver.validate().map_err(tag)?;
        self.mop.validate().map_err(tag)?;
        self.train.validate().map_err(tag)?;
        if self.frame_size.height == 0 || self.frame_size.width == 0 {
            return Err(Error::Config("dataset.height and dataset.width must be positive".into()));
        }
        Ok(())
    }
}
