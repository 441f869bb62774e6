//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comment
//! dim = 64
//! learning_rate = 0.001
//! suite = standard
//! ```
//!
//! Keys are the [`RunConfig`] field names; unknown or repeated keys are
//! errors, missing keys keep their defaults.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::scene::Suite;
use crate::matching::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub layers: usize,
    pub keep_divisor: usize,
    pub min_keep: usize,
    pub temporal_blocks: usize,
    pub mask_blocks: usize,
    pub alpha: f64,
    pub num_points: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    /// Fixed training scenes cycled in order; 0 draws a fresh scene per step.
    pub scenes: usize,
    pub suite: Suite,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 64,
            heads: 4,
            num_queries: 64,
            layers: 4,
            keep_divisor: 2,
            min_keep: 4,
            temporal_blocks: 3,
            mask_blocks: 3,
            alpha: 0.1,
            num_points: 16,
            frames: 6,
            height: 64,
            width: 64,
            seed: 0,
            learning_rate: 1e-3,
            steps: 2000,
            checkpoint_every: 200,
            scenes: 8,
            suite: Suite::Standard,
            loss: LossWeights::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: {key} given twice", lineno + 1)));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dim" => self.dim = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "num_queries" => self.num_queries = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "keep_divisor" => self.keep_divisor = parse_num(key, value)?,
            "min_keep" => self.min_keep = parse_num(key, value)?,
            "temporal_blocks" => self.temporal_blocks = parse_num(key, value)?,
            "mask_blocks" => self.mask_blocks = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "num_points" => self.num_points = parse_num(key, value)?,
            "frames" => self.frames = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "scenes" => self.scenes = parse_num(key, value)?,
            "suite" => self.suite = value.parse()?,
            "w_cls" => self.loss.cls = parse_num(key, value)?,
            "w_l1" => self.loss.l1 = parse_num(key, value)?,
            "w_giou" => self.loss.giou = parse_num(key, value)?,
            "w_dice" => self.loss.dice = parse_num(key, value)?,
            "w_focal" => self.loss.focal = parse_num(key, value)?,
            "w_proj" => self.loss.proj = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be divisible by 4", self.dim));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return fail(format!("canvas {}x{} must be a multiple of 8", self.height, self.width));
        }
        let positions = (self.height / 8) * (self.width / 8);
        if self.num_queries == 0 || self.num_queries > positions {
            return fail(format!("num_queries {} must be in 1..={positions}", self.num_queries));
        }
        if self.keep_divisor == 0 || self.layers == 0 || self.frames == 0 || self.num_points == 0 {
            return fail("keep_divisor, layers, frames and num_points must be positive".into());
        }
        if self.min_keep < 2 {
            return fail(format!("min_keep {} leaves no room for a negative candidate", self.min_keep));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        let w = &self.loss;
        if [w.cls, w.l1, w.giou, w.dice, w.focal, w.proj].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// The text form; `parse(to_text())` gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("dim", self.dim.to_string());
        put("heads", self.heads.to_string());
        put("num_queries", self.num_queries.to_string());
        put("layers", self.layers.to_string());
        put("keep_divisor", self.keep_divisor.to_string());
        put("min_keep", self.min_keep.to_string());
        put("temporal_blocks", self.temporal_blocks.to_string());
        put("mask_blocks", self.mask_blocks.to_string());
        put("alpha", format!("{:?}", self.alpha));
        put("num_points", self.num_points.to_string());
        put("frames", self.frames.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("seed", self.seed.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("steps", self.steps.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("scenes", self.scenes.to_string());
        put("suite", self.suite.name().to_string());
        put("w_cls", format!("{:?}", self.loss.cls));
        put("w_l1", format!("{:?}", self.loss.l1));
        put("w_giou", format!("{:?}", self.loss.giou));
        put("w_dice", format!("{:?}", self.loss.dice));
        put("w_focal", format!("{:?}", self.loss.focal));
        put("w_proj", format!("{:?}", self.loss.proj));
        out
    }
}
