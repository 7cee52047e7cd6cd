//! Plain-text configuration: one `section.key = value` per line, `#` comments.

use std::path::Path;

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::pipeline::MappingConfig;
use crate::render::RenderConfig;
use crate::train::{Sampler, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppConfig {
    pub mapping: MappingConfig,
    pub render: RenderConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    /// Semantic volume voxel size in meters.
    pub voxel_size: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            mapping: MappingConfig::default(),
            render: RenderConfig::default(),
            field: FieldConfig::default(),
            train: TrainConfig::default(),
            voxel_size: 0.0625,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::parse(format!("config key {key}"), format!("{v:?}: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::parse(format!("config key {key}"), format!("expected true/false, got {v:?}"))),
    }
}

impl AppConfig {
    /// Configuration tuned for small (about 64 px) synthetic frames.
    pub fn small_frames() -> Self {
        let mut c = Self::default();
        c.mapping.detector = DetectorConfig::small_frames();
        c.train.rays_per_batch = 1024;
        c
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.mapping.detector;
        let r = &mut self.mapping.registry;
        let t = &mut self.train;
        let e = &mut self.field.encoding;
        match key {
            "voxel_size" => self.voxel_size = num(key, v)?,
            "detector.cell_size" => d.cell_size = num(key, v)?,
            "detector.flatness_threshold" => d.flatness_threshold = num(key, v)?,
            "detector.min_support" => d.min_support = num(key, v)?,
            "detector.normal_merge_angle" => d.normal_merge_angle = num(key, v)?,
            "detector.offset_merge_dist" => d.offset_merge_dist = num(key, v)?,
            "detector.min_valid_fraction" => d.min_valid_fraction = num(key, v)?,
            "registry.merge_threshold" => r.merge_threshold = num(key, v)?,
            "registry.normal_threshold" => r.normal_threshold = num(key, v)?,
            "registry.history_window" => r.history_window = num(key, v)?,
            "registry.revalidation_samples" => r.revalidation_samples = num(key, v)?,
            "fusion.wide_band" => self.mapping.fusion.wide_band = num(key, v)?,
            "fusion.narrow_band" => self.mapping.fusion.narrow_band = num(key, v)?,
            "fusion.planes_disabled" => self.mapping.planes_disabled = flag(key, v)?,
            "render.step_fraction" => self.render.step_fraction = num(key, v)?,
            "render.max_steps" => self.render.max_steps = num(key, v)?,
            "render.primitive_delta" => self.render.primitive_delta = num(key, v)?,
            "render.max_advance" => self.render.max_advance = num(key, v)?,
            "render.chunk_samples" => self.render.chunk_samples = num(key, v)?,
            "field.levels" => e.levels = num(key, v)?,
            "field.base_resolution" => e.base_resolution = num(key, v)?,
            "field.per_level_scale" => e.per_level_scale = num(key, v)?,
            "field.features_per_level" => e.features_per_level = num(key, v)?,
            "field.sh_degree" => e.sh_degree = num(key, v)?,
            "field.hidden" => self.field.hidden = num(key, v)?,
            "field.color_hidden" => self.field.color_hidden = num(key, v)?,
            "train.lambda_depth" => t.lambda_depth = num(key, v)?,
            "train.lambda_semantic" => t.lambda_semantic = num(key, v)?,
            "train.lambda_reg" => t.lambda_reg = num(key, v)?,
            "train.lr_start" => t.lr_start = num(key, v)?,
            "train.lr_end" => t.lr_end = num(key, v)?,
            "train.rays_per_batch" => t.rays_per_batch = num(key, v)?,
            "train.iters_per_epoch" => t.iters_per_epoch = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.prune_every" => t.prune_every = num(key, v)?,
            "train.prune_threshold" => t.prune_threshold = num(key, v)?,
            "train.incremental_rate" => t.incremental_rate = num(key, v)?,
            "train.sim_step_seconds" => t.sim_step_seconds = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.full_entropy" => t.full_entropy = flag(key, v)?,
            "train.mode" => {
                t.mode = match v {
                    "batch" => TrainMode::Batch,
                    "incremental" => TrainMode::Incremental,
                    _ => return Err(Error::parse("config key train.mode", format!("unknown mode {v:?}"))),
                }
            }
            "train.sampler" => {
                t.sampler = match v {
                    "hybrid" => Sampler::Hybrid,
                    "depth_guided" => Sampler::DepthGuided,
                    _ => return Err(Error::parse("config key train.sampler", format!("unknown sampler {v:?}"))),
                }
            }
            _ => return Err(Error::parse("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("config line {}", lineno + 1), "expected `key = value`"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mapping.detector.validate()?;
        self.field.encoding.validate()?;
        self.train.validate()?;
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidConfig("voxel_size must be > 0".into()));
        }
        Ok(())
    }
}
