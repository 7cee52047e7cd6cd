//! Per-frame mapping: detect planes, merge them into the registry,
//! periodically re-validate normals, and fuse into the semantic volume.

use crate::detector::{detect_planes, DetectorConfig};
use crate::error::Result;
use crate::geometry::Frame;
use crate::registry::{Registry, RegistryConfig};
use crate::volume::{FusionConfig, FusionStats, Grid, SemanticVolume};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MappingConfig {
    pub detector: DetectorConfig,
    pub registry: RegistryConfig,
    pub fusion: FusionConfig,
    /// Skip plane detection entirely (dense-only ablation).
    pub planes_disabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: usize,
    pub detected: usize,
    pub global_ids: Vec<u32>,
    pub removed: Vec<u32>,
    pub alive_planes: usize,
    pub fusion: FusionStats,
}

#[derive(Debug, Clone)]
pub struct Mapper {
    pub config: MappingConfig,
    pub volume: SemanticVolume,
    pub registry: Registry,
    /// Ingested frames with globalized semantic images.
    pub frames: Vec<Frame>,
    pub reports: Vec<FrameReport>,
}

impl Mapper {
    pub fn new(grid: Grid, config: MappingConfig) -> Result<Self> {
        config.detector.validate()?;
        Ok(Self {
            config,
            volume: SemanticVolume::new(grid),
            registry: Registry::new(config.registry),
            frames: Vec::new(),
            reports: Vec::new(),
        })
    }

    /// Runs the mapping steps for one arriving frame. The plane registered at
    /// this frame is available to the volume immediately.
    pub fn ingest(&mut self, mut frame: Frame) -> Result<&FrameReport> {
        let (detected, global_ids) = if self.config.planes_disabled {
            frame.semantic.iter_mut().for_each(|s| *s = 0);
            (0, Vec::new())
        } else {
            let det = detect_planes(&frame.depth, &frame.intrinsics, &frame.pose, &self.config.detector)?;
            let ids = self.registry.merge_detection(&det, &mut frame);
            (det.planes.len(), ids)
        };
        self.frames.push(frame);
        let window = self.config.registry.history_window.max(1);
        let removed = if !self.config.planes_disabled && self.frames.len() % window == 0 {
            self.registry.revalidate_normals(&mut self.frames)
        } else {
            Vec::new()
        };
        let last = self.frames.last().expect("just pushed");
        let fusion = self.volume.fuse_frame(last, &self.registry, &self.config.fusion);
        self.reports.push(FrameReport {
            frame: last.index,
            detected,
            global_ids,
            removed,
            alive_planes: self.registry.alive_count(),
            fusion,
        });
        Ok(self.reports.last().expect("just pushed"))
    }

    pub fn ingest_all(&mut self, frames: impl IntoIterator<Item = Frame>) -> Result<()> {
        for f in frames {
            self.ingest(f)?;
        }
        Ok(())
    }
}
