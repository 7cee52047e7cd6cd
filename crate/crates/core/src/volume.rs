//! Tri-state semantic voxel grid (empty / dense / primitive) and its fusion
//! from globalized RGB-D frames.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project_unchecked, Frame, Plane, Vec3};
use crate::registry::Registry;

pub const EMPTY: i32 = -1;
pub const DENSE: i32 = 0;

const VOLUME_MAGIC: &[u8; 7] = b"PARFVS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VoxelKind {
    Empty,
    Dense,
    Primitive(u32),
}

impl VoxelKind {
    pub fn from_label(label: i32) -> Self {
        match label {
            l if l < 0 => VoxelKind::Empty,
            0 => VoxelKind::Dense,
            l => VoxelKind::Primitive(l as u32),
        }
    }

    pub fn label(self) -> i32 {
        match self {
            VoxelKind::Empty => EMPTY,
            VoxelKind::Dense => DENSE,
            VoxelKind::Primitive(m) => m as i32,
        }
    }

    fn slot(self) -> usize {
        match self {
            VoxelKind::Empty => 0,
            VoxelKind::Dense => 1,
            VoxelKind::Primitive(_) => 2,
        }
    }
}

/// Axis-aligned voxel lattice shared by the semantic and editing volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Minimum corner, meters.
    pub origin: Vec3,
    pub voxel_size: f64,
}

impl Grid {
    pub fn new(dims: [usize; 3], origin: Vec3, voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("grid dims must be positive".into()));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::InvalidConfig("voxel_size must be > 0".into()));
        }
        Ok(Self {
            dims,
            origin,
            voxel_size,
        })
    }

    /// Voxels of size `voxel` whose outermost centers lie on `min` and `max`
    /// (rounded to whole voxels).
    pub fn aligned(min: Vec3, max: Vec3, voxel: f64) -> Result<Self> {
        let ext = max - min;
        if ext.iter().any(|e| !(*e >= 0.0)) || !(voxel > 0.0) {
            return Err(Error::InvalidConfig("bad bounds or voxel size".into()));
        }
        let dims = [0, 1, 2].map(|a| (ext[a] / voxel).round() as usize + 1);
        Self::new(dims, min - Vec3::repeat(voxel / 2.0), voxel)
    }

    /// Cubic voxels covering `[min, max]` with `resolution` voxels along the longest axis.
    pub fn covering(min: Vec3, max: Vec3, resolution: usize) -> Result<Self> {
        let ext = max - min;
        if ext.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidConfig("empty bounding box".into()));
        }
        let voxel = ext.max() / resolution as f64;
        let dims = [
            ((ext.x / voxel).ceil() as usize).max(1),
            ((ext.y / voxel).ceil() as usize).max(1),
            ((ext.z / voxel).ceil() as usize).max(1),
        ];
        Self::new(dims, min, voxel)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel diagonal.
    pub fn psi(&self) -> f64 {
        3f64.sqrt() * self.voxel_size
    }

    pub fn min(&self) -> Vec3 {
        self.origin
    }

    pub fn max(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.voxel_size
    }

    #[inline]
    pub fn index(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn center(&self, v: [usize; 3]) -> Vec3 {
        self.origin
            + Vec3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.voxel_size
    }

    #[inline]
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

/// Band widths in multiples of the voxel diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub wide_band: f64,
    pub narrow_band: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            wide_band: 6.0,
            narrow_band: 1.0,
        }
    }
}

/// Outcome of testing one voxel center against one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    /// Not observed: behind the camera, outside the image, or invalid depth.
    Unobserved,
    NoChange,
    Set(VoxelKind),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FusionStats {
    /// `transitions[from][to]` over kinds (E, D, P), changed voxels only.
    pub transitions: [[usize; 3]; 3],
    pub observed: usize,
    pub demoted_dead: usize,
}

impl FusionStats {
    pub fn changed(&self) -> usize {
        self.transitions.iter().flatten().sum()
    }

    fn merge(mut self, other: &FusionStats) -> Self {
        for a in 0..3 {
            for b in 0..3 {
                self.transitions[a][b] += other.transitions[a][b];
            }
        }
        self.observed += other.observed;
        self.demoted_dead += other.demoted_dead;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVolume {
    pub grid: Grid,
    labels: Vec<i32>,
    epoch: u64,
}

/// Anything that can report densities at world points.
pub trait DensityQuery {
    fn densities(&self, points: &[Vec3]) -> Vec<f64>;
}

impl<F: Fn(&[Vec3]) -> Vec<f64>> DensityQuery for F {
    fn densities(&self, points: &[Vec3]) -> Vec<f64> {
        self(points)
    }
}

impl SemanticVolume {
    /// All voxels start empty.
    pub fn new(grid: Grid) -> Self {
        Self {
            labels: vec![EMPTY; grid.len()],
            grid,
            epoch: 0,
        }
    }

    pub fn from_labels(grid: Grid, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l < EMPTY) {
            return Err(Error::InvalidConfig(format!("label {l} < -1")));
        }
        Ok(Self {
            grid,
            labels,
            epoch: 0,
        })
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    /// Bumped on every mutation; render snapshots compare against it.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn psi(&self) -> f64 {
        self.grid.psi()
    }

    #[inline]
    pub fn label(&self, v: [usize; 3]) -> i32 {
        self.labels[self.grid.index(v)]
    }

    pub fn label_at(&self, p: &Vec3) -> i32 {
        self.grid.voxel_of(p).map_or(EMPTY, |v| self.label(v))
    }

    pub fn set_label(&mut self, v: [usize; 3], label: i32) {
        let i = self.grid.index(v);
        self.labels[i] = label.max(EMPTY);
        self.epoch += 1;
    }

    pub fn count(&self, pred: impl Fn(i32) -> bool) -> usize {
        self.labels.iter().filter(|l| pred(**l)).count()
    }

    pub fn occupied_count(&self) -> usize {
        self.count(|l| l >= DENSE)
    }

    /// Classifies a world point against one globalized frame.
    pub fn classify_voxel(
        &self,
        x: &Vec3,
        frame: &Frame,
        registry: &Registry,
        cfg: &FusionConfig,
    ) -> Classification {
        let psi = self.psi();
        classify_point(x, frame, registry, cfg.wide_band * psi, cfg.narrow_band * psi)
    }

    /// Fuses one frame into the volume.
    pub fn fuse_frame(&mut self, frame: &Frame, registry: &Registry, cfg: &FusionConfig) -> FusionStats {
        let psi = self.psi();
        let (wide, narrow) = (cfg.wide_band * psi, cfg.narrow_band * psi);
        let grid = self.grid;
        let slice = grid.dims[0] * grid.dims[1];
        let stats = self
            .labels
            .par_chunks_mut(slice)
            .enumerate()
            .map(|(z, chunk)| {
                let mut stats = FusionStats::default();
                for (local, label) in chunk.iter_mut().enumerate() {
                    let v = [local % grid.dims[0], local / grid.dims[0], z];
                    let x = grid.center(v);
                    let class = classify_point(&x, frame, registry, wide, narrow);
                    if class == Classification::Unobserved {
                        continue;
                    }
                    stats.observed += 1;
                    let mut current = *label;
                    if current >= 1 && !registry.is_alive(current as u32) {
                        current = DENSE;
                        stats.demoted_dead += 1;
                    }
                    let next = match class {
                        Classification::Set(kind) => merge_label(current, kind),
                        _ => current,
                    };
                    if next != *label {
                        let from = VoxelKind::from_label(*label).slot();
                        let to = VoxelKind::from_label(next).slot();
                        stats.transitions[from][to] += 1;
                        *label = next;
                    }
                }
                stats
            })
            .reduce(FusionStats::default, |a, b| a.merge(&b));
        self.epoch += 1;
        stats
    }

    /// Demotes dense voxels whose center density is below `threshold`.
    pub fn prune_voxels(&mut self, field: &impl DensityQuery, threshold: f64) -> usize {
        let dense: Vec<usize> = (0..self.labels.len())
            .filter(|&i| self.labels[i] == DENSE)
            .collect();
        let mut pruned = 0;
        for chunk in dense.chunks(65_536) {
            let centers: Vec<Vec3> = chunk
                .iter()
                .map(|&i| self.grid.center(self.grid.coords(i)))
                .collect();
            let sigma = field.densities(&centers);
            for (&i, s) in chunk.iter().zip(sigma) {
                if s < threshold {
                    self.labels[i] = EMPTY;
                    pruned += 1;
                }
            }
        }
        self.epoch += 1;
        pruned
    }

    /// Clears every voxel carrying `plane_id` and marks the plane dead.
    pub fn delete_primitive(&mut self, registry: &mut Registry, plane_id: u32) -> Result<usize> {
        if plane_id == 0 {
            return Err(Error::UnknownPlane(plane_id));
        }
        let target = plane_id as i32;
        let mut cleared = 0;
        for l in self.labels.iter_mut() {
            if *l == target {
                *l = EMPTY;
                cleared += 1;
            }
        }
        let known = registry.mark_dead(plane_id).is_ok();
        if cleared == 0 && !known {
            return Err(Error::UnknownPlane(plane_id));
        }
        self.epoch += 1;
        Ok(cleared)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(7 + 12 + 32 + self.labels.len() * 4);
        buf.extend_from_slice(VOLUME_MAGIC);
        for d in self.grid.dims {
            buf.extend_from_slice(&(d as i32).to_le_bytes());
        }
        for a in 0..3 {
            buf.extend_from_slice(&self.grid.origin[a].to_le_bytes());
        }
        buf.extend_from_slice(&self.grid.voxel_size.to_le_bytes());
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 7 + 12 + 32 || &bytes[..7] != VOLUME_MAGIC {
            return Err(bad("missing volume header"));
        }
        let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let dims = [i32_at(7), i32_at(11), i32_at(15)];
        if dims.iter().any(|&d| d <= 0) {
            return Err(bad("non-positive dims"));
        }
        let origin = Vec3::new(f64_at(19), f64_at(27), f64_at(35));
        let voxel_size = f64_at(43);
        let grid = Grid::new(dims.map(|d| d as usize), origin, voxel_size)?;
        let body = &bytes[51..];
        if body.len() != grid.len() * 4 {
            return Err(bad("label payload size mismatch"));
        }
        let labels = body
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_labels(grid, labels)
    }
}

/// Cross-frame precedence: dense never overwrites a primitive label.
fn merge_label(current: i32, incoming: VoxelKind) -> i32 {
    match incoming {
        VoxelKind::Dense if current >= 1 => current,
        kind => kind.label(),
    }
}

/// Camera z-depth at which the ray from the camera through `x` meets `plane`.
pub fn plane_depth_through(x: &Vec3, voxel_depth: f64, frame: &Frame, plane: &Plane) -> Option<f64> {
    let c = frame.pose.center();
    let dir = x - c;
    let denom = plane.normal.dot(&dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let s = (plane.offset - plane.normal.dot(&c)) / denom;
    (s > 0.0).then_some(s * voxel_depth)
}

fn classify_point(x: &Vec3, frame: &Frame, registry: &Registry, wide: f64, narrow: f64) -> Classification {
    let (u, z) = project_unchecked(x, &frame.intrinsics, &frame.pose);
    if !(z > 0.0) {
        return Classification::Unobserved;
    }
    let Some((col, row)) = frame.intrinsics.pixel_of(&u) else {
        return Classification::Unobserved;
    };
    let i = frame.pixel_index(col, row);
    let observed = frame.depth[i];
    if !(observed > 0.0) {
        return Classification::Unobserved;
    }
    let m = frame.semantic[i];
    let plane = (m > 0).then(|| registry.get(m)).flatten().filter(|p| p.alive);
    match plane {
        None => {
            if observed - wide <= z && z < observed + wide {
                Classification::Set(VoxelKind::Dense)
            } else {
                Classification::NoChange
            }
        }
        Some(plane) => {
            let Some(surface) = plane_depth_through(x, z, frame, plane) else {
                return Classification::NoChange;
            };
            if z < surface - narrow {
                Classification::Set(VoxelKind::Empty)
            } else if z < surface + narrow {
                Classification::Set(VoxelKind::Primitive(m))
            } else if z < surface + wide {
                Classification::Set(VoxelKind::Dense)
            } else {
                Classification::NoChange
            }
        }
    }
}
