//! Dense multi-resolution feature grids with trilinear interpolation.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub features_per_level: usize,
    pub sh_degree: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_resolution: 16,
            per_level_scale: 2.0,
            features_per_level: 2,
            sh_degree: 2,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig("levels must be >= 1".into()));
        }
        if self.base_resolution < 2 {
            return Err(Error::InvalidConfig("base_resolution must be >= 2".into()));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::InvalidConfig("per_level_scale must be > 1".into()));
        }
        if self.features_per_level < 1 {
            return Err(Error::InvalidConfig("features_per_level must be >= 1".into()));
        }
        if self.sh_degree > super::sh::MAX_SH_DEGREE {
            return Err(Error::InvalidConfig(format!("sh_degree {} unsupported", self.sh_degree)));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }

    pub fn output_len(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Corner vertex indices and trilinear weights of one level lookup.
#[derive(Debug, Clone, Copy, Default)]
pub struct Corners {
    pub index: [u32; 8],
    pub weight: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub resolution: usize,
    /// `(R+1)^3` vertices, x-fastest, `features` values per vertex.
    pub data: Vec<f64>,
}

impl LevelGrid {
    pub fn vertices(&self) -> usize {
        let n = self.resolution + 1;
        n * n * n
    }
}

pub fn normalize_into_bounds(x: &Vec3, min: &Vec3, max: &Vec3) -> Vec3 {
    let mut p = Vec3::zeros();
    let mut clamped = false;
    for a in 0..3 {
        let u = (x[a] - min[a]) / (max[a] - min[a]);
        let c = u.clamp(0.0, 1.0);
        clamped |= c != u || u.is_nan();
        p[a] = if u.is_nan() { 0.0 } else { c };
    }
    if clamped && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("encoding input {x:?} outside field bounds; clamping");
    }
    p
}

/// Trilinear lookup corners for a normalized point `p` in `[0,1]^3`.
#[inline]
pub fn corners(resolution: usize, p: &Vec3) -> Corners {
    let r = resolution as f64;
    let n = resolution + 1;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let s = p[a] * r;
        let i = (s.floor() as usize).min(resolution - 1);
        base[a] = i;
        frac[a] = s - i as f64;
    }
    let mut c = Corners::default();
    for k in 0..8 {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        c.index[k] = ((base[0] + dx) + n * ((base[1] + dy) + n * (base[2] + dz))) as u32;
        c.weight[k] = wx * wy * wz;
    }
    c
}

/// Interpolates one level's features at the given corners into `out`.
#[inline]
pub fn gather(grid: &LevelGrid, features: usize, c: &Corners, out: &mut [f64]) {
    out[..features].fill(0.0);
    for k in 0..8 {
        let w = c.weight[k];
        let base = c.index[k] as usize * features;
        for f in 0..features {
            out[f] += w * grid.data[base + f];
        }
    }
}
