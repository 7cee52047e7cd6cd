//! Global plane list maintained across frames.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{fit_plane_pca, LocalDetection};
use crate::error::{Error, Result};
use crate::geometry::{Frame, Plane, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryConfig {
    /// Merge distance between plane anchors, meters.
    pub merge_threshold: f64,
    /// Maximum norm of the difference between stored and re-estimated unit normals.
    pub normal_threshold: f64,
    pub history_window: usize,
    pub revalidation_samples: usize,
    pub seed: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            merge_threshold: 0.01,
            normal_threshold: 0.1,
            history_window: 10,
            revalidation_samples: 2048,
            seed: 0,
        }
    }
}

/// Append-only plane list. Plane ids are 1-based positions and never reused.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub config: RegistryConfig,
    planes: Vec<Plane>,
}

/// Euclidean distance between the planes' closest-to-origin points.
pub fn plane_distance(a: &Plane, b: &Plane) -> f64 {
    (a.anchor() - b.anchor()).norm()
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Self {
            config,
            planes: Vec::new(),
        }
    }

    pub fn from_planes(config: RegistryConfig, planes: Vec<Plane>) -> Result<Self> {
        for (i, p) in planes.iter().enumerate() {
            if p.id as usize != i + 1 {
                return Err(Error::InvalidConfig(format!(
                    "plane at position {} has id {}",
                    i + 1,
                    p.id
                )));
            }
        }
        Ok(Self { config, planes })
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn alive(&self) -> impl Iterator<Item = &Plane> {
        self.planes.iter().filter(|p| p.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.alive().count()
    }

    pub fn get(&self, id: u32) -> Option<&Plane> {
        id.checked_sub(1).and_then(|i| self.planes.get(i as usize))
    }

    pub fn is_alive(&self, id: u32) -> bool {
        self.get(id).is_some_and(|p| p.alive)
    }

    /// Appends a plane and returns its new id.
    pub fn push(&mut self, plane: Plane) -> u32 {
        let id = self.planes.len() as u32 + 1;
        self.planes.push(Plane {
            id,
            alive: true,
            ..plane
        });
        id
    }

    pub fn mark_dead(&mut self, id: u32) -> Result<()> {
        let plane = id
            .checked_sub(1)
            .and_then(|i| self.planes.get_mut(i as usize))
            .ok_or(Error::UnknownPlane(id))?;
        plane.alive = false;
        Ok(())
    }

    /// Closest alive plane to `p` and its distance.
    pub fn closest(&self, p: &Plane) -> Option<(u32, f64)> {
        self.alive()
            .map(|q| (q.id, plane_distance(p, q)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Merges a local detection, rewriting `frame.semantic` to global ids.
    /// Returns the global id assigned to each local plane.
    pub fn merge_detection(&mut self, det: &LocalDetection, frame: &mut Frame) -> Vec<u32> {
        let mut mapping = Vec::with_capacity(det.planes.len());
        for local in &det.planes {
            let id = match self.closest(local) {
                Some((id, dist)) if dist <= self.config.merge_threshold => {
                    self.planes[id as usize - 1].support_count += local.support_count;
                    id
                }
                _ => self.push(*local),
            };
            mapping.push(id);
        }
        frame.semantic = det
            .semantic
            .iter()
            .map(|&l| if l == 0 { 0 } else { mapping[l as usize - 1] })
            .collect();
        mapping
    }

    /// Re-estimates each alive plane's normal from its supporting pixels in
    /// `recent` and removes planes that drifted beyond the normal threshold.
    /// Pixels of removed planes are zeroed in `recent`.
    pub fn revalidate_normals(&mut self, recent: &mut [Frame]) -> Vec<u32> {
        let start = recent.len().saturating_sub(self.config.history_window);
        let window = &mut recent[start..];
        let mut removed = Vec::new();
        for idx in 0..self.planes.len() {
            let plane = self.planes[idx];
            if !plane.alive {
                continue;
            }
            let mut support: Vec<(usize, usize)> = Vec::new();
            for (fi, frame) in window.iter().enumerate() {
                for (pi, &l) in frame.semantic.iter().enumerate() {
                    if l == plane.id && frame.depth[pi] > 0.0 {
                        support.push((fi, pi));
                    }
                }
            }
            if support.len() < 3 {
                continue;
            }
            let chosen: Vec<(usize, usize)> = if support.len() > self.config.revalidation_samples {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (plane.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, support.len(), self.config.revalidation_samples).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| support[i]).collect()
            } else {
                support
            };
            let points: Vec<Vec3> = chosen
                .iter()
                .filter_map(|&(fi, pi)| {
                    let f = &window[fi];
                    f.backproject_pixel(pi % f.width(), pi / f.width())
                })
                .collect();
            let Ok((fit, _)) = fit_plane_pca(&points) else {
                continue;
            };
            let mut n = fit.normal;
            if n.dot(&plane.normal) < 0.0 {
                n = -n;
            }
            if (n - plane.normal).norm() > self.config.normal_threshold {
                self.planes[idx].alive = false;
                removed.push(plane.id);
            }
        }
        if !removed.is_empty() {
            for frame in window.iter_mut() {
                for l in frame.semantic.iter_mut() {
                    if removed.contains(l) {
                        *l = 0;
                    }
                }
            }
        }
        removed
    }

    /// One line per plane: `id nx ny nz d alive`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.planes {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                p.id,
                fmt_sig(p.normal.x, 9),
                fmt_sig(p.normal.y, 9),
                fmt_sig(p.normal.z, 9),
                fmt_sig(p.offset, 9),
                u8::from(p.alive)
            );
        }
        out
    }

    pub fn from_text(config: RegistryConfig, text: &str) -> Result<Self> {
        let mut planes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = || format!("registry line {}", lineno + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::parse(ctx(), format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(ctx(), e.to_string()));
            let id: u32 = f[0].parse().map_err(|_| Error::parse(ctx(), "bad id"))?;
            let normal = Vec3::new(num(f[1])?, num(f[2])?, num(f[3])?);
            let offset = num(f[4])?;
            let alive = match f[5] {
                "1" => true,
                "0" => false,
                other => return Err(Error::parse(ctx(), format!("bad alive flag {other}"))),
            };
            let n = normal.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::parse(ctx(), format!("normal norm {n}")));
            }
            planes.push(Plane {
                normal: normal / n,
                offset,
                id,
                support_count: 0,
                alive,
            });
        }
        Self::from_planes(config, planes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(config: RegistryConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(config, &text)
    }
}

/// Formats with `digits` significant digits, trimming nothing.
pub(crate) fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{:.*e}", digits - 1, v);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}
