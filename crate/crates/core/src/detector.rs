//! Per-frame plane extraction from a depth image.
//!
//! Grid cells are fitted with PCA and used as seeds; flat neighbouring cells
//! with agreeing planes are merged by region growing, each region is refitted,
//! boundary pixels in non-seed cells are attached by point-to-plane distance,
//! and every surviving plane is checked against the flatness threshold.

use std::collections::VecDeque;

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::geometry::{backproject_unchecked, Intrinsics, Mat3, Plane, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Seed cell width in pixels.
    pub cell_size: usize,
    /// Maximum mean point-to-plane error in meters.
    pub flatness_threshold: f64,
    pub min_support: usize,
    /// Region-growing normal tolerance in radians.
    pub normal_merge_angle: f64,
    pub offset_merge_dist: f64,
    /// Fraction of valid pixels a cell needs to seed.
    pub min_valid_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            cell_size: 16,
            flatness_threshold: 0.005,
            min_support: 512,
            normal_merge_angle: 5f64.to_radians(),
            offset_merge_dist: 0.01,
            min_valid_fraction: 0.8,
        }
    }
}

impl DetectorConfig {
    /// Finer seeding for small (about 64 px) frames, where walls cover a few
    /// hundred pixels.
    pub fn small_frames() -> Self {
        Self {
            cell_size: 8,
            min_support: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flatness_threshold > 0.0) {
            return Err(Error::InvalidConfig("flatness_threshold must be > 0".into()));
        }
        if self.cell_size < 4 {
            return Err(Error::InvalidConfig("cell_size must be >= 4".into()));
        }
        if self.min_support < self.cell_size * self.cell_size {
            return Err(Error::InvalidConfig("min_support must be >= cell_size^2".into()));
        }
        Ok(())
    }
}

/// Planes found in one frame; `semantic` indexes into `planes` (1-based, 0 = none).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDetection {
    pub planes: Vec<Plane>,
    pub semantic: Vec<u32>,
}

impl LocalDetection {
    pub fn empty(pixels: usize) -> Self {
        Self {
            planes: Vec::new(),
            semantic: vec![0; pixels],
        }
    }
}

/// Least-squares plane through `points` and its RMS point-to-plane error.
pub fn fit_plane_pca(points: &[Vec3]) -> Result<(Plane, f64)> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{} points, need >= 3", points.len())));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    if eig.eigenvalues[order[1]] < 1e-12 {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let normal = eig.eigenvectors.column(order[0]).into_owned();
    let plane = Plane::new(normal, normal.dot(&centroid))?;
    let sq = points
        .iter()
        .map(|p| plane.signed_distance(p).powi(2))
        .sum::<f64>();
    Ok((plane, (sq / n).sqrt()))
}

pub fn mean_abs_residual(plane: &Plane, points: &[Vec3]) -> f64 {
    points
        .iter()
        .map(|p| plane.signed_distance(p).abs())
        .sum::<f64>()
        / points.len() as f64
}

/// True iff the mean absolute point-to-plane distance is at most `threshold`.
pub fn validate_flatness(plane: &Plane, points: &[Vec3], threshold: f64) -> bool {
    !points.is_empty() && mean_abs_residual(plane, points) <= threshold
}

struct Cell {
    plane: Plane,
    rms: f64,
    pixels: Vec<usize>,
}

fn planes_agree(a: &Plane, b: &Plane, cos_tol: f64, offset_tol: f64) -> bool {
    let dot = a.normal.dot(&b.normal);
    let offset_b = if dot < 0.0 { -b.offset } else { b.offset };
    dot.abs() >= cos_tol && (a.offset - offset_b).abs() <= offset_tol
}

pub fn detect_planes(
    depth: &[f64],
    intr: &Intrinsics,
    pose: &Pose,
    cfg: &DetectorConfig,
) -> Result<LocalDetection> {
    cfg.validate()?;
    let (w, h) = (intr.width, intr.height);
    if depth.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "depth has {} pixels, intrinsics {}x{}",
            depth.len(),
            w,
            h
        )));
    }
    let points: Vec<Option<Vec3>> = (0..w * h)
        .map(|i| {
            let z = depth[i];
            (z > 0.0).then(|| {
                backproject_unchecked(&Intrinsics::pixel_center(i % w, i / w), z, intr, pose)
            })
        })
        .collect();

    let cs = cfg.cell_size;
    let (gw, gh) = (w / cs, h / cs);
    if gw == 0 || gh == 0 {
        return Ok(LocalDetection::empty(w * h));
    }
    let mut cells: Vec<Option<Cell>> = Vec::with_capacity(gw * gh);
    for cy in 0..gh {
        for cx in 0..gw {
            let mut pixels = Vec::with_capacity(cs * cs);
            let mut pts = Vec::with_capacity(cs * cs);
            for r in cy * cs..(cy + 1) * cs {
                for c in cx * cs..(cx + 1) * cs {
                    let i = r * w + c;
                    if let Some(p) = points[i] {
                        pixels.push(i);
                        pts.push(p);
                    }
                }
            }
            let seed = if (pts.len() as f64) < cfg.min_valid_fraction * (cs * cs) as f64 {
                None
            } else {
                fit_plane_pca(&pts).ok().and_then(|(plane, rms)| {
                    validate_flatness(&plane, &pts, cfg.flatness_threshold)
                        .then_some(Cell { plane, rms, pixels })
                })
            };
            cells.push(seed);
        }
    }

    // Region growing over seed cells, best-fitting seeds first.
    let cos_tol = cfg.normal_merge_angle.cos();
    let mut order: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (cells[a].as_ref().unwrap().rms, cells[b].as_ref().unwrap().rms);
        ra.total_cmp(&rb).then(a.cmp(&b))
    });
    let mut region_of = vec![usize::MAX; cells.len()];
    let mut regions: Vec<Vec<usize>> = Vec::new();
    for &seed in &order {
        if region_of[seed] != usize::MAX {
            continue;
        }
        let rid = regions.len();
        let seed_plane = cells[seed].as_ref().unwrap().plane;
        let mut members = vec![seed];
        region_of[seed] = rid;
        let mut queue = VecDeque::from([seed]);
        while let Some(ci) = queue.pop_front() {
            let (cx, cy) = ((ci % gw) as isize, (ci / gw) as isize);
            for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (cx + dx, cy + dy);
                if nx < 0 || ny < 0 || nx >= gw as isize || ny >= gh as isize {
                    continue;
                }
                let ni = ny as usize * gw + nx as usize;
                if region_of[ni] != usize::MAX {
                    continue;
                }
                if let Some(cell) = &cells[ni] {
                    if planes_agree(&seed_plane, &cell.plane, cos_tol, cfg.offset_merge_dist) {
                        region_of[ni] = rid;
                        members.push(ni);
                        queue.push_back(ni);
                    }
                }
            }
        }
        regions.push(members);
    }

    let mut label = vec![0u32; w * h];
    let mut fitted: Vec<Option<Plane>> = Vec::with_capacity(regions.len());
    for (rid, members) in regions.iter().enumerate() {
        let pts: Vec<Vec3> = members
            .iter()
            .flat_map(|&c| cells[c].as_ref().unwrap().pixels.iter())
            .map(|&i| points[i].unwrap())
            .collect();
        let plane = fit_plane_pca(&pts).ok().map(|(p, _)| p);
        if plane.is_some() {
            for &c in members {
                for &i in &cells[c].as_ref().unwrap().pixels {
                    label[i] = rid as u32 + 1;
                }
            }
        }
        fitted.push(plane);
    }

    // Attach pixels of non-region cells adjacent to a region.
    for cy in 0..gh {
        for cx in 0..gw {
            let ci = cy * gw + cx;
            if region_of[ci] != usize::MAX && fitted[region_of[ci]].is_some() {
                continue;
            }
            let mut candidates: Vec<usize> = Vec::new();
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                    if nx < 0 || ny < 0 || nx >= gw as isize || ny >= gh as isize {
                        continue;
                    }
                    let r = region_of[ny as usize * gw + nx as usize];
                    if r != usize::MAX && fitted[r].is_some() && !candidates.contains(&r) {
                        candidates.push(r);
                    }
                }
            }
            if candidates.is_empty() {
                continue;
            }
            let (r0, r1) = (cy * cs, if cy + 1 == gh { h } else { (cy + 1) * cs });
            let (c0, c1) = (cx * cs, if cx + 1 == gw { w } else { (cx + 1) * cs });
            for r in r0..r1 {
                for c in c0..c1 {
                    let i = r * w + c;
                    let Some(p) = points[i] else { continue };
                    let best = candidates
                        .iter()
                        .map(|&rid| (rid, fitted[rid].unwrap().signed_distance(&p).abs()))
                        .min_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((rid, dist)) = best {
                        if dist <= cfg.flatness_threshold {
                            label[i] = rid as u32 + 1;
                        }
                    }
                }
            }
        }
    }
    // Pixels in the ragged right/bottom margin not covered by any cell.
    attach_margin(&mut label, &points, &fitted, w, h, gw * cs, gh * cs, cfg);

    // Refit, size check and flatness validation.
    let mut support: Vec<Vec<usize>> = vec![Vec::new(); regions.len()];
    for (i, &l) in label.iter().enumerate() {
        if l > 0 {
            support[l as usize - 1].push(i);
        }
    }
    let mut remap = vec![0u32; regions.len()];
    let mut planes = Vec::new();
    for (rid, pix) in support.iter().enumerate() {
        if pix.len() < cfg.min_support {
            continue;
        }
        let pts: Vec<Vec3> = pix.iter().map(|&i| points[i].unwrap()).collect();
        let Ok((mut plane, _)) = fit_plane_pca(&pts) else { continue };
        if !validate_flatness(&plane, &pts, cfg.flatness_threshold) {
            continue;
        }
        plane.id = planes.len() as u32 + 1;
        plane.support_count = pix.len();
        remap[rid] = plane.id;
        planes.push(plane);
    }
    for l in label.iter_mut() {
        if *l > 0 {
            *l = remap[*l as usize - 1];
        }
    }
    Ok(LocalDetection {
        planes,
        semantic: label,
    })
}

#[allow(clippy::too_many_arguments)]
fn attach_margin(
    label: &mut [u32],
    points: &[Option<Vec3>],
    fitted: &[Option<Plane>],
    w: usize,
    h: usize,
    covered_w: usize,
    covered_h: usize,
    cfg: &DetectorConfig,
) {
    if covered_w == w && covered_h == h {
        return;
    }
    for r in 0..h {
        for c in 0..w {
            if r < covered_h && c < covered_w {
                continue;
            }
            let i = r * w + c;
            let Some(p) = points[i] else { continue };
            // nearest covered pixel's label decides the candidate
            let (rr, cc) = (r.min(covered_h.saturating_sub(1)), c.min(covered_w.saturating_sub(1)));
            let l = label[rr * w + cc];
            if l > 0 {
                if let Some(plane) = fitted[l as usize - 1] {
                    if plane.signed_distance(&p).abs() <= cfg.flatness_threshold {
                        label[i] = l;
                    }
                }
            }
        }
    }
}
