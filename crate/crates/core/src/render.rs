//! Hybrid ray marching over the semantic volume and differentiable
//! compositing of color, depth, semantics and opacity.

use rayon::prelude::*;

use crate::edit::{apply_edit, EditState};
use crate::field::{RadianceField, SEMANTIC_DIM};
use crate::geometry::{camera_ray, Intrinsics, Plane, Pose, Ray, Vec3, PARALLEL_EPS};
use crate::registry::Registry;
use crate::volume::{Grid, SemanticVolume, DENSE, EMPTY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Dense-voxel sample spacing as a fraction of the voxel size.
    pub step_fraction: f64,
    /// Maximum number of samples per ray.
    pub max_steps: usize,
    /// Thickness assigned to plane samples.
    pub primitive_delta: f64,
    /// Upper bound on the post-intersection advance, in voxel diagonals.
    pub max_advance: f64,
    /// Samples per field evaluation chunk when rendering images.
    pub chunk_samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step_fraction: 0.5,
            max_steps: 1024,
            primitive_delta: 1.0,
            max_advance: 6.0,
            chunk_samples: 1 << 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Dense,
    Primitive(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub position: Vec3,
    pub t: f64,
    pub delta: f64,
    pub kind: SampleKind,
}

/// Entry and exit parameters of a ray against an axis-aligned box, clipped to `t >= 0`.
pub fn ray_box(ray: &Ray, min: &Vec3, max: &Vec3) -> Option<(f64, f64)> {
    let (o, d) = (ray.origin, ray.dir());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Amanatides-Woo voxel walker yielding `(voxel, t_enter, t_exit)`.
#[derive(Debug, Clone)]
struct Dda {
    voxel: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
    dims: [i64; 3],
}

impl Dda {
    fn new(grid: &Grid, ray: &Ray, t0: f64, t1: f64) -> Self {
        let (o, d) = (ray.origin, ray.dir());
        let p = o + d * t0;
        let dims = grid.dims.map(|v| v as i64);
        let mut voxel = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let f = ((p[a] - grid.origin[a]) / grid.voxel_size).floor() as i64;
            voxel[a] = f.clamp(0, dims[a] - 1);
            if d[a] > 0.0 {
                step[a] = 1;
                let b = grid.origin[a] + (voxel[a] + 1) as f64 * grid.voxel_size;
                t_max[a] = (b - o[a]) / d[a];
                t_delta[a] = grid.voxel_size / d[a];
            } else if d[a] < 0.0 {
                step[a] = -1;
                let b = grid.origin[a] + voxel[a] as f64 * grid.voxel_size;
                t_max[a] = (b - o[a]) / d[a];
                t_delta[a] = -grid.voxel_size / d[a];
            }
        }
        Self {
            voxel,
            step,
            t_max,
            t_delta,
            t: t0,
            t_end: t1,
            dims,
        }
    }

    fn next(&mut self) -> Option<([usize; 3], f64, f64)> {
        if self.t >= self.t_end || (0..3).any(|a| self.voxel[a] < 0 || self.voxel[a] >= self.dims[a]) {
            return None;
        }
        let a = if self.t_max[0] <= self.t_max[1] && self.t_max[0] <= self.t_max[2] {
            0
        } else if self.t_max[1] <= self.t_max[2] {
            1
        } else {
            2
        };
        let exit = self.t_max[a].min(self.t_end);
        let out = (self.voxel.map(|v| v as usize), self.t, exit);
        self.t = exit.max(self.t);
        self.voxel[a] += self.step[a];
        self.t_max[a] += self.t_delta[a];
        Some(out)
    }
}

/// Label used while marching: dead planes behave as dense space.
#[inline]
fn effective_label(label: i32, registry: &Registry) -> i32 {
    if label >= 1 && !registry.is_alive(label as u32) {
        DENSE
    } else {
        label
    }
}

/// Hybrid marching: empty voxels are skipped, dense voxels get evenly spaced
/// samples on a lattice anchored at the volume entry, and each run of
/// primitive voxels gets one sample where the ray meets its plane. The
/// crossing may also fall in the empty voxels next to the run (holes in the
/// primitive shell), as long as the run lies within two voxel diagonals of
/// its plane. A run whose crossing lies past the volume exit behind only free
/// space gets no samples. A run holding another plane's crossing instead (a
/// crease) gets one sample on that plane; any other run without a usable
/// crossing is sampled like dense voxels.
pub fn march_ray(ray: &Ray, vol: &SemanticVolume, registry: &Registry, edit: &EditState, cfg: &RenderConfig) -> Vec<Sample> {
    let grid = &vol.grid;
    let Some((t0, t1)) = ray_box(ray, &grid.min(), &grid.max()) else {
        return Vec::new();
    };
    let step = grid.voxel_size * cfg.step_fraction;
    let psi = grid.psi();
    let d = ray.dir();
    let mut out = Vec::new();
    let mut cursor = t0;
    let mut last_t = f64::NEG_INFINITY;
    // end of the last non-empty voxel
    let mut free_from = t0;
    // current run of primitive voxels and whether it falls back to dense sampling
    let mut run: Option<(i32, bool)> = None;
    let mut dda = Dda::new(grid, ray, t0, t1);
    let dense_fill = |out: &mut Vec<Sample>, last_t: &mut f64, lo: f64, tb: f64| {
        let mut k = ((lo - t0) / step - 0.5).ceil().max(0.0) as usize;
        loop {
            let t = t0 + (k as f64 + 0.5) * step;
            if t >= tb || out.len() >= cfg.max_steps {
                break;
            }
            if t >= lo && t > *last_t {
                out.push(Sample {
                    position: ray.at(t),
                    t,
                    delta: step,
                    kind: SampleKind::Dense,
                });
                *last_t = t;
            }
            k += 1;
        }
    };
    while let Some((v, ta, tb)) = dda.next() {
        if out.len() >= cfg.max_steps {
            break;
        }
        let label = effective_label(vol.label(v), registry);
        if label == EMPTY {
            run = None;
            continue;
        }
        let corridor_start = free_from;
        free_from = tb;
        if label == DENSE {
            run = None;
            dense_fill(&mut out, &mut last_t, ta.max(cursor), tb);
            continue;
        }
        if let Some((l, fallback)) = run {
            if l == label {
                if fallback {
                    dense_fill(&mut out, &mut last_t, ta.max(cursor), tb);
                }
                continue;
            }
        }
        // extent of this run of identically labeled voxels
        let mut look = dda.clone();
        let mut run_end = tb;
        let mut corridor_end = t1;
        let mut in_run = true;
        while let Some((w, wa, wb)) = look.next() {
            let l = effective_label(vol.label(w), registry);
            if in_run && l == label {
                run_end = wb;
                continue;
            }
            in_run = false;
            if l != EMPTY && l != label {
                corridor_end = wa;
                break;
            }
        }
        let plane = registry.get(label as u32).expect("alive label has a plane");
        let (o_src, d_src) = match edit.transform(edit.label(v)) {
            Some(tr) => (tr.apply_point(&ray.origin), tr.apply_dir(&d)),
            None => (ray.origin, d),
        };
        let hit = plane_hit(&o_src, &d_src, plane);
        let near_run = |t_hit: f64| {
            let x = o_src + d_src * t_hit.clamp(ta, run_end);
            plane.signed_distance(&x).abs() <= 2.0 * psi
        };
        let inside = |t_hit: f64| t_hit >= ta && t_hit < run_end;
        let in_corridor = |t_hit: f64| t_hit >= corridor_start.max(cursor) && t_hit < corridor_end && near_run(t_hit);
        let own = hit.filter(|&t| inside(t) || in_corridor(t));
        // plane already crossed and sampled before this run
        let crossed = hit.is_some_and(|t| t < ta && t < cursor);
        // the ray leaves the volume through free space before meeting the plane
        let exits = hit.is_some_and(|t| t >= t1 && corridor_end >= t1 && near_run(t));
        // at a crease the run may hold a neighbouring plane's crossing, possibly first
        let crease = crease_crossing(ray, &o_src, &d_src, vol, registry, label, ta.max(cursor), run_end);
        let pick = match (own, crease) {
            (Some(t), Some((id, tc))) if tc < t => Some((id, tc)),
            (Some(t), _) => Some((label as u32, t)),
            (None, c) => c,
        };
        match pick {
            Some((id, t_hit)) => {
                run = Some((label, false));
                if t_hit < cursor || t_hit <= last_t {
                    continue;
                }
                out.push(Sample {
                    position: ray.at(t_hit),
                    t: t_hit,
                    delta: cfg.primitive_delta,
                    kind: SampleKind::Primitive(id),
                });
                last_t = t_hit;
                let normal = registry.get(id).expect("alive label has a plane").normal;
                let cos = d_src.dot(&normal).abs();
                cursor = t_hit + (psi / cos).min(cfg.max_advance * psi);
            }
            None if crossed || exits => run = Some((label, false)),
            // occupied without a usable crossing, so sample densely
            None => {
                run = Some((label, true));
                dense_fill(&mut out, &mut last_t, ta.max(cursor), tb);
            }
        }
    }
    out
}

#[inline]
/// Nearest crossing in `[lo, hi)` of another alive plane that has a labeled
/// voxel touching the crossing point.
#[allow(clippy::too_many_arguments)]
fn crease_crossing(
    ray: &Ray,
    o_src: &Vec3,
    d_src: &Vec3,
    vol: &SemanticVolume,
    registry: &Registry,
    label: i32,
    lo: f64,
    hi: f64,
) -> Option<(u32, f64)> {
    let dims = vol.grid.dims;
    let touches = |v: [usize; 3], id: i32| {
        (0..27).any(|k| {
            let mut w = [0usize; 3];
            for a in 0..3 {
                let off = (k / 3usize.pow(a as u32)) % 3;
                let c = v[a] as isize + off as isize - 1;
                if c < 0 || c >= dims[a] as isize {
                    return false;
                }
                w[a] = c as usize;
            }
            effective_label(vol.label(w), registry) == id
        })
    };
    registry
        .planes()
        .iter()
        .filter(|p| p.alive && p.id as i32 != label)
        .filter_map(|p| {
            let t = plane_hit(o_src, d_src, p)?;
            if t < lo || t >= hi || t <= 0.0 {
                return None;
            }
            let v = vol.grid.voxel_of(&ray.at(t))?;
            touches(v, p.id as i32).then_some((p.id, t))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

fn plane_hit(o: &Vec3, d: &Vec3, plane: &Plane) -> Option<f64> {
    let denom = d.dot(&plane.normal);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (plane.offset - o.dot(&plane.normal)) / denom;
    (t > 0.0).then_some(t)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub semantic: [f64; SEMANTIC_DIM],
    pub opacity: f64,
    /// `w_i = T_i alpha_i`
    pub weights: Vec<f64>,
    /// `T_i`, the transmittance before sample `i`
    pub transmittance: Vec<f64>,
}

/// Volume rendering of one ray's samples. `color` holds 3 and `semantic`
/// holds 4 values per sample.
pub fn composite(t: &[f64], delta: &[f64], sigma: &[f64], color: &[f64], semantic: &[f64]) -> RenderResult {
    let n = t.len();
    debug_assert!(delta.len() == n && sigma.len() == n && color.len() == 3 * n && semantic.len() == SEMANTIC_DIM * n);
    let mut r = RenderResult {
        weights: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        ..Default::default()
    };
    let mut trans = 1.0;
    for i in 0..n {
        let alpha = -(-sigma[i] * delta[i]).exp_m1();
        let w = trans * alpha;
        for k in 0..3 {
            r.color[k] += w * color[3 * i + k];
        }
        for k in 0..SEMANTIC_DIM {
            r.semantic[k] += w * semantic[SEMANTIC_DIM * i + k];
        }
        r.depth += w * t[i];
        r.opacity += w;
        r.weights.push(w);
        r.transmittance.push(trans);
        trans *= (-sigma[i] * delta[i]).exp();
    }
    r
}

/// Upstream gradients of a scalar loss with respect to one ray's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayGrad {
    pub color: [f64; 3],
    pub depth: f64,
    pub semantic: [f64; SEMANTIC_DIM],
    pub opacity: f64,
}

impl RayGrad {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Reverse-mode gradients of the composite with respect to each sample's
/// density, color and semantics. Writes into `dsigma` (n), `dcolor` (3n)
/// and `dsemantic` (4n).
#[allow(clippy::too_many_arguments)]
pub fn composite_backward(
    result: &RenderResult,
    g: &RayGrad,
    t: &[f64],
    delta: &[f64],
    sigma: &[f64],
    color: &[f64],
    semantic: &[f64],
    dsigma: &mut [f64],
    dcolor: &mut [f64],
    dsemantic: &mut [f64],
) {
    let n = t.len();
    // e_i = dL/dy . y_i for the accumulated quantity y = (c, t, s, 1)
    let e = |i: usize| {
        let mut v = g.depth * t[i] + g.opacity;
        for k in 0..3 {
            v += g.color[k] * color[3 * i + k];
        }
        for k in 0..SEMANTIC_DIM {
            v += g.semantic[k] * semantic[SEMANTIC_DIM * i + k];
        }
        v
    };
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let w = result.weights[i];
        let ei = e(i);
        let t_next = result.transmittance[i] * (-sigma[i] * delta[i]).exp();
        dsigma[i] = delta[i] * (t_next * ei - suffix);
        suffix += w * ei;
        for k in 0..3 {
            dcolor[3 * i + k] = w * g.color[k];
        }
        for k in 0..SEMANTIC_DIM {
            dsemantic[SEMANTIC_DIM * i + k] = w * g.semantic[k];
        }
    }
}

/// Samples of many rays, flattened, with field query inputs already mapped
/// through the edit volume.
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    /// `offsets[r]..offsets[r + 1]` indexes ray `r`'s samples
    pub offsets: Vec<usize>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub query_points: Vec<Vec3>,
    pub query_dirs: Vec<Vec3>,
}

impl SampleBatch {
    pub fn from_samples(rays: &[Ray], samples: &[Vec<Sample>], edit: &EditState) -> Self {
        let total: usize = samples.iter().map(Vec::len).sum();
        let mut b = SampleBatch {
            offsets: Vec::with_capacity(rays.len() + 1),
            t: Vec::with_capacity(total),
            delta: Vec::with_capacity(total),
            query_points: Vec::with_capacity(total),
            query_dirs: Vec::with_capacity(total),
        };
        b.offsets.push(0);
        for (ray, list) in rays.iter().zip(samples) {
            let d = ray.dir();
            for s in list {
                let (x, dq) = apply_edit(edit, &s.position, &d);
                b.t.push(s.t);
                b.delta.push(s.delta);
                b.query_points.push(x);
                b.query_dirs.push(dq);
            }
            b.offsets.push(b.t.len());
        }
        b
    }

    pub fn rays(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }
}

pub fn march_rays(
    rays: &[Ray],
    vol: &SemanticVolume,
    registry: &Registry,
    edit: &EditState,
    cfg: &RenderConfig,
) -> Vec<Vec<Sample>> {
    rays.par_iter().map(|r| march_ray(r, vol, registry, edit, cfg)).collect()
}

/// Forward-only rendering of arbitrary rays, chunked to bound memory.
pub fn render_rays(
    rays: &[Ray],
    vol: &SemanticVolume,
    registry: &Registry,
    field: &RadianceField,
    edit: &EditState,
    cfg: &RenderConfig,
) -> Vec<RenderResult> {
    let samples = march_rays(rays, vol, registry, edit, cfg);
    let mut out = Vec::with_capacity(rays.len());
    let mut start = 0;
    while start < rays.len() {
        let mut end = start;
        let mut count = 0;
        while end < rays.len() && (end == start || count + samples[end].len() <= cfg.chunk_samples) {
            count += samples[end].len();
            end += 1;
        }
        let batch = SampleBatch::from_samples(&rays[start..end], &samples[start..end], edit);
        let cache = field.forward(&batch.query_points, &batch.query_dirs);
        let sem = semantic_rows(&cache);
        for r in 0..batch.rays() {
            let s = batch.range(r);
            out.push(composite(
                &batch.t[s.clone()],
                &batch.delta[s.clone()],
                &cache.sigma[s.clone()],
                &cache.color[3 * s.start..3 * s.end],
                &sem[SEMANTIC_DIM * s.start..SEMANTIC_DIM * s.end],
            ));
        }
        start = end;
    }
    out
}

/// Semantic outputs of a forward pass, 4 per sample.
pub fn semantic_rows(cache: &crate::field::FieldCache) -> Vec<f64> {
    (0..cache.len).flat_map(|i| cache.semantic(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    /// camera z-depth, meters
    pub depth: Vec<f64>,
    pub semantic: Vec<[f64; SEMANTIC_DIM]>,
    pub opacity: Vec<f64>,
    pub samples: usize,
}

pub fn render_image(
    pose: &Pose,
    intr: &Intrinsics,
    vol: &SemanticVolume,
    registry: &Registry,
    field: &RadianceField,
    edit: &EditState,
    cfg: &RenderConfig,
) -> RenderedImage {
    let (w, h) = (intr.width, intr.height);
    let mut rays = Vec::with_capacity(w * h);
    let mut z_per_t = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let (ray, k) = camera_ray(pose, intr, &Intrinsics::pixel_center(col, row));
            rays.push(ray);
            z_per_t.push(k);
        }
    }
    let samples = march_rays(&rays, vol, registry, edit, cfg).iter().map(Vec::len).sum();
    let results = render_rays(&rays, vol, registry, field, edit, cfg);
    RenderedImage {
        width: w,
        height: h,
        color: results.iter().map(|r| r.color).collect(),
        depth: results.iter().zip(&z_per_t).map(|(r, k)| r.depth * k).collect(),
        semantic: results.iter().map(|r| r.semantic).collect(),
        opacity: results.iter().map(|r| r.opacity).collect(),
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::RigidTransform;
    use crate::field::FieldConfig;
    use crate::geometry::{Mat3, Plane};
    use crate::registry::RegistryConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar accumulation, written as a running product.
    fn reference_composite(t: &[f64], delta: &[f64], sigma: &[f64], c: &[f64]) -> (f64, f64, f64) {
        let (mut acc_c, mut acc_d, mut acc_o) = (0.0, 0.0, 0.0);
        for i in 0..t.len() {
            let mut trans = 1.0;
            for j in 0..i {
                trans *= 1.0 - (1.0 - (-sigma[j] * delta[j]).exp());
            }
            let a = 1.0 - (-sigma[i] * delta[i]).exp();
            acc_c += trans * a * c[i];
            acc_d += trans * a * t[i];
            acc_o += trans * a;
        }
        (acc_c, acc_d, acc_o)
    }

    fn scalar_color(c: &[f64]) -> Vec<f64> {
        c.iter().flat_map(|&v| [v, 0.0, 0.0]).collect()
    }

    #[test]
    fn zero_density_renders_nothing() {
        let r = composite(&[1.0, 2.0], &[0.5, 0.5], &[0.0, 0.0], &[1.0; 6], &[1.0; 8]);
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.depth, 0.0);
        assert_eq!(r.semantic, [0.0; 4]);
        assert_eq!(r.opacity, 0.0);
    }

    #[test]
    fn single_unit_sample() {
        let r = composite(&[1.0], &[1.0], &[1.0], &[0.3, 0.6, 0.9], &[0.0; 4]);
        let a = 1.0 - (-1.0f64).exp();
        assert!((a - 0.632121).abs() < 1e-6);
        assert!((r.color[1] - a * 0.6).abs() < 1e-15);
    }

    #[test]
    fn three_sample_ray_matches_reference() {
        let (t, delta, sigma) = ([0.1, 0.2, 0.3], [0.1; 3], [0.5, 1.0, 2.0]);
        let r = composite(&t, &delta, &sigma, &scalar_color(&[1.0, 2.0, 3.0]), &[0.0; 12]);
        let (c, d, o) = reference_composite(&t, &delta, &sigma, &[1.0, 2.0, 3.0]);
        assert!((r.color[0] - c).abs() < 1e-12);
        assert!((r.depth - d).abs() < 1e-12);
        assert!((r.opacity - o).abs() < 1e-12);
    }

    #[test]
    fn saturating_sample_gives_full_opacity() {
        let r = composite(&[1.0, 2.0], &[0.1, 1.0], &[0.2, 30.0], &[0.0; 6], &[0.0; 8]);
        assert!(r.opacity >= 1.0 - 1e-12 && r.opacity <= 1.0);
    }

    fn random_ray_values(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut acc = rng.gen_range(0.1..1.0);
        for _ in 0..n {
            acc += rng.gen_range(0.01..0.5);
            t.push(acc);
        }
        let delta = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sigma = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let color = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sem = (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (t, delta, sigma, color, sem)
    }

    #[test]
    fn backward_single_sample_closed_form() {
        let (sigma, delta, c) = (0.7, 0.4, 0.8);
        let r = composite(&[1.0], &[delta], &[sigma], &[c, 0.0, 0.0], &[0.0; 4]);
        let g = RayGrad {
            color: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        let (mut ds, mut dc, mut dse) = ([0.0], [0.0; 3], [0.0; 4]);
        composite_backward(&r, &g, &[1.0], &[delta], &[sigma], &[c, 0.0, 0.0], &[0.0; 4], &mut ds, &mut dc, &mut dse);
        assert!((ds[0] - delta * (-sigma * delta).exp() * c).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let (t, delta, mut sigma, mut color, mut sem) = random_ray_values(&mut rng, n);
            let g = RayGrad {
                color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                depth: rng.gen_range(-1.0..1.0),
                semantic: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                opacity: rng.gen_range(-1.0..1.0),
            };
            let loss = |sigma: &[f64], color: &[f64], sem: &[f64]| {
                let r = composite(&t, &delta, sigma, color, sem);
                (0..3).map(|k| g.color[k] * r.color[k]).sum::<f64>()
                    + g.depth * r.depth
                    + (0..4).map(|k| g.semantic[k] * r.semantic[k]).sum::<f64>()
                    + g.opacity * r.opacity
            };
            let r = composite(&t, &delta, &sigma, &color, &sem);
            let (mut ds, mut dc, mut dse) = (vec![0.0; n], vec![0.0; 3 * n], vec![0.0; 4 * n]);
            composite_backward(&r, &g, &t, &delta, &sigma, &color, &sem, &mut ds, &mut dc, &mut dse);
            let h = 1e-6;
            let check = |an: f64, up: f64, down: f64| {
                let fd = (up - down) / (2.0 * h);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-4, "analytic {an} vs fd {fd}");
            };
            for i in 0..n {
                let s0 = sigma[i];
                sigma[i] = s0 + h;
                let up = loss(&sigma, &color, &sem);
                sigma[i] = s0 - h;
                let down = loss(&sigma, &color, &sem);
                sigma[i] = s0;
                check(ds[i], up, down);
                for k in 0..3 {
                    let c0 = color[3 * i + k];
                    color[3 * i + k] = c0 + h;
                    let up = loss(&sigma, &color, &sem);
                    color[3 * i + k] = c0 - h;
                    let down = loss(&sigma, &color, &sem);
                    color[3 * i + k] = c0;
                    check(dc[3 * i + k], up, down);
                }
                for k in 0..4 {
                    let v0 = sem[4 * i + k];
                    sem[4 * i + k] = v0 + h;
                    let up = loss(&sigma, &color, &sem);
                    sem[4 * i + k] = v0 - h;
                    let down = loss(&sigma, &color, &sem);
                    sem[4 * i + k] = v0;
                    check(dse[4 * i + k], up, down);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (t, delta, sigma, color, sem) = random_ray_values(&mut rng, 4);
        let r = composite(&t, &delta, &sigma, &color, &sem);
        let (mut ds, mut dc, mut dse) = (vec![1.0; 4], vec![1.0; 12], vec![1.0; 16]);
        composite_backward(&r, &RayGrad::default(), &t, &delta, &sigma, &color, &sem, &mut ds, &mut dc, &mut dse);
        assert!(ds.iter().chain(&dc).chain(&dse).all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn transmittance_is_monotone_and_opacity_bounded(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, delta, sigma, color, sem) = random_ray_values(&mut rng, n);
            let r = composite(&t, &delta, &sigma, &color, &sem);
            for w in r.transmittance.windows(2) {
                proptest::prop_assert!(w[1] <= w[0]);
            }
            proptest::prop_assert!((0.0..=1.0).contains(&r.opacity));
            let sum: f64 = r.weights.iter().sum();
            proptest::prop_assert!((sum - r.opacity).abs() < 1e-12);
        }
    }

    // --- marching ---

    fn slab_volume(label_at: impl Fn([usize; 3]) -> i32) -> SemanticVolume {
        let grid = Grid::new([20, 20, 20], Vec3::zeros(), 0.2).unwrap();
        let labels = (0..grid.len()).map(|i| label_at(grid.coords(i))).collect();
        SemanticVolume::from_labels(grid, labels).unwrap()
    }

    fn wall_registry(z: f64) -> Registry {
        Registry::from_planes(RegistryConfig::default(), vec![Plane::new(Vec3::z(), z).unwrap().with_id(1)]).unwrap()
    }

    #[test]
    fn empty_volume_has_no_samples() {
        let vol = slab_volume(|_| EMPTY);
        let reg = Registry::new(RegistryConfig::default());
        let ray = Ray::new(Vec3::new(2.0, 2.0, -1.0), Vec3::z()).unwrap();
        let s = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
        assert!(s.is_empty());
    }

    #[test]
    fn single_slab_gives_one_plane_sample() {
        // plane z = 2.1 passes through the center of voxel layer 10
        let vol = slab_volume(|v| if v[2] == 10 || v[2] == 9 { 1 } else { EMPTY });
        let reg = wall_registry(2.1);
        let ray = Ray::new(Vec3::new(1.03, 2.07, -1.0), Vec3::z()).unwrap();
        let s = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
        assert_eq!(s.len(), 1);
        assert!((s[0].position.z - 2.1).abs() < 1e-12);
        assert_eq!(s[0].kind, SampleKind::Primitive(1));
        assert_eq!(s[0].delta, 1.0);
    }

    #[test]
    fn oblique_ray_through_slab_is_sampled_once() {
        let vol = slab_volume(|v| if (8..=11).contains(&v[2]) { 1 } else { EMPTY });
        let reg = wall_registry(2.1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let o = Vec3::new(rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), -0.5);
            let d = Vec3::new(rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35), 1.0);
            let ray = Ray::new(o, d).unwrap();
            let s = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            assert_eq!(s.len(), 1);
        }
    }

    #[test]
    fn dead_plane_voxels_march_as_dense() {
        let vol = slab_volume(|v| if v[2] == 10 { 1 } else { EMPTY });
        let mut reg = wall_registry(2.1);
        reg.mark_dead(1).unwrap();
        let ray = Ray::new(Vec3::new(1.03, 2.07, -1.0), Vec3::z()).unwrap();
        let s = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|x| x.kind == SampleKind::Dense));
    }

    /// Reference marcher: walks the ray in steps of voxel/8 and reads labels
    /// pointwise instead of traversing voxels.
    fn fine_step_oracle(ray: &Ray, vol: &SemanticVolume, reg: &Registry) -> Vec<(f64, SampleKind)> {
        let grid = &vol.grid;
        let (t0, t1) = ray_box(ray, &grid.min(), &grid.max()).unwrap();
        let fine = grid.voxel_size / 8.0;
        let step = grid.voxel_size / 2.0;
        let label_at = |t: f64| vol.label_at(&ray.at(t));
        let mut out = Vec::new();
        // (plane sample t, cursor after it)
        let mut advances: Vec<(f64, f64)> = Vec::new();
        let mut dense_runs: Vec<(i32, f64, f64)> = Vec::new();
        let mut t = t0 + fine / 2.0;
        let mut prev = EMPTY;
        // end of the last occupied stretch
        let mut occupied_end = t0;
        while t < t1 {
            let l = label_at(t);
            if l >= 1 && prev != l {
                // run extent along the ray
                let start = t - fine / 2.0;
                let mut end = t;
                while end < t1 && label_at(end) == l {
                    end += fine;
                }
                let mut next = end;
                while next < t1 && (label_at(next) == EMPTY || label_at(next) == l) {
                    next += fine;
                }
                let next = if next < t1 { next - fine / 2.0 } else { t1 };
                let end = end - fine / 2.0;
                let cursor = advances.last().map_or(t0, |a| a.1);
                let p = reg.get(l as u32).unwrap();
                let th = (p.offset - p.normal.dot(&ray.origin)) / p.normal.dot(&ray.dir());
                let near = p.signed_distance(&ray.at(th.clamp(start, end))).abs() <= 2.0 * grid.psi();
                let corridor = th >= occupied_end.max(cursor) && th < next && near;
                if (th > start - fine && th < end + fine) || corridor {
                    if th >= cursor {
                        out.push((th, SampleKind::Primitive(l as u32)));
                        advances.push((th, th + grid.psi() / p.normal.dot(&ray.dir()).abs()));
                    }
                } else if !(th < start && th < cursor) && !(th >= t1 && next >= t1 && near) {
                    dense_runs.push((l, start, end));
                }
            }
            if l != EMPTY {
                occupied_end = t + fine / 2.0;
            }
            prev = l;
            t += fine;
        }
        let cursor_at = |tk: f64| advances.iter().filter(|a| a.0 < tk).map(|a| a.1).fold(t0, f64::max);
        // dense lattice points inside dense voxels or fallback runs past the cursor
        let mut k = 0;
        loop {
            let tk = t0 + (k as f64 + 0.5) * step;
            if tk >= t1 {
                break;
            }
            let lk = label_at(tk);
            let in_fallback = dense_runs.iter().any(|r| lk == r.0 && tk >= r.1 - fine && tk < r.2 + fine);
            if (lk == DENSE || in_fallback) && tk >= cursor_at(tk) {
                out.push((tk, SampleKind::Dense));
            }
            k += 1;
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }

    #[test]
    fn crossing_in_a_shell_hole_still_gives_one_plane_sample() {
        // only layer 9 is labeled; the plane itself runs through empty layer 10
        let vol = slab_volume(|v| if v[2] == 9 { 1 } else { EMPTY });
        let reg = wall_registry(2.1);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let o = Vec3::new(rng.gen_range(1.5..2.5), rng.gen_range(1.5..2.5), 0.05);
            let d = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
            let ray = Ray::new(o, d).unwrap();
            let got = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            assert_eq!(got.len(), 1, "ray {o:?} {d:?}");
            assert_eq!(got[0].kind, SampleKind::Primitive(1));
            assert!((got[0].position.z - 2.1).abs() < 1e-9);
            assert_eq!(fine_step_oracle(&ray, &vol, &reg).len(), 1);
        }
    }

    #[test]
    fn crease_run_samples_the_neighbouring_plane() {
        // floor-like plane z = 2.0 labels layers 9..=10 up to x layer 10; the
        // wall x = 2.1 labels x layers 9..=10 below; the corner belongs to the floor
        let vol = slab_volume(|v| {
            if (v[2] == 9 || v[2] == 10) && v[0] <= 10 {
                1
            } else if (v[0] == 9 || v[0] == 10) && v[2] <= 8 {
                2
            } else {
                EMPTY
            }
        });
        let reg = Registry::from_planes(
            RegistryConfig::default(),
            vec![
                Plane::new(Vec3::z(), 2.0).unwrap().with_id(1),
                Plane::new(Vec3::x(), 2.1).unwrap().with_id(2),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let o = Vec3::new(0.5, rng.gen_range(1.0..3.0), rng.gen_range(1.82..1.86));
            let d = Vec3::new(1.0, rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.05));
            let ray = Ray::new(o, d).unwrap();
            let got = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            assert_eq!(got.len(), 1, "ray {o:?} {d:?}");
            assert_eq!(got[0].kind, SampleKind::Primitive(2));
            assert!((got[0].position.x - 2.1).abs() < 1e-9);
        }
    }

    #[test]
    fn run_without_its_crossing_is_sampled_densely() {
        // P layers 9..=10 labeled with a plane that lies far beyond them
        let vol = slab_volume(|v| if v[2] == 9 || v[2] == 10 { 1 } else { EMPTY });
        let reg = wall_registry(3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let o = Vec3::new(rng.gen_range(1.5..2.5), rng.gen_range(1.5..2.5), 0.05);
            let d = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
            let ray = Ray::new(o, d).unwrap();
            let got = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            let want = fine_step_oracle(&ray, &vol, &reg);
            assert!(got.len() >= 3);
            assert!(got.iter().all(|s| s.kind == SampleKind::Dense && s.position.z >= 1.8 && s.position.z <= 2.2));
            assert_eq!(got.len(), want.len(), "ray {o:?} {d:?}");
            for (g, (t, _)) in got.iter().zip(&want) {
                assert!((g.t - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_wall_dense_matches_fine_step_oracle() {
        // E for z < 1.8, P wall layers 9..=10, D for 6 psi behind
        let psi = 3f64.sqrt() * 0.2;
        let vol = slab_volume(|v| {
            let zc = (v[2] as f64 + 0.5) * 0.2;
            if v[2] == 9 || v[2] == 10 {
                1
            } else if zc > 2.2 && zc < 2.2 + 6.0 * psi {
                DENSE
            } else {
                EMPTY
            }
        });
        let reg = wall_registry(2.1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let o = Vec3::new(rng.gen_range(1.5..2.5), rng.gen_range(1.5..2.5), 0.05);
            let d = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0);
            let ray = Ray::new(o, d).unwrap();
            let got = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            let want = fine_step_oracle(&ray, &vol, &reg);
            assert_eq!(got.len(), want.len(), "ray {o:?} {d:?}");
            for (g, (t, kind)) in got.iter().zip(&want) {
                assert!((g.t - t).abs() < 1e-9);
                assert_eq!(g.kind, *kind);
                let want_delta = if *kind == SampleKind::Dense { 0.1 } else { 1.0 };
                assert_eq!(g.delta, want_delta);
            }
        }
    }

    #[test]
    fn samples_are_strictly_increasing_and_capped() {
        let vol = slab_volume(|_| DENSE);
        let reg = Registry::new(RegistryConfig::default());
        let cfg = RenderConfig {
            max_steps: 17,
            ..Default::default()
        };
        let ray = Ray::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 0.9, 0.8)).unwrap();
        let s = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &cfg);
        assert_eq!(s.len(), 17);
        let all = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
        assert!(all.len() > 17);
        for w in all.windows(2) {
            assert!(w[1].t > w[0].t);
        }
        assert_eq!(&all[..17], &s[..]);
    }

    #[test]
    fn dense_quadrature_converges_to_fine_reference() {
        // smooth density and color; coarse lattice vs. a 100x finer Riemann sum
        let sigma = |x: &Vec3| 0.8 + 0.5 * (2.0 * x.x).sin() * (1.5 * x.y).cos() + 0.3 * x.z;
        let color = |x: &Vec3| 0.5 + 0.4 * (x.x + 0.5 * x.z).sin();
        let integrate = |ray: &Ray, t0: f64, t1: f64, step: f64| {
            let n = ((t1 - t0) / step).floor() as usize;
            let ts: Vec<f64> = (0..n).map(|k| t0 + (k as f64 + 0.5) * step).collect();
            let s: Vec<f64> = ts.iter().map(|&t| sigma(&ray.at(t))).collect();
            let c: Vec<f64> = ts.iter().flat_map(|&t| [color(&ray.at(t)), 0.0, 0.0]).collect();
            composite(&ts, &vec![step; n], &s, &c, &vec![0.0; 4 * n]).color[0]
        };
        let vol = slab_volume(|_| DENSE);
        let reg = Registry::new(RegistryConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let o = Vec3::new(rng.gen_range(0.5..3.5), rng.gen_range(0.5..3.5), -0.5);
            let ray = Ray::new(o, Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 1.0)).unwrap();
            let samples = march_ray(&ray, &vol, &reg, &EditState::new(vol.grid), &RenderConfig::default());
            let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
            let s: Vec<f64> = samples.iter().map(|x| sigma(&x.position)).collect();
            let c: Vec<f64> = samples.iter().flat_map(|x| [color(&x.position), 0.0, 0.0]).collect();
            let delta: Vec<f64> = samples.iter().map(|x| x.delta).collect();
            let coarse = composite(&t, &delta, &s, &c, &vec![0.0; 4 * t.len()]).color[0];
            let (t0, _) = ray_box(&ray, &vol.grid.min(), &vol.grid.max()).unwrap();
            let tn = t0 + t.len() as f64 * 0.1;
            let fine = integrate(&ray, t0, tn, 0.001);
            assert!((coarse - fine).abs() / fine < 0.01, "{coarse} vs {fine}");
        }
    }

    #[test]
    fn edited_plane_is_intersected_in_source_frame() {
        // wall at z = 2.1 moved to z = 3.1: the destination voxels query the source
        let mut vol = slab_volume(|v| if v[2] == 10 { 1 } else { EMPTY });
        let reg = wall_registry(2.1);
        let mut edit = EditState::new(vol.grid);
        let motion = RigidTransform::new(Mat3::identity(), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        crate::edit::transform_primitive(&mut vol, &mut edit, &reg, 1, &motion).unwrap();
        let ray = Ray::new(Vec3::new(1.03, 2.07, -1.0), Vec3::z()).unwrap();
        let s = march_ray(&ray, &vol, &reg, &edit, &RenderConfig::default());
        assert_eq!(s.len(), 1);
        assert!((s[0].position.z - 3.1).abs() < 1e-12);
        let batch = SampleBatch::from_samples(&[ray], &[s], &edit);
        assert!((batch.query_points[0].z - 2.1).abs() < 1e-12);
    }

    #[test]
    fn all_empty_volume_renders_black() {
        let vol = slab_volume(|_| EMPTY);
        let reg = Registry::new(RegistryConfig::default());
        let field = RadianceField::new(FieldConfig::default(), vol.grid.min(), vol.grid.max(), 0).unwrap();
        let intr = Intrinsics::from_fov(8, 6, 1.0).unwrap();
        let pose = Pose::look_at(Vec3::new(2.0, 2.0, -1.0), Vec3::new(2.0, 2.0, 2.0), Vec3::y()).unwrap();
        let img = render_image(&pose, &intr, &vol, &reg, &field, &EditState::new(vol.grid), &RenderConfig::default());
        assert!(img.color.iter().all(|c| *c == [0.0; 3]));
        assert!(img.opacity.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn zero_edit_volume_renders_bit_identical() {
        let vol = slab_volume(|v| if v[2] >= 12 { DENSE } else { EMPTY });
        let reg = Registry::new(RegistryConfig::default());
        let field = RadianceField::new(FieldConfig::default(), vol.grid.min(), vol.grid.max(), 1).unwrap();
        let intr = Intrinsics::from_fov(8, 8, 1.0).unwrap();
        let pose = Pose::look_at(Vec3::new(2.0, 2.0, -1.0), Vec3::new(2.0, 2.0, 2.0), Vec3::y()).unwrap();
        let cfg = RenderConfig::default();
        let plain = render_image(&pose, &intr, &vol, &reg, &field, &EditState::new(vol.grid), &cfg);
        let mut edit = EditState::new(vol.grid);
        edit.push_transform(RigidTransform::identity());
        edit.set_label([0, 0, 0], 0).unwrap();
        let edited = render_image(&pose, &intr, &vol, &reg, &field, &edit, &cfg);
        assert_eq!(plain, edited);
        assert_eq!(plain, render_image(&pose, &intr, &vol, &reg, &field, &EditState::new(vol.grid), &cfg));
    }
}
