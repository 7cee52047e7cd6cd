//! Procedural ground-truth scenes: textured rectangles plus sphere and box
//! props, ray cast in closed form.

use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Frame, Intrinsics, Mat3, Plane, Pose, Vec3};
use crate::volume::Grid;

/// Low-frequency sinusoid texture over in-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Albedo {
    pub base: [f64; 3],
    /// Relative modulation depth in `[0, 1]`.
    pub amplitude: f64,
    /// Cycles per meter.
    pub frequency: f64,
    pub phase: f64,
}

impl Albedo {
    pub fn flat(base: [f64; 3]) -> Self {
        Self {
            base,
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
        }
    }

    pub fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        let s = (tau * self.frequency * u + self.phase).sin() * (tau * self.frequency * v + 0.5 * self.phase).cos();
        let k = 1.0 - self.amplitude * 0.5 * (1.0 - s);
        self.base.map(|b| b * k)
    }
}

/// Finite rectangle `center + a u_axis + b v_axis` with `|a| <= half_u`, `|b| <= half_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub plane: Plane,
    pub center: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub albedo: Albedo,
}

impl Rect {
    pub fn new(center: Vec3, u_axis: Vec3, v_axis: Vec3, half_u: f64, half_v: f64, albedo: Albedo) -> Result<Self> {
        let (u, v) = (u_axis.normalize(), v_axis.normalize());
        if u.dot(&v).abs() > 1e-9 {
            return Err(Error::Degenerate("rectangle axes are not orthogonal".into()));
        }
        let n = u.cross(&v);
        Ok(Self {
            plane: Plane::new(n, n.dot(&center))?,
            center,
            u_axis: u,
            v_axis: v,
            half_u,
            half_v,
            albedo,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prop {
    Sphere { center: Vec3, radius: f64, albedo: [f64; 3] },
    /// Axis-aligned box.
    Cuboid { center: Vec3, half: Vec3, albedo: [f64; 3] },
}

impl Prop {
    pub fn translated(&self, offset: Vec3) -> Self {
        match *self {
            Prop::Sphere { center, radius, albedo } => Prop::Sphere {
                center: center + offset,
                radius,
                albedo,
            },
            Prop::Cuboid { center, half, albedo } => Prop::Cuboid {
                center: center + offset,
                half,
                albedo,
            },
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Prop::Sphere { center, radius, .. } => (center - Vec3::repeat(radius), center + Vec3::repeat(radius)),
            Prop::Cuboid { center, half, .. } => (center - half, center + half),
        }
    }
}

/// Lambert-plus-ambient shading with a directional light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    /// Unit vector pointing towards the light.
    pub direction: Vec3,
    pub ambient: f64,
}

impl Light {
    pub fn shade(&self, normal: &Vec3) -> f64 {
        self.ambient + (1.0 - self.ambient) * normal.dot(&self.direction).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub planes: Vec<Rect>,
    pub props: Vec<Prop>,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub light: Light,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Camera z-depth when cast through [`SceneSpec::cast_pixel`], otherwise ray parameter.
    pub depth: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub color: [f64; 3],
    /// 1-based ground-truth plane index, 0 for props.
    pub semantic: u32,
}

/// Camera arc used for the default training trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub center: Vec3,
    pub radius: f64,
    pub height: f64,
    pub half_angle: f64,
    pub target: Vec3,
}

impl Arc {
    pub fn eye(&self, angle: f64) -> Vec3 {
        self.center + Vec3::new(self.radius * angle.sin(), self.height, self.radius * angle.cos())
    }

    pub fn pose(&self, angle: f64, lift: f64) -> Result<Pose> {
        Pose::look_at(self.eye(angle) + Vec3::new(0.0, lift, 0.0), self.target, Vec3::y())
    }

    /// `n` poses evenly spaced over `[-half_angle, half_angle]`.
    pub fn poses(&self, n: usize) -> Result<Vec<Pose>> {
        (0..n)
            .map(|i| {
                let s = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                self.pose(-self.half_angle + 2.0 * self.half_angle * s, 0.0)
            })
            .collect()
    }
}

impl SceneSpec {
    /// Five textured walls (open towards +z), a floating sphere and a box on
    /// the floor. World y is up; the room spans `[-2,2] x [-1.5,1.5] x [-2,2]`.
    pub fn box_room() -> Self {
        let (hx, hy, hz) = (2.0, 1.5, 2.0);
        let tex = |base: [f64; 3], f: f64, phase: f64| Albedo {
            base,
            amplitude: 0.5,
            frequency: f,
            phase,
        };
        let x = Vec3::x();
        let y = Vec3::y();
        let z = Vec3::z();
        let planes = vec![
            // floor, ceiling, left, right, back
            Rect::new(Vec3::new(0.0, -hy, 0.0), x, z, hx, hz, tex([0.85, 0.7, 0.5], 0.35, 0.3)),
            Rect::new(Vec3::new(0.0, hy, 0.0), x, z, hx, hz, tex([0.9, 0.9, 0.85], 0.3, 1.1)),
            Rect::new(Vec3::new(-hx, 0.0, 0.0), z, y, hz, hy, tex([0.55, 0.75, 0.9], 0.4, 2.0)),
            Rect::new(Vec3::new(hx, 0.0, 0.0), z, y, hz, hy, tex([0.9, 0.6, 0.55], 0.4, 0.7)),
            Rect::new(Vec3::new(0.0, 0.0, -hz), x, y, hx, hy, tex([0.65, 0.9, 0.6], 0.45, 1.6)),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.expect("axis-aligned walls");
            r.plane = r.plane.with_id(i as u32 + 1);
            r
        })
        .collect();
        Self {
            planes,
            props: vec![
                Prop::Sphere {
                    center: Vec3::new(0.7, 0.0, -0.7),
                    radius: 0.4,
                    albedo: [0.9, 0.35, 0.3],
                },
                Prop::Cuboid {
                    center: Vec3::new(-0.8, -1.2, -0.9),
                    half: Vec3::new(0.3, 0.3, 0.3),
                    albedo: [0.35, 0.4, 0.85],
                },
            ],
            bounds_min: Vec3::new(-hx, -hy, -hz),
            bounds_max: Vec3::new(hx, hy, hz),
            light: Light {
                direction: Vec3::new(0.3, 0.8, 0.5).normalize(),
                ambient: 0.45,
            },
        }
    }

    /// The box room's back wall alone.
    pub fn single_wall() -> Self {
        let mut s = Self::box_room();
        s.planes = vec![s.planes[4]];
        s.planes[0].plane = s.planes[0].plane.with_id(1);
        s.props.clear();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: &Vec3| (0..3).all(|a| p[a] >= self.bounds_min[a] - 1e-9 && p[a] <= self.bounds_max[a] + 1e-9);
        for r in &self.planes {
            for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                if !inside(&(r.center + r.u_axis * a * r.half_u + r.v_axis * b * r.half_v)) {
                    return Err(Error::InvalidConfig("rectangle leaves the scene bounds".into()));
                }
            }
            if r.albedo.base.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidConfig("albedo outside [0,1]".into()));
            }
        }
        for p in &self.props {
            let (lo, hi) = p.bounds();
            if !inside(&lo) || !inside(&hi) {
                return Err(Error::InvalidConfig("prop leaves the scene bounds".into()));
            }
        }
        Ok(())
    }

    /// Ground-truth planes with ids 1..K.
    pub fn ground_truth_planes(&self) -> Vec<Plane> {
        self.planes.iter().map(|r| r.plane).collect()
    }

    /// Grid whose outermost voxel centers lie on the scene bounds.
    pub fn aligned_grid(&self, voxel_size: f64) -> Result<Grid> {
        Grid::aligned(self.bounds_min, self.bounds_max, voxel_size)
    }

    /// Default training arc: cameras in the open half of the room looking at the back.
    pub fn default_arc(&self) -> Arc {
        Arc {
            center: Vec3::new(0.0, 0.0, 0.3),
            radius: 1.4,
            height: 0.0,
            half_angle: 30f64.to_radians(),
            target: Vec3::new(0.0, -0.1, -1.0),
        }
    }

    pub fn default_intrinsics() -> Intrinsics {
        Intrinsics::from_fov(64, 64, 90f64.to_radians()).expect("valid")
    }

    /// Closest hit along `origin + s * dir` for `s > 0`; `dir` need not be unit.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |s: f64, normal: Vec3, color: [f64; 3], semantic: u32| {
            if s > 1e-9 && best.is_none_or(|b| s < b.depth) {
                let normal = if normal.dot(dir) > 0.0 { -normal } else { normal };
                let shade = self.light.shade(&normal);
                best = Some(Hit {
                    depth: s,
                    point: origin + dir * s,
                    normal,
                    color: color.map(|c| c * shade),
                    semantic,
                });
            }
        };
        for (i, r) in self.planes.iter().enumerate() {
            let n = r.plane.normal;
            let denom = n.dot(dir);
            if denom.abs() < 1e-15 {
                continue;
            }
            let s = (r.plane.offset - n.dot(origin)) / denom;
            let p = origin + dir * s;
            let (a, b) = ((p - r.center).dot(&r.u_axis), (p - r.center).dot(&r.v_axis));
            if a.abs() <= r.half_u && b.abs() <= r.half_v {
                consider(s, n, r.albedo.at(a, b), i as u32 + 1);
            }
        }
        for prop in &self.props {
            match *prop {
                Prop::Sphere { center, radius, albedo } => {
                    let oc = origin - center;
                    let (a, b, c) = (dir.dot(dir), oc.dot(dir), oc.dot(&oc) - radius * radius);
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let root = disc.sqrt();
                        for s in [(-b - root) / a, (-b + root) / a] {
                            if s > 1e-9 {
                                consider(s, (origin + dir * s - center) / radius, albedo, 0);
                                break;
                            }
                        }
                    }
                }
                Prop::Cuboid { center, half, albedo } => {
                    let (mut s0, mut s1) = (f64::NEG_INFINITY, f64::INFINITY);
                    let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                    let mut miss = false;
                    for ax in 0..3 {
                        let (lo, hi) = (center[ax] - half[ax], center[ax] + half[ax]);
                        if dir[ax].abs() < 1e-15 {
                            miss |= origin[ax] < lo || origin[ax] > hi;
                            continue;
                        }
                        let (mut ta, mut tb) = ((lo - origin[ax]) / dir[ax], (hi - origin[ax]) / dir[ax]);
                        let mut e = Vec3::zeros();
                        e[ax] = 1.0;
                        if ta > tb {
                            std::mem::swap(&mut ta, &mut tb);
                        }
                        if ta > s0 {
                            s0 = ta;
                            n0 = e;
                        }
                        if tb < s1 {
                            s1 = tb;
                            n1 = e;
                        }
                    }
                    if !miss && s1 >= s0 {
                        if s0 > 1e-9 {
                            consider(s0, n0, albedo, 0);
                        } else if s1 > 1e-9 {
                            consider(s1, n1, albedo, 0);
                        }
                    }
                }
            }
        }
        best
    }

    /// Casts pixel `(col, row)`; the returned depth is camera z-depth.
    pub fn cast_pixel(&self, pose: &Pose, intr: &Intrinsics, col: usize, row: usize) -> Option<Hit> {
        let dir_cam = intr.unproject_dir(&Intrinsics::pixel_center(col, row));
        // z component is 1, so the ray parameter equals z-depth
        self.cast(&pose.center(), &pose.transform_vector(&dir_cam))
    }
}

/// Exact RGB-D frame with ground-truth plane indices.
pub fn raytrace_frame(spec: &SceneSpec, pose: &Pose, intr: &Intrinsics, index: usize) -> Frame {
    let (w, h) = (intr.width, intr.height);
    let hits: Vec<Option<Hit>> = (0..w * h)
        .into_par_iter()
        .map(|i| spec.cast_pixel(pose, intr, i % w, i / w))
        .collect();
    let color = hits.iter().map(|h| h.map_or([0.0; 3], |h| h.color)).collect();
    let depth = hits.iter().map(|h| h.map_or(0.0, |h| h.depth)).collect();
    let semantic = hits.iter().map(|h| h.map_or(0, |h| h.semantic)).collect();
    Frame::new(index, *pose, *intr, color, depth, semantic).expect("raytraced frame is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Interpolation,
    Extrapolation,
}

/// Spherical interpolation of rotations and linear interpolation of centers.
pub fn interpolate_pose(a: &Pose, b: &Pose, s: f64) -> Pose {
    let qa = UnitQuaternion::from_matrix(&a.rotation);
    let qb = UnitQuaternion::from_matrix(&b.rotation);
    let q = qa.slerp(&qb, s);
    Pose {
        rotation: q.to_rotation_matrix().into_inner(),
        translation: a.translation * (1.0 - s) + b.translation * s,
    }
}

/// Evaluation cameras. Interpolation views sit midway between consecutive
/// training poses; extrapolation views continue the arc past its ends by up
/// to `margin` radians and rise by up to `margin` meters.
pub fn emit_trajectory(arc: &Arc, train: &[Pose], kind: TrajectoryKind, n: usize, margin: f64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::InvalidConfig("trajectory needs at least one view".into()));
    }
    match kind {
        TrajectoryKind::Interpolation => {
            if train.len() < 2 {
                return Err(Error::InvalidConfig("interpolation needs two training poses".into()));
            }
            Ok((0..n)
                .map(|i| {
                    let j = ((i as f64 + 0.5) * (train.len() - 1) as f64 / n as f64).floor() as usize;
                    interpolate_pose(&train[j], &train[j + 1], 0.5)
                })
                .collect())
        }
        TrajectoryKind::Extrapolation => (0..n)
            .map(|i| {
                let frac = (i / 2 + 1) as f64 / n.div_ceil(2) as f64;
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                arc.pose(side * (arc.half_angle + margin * frac), margin * frac)
            })
            .collect(),
    }
}

/// Additive Gaussian noise on valid depth, clamped to at least 1 cm.
pub fn add_depth_noise(frame: &Frame, sigma: f64, seed: u64) -> Result<Frame> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma {sigma} < 0")));
    }
    let mut out = frame.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for d in &mut out.depth {
        if *d > 0.0 {
            *d = (*d + normal.sample(&mut rng)).max(0.01);
        }
    }
    Ok(out)
}

/// Rotation taking `from` to `to` (both unit).
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Mat3 {
    UnitQuaternion::rotation_between(from, to)
        .unwrap_or_else(UnitQuaternion::identity)
        .to_rotation_matrix()
        .into_inner()
}
