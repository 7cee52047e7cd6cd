//! Camera, ray and plane types shared by every stage of the pipeline.
//!
//! Conventions used throughout the crate:
//! - poses are world-from-camera (`x_world = R * x_cam + t`),
//! - the camera looks down `+z`, `x` right, `y` down (pinhole, no distortion),
//! - continuous pixel coordinates put pixel `(col, row)` at `(col + 0.5, row + 0.5)`,
//! - depth is z-depth along the optical axis, not distance along the ray.

use nalgebra::{Matrix3, Matrix4, Point2, Unit, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-6;

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a row-major 4x4 matrix (last row ignored).
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera looking from `eye` towards `target`; `up` is the approximate world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Optical axis (`+z` of the camera) in world coordinates.
    pub fn axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Re-orthonormalizes the rotation (Gram-Schmidt on columns).
    pub fn renormalized(&self) -> Pose {
        let x = self.rotation.column(0).normalize();
        let y = self.rotation.column(1);
        let y = (y - x * x.dot(&y)).normalize();
        let z = x.cross(&y);
        Pose {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: self.translation,
        }
    }
}

pub(crate) fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation".into()));
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > ORTHO_TOL {
        return Err(Error::InvalidPose(format!(
            "rotation not orthonormal (max |RtR - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::InvalidPose(format!("rotation determinant {det}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics("empty image".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centered principal point with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, hfov_rad: f64) -> Result<Self> {
        let fx = width as f64 / 2.0 / (hfov_rad / 2.0).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn contains(&self, u: &Point2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }

    /// Integer pixel `(col, row)` containing `u`, if inside the image.
    pub fn pixel_of(&self, u: &Point2<f64>) -> Option<(usize, usize)> {
        self.contains(u)
            .then(|| (u.x.floor() as usize, u.y.floor() as usize))
    }

    pub fn pixel_center(col: usize, row: usize) -> Point2<f64> {
        Point2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Camera-frame direction with unit z component through `u`.
    pub fn unproject_dir(&self, u: &Point2<f64>) -> Vec3 {
        Vec3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Unit<Vec3>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Degenerate("zero-length ray direction".into()));
        }
        Ok(Self {
            origin,
            direction: Unit::new_normalize(direction),
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction.into_inner() * t
    }

    pub fn dir(&self) -> Vec3 {
        self.direction.into_inner()
    }
}

/// Infinite plane `{x : normal . x = offset}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
    pub id: u32,
    pub support_count: usize,
    pub alive: bool,
}

impl Plane {
    /// Plane with `offset >= 0` (normal flipped if needed).
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-12) {
            return Err(Error::Degenerate("zero plane normal".into()));
        }
        let (normal, offset) = (normal / n, offset / n);
        let (normal, offset) = if offset < 0.0 {
            (-normal, -offset)
        } else {
            (normal, offset)
        };
        Ok(Self {
            normal,
            offset,
            id: 0,
            support_count: 0,
            alive: true,
        })
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) - self.offset
    }

    /// Closest point on the plane to the origin, `offset * normal`.
    pub fn anchor(&self) -> Vec3 {
        self.normal * self.offset
    }
}

/// Posed RGB-D observation. Images are row-major, `width * height` long.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub color: Vec<[f64; 3]>,
    /// z-depth in meters, 0 = invalid.
    pub depth: Vec<f64>,
    /// 0 = non-primitive, m >= 1 = plane id.
    pub semantic: Vec<u32>,
}

impl Frame {
    pub fn new(
        index: usize,
        pose: Pose,
        intrinsics: Intrinsics,
        color: Vec<[f64; 3]>,
        depth: Vec<f64>,
        semantic: Vec<u32>,
    ) -> Result<Self> {
        let n = intrinsics.pixel_count();
        if color.len() != n || depth.len() != n || semantic.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "frame {index}: expected {n} pixels, got color {} depth {} semantic {}",
                color.len(),
                depth.len(),
                semantic.len()
            )));
        }
        if let Some(d) = depth.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::InvalidDepth(*d));
        }
        Ok(Self {
            index,
            pose,
            intrinsics,
            color,
            depth,
            semantic,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn pixel_index(&self, col: usize, row: usize) -> usize {
        row * self.intrinsics.width + col
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Unit-direction ray through pixel `(col, row)` center, plus the factor
    /// converting ray length to z-depth (`z = t * z_per_t`).
    pub fn pixel_ray(&self, col: usize, row: usize) -> (Ray, f64) {
        camera_ray(&self.pose, &self.intrinsics, &Intrinsics::pixel_center(col, row))
    }

    /// World point of pixel `(col, row)` at its stored depth, if valid.
    pub fn backproject_pixel(&self, col: usize, row: usize) -> Option<Vec3> {
        let z = self.depth[self.pixel_index(col, row)];
        (z > 0.0).then(|| {
            backproject_unchecked(&Intrinsics::pixel_center(col, row), z, &self.intrinsics, &self.pose)
        })
    }
}

pub fn camera_ray(pose: &Pose, intr: &Intrinsics, u: &Point2<f64>) -> (Ray, f64) {
    let dir_cam = intr.unproject_dir(u);
    let len = dir_cam.norm();
    let ray = Ray {
        origin: pose.center(),
        direction: Unit::new_unchecked(pose.transform_vector(&(dir_cam / len))),
    };
    (ray, 1.0 / len)
}

pub fn backproject(u: &Point2<f64>, depth: f64, intr: &Intrinsics, pose: &Pose) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    if !intr.contains(u) {
        return Err(Error::OutOfBounds {
            u: u.x,
            v: u.y,
            width: intr.width,
            height: intr.height,
        });
    }
    Ok(backproject_unchecked(u, depth, intr, pose))
}

#[inline]
pub(crate) fn backproject_unchecked(u: &Point2<f64>, depth: f64, intr: &Intrinsics, pose: &Pose) -> Vec3 {
    pose.transform_point(&(intr.unproject_dir(u) * depth))
}

/// Projects a world point; returns the continuous pixel coordinate (possibly
/// outside the image) and the camera z-depth.
pub fn project(x: &Vec3, intr: &Intrinsics, pose: &Pose) -> Result<(Point2<f64>, f64)> {
    let (u, z) = project_unchecked(x, intr, pose);
    if z <= 0.0 {
        return Err(Error::BehindCamera(z));
    }
    Ok((u, z))
}

#[inline]
pub(crate) fn project_unchecked(x: &Vec3, intr: &Intrinsics, pose: &Pose) -> (Point2<f64>, f64) {
    let rt = pose.rotation.transpose();
    let p = rt * (x - pose.translation);
    let u = Point2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy);
    (u, p.z)
}

pub const PARALLEL_EPS: f64 = 1e-9;

/// Ray-plane intersection `(point, t)` for `t > 0`; `None` when parallel or behind.
pub fn intersect_ray_plane(ray: &Ray, plane: &Plane) -> Option<(Vec3, f64)> {
    let denom = ray.dir().dot(&plane.normal);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (plane.offset - ray.origin.dot(&plane.normal)) / denom;
    (t > 0.0).then(|| (ray.at(t), t))
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r = axis_angle(&axis, rng.gen_range(-3.0..3.0));
        let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        Pose::new(r, t).unwrap()
    }

    #[test]
    fn backproject_principal_point() {
        let x = backproject(&Point2::new(50.0, 50.0), 2.0, &intr100(), &Pose::identity()).unwrap();
        assert_abs_diff_eq!(x, Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-15);
    }

    #[test]
    fn backproject_unit_slope_column() {
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let x = backproject(&Point2::new(150.0, 50.0), 1.0, &intr, &Pose::identity()).unwrap();
        assert_abs_diff_eq!(x, Vec3::new(1.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn backproject_errors() {
        let intr = intr100();
        assert!(matches!(
            backproject(&Point2::new(50.0, 50.0), 0.0, &intr, &Pose::identity()),
            Err(Error::InvalidDepth(_))
        ));
        assert!(matches!(
            backproject(&Point2::new(100.0, 50.0), 1.0, &intr, &Pose::identity()),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn project_principal_and_behind() {
        let (u, z) = project(&Vec3::new(0.0, 0.0, 2.0), &intr100(), &Pose::identity()).unwrap();
        assert_eq!((u.x, u.y, z), (50.0, 50.0, 2.0));
        assert!(matches!(
            project(&Vec3::new(0.0, 0.0, -1.0), &intr100(), &Pose::identity()),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let w = rng.gen_range(16..640);
            let h = rng.gen_range(16..480);
            let f = rng.gen_range(20.0..800.0);
            let intr = Intrinsics::new(
                f,
                f * rng.gen_range(0.8..1.2),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                w,
                h,
            )
            .unwrap();
            let pose = random_pose(&mut rng);
            let u = Point2::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let z = rng.gen_range(0.1..10.0);
            let x = backproject(&u, z, &intr, &pose).unwrap();
            let (u2, z2) = project(&x, &intr, &pose).unwrap();
            assert!((u2 - u).norm() < 1e-4, "pixel drift {}", (u2 - u).norm());
            assert!((z2 - z).abs() < 1e-6);
        }
    }

    #[test]
    fn pose_composition_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = Pose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&random_pose(&mut rng));
            let err = (acc.rotation.transpose() * acc.rotation - Mat3::identity()).abs().max();
            assert!(err < 1e-6, "orthonormality drift {err:e}");
            assert!((acc.rotation.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let mut m = Mat3::identity();
        m[(0, 0)] = 1.1;
        assert!(Pose::new(m, Vec3::zeros()).is_err());
        assert!(Pose::new(-Mat3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let pose = Pose::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)).unwrap();
        let axis = pose.axis();
        assert_abs_diff_eq!(axis, -Vec3::new(1.0, 2.0, 3.0).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn look_at_keeps_world_up_at_the_top_of_the_image() {
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y()).unwrap();
        let intr = intr100();
        let (above, _) = project(&Vec3::new(0.0, 1.0, 0.0), &intr, &pose).unwrap();
        let (right, _) = project(&Vec3::new(1.0, 0.0, 0.0), &intr, &pose).unwrap();
        assert!(above.y < 50.0);
        assert!(right.x > 50.0);
    }

    #[test]
    fn ray_plane_axis_aligned() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z()).unwrap();
        let plane = Plane::new(Vec3::z(), 2.0).unwrap();
        let (x, t) = intersect_ray_plane(&ray, &plane).unwrap();
        assert_eq!(x, Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(t, 2.0);
    }

    #[test]
    fn ray_plane_parallel_and_behind() {
        let plane = Plane::new(Vec3::z(), 2.0).unwrap();
        let ray = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        assert!(intersect_ray_plane(&ray, &plane).is_none());
        let ray = Ray::new(Vec3::zeros(), -Vec3::z()).unwrap();
        assert!(intersect_ray_plane(&ray, &plane).is_none());
    }

    fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ray_plane_matches_bisection() {
        let ray = Ray::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let plane = Plane::new(Vec3::new(1.0, 2.0, 2.0), 4.0 * 3.0).unwrap();
        // unit(1,2,2) . x = 4
        assert_abs_diff_eq!(plane.offset, 4.0, epsilon = 1e-15);
        let f = |t: f64| plane.normal.dot(&ray.at(t)) - plane.offset;
        let t_root = bisect_root(f, 0.0, 100.0);
        let (x, t) = intersect_ray_plane(&ray, &plane).unwrap();
        assert!((t - t_root).abs() < 1e-9, "t={t} root={t_root}");
        assert!(plane.signed_distance(&x).abs() < 1e-9);
        let reverse = Ray::new(ray.origin, -ray.dir()).unwrap();
        assert!(intersect_ray_plane(&reverse, &plane).is_none());
    }

    proptest::proptest! {
        #[test]
        fn intersections_lie_on_plane(
            ox in -5.0..5.0f64, oy in -5.0..5.0f64, oz in -5.0..5.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
            nx in -1.0..1.0f64, ny in -1.0..1.0f64, nz in -1.0..1.0f64,
            off in 0.0..5.0f64,
        ) {
            let d = Vec3::new(dx, dy, dz);
            let n = Vec3::new(nx, ny, nz);
            proptest::prop_assume!(d.norm() > 1e-3 && n.norm() > 1e-3);
            let ray = Ray::new(Vec3::new(ox, oy, oz), d).unwrap();
            let plane = Plane::new(n, off).unwrap();
            if let Some((x, t)) = intersect_ray_plane(&ray, &plane) {
                proptest::prop_assert!(t > 0.0);
                proptest::prop_assert!(plane.signed_distance(&x).abs() < 1e-6);
            }
        }
    }
}
