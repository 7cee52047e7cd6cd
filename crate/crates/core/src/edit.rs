//! Editing volume: voxels tagged with an edit index redirect field queries
//! through a rigid transform.

use crate::error::{Error, Result};
use crate::geometry::{check_rotation, Mat3, Pose, Vec3};
use crate::registry::Registry;
use crate::volume::{Grid, SemanticVolume, EMPTY};

/// Rigid map applied to query points (`x' = R x + t`) and directions (`d' = R d`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
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

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!("bad homogeneous row {bottom:?}")));
        }
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn apply_dir(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

impl From<Pose> for RigidTransform {
    fn from(p: Pose) -> Self {
        Self {
            rotation: p.rotation,
            translation: p.translation,
        }
    }
}

/// Edit labels over the semantic grid plus the transform list they index.
/// An empty label array means no voxel is edited.
#[derive(Debug, Clone, PartialEq)]
pub struct EditState {
    pub grid: Grid,
    labels: Vec<u32>,
    transforms: Vec<RigidTransform>,
}

impl EditState {
    pub fn new(grid: Grid) -> Self {
        Self {
            grid,
            labels: Vec::new(),
            transforms: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.is_empty() || self.labels.is_empty()
    }

    pub fn transforms(&self) -> &[RigidTransform] {
        &self.transforms
    }

    #[inline]
    pub fn label(&self, v: [usize; 3]) -> u32 {
        if self.labels.is_empty() {
            0
        } else {
            self.labels[self.grid.index(v)]
        }
    }

    /// Registers a transform and returns its 1-based index.
    pub fn push_transform(&mut self, t: RigidTransform) -> u32 {
        self.transforms.push(t);
        self.transforms.len() as u32
    }

    pub fn set_label(&mut self, v: [usize; 3], k: u32) -> Result<()> {
        if k as usize > self.transforms.len() {
            return Err(Error::InvalidConfig(format!("edit index {k} has no transform")));
        }
        if self.labels.is_empty() {
            if k == 0 {
                return Ok(());
            }
            self.labels = vec![0; self.grid.len()];
        }
        let i = self.grid.index(v);
        self.labels[i] = k;
        Ok(())
    }

    pub fn transform(&self, k: u32) -> Option<&RigidTransform> {
        k.checked_sub(1).and_then(|i| self.transforms.get(i as usize))
    }

    /// Transform for the voxel containing `x`, if any.
    #[inline]
    pub fn transform_at(&self, x: &Vec3) -> Option<&RigidTransform> {
        if self.is_identity() {
            return None;
        }
        let v = self.grid.voxel_of(x)?;
        self.transform(self.label(v))
    }

    pub fn edited_count(&self) -> usize {
        self.labels.iter().filter(|&&k| k > 0).count()
    }

    /// Text form: `transform <16 values>` lines in index order, then
    /// `voxel <index> <k>` for every edited voxel.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.transforms {
            let vals: Vec<String> = t.to_row_major().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!("transform {}\n", vals.join(" ")));
        }
        for (i, &k) in self.labels.iter().enumerate() {
            if k > 0 {
                out.push_str(&format!("voxel {i} {k}\n"));
            }
        }
        out
    }

    pub fn from_text(grid: Grid, text: &str) -> Result<Self> {
        let mut edit = Self::new(grid);
        for (lineno, line) in text.lines().enumerate() {
            let ctx = || format!("edit state line {}", lineno + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["transform", rest @ ..] => {
                    let vals = rest
                        .iter()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(ctx(), e.to_string()))?;
                    let m: [f64; 16] = vals
                        .try_into()
                        .map_err(|_| Error::parse(ctx(), "transform needs 16 values"))?;
                    edit.push_transform(RigidTransform::from_row_major(&m)?);
                }
                ["voxel", i, k] => {
                    let i: usize = i.parse().map_err(|_| Error::parse(ctx(), "bad voxel index"))?;
                    let k: u32 = k.parse().map_err(|_| Error::parse(ctx(), "bad edit index"))?;
                    if i >= grid.len() {
                        return Err(Error::parse(ctx(), format!("voxel {i} outside grid")));
                    }
                    edit.set_label(grid.coords(i), k)?;
                }
                _ => return Err(Error::parse(ctx(), format!("unrecognized line {line:?}"))),
            }
        }
        Ok(edit)
    }
}

/// Maps a sample point and direction through the edit covering `x`.
pub fn apply_edit(edit: &EditState, x: &Vec3, d: &Vec3) -> (Vec3, Vec3) {
    match edit.transform_at(x) {
        Some(t) => (t.apply_point(x), t.apply_dir(d)),
        None => (*x, *d),
    }
}

/// Moves the voxels selected by `select` by the rigid `motion`
/// (`x_new = motion(x_old)`). Destination voxels inherit the source labels and
/// query the field through the inverse motion; vacated voxels become empty.
/// Returns the number of destination voxels.
pub fn move_voxels(
    vol: &mut SemanticVolume,
    edit: &mut EditState,
    motion: &RigidTransform,
    select: impl Fn([usize; 3], i32) -> bool,
) -> Result<usize> {
    if vol.grid != edit.grid {
        return Err(Error::ShapeMismatch("edit grid differs from volume grid".into()));
    }
    let grid = vol.grid;
    let selected: Vec<bool> = (0..grid.len())
        .map(|i| {
            let v = grid.coords(i);
            select(v, vol.label(v))
        })
        .collect();
    if !selected.iter().any(|&s| s) {
        return Ok(0);
    }
    // bounding box of the moved selection
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for (i, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let c = motion.apply_point(&grid.center(grid.coords(i)));
        lo = lo.inf(&c);
        hi = hi.sup(&c);
    }
    let pad = grid.voxel_size * 2.0;
    let to_idx = |p: f64, a: usize| -> usize {
        (((p - grid.origin[a]) / grid.voxel_size).floor().max(0.0) as usize).min(grid.dims[a] - 1)
    };
    let lo_v = [0, 1, 2].map(|a| to_idx(lo[a] - pad, a));
    let hi_v = [0, 1, 2].map(|a| to_idx(hi[a] + pad, a));

    let back = motion.inverse();
    let old_labels = vol.labels().to_vec();
    let old_edits: Vec<u32> = (0..grid.len()).map(|i| edit.label(grid.coords(i))).collect();
    let mut composed: Vec<(u32, u32)> = Vec::new();
    let mut dest = Vec::new();
    for z in lo_v[2]..=hi_v[2] {
        for y in lo_v[1]..=hi_v[1] {
            for x in lo_v[0]..=hi_v[0] {
                let v = [x, y, z];
                let Some(src) = grid.voxel_of(&back.apply_point(&grid.center(v))) else {
                    continue;
                };
                let si = grid.index(src);
                if selected[si] {
                    dest.push((v, si));
                }
            }
        }
    }
    for (i, &s) in selected.iter().enumerate() {
        if s {
            let v = grid.coords(i);
            vol.set_label(v, EMPTY);
            edit.set_label(v, 0)?;
        }
    }
    for &(v, si) in &dest {
        let prior = old_edits[si];
        let k = match composed.iter().find(|(p, _)| *p == prior) {
            Some(&(_, k)) => k,
            None => {
                let t = match edit.transform(prior) {
                    Some(t) => t.then_after(&back),
                    None => back,
                };
                let k = edit.push_transform(t);
                composed.push((prior, k));
                k
            }
        };
        vol.set_label(v, old_labels[si]);
        edit.set_label(v, k)?;
    }
    Ok(dest.len())
}

/// Rigidly moves every voxel of a primitive.
pub fn transform_primitive(
    vol: &mut SemanticVolume,
    edit: &mut EditState,
    registry: &Registry,
    plane_id: u32,
    motion: &RigidTransform,
) -> Result<usize> {
    let target = plane_id as i32;
    if registry.get(plane_id).is_none() && vol.count(|l| l == target) == 0 {
        return Err(Error::UnknownPlane(plane_id));
    }
    move_voxels(vol, edit, motion, |_, l| l == target)
}

/// Rigidly moves every voxel whose center lies in `[min, max]`.
pub fn transform_region(
    vol: &mut SemanticVolume,
    edit: &mut EditState,
    min: Vec3,
    max: Vec3,
    motion: &RigidTransform,
) -> Result<usize> {
    let grid = vol.grid;
    move_voxels(vol, edit, motion, |v, _| {
        let c = grid.center(v);
        (0..3).all(|a| c[a] >= min[a] && c[a] <= max[a])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::volume::DENSE;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid {
        Grid::new([8, 8, 8], Vec3::repeat(-2.0), 0.5).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let mut edit = EditState::new(grid());
        let k = edit
            .push_transform(RigidTransform::new(axis_angle(&Vec3::y(), 0.3), Vec3::new(0.1, -0.2, 0.3)).unwrap());
        edit.set_label([1, 2, 3], k).unwrap();
        edit.set_label([7, 0, 4], k).unwrap();
        let back = EditState::from_text(grid(), &edit.to_text()).unwrap();
        assert_eq!(back, edit);
        assert!(EditState::from_text(grid(), "voxel 0 1\n").is_err());
        assert!(EditState::from_text(grid(), "bogus\n").is_err());
    }

    #[test]
    fn zero_edit_is_identity() {
        let edit = EditState::new(grid());
        let x = Vec3::new(0.3, -0.2, 1.0);
        let d = Vec3::new(0.0, 0.6, 0.8);
        assert_eq!(apply_edit(&edit, &x, &d), (x, d));
    }

    #[test]
    fn quarter_turn_about_z() {
        let mut edit = EditState::new(grid());
        let k = edit.push_transform(RigidTransform::new(axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2), Vec3::zeros()).unwrap());
        let x = Vec3::new(1.0, 0.0, 0.0);
        edit.set_label(edit.grid.voxel_of(&x).unwrap(), k).unwrap();
        let (xp, dp) = apply_edit(&edit, &x, &Vec3::x());
        assert_abs_diff_eq!(xp, Vec3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(dp, Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn translation_preserves_direction() {
        let mut edit = EditState::new(grid());
        let k = edit.push_transform(RigidTransform::new(Mat3::identity(), Vec3::new(0.5, 1.0, -0.25)).unwrap());
        let x = Vec3::new(0.1, 0.1, 0.1);
        edit.set_label(edit.grid.voxel_of(&x).unwrap(), k).unwrap();
        let d = Vec3::new(0.48, 0.6, 0.64);
        let (xp, dp) = apply_edit(&edit, &x, &d);
        assert_eq!(dp, d);
        assert_abs_diff_eq!(xp, x + Vec3::new(0.5, 1.0, -0.25), epsilon = 1e-15);
    }

    #[test]
    fn label_without_transform_is_rejected() {
        let mut edit = EditState::new(grid());
        assert!(edit.set_label([0, 0, 0], 1).is_err());
    }

    #[test]
    fn region_move_relocates_labels() {
        let g = grid();
        let mut vol = SemanticVolume::new(g);
        let src = g.voxel_of(&Vec3::new(-1.2, -1.2, -1.2)).unwrap();
        vol.set_label(src, DENSE);
        let mut edit = EditState::new(g);
        let motion = RigidTransform::new(Mat3::identity(), Vec3::new(2.0, 0.0, 0.0)).unwrap();
        let moved = transform_region(&mut vol, &mut edit, Vec3::repeat(-1.5), Vec3::repeat(-1.0), &motion).unwrap();
        assert_eq!(moved, 1);
        assert_eq!(vol.label(src), EMPTY);
        let dst = g.voxel_of(&Vec3::new(0.8, -1.2, -1.2)).unwrap();
        assert_eq!(vol.label(dst), DENSE);
        // querying the destination reads the field at the source
        let (xq, _) = apply_edit(&edit, &g.center(dst), &Vec3::x());
        assert_abs_diff_eq!(xq, g.center(src), epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn edits_keep_unit_directions_and_invert(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64, angle in -3.0..3.0f64,
            tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -1.0..1.0f64,
            dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
        ) {
            let axis = Vec3::new(ax, ay, az);
            let d = Vec3::new(dx, dy, dz);
            proptest::prop_assume!(axis.norm() > 1e-3 && d.norm() > 1e-3);
            let d = d.normalize();
            let t = RigidTransform::new(axis_angle(&axis, angle), Vec3::new(tx, ty, tz)).unwrap();
            let mut edit = EditState::new(grid());
            let k = edit.push_transform(t);
            let x = Vec3::new(0.2, 0.3, -0.4);
            edit.set_label(edit.grid.voxel_of(&x).unwrap(), k).unwrap();
            let (xp, dp) = apply_edit(&edit, &x, &d);
            proptest::prop_assert!((dp.norm() - 1.0).abs() < 1e-9);
            let inv = t.inverse();
            proptest::prop_assert!((inv.apply_point(&xp) - x).norm() < 1e-12);
            proptest::prop_assert!((inv.apply_dir(&dp) - d).norm() < 1e-12);
        }
    }
}
