//! Real spherical harmonics up to degree 3.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn sh_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Writes the basis into `out[..sh_len(degree)]` without checking `|d|`.
pub fn sh_basis_into(degree: usize, d: &Vec3, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = C0;
    if degree == 0 {
        return;
    }
    out[1] = C1 * y;
    out[2] = C1 * z;
    out[3] = C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = C2[0] * x * y;
    out[5] = C2[1] * y * z;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * x * z;
    out[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * x * y * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// SH basis at a unit direction.
pub fn encode_direction(degree: usize, d: &Vec3) -> Result<Vec<f64>> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::InvalidConfig(format!("sh degree {degree} > {MAX_SH_DEGREE}")));
    }
    let n = d.norm();
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::NonUnitDirection(n));
    }
    let mut out = vec![0.0; sh_len(degree)];
    sh_basis_into(degree, d, &mut out);
    Ok(out)
}
