//! Image quality metrics on `[0, 1]` RGB images.

use crate::error::{Error, Result};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

fn check(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("images of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / (3 * a.len()) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5) of the luma
/// channel, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != width * height {
        return Err(Error::ShapeMismatch(format!("{} pixels for {width}x{height}", a.len())));
    }
    const WIN: usize = 11;
    if width < WIN || height < WIN {
        return Err(Error::ShapeMismatch(format!("SSIM needs at least {WIN}x{WIN} pixels")));
    }
    let g = gaussian_window(WIN, 1.5);
    let x: Vec<f64> = a.iter().map(luma).collect();
    let y: Vec<f64> = b.iter().map(luma).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (width - WIN + 1, height - WIN + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let w = g[i] * g[j];
                    let k = (r + i) * width + c + j;
                    mx += w * x[k];
                    my += w * y[k];
                    sxx += w * x[k] * x[k];
                    syy += w * y[k] * y[k];
                    sxy += w * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}
