//! Dataset directory I/O.
//!
//! ```text
//! color/%06d.png     8-bit RGB
//! depth/%06d.png     16-bit millimeters, 0 = invalid
//! semantic/%06d.png  16-bit plane ids (optional, outputs only)
//! poses.txt          index + 16 row-major world-from-camera values per line
//! intrinsics.txt     fx fy cx cy width height
//! eval.txt           optional: `index interpolation|extrapolation` per held-out frame
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::field::SEMANTIC_DIM;
use crate::geometry::{Frame, Intrinsics, Pose};

fn img_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn frame_file(dir: &Path, sub: &str, index: usize) -> PathBuf {
    dir.join(sub).join(format!("{index:06}.png"))
}

pub fn quantize_color(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_depth_mm(d: f64) -> u16 {
    if d > 0.0 {
        (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
    } else {
        0
    }
}

pub fn write_color_png(path: &Path, width: usize, height: usize, color: &[[f64; 3]]) -> Result<()> {
    let img = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let c = color[y as usize * width + x as usize];
        Rgb([quantize_color(c[0]), quantize_color(c[1]), quantize_color(c[2])])
    });
    img.save(path).map_err(|e| img_err(path, e))
}

pub fn write_u16_png(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| Luma([values[y as usize * width + x as usize]]));
    img.save(path).map_err(|e| img_err(path, e))
}

pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let mm: Vec<u16> = depth.iter().map(|&d| quantize_depth_mm(d)).collect();
    write_u16_png(path, width, height, &mm)
}

/// Raw little-endian float32, one full plane per semantic channel.
pub fn write_semantic_raw(path: &Path, semantic: &[[f64; SEMANTIC_DIM]]) -> Result<()> {
    let mut buf = Vec::with_capacity(semantic.len() * SEMANTIC_DIM * 4);
    for k in 0..SEMANTIC_DIM {
        for s in semantic {
            buf.extend_from_slice(&(s[k] as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_color_png(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    let px = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok((w as usize, h as usize, px))
}

pub fn read_u16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| img_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn format_pose_line(index: usize, pose: &Pose) -> String {
    let m = pose.to_matrix();
    let mut s = index.to_string();
    for r in 0..4 {
        for c in 0..4 {
            let _ = write!(s, " {:e}", m[(r, c)]);
        }
    }
    s
}

pub fn parse_poses(text: &str) -> Result<Vec<(usize, Pose)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = format!("poses.txt line {}", lineno + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 17 {
            return Err(Error::parse(ctx, format!("expected 17 fields, got {}", f.len())));
        }
        let index: usize = f[0].parse().map_err(|_| Error::parse(&ctx, "bad frame index"))?;
        let v = f[1..]
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let m = Matrix4::from_row_slice(&v);
        let pose = Pose::from_matrix(&m).map_err(|e| Error::parse(&ctx, e.to_string()))?;
        out.push((index, pose));
    }
    Ok(out)
}

pub fn format_intrinsics(intr: &Intrinsics) -> String {
    format!("{:e} {:e} {:e} {:e} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
}

pub fn parse_intrinsics(text: &str) -> Result<Intrinsics> {
    let f: Vec<&str> = text.split_whitespace().collect();
    if f.len() != 6 {
        return Err(Error::parse("intrinsics.txt", format!("expected 6 fields, got {}", f.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse("intrinsics.txt", e.to_string()));
    let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::parse("intrinsics.txt", e.to_string()));
    Intrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, dim(f[4])?, dim(f[5])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalKind {
    Interpolation,
    Extrapolation,
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    /// Held-out frame indices and their kind.
    pub eval: BTreeMap<usize, EvalKind>,
}

impl Dataset {
    pub fn training_frames(&self) -> Vec<Frame> {
        self.frames.iter().filter(|f| !self.eval.contains_key(&f.index)).cloned().collect()
    }

    pub fn eval_frames(&self, kind: EvalKind) -> Vec<Frame> {
        self.frames
            .iter()
            .filter(|f| self.eval.get(&f.index) == Some(&kind))
            .cloned()
            .collect()
    }
}

/// Writes frames (and optionally their semantic images) plus the text files.
pub fn write_dataset(
    dir: &Path,
    intr: &Intrinsics,
    frames: &[Frame],
    eval: &BTreeMap<usize, EvalKind>,
    with_semantic: bool,
) -> Result<()> {
    for sub in ["color", "depth"] {
        mkdir(&dir.join(sub))?;
    }
    if with_semantic {
        mkdir(&dir.join("semantic"))?;
    }
    let mut poses = String::new();
    for f in frames {
        let (w, h) = (f.width(), f.height());
        write_color_png(&frame_file(dir, "color", f.index), w, h, &f.color)?;
        write_depth_png(&frame_file(dir, "depth", f.index), w, h, &f.depth)?;
        if with_semantic {
            let ids: Vec<u16> = f.semantic.iter().map(|&s| s.min(u16::MAX as u32) as u16).collect();
            write_u16_png(&frame_file(dir, "semantic", f.index), w, h, &ids)?;
        }
        poses.push_str(&format_pose_line(f.index, &f.pose));
        poses.push('\n');
    }
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("poses.txt", poses)?;
    write("intrinsics.txt", format_intrinsics(intr))?;
    if !eval.is_empty() {
        let mut s = String::new();
        for (i, k) in eval {
            let name = match k {
                EvalKind::Interpolation => "interpolation",
                EvalKind::Extrapolation => "extrapolation",
            };
            let _ = writeln!(s, "{i} {name}");
        }
        write("eval.txt", s)?;
    }
    Ok(())
}

fn parse_eval(text: &str) -> Result<BTreeMap<usize, EvalKind>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let ctx = format!("eval.txt line {}", lineno + 1);
        let kind = match f.get(1) {
            Some(&"interpolation") => EvalKind::Interpolation,
            Some(&"extrapolation") => EvalKind::Extrapolation,
            _ => return Err(Error::parse(ctx, "expected `index interpolation|extrapolation`")),
        };
        let i = f[0].parse().map_err(|_| Error::parse(&ctx, "bad frame index"))?;
        out.insert(i, kind);
    }
    Ok(out)
}

/// Loads a dataset directory; semantic images are not read (inputs carry none).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("poses.txt").exists() {
        return Err(Error::Usage(format!("{} is not a dataset (no poses.txt)", dir.display())));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let intr = parse_intrinsics(&read("intrinsics.txt")?)?;
    let poses = parse_poses(&read("poses.txt")?)?;
    if poses.is_empty() {
        return Err(Error::Usage(format!("dataset {} has no frames", dir.display())));
    }
    let eval = if dir.join("eval.txt").exists() {
        parse_eval(&read("eval.txt")?)?
    } else {
        BTreeMap::new()
    };
    let mut frames = Vec::with_capacity(poses.len());
    for (index, pose) in poses {
        let cpath = frame_file(dir, "color", index);
        let dpath = frame_file(dir, "depth", index);
        let (w, h, color) = read_color_png(&cpath)?;
        let (dw, dh, mm) = read_u16_png(&dpath)?;
        if (w, h) != (intr.width, intr.height) || (dw, dh) != (w, h) {
            return Err(Error::Format {
                path: cpath,
                message: format!("image {w}x{h} / depth {dw}x{dh} vs intrinsics {}x{}", intr.width, intr.height),
            });
        }
        let depth = mm.iter().map(|&v| v as f64 / 1000.0).collect();
        frames.push(Frame::new(index, pose, intr, color, depth, vec![0; w * h])?);
    }
    Ok(Dataset {
        intrinsics: intr,
        frames,
        eval,
    })
}
