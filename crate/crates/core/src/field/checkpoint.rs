//! Field parameter checkpoints: magic `PARFFP1`, a tensor count, then named
//! tensors (name, dims, little-endian f32 values).

use std::io::{Read, Write};
use std::path::Path;

use super::encoding::{EncodingConfig, LevelGrid};
use super::{FieldConfig, RadianceField};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const FIELD_MAGIC: &[u8; 7] = b"PARFFP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn write_tensors(w: &mut impl Write, tensors: &[Tensor]) -> std::io::Result<()> {
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors(r: &mut impl Read) -> std::result::Result<Vec<Tensor>, String> {
    let io = |e: std::io::Error| e.to_string();
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != FIELD_MAGIC {
        return Err("bad magic".into());
    }
    let count = read_u32(r).map_err(io)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r).map_err(io)? as usize;
        if len > 1024 {
            return Err(format!("tensor name length {len}"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| e.to_string())?;
        let nd = read_u32(r).map_err(io)? as usize;
        if nd > 8 {
            return Err(format!("tensor {name} has {nd} dims"));
        }
        let dims = (0..nd).map(|_| read_u32(r)).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or("tensor too large")?;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(io)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Tensor { name, dims, data });
    }
    Ok(out)
}

impl RadianceField {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let e = &self.config.encoding;
        let mut t = vec![
            Tensor {
                name: "config".into(),
                dims: vec![7],
                data: [
                    e.levels as f32,
                    e.base_resolution as f32,
                    e.per_level_scale as f32,
                    e.features_per_level as f32,
                    e.sh_degree as f32,
                    self.config.hidden as f32,
                    self.config.color_hidden as f32,
                ]
                .to_vec(),
            },
            Tensor {
                name: "bounds".into(),
                dims: vec![2, 3],
                data: self.bounds_min.iter().chain(self.bounds_max.iter()).map(|&v| v as f32).collect(),
            },
            Tensor {
                name: "mlp".into(),
                dims: vec![self.mlp.len() as u32],
                data: self.mlp.iter().map(|&v| v as f32).collect(),
            },
        ];
        for (l, g) in self.grids.iter().enumerate() {
            let n = g.resolution as u32 + 1;
            t.push(Tensor {
                name: format!("grid{l}"),
                dims: vec![n, n, n, e.features_per_level as u32],
                data: g.data.iter().map(|&v| v as f32).collect(),
            });
        }
        t
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::parse("field checkpoint", format!("missing tensor {name}")))
        };
        let c = &find("config")?.data;
        if c.len() != 7 {
            return Err(Error::parse("field checkpoint", "config tensor must have 7 values"));
        }
        let config = FieldConfig {
            encoding: EncodingConfig {
                levels: c[0] as usize,
                base_resolution: c[1] as usize,
                per_level_scale: c[2] as f64,
                features_per_level: c[3] as usize,
                sh_degree: c[4] as usize,
            },
            hidden: c[5] as usize,
            color_hidden: c[6] as usize,
        };
        let b = &find("bounds")?.data;
        if b.len() != 6 {
            return Err(Error::parse("field checkpoint", "bounds tensor must have 6 values"));
        }
        let bmin = Vec3::new(b[0] as f64, b[1] as f64, b[2] as f64);
        let bmax = Vec3::new(b[3] as f64, b[4] as f64, b[5] as f64);
        let mlp = find("mlp")?.data.iter().map(|&v| v as f64).collect();
        let grids = (0..config.encoding.levels)
            .map(|l| {
                let t = find(&format!("grid{l}"))?;
                Ok(LevelGrid {
                    resolution: config.encoding.resolution(l),
                    data: t.data.iter().map(|&v| v as f64).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        RadianceField::from_parts(config, bmin, bmax, grids, mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_tensors(&mut w, &self.to_tensors()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_tensors(&mut std::io::BufReader::new(file)).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })?;
        Self::from_tensors(&tensors)
    }
}
