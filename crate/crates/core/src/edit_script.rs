//! Declarative edit files:
//!
//! ```text
//! delete <plane_id>
//! transform <plane_id> <16 row-major values>
//! transform_region <min x y z> <max x y z> <16 row-major values>
//! ```

use std::path::Path;

use crate::edit::{transform_primitive, transform_region, EditState, RigidTransform};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::registry::Registry;
use crate::volume::SemanticVolume;

#[derive(Debug, Clone, PartialEq)]
pub enum EditCommand {
    Delete(u32),
    Transform(u32, RigidTransform),
    TransformRegion { min: Vec3, max: Vec3, motion: RigidTransform },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditScript {
    pub commands: Vec<EditCommand>,
}

fn parse_numbers(ctx: &str, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| Error::parse(ctx, format!("{f:?}: {e}")))
        })
        .collect()
}

fn parse_matrix(ctx: &str, fields: &[&str]) -> Result<RigidTransform> {
    let v = parse_numbers(ctx, fields)?;
    let m: [f64; 16] = v
        .try_into()
        .map_err(|_| Error::parse(ctx, "expected 16 matrix values"))?;
    RigidTransform::from_row_major(&m).map_err(|e| Error::parse(ctx, e.to_string()))
}

fn parse_id(ctx: &str, s: &str) -> Result<u32> {
    match s.parse::<u32>() {
        Ok(id) if id > 0 => Ok(id),
        _ => Err(Error::parse(ctx, format!("bad plane id {s:?}"))),
    }
}

impl EditScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut commands = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("edit script line {}", lineno + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            let cmd = match f[0] {
                "delete" if f.len() == 2 => EditCommand::Delete(parse_id(&ctx, f[1])?),
                "transform" if f.len() == 18 => EditCommand::Transform(parse_id(&ctx, f[1])?, parse_matrix(&ctx, &f[2..])?),
                "transform_region" if f.len() == 23 => {
                    let b = parse_numbers(&ctx, &f[1..7])?;
                    let (min, max) = (Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
                    if (0..3).any(|a| min[a] > max[a]) {
                        return Err(Error::parse(&ctx, "region min exceeds max"));
                    }
                    EditCommand::TransformRegion {
                        min,
                        max,
                        motion: parse_matrix(&ctx, &f[7..])?,
                    }
                }
                "delete" | "transform" | "transform_region" => {
                    return Err(Error::parse(&ctx, format!("wrong number of fields for {}", f[0])))
                }
                other => return Err(Error::parse(&ctx, format!("unknown command {other:?}"))),
            };
            commands.push(cmd);
        }
        Ok(Self { commands })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the commands in order. Referenced planes must exist.
    pub fn apply(&self, vol: &mut SemanticVolume, registry: &mut Registry, edit: &mut EditState) -> Result<()> {
        for cmd in &self.commands {
            match cmd {
                EditCommand::Delete(id) => {
                    registry.get(*id).ok_or(Error::UnknownPlane(*id))?;
                    vol.delete_primitive(registry, *id)?;
                }
                EditCommand::Transform(id, motion) => {
                    registry.get(*id).ok_or(Error::UnknownPlane(*id))?;
                    transform_primitive(vol, edit, registry, *id, motion)?;
                }
                EditCommand::TransformRegion { min, max, motion } => {
                    transform_region(vol, edit, *min, *max, motion)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Plane;
    use crate::registry::RegistryConfig;
    use crate::volume::{Grid, DENSE, EMPTY};

    const IDENTITY: &str = "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1";

    #[test]
    fn parses_all_commands() {
        let text = format!(
            "# comment\ndelete 2\ntransform 1 1 0 0 0.5 0 1 0 0 0 0 1 0 0 0 0 1\n\ntransform_region -1 -1 -1 1 1 1 {IDENTITY}\n"
        );
        let s = EditScript::parse(&text).unwrap();
        assert_eq!(s.commands.len(), 3);
        assert_eq!(s.commands[0], EditCommand::Delete(2));
        match &s.commands[1] {
            EditCommand::Transform(1, t) => assert_eq!(t.translation, Vec3::new(0.5, 0.0, 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(EditScript::parse("delete\n").is_err());
        assert!(EditScript::parse("delete 0\n").is_err());
        assert!(EditScript::parse("spin 1\n").is_err());
        assert!(EditScript::parse("transform 1 1 0 0\n").is_err());
        // scaling is not rigid
        assert!(EditScript::parse("transform 1 2 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n").is_err());
        assert!(EditScript::parse(&format!("transform_region 1 0 0 0 1 1 {IDENTITY}\n")).is_err());
    }

    #[test]
    fn empty_script_is_identity() {
        let grid = Grid::new([4, 4, 4], Vec3::zeros(), 1.0).unwrap();
        let labels: Vec<i32> = (0..64).map(|i| if i % 3 == 0 { 1 } else { DENSE }).collect();
        let mut vol = SemanticVolume::from_labels(grid, labels.clone()).unwrap();
        let mut reg =
            Registry::from_planes(RegistryConfig::default(), vec![Plane::new(Vec3::z(), 1.0).unwrap().with_id(1)]).unwrap();
        let mut edit = EditState::new(grid);
        EditScript::parse("").unwrap().apply(&mut vol, &mut reg, &mut edit).unwrap();
        assert_eq!(vol.labels(), &labels[..]);
        assert!(edit.is_identity());
    }

    #[test]
    fn delete_and_unknown_plane() {
        let grid = Grid::new([4, 4, 4], Vec3::zeros(), 1.0).unwrap();
        let labels: Vec<i32> = (0..64).map(|i| if i % 3 == 0 { 1 } else { DENSE }).collect();
        let mut vol = SemanticVolume::from_labels(grid, labels).unwrap();
        let mut reg =
            Registry::from_planes(RegistryConfig::default(), vec![Plane::new(Vec3::z(), 1.0).unwrap().with_id(1)]).unwrap();
        let mut edit = EditState::new(grid);
        EditScript::parse("delete 1").unwrap().apply(&mut vol, &mut reg, &mut edit).unwrap();
        assert_eq!(vol.count(|l| l == 1), 0);
        assert_eq!(vol.count(|l| l == EMPTY), 22);
        assert!(!reg.is_alive(1));
        let err = EditScript::parse("delete 7").unwrap().apply(&mut vol, &mut reg, &mut edit);
        assert!(matches!(err, Err(Error::UnknownPlane(7))));
    }
}
