//! Wavefront OBJ input/output (positions and triangular faces only).

use std::fmt::Write as _;
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Parses OBJ text. Polygons are fan-triangulated; texture and normal indices
/// are ignored and normals are recomputed.
pub fn parse_obj(text: &str, origin: &str) -> Result<Mesh> {
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let bad = |m: &str| Error::format(origin, format!("line {}: {m}", lineno + 1));
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    *c = it
                        .next()
                        .ok_or_else(|| bad("vertex needs three coordinates"))?
                        .parse()
                        .map_err(|_| bad("unparsable coordinate"))?;
                }
                positions.push(Vec3::from(p));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| bad("unparsable face index"))?;
                    let resolved = if i < 0 {
                        positions.len() as i64 + i
                    } else {
                        i - 1
                    };
                    if resolved < 0 || resolved >= positions.len() as i64 {
                        return Err(bad("face index out of range"));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(positions, faces)
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

/// Serializes with shortest round-trip float formatting, so reading the text
/// back reproduces the positions bit-exactly.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 48 + mesh.face_count() * 24);
    for p in mesh.positions() {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}
