//! Minimal PLY reader/writer for point clouds and triangle meshes.
//!
//! Writes `binary_little_endian` with `float` vertex properties; reads ASCII
//! or little-endian binary files with any scalar vertex property types.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Format(String),
}

/// Vertex table stored column-wise, plus optional triangles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub properties: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn from_points(points: &[Vec3]) -> Self {
        let mut d = PlyData::default();
        for (axis, name) in ["x", "y", "z"].iter().enumerate() {
            d.push_column(name, points.iter().map(|p| p[axis]).collect());
        }
        d
    }

    pub fn push_column(&mut self, name: &str, values: Vec<f64>) {
        self.properties.push(name.to_string());
        self.columns.push(values);
    }

    pub fn vertex_count(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.properties.iter().position(|p| p == name).map(|i| self.columns[i].as_slice())
    }

    pub fn points(&self) -> Result<Vec<Vec3>, PlyError> {
        let get = |n: &str| {
            self.column(n).ok_or_else(|| PlyError::Format(format!("missing vertex property '{n}'")))
        };
        let (x, y, z) = (get("x")?, get("y")?, get("z")?);
        Ok((0..x.len()).map(|i| Vec3::new(x[i], y[i], z[i])).collect())
    }
}

pub fn write_ply<W: Write>(mut w: W, data: &PlyData) -> Result<(), PlyError> {
    let n = data.vertex_count();
    if data.columns.iter().any(|c| c.len() != n) {
        return Err(PlyError::Format("vertex columns differ in length".into()));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {n}")?;
    for p in &data.properties {
        writeln!(w, "property float {p}")?;
    }
    if !data.faces.is_empty() {
        writeln!(w, "element face {}", data.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    let mut buf = Vec::with_capacity(n * data.columns.len() * 4 + data.faces.len() * 13);
    for i in 0..n {
        for c in &data.columns {
            buf.extend_from_slice(&(c[i] as f32).to_le_bytes());
        }
    }
    for f in &data.faces {
        buf.push(3u8);
        for &v in f {
            buf.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self, PlyError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(PlyError::Format(format!("unknown scalar type '{s}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply<R: BufRead>(mut r: R) -> Result<PlyData, PlyError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, PlyError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(PlyError::Format("unexpected end of header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(PlyError::Format("missing 'ply' magic".into()));
    }
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", f, _] => return Err(PlyError::Format(format!("unsupported format '{f}'"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| PlyError::Format(format!("bad count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, vt, _] => elements
                .last_mut()
                .ok_or_else(|| PlyError::Format("property before element".into()))?
                .props
                .push(Property::List(Scalar::parse(ct)?, Scalar::parse(vt)?)),
            ["property", t, name] => elements
                .last_mut()
                .ok_or_else(|| PlyError::Format("property before element".into()))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(t)?)),
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(PlyError::Format(format!("unexpected header line '{l}'"))),
        }
    }
    let ascii = ascii.ok_or_else(|| PlyError::Format("missing format line".into()))?;
    let mut out = PlyData::default();
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let text;
    let mut tokens: Box<dyn Iterator<Item = &str>> = if ascii {
        text = String::from_utf8_lossy(&rest).into_owned();
        Box::new(text.split_whitespace())
    } else {
        Box::new(std::iter::empty())
    };
    let mut pos = 0usize;
    let mut read_bin = |s: Scalar| -> Result<f64, PlyError> {
        let n = s.size();
        if pos + n > rest.len() {
            return Err(PlyError::Format("truncated binary body".into()));
        }
        let v = s.decode(&rest[pos..pos + n]);
        pos += n;
        Ok(v)
    };
    let read_tok = |tokens: &mut Box<dyn Iterator<Item = &str>>| -> Result<f64, PlyError> {
        let t = tokens.next().ok_or_else(|| PlyError::Format("truncated ASCII body".into()))?;
        t.parse::<f64>().map_err(|_| PlyError::Format(format!("bad number '{t}'")))
    };
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex {
            for p in &el.props {
                if let Property::Scalar(name, _) = p {
                    out.push_column(name, Vec::with_capacity(el.count));
                }
            }
        }
        for _ in 0..el.count {
            let mut col = 0;
            for p in &el.props {
                match p {
                    Property::Scalar(_, t) => {
                        let v = if ascii { read_tok(&mut tokens)? } else { read_bin(*t)? };
                        if is_vertex {
                            out.columns[col].push(v);
                            col += 1;
                        }
                    }
                    Property::List(ct, vt) => {
                        let k = if ascii { read_tok(&mut tokens)? } else { read_bin(*ct)? } as usize;
                        let mut idx = Vec::with_capacity(k);
                        for _ in 0..k {
                            idx.push(if ascii { read_tok(&mut tokens)? } else { read_bin(*vt)? } as u32);
                        }
                        if is_face {
                            for i in 1..idx.len().saturating_sub(1) {
                                out.faces.push([idx[0], idx[i], idx[i + 1]]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes a triangle mesh as Wavefront OBJ.
pub fn write_obj<W: Write>(mut w: W, vertices: &[Vec3], faces: &[[u32; 3]]) -> std::io::Result<()> {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 24);
    use std::fmt::Write as _;
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    w.write_all(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_with_faces() {
        let mut d = PlyData::from_points(&[Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 8.0), Vec3::zeros()]);
        d.push_column("opacity", vec![0.5, 0.25, 1.0]);
        d.faces.push([0, 1, 2]);
        let mut buf = Vec::new();
        write_ply(&mut buf, &d).unwrap();
        let back = read_ply(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn reads_ascii_with_doubles_and_quads() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 1\n1 0 0 2\n1 1 0 3\n0 1 0 4\n4 0 1 2 3\n";
        let d = read_ply(std::io::Cursor::new(text)).unwrap();
        assert_eq!(d.points().unwrap()[2], Vec3::new(1.0, 1.0, 0.0));
        assert_eq!(d.column("red").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn rejects_truncated_body() {
        let mut buf = Vec::new();
        write_ply(&mut buf, &PlyData::from_points(&[Vec3::new(1.0, 2.0, 3.0)])).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_ply(std::io::Cursor::new(buf)).is_err());
    }
}
