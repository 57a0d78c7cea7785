//! Binary little-endian PLY in the reference 3DGS layout.
//!
//! Raw fields are `x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2
//! rot_0..3`, plus an `edit_added` byte marking Gaussians created by depth
//! initialization. On load, opacity goes through a sigmoid, scale through
//! `exp`, the DC coefficients through `0.5 + C0 * f_dc`, and the quaternion is
//! normalized if its norm is off by more than [`QUAT_NORM_TOL`].
//! Higher SH bands are ignored on load and written as zeros.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::{quat_norm, Gaussian, GaussianCloud, QUAT_NORM_TOL};
use crate::error::{Error, Result};

/// Zeroth-order spherical harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const REST_COUNT: usize = 45;

/// Raw per-point values as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawGaussian {
    pub position: [f32; 3],
    pub f_dc: [f32; 3],
    pub opacity_logit: f32,
    pub log_scale: [f32; 3],
    pub rotation: [f32; 4],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl RawGaussian {
    pub fn encode(g: &Gaussian) -> Self {
        Self {
            position: g.mean.map(|v| v as f32).into(),
            f_dc: g.color.map(|c| ((c - 0.5) / SH_C0) as f32).into(),
            opacity_logit: logit(g.opacity) as f32,
            log_scale: g.scale.map(|s| s.ln() as f32).into(),
            rotation: g.rotation.map(|v| v as f32),
        }
    }

    pub fn decode(&self) -> Gaussian {
        let mut rotation = self.rotation.map(f64::from);
        let norm = quat_norm(&rotation);
        if (norm - 1.0).abs() > QUAT_NORM_TOL && norm > 0.0 {
            rotation = rotation.map(|v| v / norm);
        }
        Gaussian {
            mean: Vector3::from(self.position.map(f64::from)),
            rotation,
            scale: Vector3::from(self.log_scale.map(|s| f64::from(s).exp())),
            opacity: sigmoid(f64::from(self.opacity_logit)),
            color: Vector3::from(
                self.f_dc
                    .map(|f| (0.5 + SH_C0 * f64::from(f)).clamp(0.0, 1.0)),
            ),
        }
    }
}

/// Rounds every parameter through its on-disk encoding, so that saving and
/// loading the result reproduces it exactly.
pub fn quantize(cloud: &GaussianCloud) -> GaussianCloud {
    let gaussians = cloud
        .gaussians()
        .iter()
        .map(|g| {
            let mut raw = RawGaussian::encode(g);
            for _ in 0..4 {
                let next = RawGaussian::encode(&raw.decode());
                if next == raw {
                    break;
                }
                raw = next;
            }
            raw.decode()
        })
        .collect();
    GaussianCloud::with_markers(gaussians, cloud.added().to_vec()).expect("same length")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            Self::I8 => f64::from(r.read_i8()?),
            Self::U8 => f64::from(r.read_u8()?),
            Self::I16 => f64::from(r.read_i16::<LittleEndian>()?),
            Self::U16 => f64::from(r.read_u16::<LittleEndian>()?),
            Self::I32 => f64::from(r.read_i32::<LittleEndian>()?),
            Self::U32 => f64::from(r.read_u32::<LittleEndian>()?),
            Self::F32 => f64::from(r.read_f32::<LittleEndian>()?),
            Self::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

struct Header {
    vertex_count: usize,
    properties: Vec<(String, ScalarType)>,
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| Error::Format(format!("reading PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next(r)? != "ply" {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut saw_format = false;
    loop {
        let l = next(r)?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported PLY format '{fmt}'")));
                }
                saw_format = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if vertex_count.is_some() && in_vertex {
                    // Elements after the vertex block are never read.
                    in_vertex = false;
                    continue;
                }
                if *name == "vertex" {
                    vertex_count = Some(count.parse::<usize>().map_err(|_| {
                        Error::Format(format!("bad vertex count '{count}'"))
                    })?);
                    in_vertex = true;
                } else if vertex_count.is_none() {
                    return Err(Error::Format(format!(
                        "element '{name}' before vertex element is not supported"
                    )));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties on vertices are not supported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type '{ty}'")))?;
                properties.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(Error::Format(format!("unexpected header line '{l}'"))),
        }
    }
    if !saw_format {
        return Err(Error::Format("missing format line".into()));
    }
    let vertex_count = vertex_count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
    })
}

pub fn read_ply(reader: impl Read) -> Result<GaussianCloud> {
    let mut r = BufReader::new(reader);
    let header = read_header(&mut r)?;
    let field = |name: &str| -> Result<usize> {
        header
            .properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing field '{name}'")))
    };
    let pos = [field("x")?, field("y")?, field("z")?];
    let dc = [field("f_dc_0")?, field("f_dc_1")?, field("f_dc_2")?];
    let op = field("opacity")?;
    let sc = [field("scale_0")?, field("scale_1")?, field("scale_2")?];
    let rot = [field("rot_0")?, field("rot_1")?, field("rot_2")?, field("rot_3")?];
    let added_idx = header.properties.iter().position(|(n, _)| n == "edit_added");

    let mut gaussians = Vec::with_capacity(header.vertex_count);
    let mut added = Vec::with_capacity(header.vertex_count);
    let mut row = vec![0.0f64; header.properties.len()];
    for index in 0..header.vertex_count {
        for (slot, (_, ty)) in row.iter_mut().zip(&header.properties) {
            *slot = ty
                .read(&mut r)
                .map_err(|e| Error::Format(format!("truncated vertex data at point {index}: {e}")))?;
        }
        let fields: [(&str, &[usize]); 5] = [
            ("position", &pos),
            ("f_dc", &dc),
            ("opacity", std::slice::from_ref(&op)),
            ("scale", &sc),
            ("rot", &rot),
        ];
        for (field, idx) in fields {
            if idx.iter().any(|&i| !row[i].is_finite()) {
                return Err(Error::Data {
                    index,
                    field: field.to_string(),
                });
            }
        }
        let raw = RawGaussian {
            position: [row[pos[0]] as f32, row[pos[1]] as f32, row[pos[2]] as f32],
            f_dc: [row[dc[0]] as f32, row[dc[1]] as f32, row[dc[2]] as f32],
            opacity_logit: row[op] as f32,
            log_scale: [row[sc[0]] as f32, row[sc[1]] as f32, row[sc[2]] as f32],
            rotation: [
                row[rot[0]] as f32,
                row[rot[1]] as f32,
                row[rot[2]] as f32,
                row[rot[3]] as f32,
            ],
        };
        if raw.rotation.iter().all(|&v| v == 0.0) {
            return Err(Error::Data {
                index,
                field: "rot (zero quaternion)".into(),
            });
        }
        gaussians.push(raw.decode());
        added.push(added_idx.is_some_and(|i| row[i] != 0.0));
    }
    GaussianCloud::with_markers(gaussians, added)
}

pub fn write_ply(cloud: &GaussianCloud, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let io = |e: std::io::Error| Error::Format(format!("writing PLY: {e}"));
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..REST_COUNT).map(|i| format!("f_rest_{i}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("property uchar edit_added\nend_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    for (g, &added) in cloud.gaussians().iter().zip(cloud.added()) {
        let raw = RawGaussian::encode(g);
        let mut values = Vec::with_capacity(names.len());
        values.extend(raw.position);
        values.extend([0.0f32; 3]);
        values.extend(raw.f_dc);
        values.extend([0.0f32; REST_COUNT]);
        values.push(raw.opacity_logit);
        values.extend(raw.log_scale);
        values.extend(raw.rotation);
        for v in values {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
        w.write_u8(u8::from(added)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(file)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(cloud, file)
}
