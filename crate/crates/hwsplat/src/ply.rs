//! Binary little-endian PLY as written by the 3DGS trainer.

use std::fs;
use std::path::Path;

use hwsplat_core::scene::{GaussianSplat, RawSplat, Scene, SH_COEFFS};
use hwsplat_core::sh::coeffs_for_degree;
use hwsplat_core::Error as CoreError;

use crate::error::{IoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    /// `(name, type)`; `None` type marks a list property.
    props: Vec<(String, Option<Scalar>)>,
}

impl Element {
    fn stride(&self) -> Option<usize> {
        self.props.iter().map(|(_, t)| t.map(Scalar::size)).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |m: String| IoError::parse(path, m);
    let end = bytes
        .windows(b"end_header".len())
        .position(|w| w == b"end_header")
        .ok_or_else(|| err("missing end_header".into()))?;
    let nl = bytes[end..].iter().position(|&b| b == b'\n').ok_or_else(|| err("truncated header".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| err("header is not UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(err("not a PLY file (missing 'ply' magic)".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let f = tok.next().unwrap_or("");
                if f != "binary_little_endian" {
                    return Err(err(format!("unsupported PLY format '{f}' (binary_little_endian required)")));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| err("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(format!("element '{name}' has no valid count")))?;
                elements.push(Element { name: name.into(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| err("property before any element".into()))?;
                let t = tok.next().unwrap_or("");
                if t == "list" {
                    let name = tok.nth(2).unwrap_or("");
                    el.props.push((name.into(), None));
                } else {
                    let ty = Scalar::parse(t).ok_or_else(|| err(format!("unknown property type '{t}'")))?;
                    let name = tok.next().ok_or_else(|| err("property without name".into()))?;
                    el.props.push((name.into(), Some(ty)));
                }
            }
            Some(other) => return Err(err(format!("unexpected header keyword '{other}'"))),
            None => {}
        }
    }
    if !format_ok {
        return Err(err("missing format line".into()));
    }
    Ok(Header { elements, body_offset: end + nl + 1 })
}

/// Infers the SH degree from the number of `f_rest_*` properties.
pub fn sh_degree_for_rest(count: usize) -> Option<u8> {
    (0..=3u8).find(|&d| 3 * (coeffs_for_degree(d) - 1) == count)
}

pub fn read_ply(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_ply(&bytes, path)
}

/// Parses a scene; `path` is only used in error messages.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Scene> {
    let err = |m: String| IoError::parse(path, m);
    let header = parse_header(bytes, path)?;
    let mut offset = header.body_offset;
    let mut vertex = None;
    for el in &header.elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        let stride = el.stride().ok_or_else(|| err(format!("list properties in element '{}' before vertex", el.name)))?;
        offset += stride * el.count;
    }
    let vertex = vertex.ok_or_else(|| err("missing element 'vertex'".into()))?;
    let stride = vertex.stride().ok_or_else(|| err("list property in element 'vertex'".into()))?;
    let mut layout = Vec::with_capacity(vertex.props.len());
    let mut at = 0;
    for (name, ty) in &vertex.props {
        let ty = ty.expect("checked by stride");
        layout.push((name.as_str(), ty, at));
        at += ty.size();
    }
    let find = |name: &str| -> Result<(Scalar, usize)> {
        layout
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(_, t, o)| (t, o))
            .ok_or_else(|| err(format!("missing property '{name}'")))
    };
    let rest_count = layout.iter().filter(|(n, _, _)| n.starts_with("f_rest_")).count();
    let degree = sh_degree_for_rest(rest_count)
        .ok_or_else(|| err(format!("{rest_count} f_rest properties do not match an SH degree of 0..=3")))?;
    let per_channel = coeffs_for_degree(degree) - 1;

    let position: Vec<_> = ["x", "y", "z"].iter().map(|n| find(n)).collect::<Result<_>>()?;
    let dc: Vec<_> = (0..3).map(|i| find(&format!("f_dc_{i}"))).collect::<Result<_>>()?;
    let rest: Vec<_> = (0..rest_count).map(|i| find(&format!("f_rest_{i}"))).collect::<Result<_>>()?;
    let opacity = find("opacity")?;
    let scale: Vec<_> = (0..3).map(|i| find(&format!("scale_{i}"))).collect::<Result<_>>()?;
    let rot: Vec<_> = (0..4).map(|i| find(&format!("rot_{i}"))).collect::<Result<_>>()?;

    let needed = offset + stride * vertex.count;
    if bytes.len() < needed {
        return Err(err(format!("body truncated: {} bytes, {needed} expected for {} splats", bytes.len(), vertex.count)));
    }
    let mut splats = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let get = |(t, o): (Scalar, usize)| t.read(&row[o..]);
        let field = |vals: &[f64], name: &'static str| -> Result<()> {
            if vals.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(CoreError::NonFinite { index: i, field: name }.into())
            }
        };
        let mean: [f64; 3] = std::array::from_fn(|k| get(position[k]));
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for ch in 0..3 {
            sh[0][ch] = get(dc[ch]);
            for j in 0..per_channel {
                // channel-major: all of red's higher bands first
                sh[1 + j][ch] = get(rest[ch * per_channel + j]);
            }
        }
        let raw = RawSplat {
            mean,
            rotation: std::array::from_fn(|k| get(rot[k])),
            scale: std::array::from_fn(|k| get(scale[k])),
            opacity: get(opacity),
            sh,
        };
        field(&raw.mean, "position")?;
        field(&raw.rotation, "rotation")?;
        field(&raw.scale, "scale")?;
        field(&[raw.opacity], "opacity")?;
        field(raw.sh.as_flattened(), "sh")?;
        if raw.rotation.iter().all(|&q| q == 0.0) {
            return Err(CoreError::InvalidSplat { index: i, reason: "zero quaternion" }.into());
        }
        let s = raw.activate();
        s.validate(i)?;
        splats.push(s);
    }
    Ok(Scene::new(splats, degree))
}

/// Encodes a scene in the trainer's layout (raw, pre-activation values).
pub fn encode_ply(scene: &Scene) -> Vec<u8> {
    let per_channel = coeffs_for_degree(scene.sh_degree) - 1;
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * per_channel).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", scene.len());
    for n in &names {
        out.push_str(&format!("property float {n}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for s in &scene.splats {
        let raw = RawSplat::deactivate(s);
        let mut row: Vec<f64> = raw.mean.to_vec();
        row.extend([0.0; 3]);
        row.extend(raw.sh[0]);
        for ch in 0..3 {
            row.extend((0..per_channel).map(|j| raw.sh[1 + j][ch]));
        }
        row.push(raw.opacity);
        row.extend(raw.scale);
        row.extend(raw.rotation);
        for v in row {
            bytes.extend((v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn write_ply(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_ply(scene)).map_err(|e| IoError::io(path, e))
}

/// Splats rounded to what the f32 PLY encoding can represent.
pub fn round_trip(scene: &Scene) -> Scene {
    let splats: Vec<GaussianSplat> = parse_ply(&encode_ply(scene), Path::new("<memory>")).expect("own encoding parses").splats;
    Scene::new(splats, scene.sh_degree)
}
