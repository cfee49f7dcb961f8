//! Point-cloud, mesh and polyline file formats.
//!
//! Numbers are written in the shortest form that parses back to the same
//! value, so text round trips are exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{invalid, Error, Result};
use crate::geometry::{PointCloud, Polylines, TriangleMesh};
use crate::Real;

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: Real>(tok: &str, line: usize) -> Result<T> {
    let v: f64 = tok
        .parse()
        .map_err(|_| perr(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(perr(line, format!("non-finite value {tok:?}")));
    }
    Ok(T::lit(v))
}

fn fmt_num<T: Real>(v: T) -> String {
    format!("{}", v.to_f64_lossy())
}

/// Whitespace-separated positions, 2, 3 or 6 columns per line (the last
/// three of six are normals). Blank lines and `#` comments are skipped.
pub fn parse_xyz<T: Real>(text: &str) -> Result<PointCloud<T>> {
    let mut cols = None;
    let mut pts = Vec::new();
    let mut nrm = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match cols {
            None => {
                if !matches!(toks.len(), 2 | 3 | 6) {
                    return Err(perr(ln, format!("expected 2, 3 or 6 columns, found {}", toks.len())));
                }
                cols = Some(toks.len());
            }
            Some(c) if c != toks.len() => {
                return Err(perr(ln, format!("expected {c} columns, found {}", toks.len())));
            }
            _ => {}
        }
        let d = toks.len().min(3);
        for t in &toks[..d] {
            pts.push(parse_num::<T>(t, ln)?);
        }
        for t in &toks[d..] {
            nrm.push(parse_num::<T>(t, ln)?);
        }
    }
    let c = cols.ok_or_else(|| perr(0, "no points in file"))?;
    let d = c.min(3);
    let n = pts.len() / d;
    let points = Array2::from_shape_vec((n, d), pts).unwrap();
    if c == 6 {
        let normals = Array2::from_shape_vec((n, 3), nrm).unwrap();
        PointCloud::with_normals(points, normals)
    } else {
        PointCloud::new(points)
    }
}

pub fn format_xyz<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::new();
    for i in 0..cloud.len() {
        let mut row: Vec<String> = cloud.point(i).iter().map(|v| fmt_num(*v)).collect();
        if let Some(n) = cloud.normals() {
            row.extend(n.row(i).iter().map(|v| fmt_num(*v)));
        }
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], fmt: PlyFormat) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let a: [u8; std::mem::size_of::<$t>()] = b.try_into().unwrap();
                if fmt == PlyFormat::BigEndian {
                    <$t>::from_be_bytes(a) as f64
                } else {
                    <$t>::from_le_bytes(a) as f64
                }
            }};
        }
        match self {
            Self::I8 => num!(i8),
            Self::U8 => num!(u8),
            Self::I16 => num!(i16),
            Self::U16 => num!(u16),
            Self::I32 => num!(i32),
            Self::U32 => num!(u32),
            Self::F32 => num!(f32),
            Self::F64 => num!(f64),
        }
    }
}

#[derive(Debug, Clone)]
struct PlyProperty {
    name: String,
    ty: PlyType,
    /// Count type for list properties.
    list: Option<PlyType>,
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

/// Point cloud read from a PLY file and any warnings raised while reading.
#[derive(Debug, Clone)]
pub struct PlyCloud<T> {
    pub cloud: PointCloud<T>,
    pub warnings: Vec<String>,
}

/// Reads vertex positions from ASCII or binary PLY. Normals and every other
/// property or element are ignored.
pub fn parse_ply<T: Real>(bytes: &[u8]) -> Result<PlyCloud<T>> {
    let mut pos = 0;
    let mut ln = 0;
    let mut next_line = |pos: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| *pos + e)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim().to_string();
        *pos = (end + 1).min(bytes.len());
        ln += 1;
        Some((ln, line))
    };
    match next_line(&mut pos) {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(perr(1, "missing ply magic")),
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    let header_lines;
    loop {
        let (l, line) = next_line(&mut pos).ok_or_else(|| perr(0, "unterminated ply header"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.first().copied() {
            Some("format") => {
                format = Some(match f.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::LittleEndian,
                    Some("binary_big_endian") => PlyFormat::BigEndian,
                    _ => return Err(perr(l, "unknown ply format")),
                });
            }
            Some("element") => {
                if f.len() != 3 {
                    return Err(perr(l, "malformed element line"));
                }
                let count = f[2].parse().map_err(|_| perr(l, "bad element count"))?;
                elements.push(PlyElement {
                    name: f[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(l, "property before any element"))?;
                let prop = if f.get(1) == Some(&"list") {
                    if f.len() != 5 {
                        return Err(perr(l, "malformed list property"));
                    }
                    PlyProperty {
                        name: f[4].to_string(),
                        ty: PlyType::parse(f[3]).ok_or_else(|| perr(l, "unknown property type"))?,
                        list: Some(PlyType::parse(f[2]).ok_or_else(|| perr(l, "unknown list count type"))?),
                    }
                } else {
                    if f.len() != 3 {
                        return Err(perr(l, "malformed property line"));
                    }
                    PlyProperty {
                        name: f[2].to_string(),
                        ty: PlyType::parse(f[1]).ok_or_else(|| perr(l, "unknown property type"))?,
                        list: None,
                    }
                };
                el.props.push(prop);
            }
            Some("end_header") => {
                header_lines = l;
                break;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(perr(l, format!("unexpected header keyword {other:?}"))),
        }
    }
    let format = format.ok_or_else(|| perr(header_lines, "ply header has no format"))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(header_lines, "ply file has no vertex element"))?;
    let vert = &elements[vi];
    let axis: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|a| vert.props.iter().position(|p| p.name == *a && p.list.is_none()))
        .collect::<Option<_>>()
        .ok_or_else(|| perr(header_lines, "vertex element lacks x, y, z"))?;
    let mut warnings = Vec::new();
    if vert.props.iter().any(|p| p.name == "nx") {
        warnings.push("ply normals ignored".to_string());
    }
    let n = vert.count;
    let mut data = vec![T::zero(); n * 3];

    if format == PlyFormat::Ascii {
        let body = String::from_utf8_lossy(&bytes[pos..]);
        let mut lines = body
            .lines()
            .enumerate()
            .map(|(i, l)| (header_lines + 1 + i, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        for (ei, el) in elements.iter().enumerate() {
            for r in 0..el.count {
                let (l, line) = lines
                    .next()
                    .ok_or_else(|| perr(0, format!("ply data ends inside element {}", el.name)))?;
                if ei != vi {
                    continue;
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                // vertex lists are rare; walk tokens property by property
                let mut t = 0;
                let mut values = Vec::with_capacity(el.props.len());
                for p in &el.props {
                    if p.list.is_some() {
                        let c: usize = toks
                            .get(t)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| perr(l, "bad list count"))?;
                        t += 1 + c;
                        values.push(0.0);
                    } else {
                        let s = toks.get(t).ok_or_else(|| perr(l, "too few vertex values"))?;
                        values.push(parse_num::<f64>(s, l)?);
                        t += 1;
                    }
                }
                for (a, &pi) in axis.iter().enumerate() {
                    data[r * 3 + a] = T::lit(values[pi]);
                }
            }
        }
    } else {
        let mut off = pos;
        let take = |off: &mut usize, k: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*off..*off + k)
                .ok_or_else(|| perr(0, "binary ply data truncated"))?;
            *off += k;
            Ok(s)
        };
        for (ei, el) in elements.iter().enumerate() {
            for r in 0..el.count {
                for (pi, p) in el.props.iter().enumerate() {
                    if let Some(ct) = p.list {
                        let c = ct.decode(take(&mut off, ct.size())?, format);
                        if !(c >= 0.0) {
                            return Err(perr(0, "negative list count"));
                        }
                        take(&mut off, c as usize * p.ty.size())?;
                        continue;
                    }
                    let v = p.ty.decode(take(&mut off, p.ty.size())?, format);
                    if ei == vi {
                        if let Some(a) = axis.iter().position(|&x| x == pi) {
                            if !v.is_finite() {
                                return Err(perr(0, format!("non-finite coordinate in vertex {r}")));
                            }
                            data[r * 3 + a] = T::lit(v);
                        }
                    }
                }
            }
        }
    }
    let cloud = PointCloud::new(Array2::from_shape_vec((n, 3), data).unwrap())?;
    Ok(PlyCloud { cloud, warnings })
}

/// PLY with `x y z` as doubles; normals are not written.
pub fn format_ply<T: Real>(cloud: &PointCloud<T>, binary: bool) -> Result<Vec<u8>> {
    if cloud.dim() != 3 {
        return invalid("ply output needs 3-D points");
    }
    let mut out = Vec::new();
    let fmt = if binary { "binary_little_endian" } else { "ascii" };
    let header = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    out.extend_from_slice(header.as_bytes());
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        if binary {
            for v in p.iter() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        } else {
            let row: Vec<String> = p.iter().map(|v| fmt_num(*v)).collect();
            out.extend_from_slice(row.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

pub fn format_obj<T: Real>(mesh: &TriangleMesh<T>) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", fmt_num(v[0]), fmt_num(v[1]), fmt_num(v[2])).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

/// Vertices and faces of an OBJ file. Polygons are split into fans;
/// texture and normal references are ignored.
pub fn parse_obj<T: Real>(text: &str) -> Result<TriangleMesh<T>> {
    let mut mesh = TriangleMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(perr(ln, "vertex needs three coordinates"));
                }
                mesh.vertices.push([
                    parse_num(c[0], ln)?,
                    parse_num(c[1], ln)?,
                    parse_num(c[2], ln)?,
                ]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in toks {
                    let first = t.split('/').next().unwrap_or("");
                    let k: i64 = first
                        .parse()
                        .map_err(|_| perr(ln, format!("bad face index {t:?}")))?;
                    let n = mesh.vertices.len() as i64;
                    let k = if k < 0 { n + k } else { k - 1 };
                    if k < 0 || k >= n {
                        return Err(perr(ln, format!("face index {t} out of range")));
                    }
                    idx.push(k as usize);
                }
                if idx.len() < 3 {
                    return Err(perr(ln, "face needs at least three vertices"));
                }
                for w in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[w], idx[w + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// One chain per block:
///
/// ```text
/// loop 4
/// x y
/// ...
/// open 3
/// x y
/// ...
/// ```
/// Loop vertices are listed once; the closing segment is implied.
pub fn format_polylines<T: Real>(lines: &Polylines<T>) -> String {
    let mut s = String::new();
    for (chain, closed) in lines.chains() {
        writeln!(s, "{} {}", if closed { "loop" } else { "open" }, chain.len()).unwrap();
        for &v in &chain {
            let p = lines.vertices[v];
            writeln!(s, "{} {}", fmt_num(p[0]), fmt_num(p[1])).unwrap();
        }
    }
    s
}

pub fn parse_polylines<T: Real>(text: &str) -> Result<Polylines<T>> {
    let mut out = Polylines {
        vertices: Vec::new(),
        segments: Vec::new(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    while let Some((ln, head)) = lines.next() {
        let f: Vec<&str> = head.split_whitespace().collect();
        let closed = match f.first().copied() {
            Some("loop") => true,
            Some("open") => false,
            _ => return Err(perr(ln, "expected `loop <n>` or `open <n>`")),
        };
        let n: usize = f
            .get(1)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| perr(ln, "bad chain length"))?;
        let start = out.vertices.len();
        for _ in 0..n {
            let (l, row) = lines.next().ok_or_else(|| perr(ln, "chain ends early"))?;
            let c: Vec<&str> = row.split_whitespace().collect();
            if c.len() != 2 {
                return Err(perr(l, "expected two coordinates"));
            }
            out.vertices.push([parse_num(c[0], l)?, parse_num(c[1], l)?]);
        }
        for k in 1..n {
            out.segments.push([start + k - 1, start + k]);
        }
        if closed && n >= 2 {
            out.segments.push([start + n - 1, start]);
        }
    }
    Ok(out)
}

/// Reads `.xyz`/`.txt`/`.pts` or `.ply` by extension.
pub fn read_point_cloud(path: &Path) -> Result<PlyCloud<f64>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = std::fs::read(path)?;
    match ext.as_str() {
        "ply" => parse_ply(&bytes),
        "xyz" | "txt" | "pts" | "" => {
            let text = String::from_utf8(bytes).map_err(|_| perr(0, "file is not UTF-8 text"))?;
            Ok(PlyCloud {
                cloud: parse_xyz(&text)?,
                warnings: Vec::new(),
            })
        }
        other => invalid(format!("unsupported point-cloud extension .{other}")),
    }
}
