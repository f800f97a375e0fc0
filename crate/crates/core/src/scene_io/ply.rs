//! PLY point-cloud reader and writer.
//!
//! Supports ASCII and binary little-endian PLY with f32/f64 vertex
//! coordinates and optional nx/ny/nz normals. Unknown vertex properties and
//! non-vertex elements are skipped. The writer emits f64 properties so a
//! write/read cycle preserves coordinates bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::{ScenePointCloud, SceneIoError};

#[derive(Clone, Copy, PartialEq, Eq)]
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
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn byte_len(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 => 4,
            ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_f64(self, bytes: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f64,
            ScalarType::U8 => bytes[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }

    fn read_usize(self, bytes: &[u8]) -> usize {
        self.read_f64(bytes) as usize
    }
}

enum Property {
    Scalar { ty: ScalarType, name: String },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
}

fn malformed(msg: impl Into<String>) -> SceneIoError {
    SceneIoError::MalformedFile(msg.into())
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header, SceneIoError> {
    let mut line = String::new();
    reader.read_line(&mut line).map_err(SceneIoError::Io)?;
    if line.trim_end() != "ply" {
        return Err(malformed("missing 'ply' magic line"));
    }

    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(SceneIoError::Io)?;
        if n == 0 {
            return Err(malformed("header ended before end_header"));
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => match tokens.next() {
                Some("ascii") => encoding = Some(Encoding::Ascii),
                Some("binary_little_endian") => encoding = Some(Encoding::BinaryLittleEndian),
                Some(other) => return Err(malformed(format!("unsupported format '{other}'"))),
                None => return Err(malformed("format line missing encoding")),
            },
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| malformed("element line missing name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| malformed("element line missing count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                let ty_token = tokens
                    .next()
                    .ok_or_else(|| malformed("property line missing type"))?;
                if ty_token == "list" {
                    let count_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| malformed("bad list count type"))?;
                    let item_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| malformed("bad list item type"))?;
                    element.properties.push(Property::List { count_ty, item_ty });
                } else {
                    let ty = ScalarType::parse(ty_token)
                        .ok_or_else(|| malformed(format!("unknown property type '{ty_token}'")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| malformed("property line missing name"))?;
                    element.properties.push(Property::Scalar {
                        ty,
                        name: name.to_string(),
                    });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(malformed(format!("unknown header keyword '{other}'"))),
        }
    }

    let encoding = encoding.ok_or_else(|| malformed("header missing format line"))?;
    Ok(Header { encoding, elements })
}

struct VertexLayout {
    x: usize,
    y: usize,
    z: usize,
    normals: Option<[usize; 3]>,
}

fn vertex_layout(element: &Element) -> Result<VertexLayout, SceneIoError> {
    let mut x = None;
    let mut y = None;
    let mut z = None;
    let mut nx = None;
    let mut ny = None;
    let mut nz = None;
    for (idx, prop) in element.properties.iter().enumerate() {
        if let Property::Scalar { name, .. } = prop {
            match name.as_str() {
                "x" => x = Some(idx),
                "y" => y = Some(idx),
                "z" => z = Some(idx),
                "nx" => nx = Some(idx),
                "ny" => ny = Some(idx),
                "nz" => nz = Some(idx),
                _ => {}
            }
        }
    }
    let (x, y, z) = match (x, y, z) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(malformed("vertex element missing x/y/z properties")),
    };
    let normals = match (nx, ny, nz) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => return Err(malformed("vertex element has partial nx/ny/nz properties")),
    };
    Ok(VertexLayout { x, y, z, normals })
}

/// Read a PLY point cloud (ASCII or binary little-endian).
pub fn read_ply(path: &Path) -> Result<ScenePointCloud, SceneIoError> {
    let file = File::open(path).map_err(SceneIoError::Io)?;
    let mut reader = BufReader::new(file);
    let header = parse_header(&mut reader)?;

    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos])?;

    let (points, raw_normals) = match header.encoding {
        Encoding::Ascii => read_ascii_vertices(&mut reader, &header, vertex_pos, &layout)?,
        Encoding::BinaryLittleEndian => {
            read_binary_vertices(&mut reader, &header, vertex_pos, &layout)?
        }
    };

    ScenePointCloud::new(points, raw_normals)
}

fn read_ascii_vertices<R: BufRead>(
    reader: &mut R,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<(Vec<Point3<f64>>, Option<Vec<Vector3<f64>>>), SceneIoError> {
    let mut line = String::new();
    // Skip rows of elements preceding the vertex element; every row is one line.
    for element in &header.elements[..vertex_pos] {
        for _ in 0..element.count {
            line.clear();
            if reader.read_line(&mut line).map_err(SceneIoError::Io)? == 0 {
                return Err(malformed("file truncated before vertex data"));
            }
        }
    }

    let element = &header.elements[vertex_pos];
    let mut points = Vec::with_capacity(element.count);
    let mut normals = layout.normals.map(|_| Vec::with_capacity(element.count));
    for row in 0..element.count {
        line.clear();
        if reader.read_line(&mut line).map_err(SceneIoError::Io)? == 0 {
            return Err(malformed(format!("truncated at vertex row {row}")));
        }
        let mut fields: Vec<f64> = Vec::with_capacity(element.properties.len());
        let mut tokens = line.split_whitespace();
        for prop in &element.properties {
            match prop {
                Property::Scalar { .. } => {
                    let token = tokens
                        .next()
                        .ok_or_else(|| malformed(format!("short vertex row {row}")))?;
                    let value: f64 = token
                        .parse()
                        .map_err(|_| malformed(format!("bad number '{token}' at row {row}")))?;
                    fields.push(value);
                }
                Property::List { .. } => {
                    let count: usize = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| malformed(format!("bad list count at row {row}")))?;
                    for _ in 0..count {
                        tokens
                            .next()
                            .ok_or_else(|| malformed(format!("short list at row {row}")))?;
                    }
                    fields.push(0.0);
                }
            }
        }
        points.push(Point3::new(fields[layout.x], fields[layout.y], fields[layout.z]));
        if let (Some(ns), Some([a, b, c])) = (normals.as_mut(), layout.normals) {
            ns.push(Vector3::new(fields[a], fields[b], fields[c]));
        }
    }
    Ok((points, normals))
}

fn read_binary_vertices<R: Read>(
    reader: &mut R,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<(Vec<Point3<f64>>, Option<Vec<Vector3<f64>>>), SceneIoError> {
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(SceneIoError::Io)?;
    let mut offset = 0usize;

    for element in &header.elements[..vertex_pos] {
        for _ in 0..element.count {
            offset = skip_binary_row(&rest, offset, element)?;
        }
    }

    let element = &header.elements[vertex_pos];
    let mut points = Vec::with_capacity(element.count);
    let mut normals = layout.normals.map(|_| Vec::with_capacity(element.count));
    for row in 0..element.count {
        let mut fields: Vec<f64> = Vec::with_capacity(element.properties.len());
        for prop in &element.properties {
            match prop {
                Property::Scalar { ty, .. } => {
                    let len = ty.byte_len();
                    let bytes = rest
                        .get(offset..offset + len)
                        .ok_or_else(|| malformed(format!("truncated at vertex row {row}")))?;
                    fields.push(ty.read_f64(bytes));
                    offset += len;
                }
                Property::List { count_ty, item_ty } => {
                    let clen = count_ty.byte_len();
                    let bytes = rest
                        .get(offset..offset + clen)
                        .ok_or_else(|| malformed(format!("truncated list at row {row}")))?;
                    let count = count_ty.read_usize(bytes);
                    offset += clen + count * item_ty.byte_len();
                    if offset > rest.len() {
                        return Err(malformed(format!("truncated list at row {row}")));
                    }
                    fields.push(0.0);
                }
            }
        }
        points.push(Point3::new(fields[layout.x], fields[layout.y], fields[layout.z]));
        if let (Some(ns), Some([a, b, c])) = (normals.as_mut(), layout.normals) {
            ns.push(Vector3::new(fields[a], fields[b], fields[c]));
        }
    }
    Ok((points, normals))
}

fn skip_binary_row(data: &[u8], mut offset: usize, element: &Element) -> Result<usize, SceneIoError> {
    for prop in &element.properties {
        match prop {
            Property::Scalar { ty, .. } => offset += ty.byte_len(),
            Property::List { count_ty, item_ty } => {
                let clen = count_ty.byte_len();
                let bytes = data
                    .get(offset..offset + clen)
                    .ok_or_else(|| malformed("truncated element data"))?;
                offset += clen + count_ty.read_usize(bytes) * item_ty.byte_len();
            }
        }
    }
    if offset > data.len() {
        return Err(malformed("truncated element data"));
    }
    Ok(offset)
}

/// Write a point cloud as binary little-endian PLY with f64 properties.
pub fn write_ply_binary(cloud: &ScenePointCloud, path: &Path) -> Result<(), SceneIoError> {
    let mut out = Vec::new();
    write_header(&mut out, cloud, "binary_little_endian");
    for (i, p) in cloud.points.iter().enumerate() {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        if let Some(normals) = &cloud.normals {
            let n = &normals[i];
            out.extend_from_slice(&n.x.to_le_bytes());
            out.extend_from_slice(&n.y.to_le_bytes());
            out.extend_from_slice(&n.z.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(SceneIoError::Io)
}

/// Write a point cloud as ASCII PLY; `{}` formatting keeps full f64 precision.
pub fn write_ply_ascii(cloud: &ScenePointCloud, path: &Path) -> Result<(), SceneIoError> {
    let mut out = Vec::new();
    write_header(&mut out, cloud, "ascii");
    for (i, p) in cloud.points.iter().enumerate() {
        let mut line = format!("{} {} {}", p.x, p.y, p.z);
        if let Some(normals) = &cloud.normals {
            let n = &normals[i];
            line.push_str(&format!(" {} {} {}", n.x, n.y, n.z));
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
    }
    std::fs::write(path, out).map_err(SceneIoError::Io)
}

fn write_header(out: &mut Vec<u8>, cloud: &ScenePointCloud, format: &str) {
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(&format!("format {format} 1.0\n"));
    header.push_str(&format!("element vertex {}\n", cloud.points.len()));
    for axis in ["x", "y", "z"] {
        header.push_str(&format!("property double {axis}\n"));
    }
    if cloud.normals.is_some() {
        for axis in ["nx", "ny", "nz"] {
            header.push_str(&format!("property double {axis}\n"));
        }
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
}
