//! Binary little-endian PLY frames.
//!
//! Only the vertex layout used by the point-cloud datasets is accepted:
//! `double` coordinates and normals, `uchar` colors, in any property order.
//! Comment and `obj_info` lines are kept so that a parsed file writes back
//! byte-for-byte.

use std::fmt::Write as _;

use thiserror::Error;

const MAGIC: &str = "ply";
const FORMAT_LINE: &str = "format binary_little_endian 1.0";
const END_HEADER: &str = "end_header";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlyError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated body: need {needed} bytes, found {found}")]
    TruncatedBody { needed: usize, found: usize },
    #[error("unsupported property `{0}`")]
    UnsupportedProperty(String),
}

/// Which of the nine canonical vertex fields a property carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    X,
    Y,
    Z,
    Nx,
    Ny,
    Nz,
    Red,
    Green,
    Blue,
}

impl Field {
    fn from_name(name: &str) -> Option<Field> {
        Some(match name {
            "x" => Field::X,
            "y" => Field::Y,
            "z" => Field::Z,
            "nx" => Field::Nx,
            "ny" => Field::Ny,
            "nz" => Field::Nz,
            "red" => Field::Red,
            "green" => Field::Green,
            "blue" => Field::Blue,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::X => "x",
            Field::Y => "y",
            Field::Z => "z",
            Field::Nx => "nx",
            Field::Ny => "ny",
            Field::Nz => "nz",
            Field::Red => "red",
            Field::Green => "green",
            Field::Blue => "blue",
        }
    }

    pub fn kind(self) -> ValueKind {
        match self {
            Field::Red | Field::Green | Field::Blue => ValueKind::U8,
            _ => ValueKind::F64,
        }
    }

    /// Coordinate axis index (0..3) for x/y/z.
    pub fn axis(self) -> Option<usize> {
        match self {
            Field::X => Some(0),
            Field::Y => Some(1),
            Field::Z => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    F64,
    U8,
}

impl ValueKind {
    pub fn width(self) -> usize {
        match self {
            ValueKind::F64 => 8,
            ValueKind::U8 => 1,
        }
    }

    fn from_type_name(name: &str) -> Option<ValueKind> {
        match name {
            "double" | "float64" => Some(ValueKind::F64),
            "uchar" | "uint8" => Some(ValueKind::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Property {
    pub field: Field,
    /// Type token as spelled in the header (`double`, `float64`, ...).
    pub type_name: String,
}

impl Property {
    pub fn new(field: Field) -> Self {
        let type_name = match field.kind() {
            ValueKind::F64 => "double",
            ValueKind::U8 => "uchar",
        };
        Property {
            field,
            type_name: type_name.to_string(),
        }
    }

    pub fn width(&self) -> usize {
        self.field.kind().width()
    }
}

/// Ordered vertex properties, identical to their order in the body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexSchema {
    properties: Vec<Property>,
}

impl VertexSchema {
    pub fn new(properties: Vec<Property>) -> Result<Self, PlyError> {
        let mut seen = [false; 9];
        for p in &properties {
            let slot = p.field as usize;
            if seen[slot] {
                return Err(PlyError::MalformedHeader(format!(
                    "duplicate property `{}`",
                    p.field.name()
                )));
            }
            seen[slot] = true;
        }
        if !(seen[0] && seen[1] && seen[2]) {
            return Err(PlyError::MalformedHeader(
                "vertex element must declare x, y and z".into(),
            ));
        }
        for (group, what) in [(3..6, "normals"), (6..9, "colors")] {
            let present = seen[group].iter().filter(|s| **s).count();
            if present != 0 && present != 3 {
                return Err(PlyError::MalformedHeader(format!(
                    "{what} must be declared as a complete triple"
                )));
            }
        }
        Ok(VertexSchema { properties })
    }

    /// x, y, z, then optional normals and colors in canonical order.
    pub fn canonical(normals: bool, colors: bool) -> Self {
        let mut fields = vec![Field::X, Field::Y, Field::Z];
        if normals {
            fields.extend([Field::Nx, Field::Ny, Field::Nz]);
        }
        if colors {
            fields.extend([Field::Red, Field::Green, Field::Blue]);
        }
        VertexSchema {
            properties: fields.into_iter().map(Property::new).collect(),
        }
    }

    pub fn properties(&self) -> &[Property] {
        &self.properties
    }

    pub fn has_normals(&self) -> bool {
        self.properties.iter().any(|p| p.field == Field::Nx)
    }

    pub fn has_colors(&self) -> bool {
        self.properties.iter().any(|p| p.field == Field::Red)
    }

    /// Bytes per vertex record.
    pub fn record_width(&self) -> usize {
        self.properties.iter().map(Property::width).sum()
    }

    /// Byte offset of each coordinate axis inside a record.
    pub fn axis_offsets(&self) -> [usize; 3] {
        let mut offsets = [0; 3];
        let mut at = 0;
        for p in &self.properties {
            if let Some(axis) = p.field.axis() {
                offsets[axis] = at;
            }
            at += p.width();
        }
        offsets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vertex {
    pub position: [f64; 3],
    /// Zero when the schema has no normals.
    pub normal: [f64; 3],
    /// Zero when the schema has no colors.
    pub color: [u8; 3],
}

impl Vertex {
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Vertex {
            position: [x, y, z],
            ..Default::default()
        }
    }

    fn read(schema: &VertexSchema, record: &[u8]) -> Vertex {
        let mut v = Vertex::default();
        let mut at = 0;
        for p in &schema.properties {
            match p.field {
                Field::Red | Field::Green | Field::Blue => {
                    v.color[p.field as usize - 6] = record[at];
                }
                f => {
                    let value = f64::from_le_bytes(record[at..at + 8].try_into().unwrap());
                    match f.axis() {
                        Some(axis) => v.position[axis] = value,
                        None => v.normal[f as usize - 3] = value,
                    }
                }
            }
            at += p.width();
        }
        v
    }

    fn write(&self, schema: &VertexSchema, out: &mut Vec<u8>) {
        for p in &schema.properties {
            match p.field {
                Field::Red | Field::Green | Field::Blue => out.push(self.color[p.field as usize - 6]),
                f => {
                    let value = match f.axis() {
                        Some(axis) => self.position[axis],
                        None => self.normal[f as usize - 3],
                    };
                    out.extend_from_slice(&value.to_le_bytes());
                }
            }
        }
    }
}

/// A non-structural header line (`comment ...`, `obj_info ...`), anchored
/// after a given number of structural lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderNote {
    pub after_structural: usize,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub schema: VertexSchema,
    pub vertices: Vec<Vertex>,
    pub header_comments: Vec<HeaderNote>,
}

impl PointCloud {
    pub fn new(schema: VertexSchema, vertices: Vec<Vertex>) -> Self {
        PointCloud {
            schema,
            vertices,
            header_comments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.vertices.iter().map(|v| v.position)
    }
}

/// The parsed header of a frame plus where its body starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub schema: VertexSchema,
    pub vertex_count: usize,
    pub notes: Vec<HeaderNote>,
    /// Length of the header in bytes, including the `end_header\n` line.
    pub len: usize,
}

impl Header {
    /// Expected body length in bytes, or `None` on overflow.
    pub fn body_len(&self) -> Option<usize> {
        self.vertex_count.checked_mul(self.schema.record_width())
    }
}

fn malformed(msg: impl Into<String>) -> PlyError {
    PlyError::MalformedHeader(msg.into())
}

/// Parses the header only. The body is not inspected.
pub fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str, PlyError> {
        let rest = &bytes[pos..];
        let end = memchr::memchr(b'\n', rest).ok_or_else(|| malformed("unterminated header"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8"))?;
        pos += end + 1;
        Ok(line)
    };

    if next_line()? != MAGIC {
        return Err(malformed("missing `ply` magic line"));
    }
    let mut structural = 1usize;
    let mut notes = Vec::new();
    let mut format_seen = false;
    let mut vertex_count: Option<usize> = None;
    let mut properties = Vec::new();

    loop {
        let line = next_line()?;
        let mut words = line.split_ascii_whitespace();
        let keyword = words.next().unwrap_or("");
        match keyword {
            "comment" | "obj_info" => {
                notes.push(HeaderNote {
                    after_structural: structural,
                    line: line.to_string(),
                });
                continue;
            }
            "format" => {
                if format_seen || structural != 1 {
                    return Err(malformed("format line must follow the magic line once"));
                }
                match (words.next(), words.next(), words.next()) {
                    (Some("binary_little_endian"), Some("1.0"), None) => format_seen = true,
                    (Some(other), _, _) => {
                        return Err(malformed(format!("unsupported format `{other}`")))
                    }
                    _ => return Err(malformed("incomplete format line")),
                }
            }
            "element" => {
                if !format_seen {
                    return Err(malformed("element before format line"));
                }
                if vertex_count.is_some() {
                    return Err(malformed("exactly one vertex element is supported"));
                }
                let name = words.next();
                let count = words.next().and_then(|c| c.parse::<usize>().ok());
                match (name, count, words.next()) {
                    (Some("vertex"), Some(n), None) => vertex_count = Some(n),
                    (Some("vertex"), _, _) => return Err(malformed("bad vertex count")),
                    (Some(other), _, _) => {
                        return Err(malformed(format!("unsupported element `{other}`")))
                    }
                    _ => return Err(malformed("incomplete element line")),
                }
            }
            "property" => {
                if vertex_count.is_none() {
                    return Err(malformed("property before element line"));
                }
                let (ty, name) = match (words.next(), words.next(), words.next()) {
                    (Some(ty), Some(name), None) => (ty, name),
                    (Some("list"), ..) => return Err(PlyError::UnsupportedProperty("list".into())),
                    _ => return Err(malformed("incomplete property line")),
                };
                let field =
                    Field::from_name(name).ok_or_else(|| PlyError::UnsupportedProperty(name.into()))?;
                let kind = ValueKind::from_type_name(ty)
                    .ok_or_else(|| PlyError::UnsupportedProperty(format!("{ty} {name}")))?;
                if kind != field.kind() {
                    return Err(PlyError::UnsupportedProperty(format!("{ty} {name}")));
                }
                properties.push(Property {
                    field,
                    type_name: ty.to_string(),
                });
            }
            END_HEADER => {
                if words.next().is_some() {
                    return Err(malformed("trailing text after end_header"));
                }
                break;
            }
            "" => return Err(malformed("empty header line")),
            other => return Err(malformed(format!("unknown header keyword `{other}`"))),
        }
        structural += 1;
    }

    if !format_seen {
        return Err(malformed("missing format line"));
    }
    let vertex_count = vertex_count.ok_or_else(|| malformed("missing vertex element"))?;
    Ok(Header {
        schema: VertexSchema::new(properties)?,
        vertex_count,
        notes,
        len: pos,
    })
}

/// Parses a whole frame. Bytes after the declared body are returned as an
/// opaque tail.
pub fn parse_ply(bytes: &[u8]) -> Result<(PointCloud, &[u8]), PlyError> {
    let header = parse_header(bytes)?;
    let width = header.schema.record_width();
    let available = bytes.len() - header.len;
    let needed = header.body_len().unwrap_or(usize::MAX);
    if needed > available {
        return Err(PlyError::TruncatedBody {
            needed,
            found: available,
        });
    }
    let body = &bytes[header.len..header.len + needed];
    let vertices = body
        .chunks_exact(width)
        .map(|record| Vertex::read(&header.schema, record))
        .collect();
    let cloud = PointCloud {
        schema: header.schema,
        vertices,
        header_comments: header.notes,
    };
    Ok((cloud, &bytes[header.len + needed..]))
}

/// Header text for `cloud`, with its notes reinserted at their anchors.
pub fn header_text(cloud: &PointCloud) -> String {
    let mut structural = vec![MAGIC.to_string(), FORMAT_LINE.to_string()];
    structural.push(format!("element vertex {}", cloud.vertices.len()));
    for p in cloud.schema.properties() {
        structural.push(format!("property {} {}", p.type_name, p.field.name()));
    }
    structural.push(END_HEADER.to_string());

    let mut out = String::new();
    let mut notes = cloud.header_comments.iter().peekable();
    for (i, line) in structural.iter().enumerate() {
        while let Some(note) = notes.next_if(|n| n.after_structural <= i) {
            let _ = writeln!(out, "{}", note.line);
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn write_ply(cloud: &PointCloud, tail: Option<&[u8]>) -> Vec<u8> {
    let header = header_text(cloud);
    let tail = tail.unwrap_or(&[]);
    let mut out =
        Vec::with_capacity(header.len() + cloud.len() * cloud.schema.record_width() + tail.len());
    out.extend_from_slice(header.as_bytes());
    for v in &cloud.vertices {
        v.write(&cloud.schema, &mut out);
    }
    out.extend_from_slice(tail);
    out
}
