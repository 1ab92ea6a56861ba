//! Minimal PLY support: a single `vertex` element with scalar x/y/z and
//! optional red/green/blue, in ascii or binary little-endian encoding.

use std::io::{self, Write};
use std::path::Path;

use super::{CloudError, CloudFormat, Location, Point3};

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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    fn read_le(self, b: &[u8]) -> f64 {
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

    /// Divisor mapping a stored color channel onto `[0, 1]`.
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }
}

struct Header {
    format: CloudFormat,
    vertex_count: usize,
    props: Vec<(String, Scalar)>,
    /// Byte offset of the first payload byte.
    body_offset: usize,
    /// Number of text lines consumed by the header.
    header_lines: usize,
}

struct Layout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn header_err(line: usize, msg: impl Into<String>) -> CloudError {
    CloudError::Header {
        location: Location::Line(line),
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, CloudError> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut vertex_count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;

    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(line_no + 1, "missing end_header"))?;
        line_no += 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| header_err(line_no, "header is not utf-8"))?
            .trim_end_matches('\r')
            .trim();
        offset += end + 1;

        if line_no == 1 {
            if line != "ply" {
                return Err(header_err(1, "missing 'ply' magic"));
            }
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => CloudFormat::PlyAscii,
                    Some("binary_little_endian") => CloudFormat::PlyBinaryLe,
                    Some(other) => {
                        return Err(header_err(line_no, format!("unsupported format {other}")))
                    }
                    None => return Err(header_err(line_no, "format line without encoding")),
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().unwrap_or("");
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(line_no, "element without a valid count"))?;
                if name == "vertex" {
                    if seen_vertex {
                        return Err(header_err(line_no, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                    seen_vertex = true;
                } else if !seen_vertex && count > 0 {
                    return Err(header_err(
                        line_no,
                        format!("element {name} precedes the vertex element"),
                    ));
                } else {
                    in_vertex = false;
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = tok.next().unwrap_or("");
                if ty == "list" {
                    return Err(header_err(line_no, "list properties on vertices are unsupported"));
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| header_err(line_no, format!("unknown property type {ty}")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| header_err(line_no, "property without a name"))?;
                props.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some(other) => return Err(header_err(line_no, format!("unexpected keyword {other}"))),
        }
    }

    let format = format.ok_or_else(|| header_err(line_no, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| header_err(line_no, "missing vertex element"))?;
    Ok(Header {
        format,
        vertex_count,
        props,
        body_offset: offset,
        header_lines: line_no,
    })
}

fn layout(header: &Header) -> Result<Layout, CloudError> {
    let find = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let line = header.header_lines;
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(header_err(line, "vertex element lacks x/y/z")),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        (None, None, None) => None,
        _ => {
            return Err(CloudError::ColorChannels {
                location: Location::Line(line),
                msg: "vertex declares only some of red/green/blue".to_string(),
            })
        }
    };
    Ok(Layout { xyz, rgb })
}

type Parsed = (Vec<Point3>, Option<Vec<Point3>>);

pub(super) fn parse(bytes: &[u8], expected: CloudFormat) -> Result<Parsed, CloudError> {
    let header = parse_header(bytes)?;
    if header.format != expected {
        return Err(header_err(
            2,
            format!("file is {:?}, expected {:?}", header.format, expected),
        ));
    }
    let layout = layout(&header)?;
    match header.format {
        CloudFormat::PlyAscii => parse_ascii(bytes, &header, &layout),
        _ => parse_binary(bytes, &header, &layout),
    }
}

pub(super) fn sniff_format(path: &Path) -> Result<CloudFormat, CloudError> {
    let bytes = std::fs::read(path).map_err(|e| CloudError::io(path, e))?;
    Ok(parse_header(&bytes)?.format)
}

fn parse_ascii(bytes: &[u8], header: &Header, layout: &Layout) -> Result<Parsed, CloudError> {
    let body = std::str::from_utf8(&bytes[header.body_offset..]).map_err(|_| CloudError::Parse {
        location: Location::Byte(header.body_offset),
        msg: "ascii body is not utf-8".to_string(),
    })?;
    let mut points = Vec::with_capacity(header.vertex_count);
    let mut colors = layout.rgb.map(|_| Vec::with_capacity(header.vertex_count));
    let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut values = vec![0.0; header.props.len()];

    for _ in 0..header.vertex_count {
        let (idx, text) = lines.next().ok_or(CloudError::Truncated {
            location: Location::Line(header.header_lines + body.lines().count() + 1),
        })?;
        let line_no = header.header_lines + idx + 1;
        let mut tok = text.split_whitespace();
        for v in values.iter_mut() {
            let t = tok.next().ok_or_else(|| CloudError::Parse {
                location: Location::Line(line_no),
                msg: format!("expected {} values", header.props.len()),
            })?;
            *v = t.parse::<f64>().map_err(|_| CloudError::Parse {
                location: Location::Line(line_no),
                msg: format!("invalid number {t:?}"),
            })?;
        }
        let p = [values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(CloudError::NonFinite {
                location: Location::Line(line_no),
            });
        }
        points.push(p);
        if let (Some(rgb), Some(colors)) = (layout.rgb, colors.as_mut()) {
            colors.push(read_color(&values, rgb, header, Location::Line(line_no))?);
        }
    }
    Ok((points, colors))
}

fn parse_binary(bytes: &[u8], header: &Header, layout: &Layout) -> Result<Parsed, CloudError> {
    let offsets: Vec<usize> = header
        .props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = header.props.iter().map(|(_, s)| s.size()).sum();
    let mut points = Vec::with_capacity(header.vertex_count);
    let mut colors = layout.rgb.map(|_| Vec::with_capacity(header.vertex_count));
    let mut values = vec![0.0; header.props.len()];

    for v in 0..header.vertex_count {
        let start = header.body_offset + v * stride;
        let record = bytes.get(start..start + stride).ok_or(CloudError::Truncated {
            location: Location::Byte(bytes.len()),
        })?;
        for (k, (_, s)) in header.props.iter().enumerate() {
            values[k] = s.read_le(&record[offsets[k]..]);
        }
        let p = [values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]];
        if let Some(axis) = p.iter().position(|c| !c.is_finite()) {
            return Err(CloudError::NonFinite {
                location: Location::Byte(start + offsets[layout.xyz[axis]]),
            });
        }
        points.push(p);
        if let (Some(rgb), Some(colors)) = (layout.rgb, colors.as_mut()) {
            colors.push(read_color(&values, rgb, header, Location::Byte(start))?);
        }
    }
    Ok((points, colors))
}

fn read_color(
    values: &[f64],
    rgb: [usize; 3],
    header: &Header,
    location: Location,
) -> Result<Point3, CloudError> {
    let mut out = [0.0; 3];
    for (c, &k) in out.iter_mut().zip(rgb.iter()) {
        let v = values[k] / header.props[k].1.color_scale();
        if !(0.0..=1.0).contains(&v) {
            return Err(CloudError::Parse {
                location,
                msg: format!("color channel {} out of range", header.props[k].0),
            });
        }
        *c = v;
    }
    Ok(out)
}

fn color_byte(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

fn write_header<W: Write>(w: &mut W, encoding: &str, n: usize, colored: bool) -> io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format {encoding} 1.0")?;
    writeln!(w, "element vertex {n}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    if colored {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "end_header")
}

pub(super) fn write_ascii<W: Write>(
    w: &mut W,
    points: &[Point3],
    colors: Option<&[Point3]>,
) -> io::Result<()> {
    write_header(w, "ascii", points.len(), colors.is_some())?;
    for (i, p) in points.iter().enumerate() {
        write!(w, "{:.6} {:.6} {:.6}", p[0], p[1], p[2])?;
        if let Some(colors) = colors {
            let c = colors[i];
            write!(w, " {} {} {}", color_byte(c[0]), color_byte(c[1]), color_byte(c[2]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub(super) fn write_binary_le<W: Write>(
    w: &mut W,
    points: &[Point3],
    colors: Option<&[Point3]>,
) -> io::Result<()> {
    write_header(w, "binary_little_endian", points.len(), colors.is_some())?;
    for (i, p) in points.iter().enumerate() {
        for c in p {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(colors) = colors {
            let c = colors[i];
            w.write_all(&[color_byte(c[0]), color_byte(c[1]), color_byte(c[2])])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_colors() {
        let src = b"ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 51\n1 2 3 0 255 0\n";
        let (pts, cols) = parse(src, CloudFormat::PlyAscii).unwrap();
        assert_eq!(pts, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        let cols = cols.unwrap();
        assert_eq!(cols[0], [1.0, 0.0, 0.2]);
        assert_eq!(cols[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_end_header() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\n";
        assert!(matches!(parse(src, CloudFormat::PlyAscii), Err(CloudError::Header { .. })));
    }

    #[test]
    fn bad_magic_is_line_one() {
        match parse(b"plx\n", CloudFormat::PlyAscii) {
            Err(CloudError::Header { location, .. }) => assert_eq!(location, Location::Line(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_color_channels_rejected() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n0 0 0 1\n";
        assert!(matches!(
            parse(src, CloudFormat::PlyAscii),
            Err(CloudError::ColorChannels { .. })
        ));
    }

    #[test]
    fn binary_nan_reports_byte_offset() {
        let mut buf = Vec::new();
        write_binary_le(&mut buf, &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], None).unwrap();
        let header_len = buf.len() - 24;
        // second point, y coordinate
        let off = header_len + 12 + 4;
        buf[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match parse(&buf, CloudFormat::PlyBinaryLe) {
            Err(CloudError::NonFinite { location }) => assert_eq!(location, Location::Byte(off)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binary_truncated() {
        let mut buf = Vec::new();
        write_binary_le(&mut buf, &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], None).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            parse(&buf, CloudFormat::PlyBinaryLe),
            Err(CloudError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_face_element_is_ignored() {
        let src = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1.5 2.5 3.5\n3 0 0 0\n";
        let (pts, cols) = parse(src, CloudFormat::PlyAscii).unwrap();
        assert_eq!(pts, vec![[1.5, 2.5, 3.5]]);
        assert!(cols.is_none());
    }

    #[test]
    fn format_mismatch_is_error() {
        let mut buf = Vec::new();
        write_ascii(&mut buf, &[[0.0; 3]], None).unwrap();
        assert!(parse(&buf, CloudFormat::PlyBinaryLe).is_err());
    }
}
