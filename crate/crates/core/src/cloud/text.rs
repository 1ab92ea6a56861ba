use std::io::{self, Write};
use std::path::Path;

use super::{CloudError, LabelMatrix, Location, Point3, PointCloud, WeakLabels, UNASSIGNED};

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, CloudError> {
    tok.parse::<T>().map_err(|_| CloudError::Parse {
        location: Location::Line(line),
        msg: format!("invalid number {tok:?}"),
    })
}

pub(super) fn parse_xyz(
    bytes: &[u8],
    with_color: bool,
) -> Result<(Vec<Point3>, Option<Vec<Point3>>), CloudError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CloudError::Parse {
        location: Location::Byte(0),
        msg: "file is not utf-8".to_string(),
    })?;
    let expected = if with_color { 6 } else { 3 };
    let mut points = Vec::new();
    let mut colors = with_color.then(Vec::new);
    for (line, l) in data_lines(text) {
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != expected {
            if tok.len() >= 3 {
                return Err(CloudError::ColorChannels {
                    location: Location::Line(line),
                    msg: format!("expected {expected} columns, found {}", tok.len()),
                });
            }
            return Err(CloudError::Parse {
                location: Location::Line(line),
                msg: format!("expected {expected} columns, found {}", tok.len()),
            });
        }
        let mut p: Point3 = [0.0; 3];
        for (c, t) in p.iter_mut().zip(&tok) {
            *c = parse_num(t, line)?;
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(CloudError::NonFinite {
                location: Location::Line(line),
            });
        }
        points.push(p);
        if let Some(colors) = colors.as_mut() {
            let mut c = [0.0; 3];
            for (v, t) in c.iter_mut().zip(&tok[3..]) {
                let raw: f64 = parse_num(t, line)?;
                if !(0.0..=255.0).contains(&raw) {
                    return Err(CloudError::Parse {
                        location: Location::Line(line),
                        msg: format!("color value {raw} outside 0..=255"),
                    });
                }
                *v = raw / 255.0;
            }
            colors.push(c);
        }
    }
    Ok((points, colors))
}

pub(super) fn write_xyz<W: Write>(w: &mut W, cloud: &PointCloud, with_color: bool) -> io::Result<()> {
    let colors = cloud.colors();
    for (i, p) in cloud.points().iter().enumerate() {
        write!(w, "{:.6} {:.6} {:.6}", p[0], p[1], p[2])?;
        if with_color {
            let c = colors.map(|c| c[i]).unwrap_or([0.0; 3]);
            let b = |v: f64| (v * 255.0).round() as u8;
            write!(w, " {} {} {}", b(c[0]), b(c[1]), b(c[2]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the weak-label text format: a `classes <C>` header followed by
/// `point_index class_id` records.
pub fn load_weak_labels(path: &Path) -> Result<WeakLabels, CloudError> {
    let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
    parse_weak_labels(&text)
}

pub fn parse_weak_labels(text: &str) -> Result<WeakLabels, CloudError> {
    let mut lines = data_lines(text);
    let (hline, header) = lines.next().ok_or(CloudError::Header {
        location: Location::Line(1),
        msg: "missing 'classes <C>' header".to_string(),
    })?;
    let num_classes = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["classes", c] => parse_num::<usize>(c, hline)?,
        _ => {
            return Err(CloudError::Header {
                location: Location::Line(hline),
                msg: "expected 'classes <C>'".to_string(),
            })
        }
    };
    if num_classes == 0 {
        return Err(CloudError::Header {
            location: Location::Line(hline),
            msg: "class count must be positive".to_string(),
        });
    }

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, l) in lines {
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != 2 {
            return Err(CloudError::Parse {
                location: Location::Line(line),
                msg: "expected 'point_index class_id'".to_string(),
            });
        }
        let index: usize = parse_num(tok[0], line)?;
        let class_id: usize = parse_num(tok[1], line)?;
        if class_id >= num_classes {
            return Err(CloudError::ClassOutOfRange {
                class_id,
                num_classes,
                location: Location::Line(line),
            });
        }
        if !seen.insert(index) {
            return Err(CloudError::DuplicateIndex {
                index,
                location: Location::Line(line),
            });
        }
        entries.push((index, class_id));
    }
    if entries.is_empty() {
        return Err(CloudError::EmptyWeakLabels);
    }
    WeakLabels::new(entries, num_classes)
}

pub(super) fn write_labels<W: Write>(w: &mut W, labels: &LabelMatrix) -> io::Result<()> {
    for (c, s) in labels.cluster_id.iter().zip(&labels.semantic_label) {
        writeln!(w, "{c} {s}")?;
    }
    Ok(())
}

/// Reads a labels-text file back. Provenance is not stored in that format and
/// comes back unassigned.
pub fn load_labels_text(path: &Path) -> Result<LabelMatrix, CloudError> {
    let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
    let mut labels = LabelMatrix::unassigned(0);
    for (line, l) in data_lines(&text) {
        let tok: Vec<&str> = l.split_whitespace().collect();
        if tok.len() != 2 {
            return Err(CloudError::Parse {
                location: Location::Line(line),
                msg: "expected 'cluster_id semantic_label'".to_string(),
            });
        }
        let c: i32 = parse_num(tok[0], line)?;
        let s: i32 = parse_num(tok[1], line)?;
        if c < UNASSIGNED || s < UNASSIGNED {
            return Err(CloudError::Parse {
                location: Location::Line(line),
                msg: "labels below -1".to_string(),
            });
        }
        labels.cluster_id.push(c);
        labels.semantic_label.push(s);
        labels.provenance.push(UNASSIGNED);
    }
    labels.validate()?;
    Ok(labels)
}
