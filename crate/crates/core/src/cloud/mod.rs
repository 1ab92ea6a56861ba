//! Point clouds, weak labels, label matrices and the on-disk formats that
//! carry them.
//!
//! Colors are always held normalized to `[0, 1]` regardless of how they were
//! stored, so downstream similarity scores do not depend on the file format.

mod ply;
mod text;

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use text::{load_labels_text, load_weak_labels, parse_weak_labels};

/// A 3D position or direction in meters.
pub type Point3 = [f64; 3];

/// Where in a file a problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// 1-based text line.
    Line(usize),
    /// 0-based byte offset into the file.
    Byte(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header at {location}: {msg}")]
    Header { location: Location, msg: String },
    #[error("parse error at {location}: {msg}")]
    Parse { location: Location, msg: String },
    #[error("non-finite coordinate at {location}")]
    NonFinite { location: Location },
    #[error("color channel count mismatch at {location}: {msg}")]
    ColorChannels { location: Location, msg: String },
    #[error("truncated binary payload at {location}")]
    Truncated { location: Location },
    #[error("duplicate weak-label point index {index} at {location}")]
    DuplicateIndex { index: usize, location: Location },
    #[error("class id {class_id} at {location} is not below the declared {num_classes} classes")]
    ClassOutOfRange {
        class_id: usize,
        num_classes: usize,
        location: Location,
    },
    #[error("weak-label point index {index} is outside a cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("weak-label file contains no labeled points")]
    EmptyWeakLabels,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid cloud: {0}")]
    Invalid(String),
}

impl CloudError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CloudError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Supported point cloud file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PlyBinaryLe,
    /// `x y z` per line.
    Xyz,
    /// `x y z r g b` per line, colors in 0..=255.
    XyzRgb,
}

impl CloudFormat {
    /// Picks a format from the file extension; PLY files are sniffed for
    /// their ascii/binary header line.
    pub fn detect(path: &Path) -> Result<Self, CloudError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "xyz" | "txt" => Ok(CloudFormat::Xyz),
            "xyzrgb" => Ok(CloudFormat::XyzRgb),
            "ply" => ply::sniff_format(path),
            other => Err(CloudError::Invalid(format!(
                "cannot infer cloud format from extension {other:?}"
            ))),
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ply-ascii" => Ok(CloudFormat::PlyAscii),
            "ply-binary-le" => Ok(CloudFormat::PlyBinaryLe),
            "xyz" => Ok(CloudFormat::Xyz),
            "xyzrgb" => Ok(CloudFormat::XyzRgb),
            other => Err(format!("unknown cloud format {other:?}")),
        }
    }
}

/// Positions with optional per-point colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    colors: Option<Vec<Point3>>,
    pub scene_id: String,
}

impl PointCloud {
    /// Validates that every coordinate is finite and colors align with points.
    pub fn new(
        points: Vec<Point3>,
        colors: Option<Vec<Point3>>,
        scene_id: impl Into<String>,
    ) -> Result<Self, CloudError> {
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(CloudError::Invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(colors) = &colors {
            if colors.len() != points.len() {
                return Err(CloudError::LengthMismatch {
                    what: "colors",
                    got: colors.len(),
                    expected: points.len(),
                });
            }
            if colors
                .iter()
                .any(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
            {
                return Err(CloudError::Invalid(
                    "color channel outside [0, 1]".to_string(),
                ));
            }
        }
        Ok(PointCloud {
            points,
            colors,
            scene_id: scene_id.into(),
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Point3]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sparse ground-truth annotations: `(point_index, class_id)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabels {
    entries: Vec<(usize, usize)>,
    num_classes: usize,
}

impl WeakLabels {
    pub fn new(entries: Vec<(usize, usize)>, num_classes: usize) -> Result<Self, CloudError> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (row, &(index, class_id)) in entries.iter().enumerate() {
            if class_id >= num_classes {
                return Err(CloudError::ClassOutOfRange {
                    class_id,
                    num_classes,
                    location: Location::Line(row + 1),
                });
            }
            if !seen.insert(index) {
                return Err(CloudError::DuplicateIndex {
                    index,
                    location: Location::Line(row + 1),
                });
            }
        }
        Ok(WeakLabels {
            entries,
            num_classes,
        })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every index against a cloud of `len` points.
    pub fn check_range(&self, len: usize) -> Result<(), CloudError> {
        match self.entries.iter().find(|(i, _)| *i >= len) {
            Some(&(index, _)) => Err(CloudError::IndexOutOfRange { index, len }),
            None => Ok(()),
        }
    }

    /// Dense per-point class lookup, `-1` where unlabeled.
    pub fn dense(&self, len: usize) -> Vec<i32> {
        let mut out = vec![-1; len];
        for &(i, c) in &self.entries {
            if i < len {
                out[i] = c as i32;
            }
        }
        out
    }
}

/// Sentinel for "no cluster", "no semantic label" and "no admitting seed".
pub const UNASSIGNED: i32 = -1;

/// Per-point cluster ids, semantic labels and provenance.
///
/// Unassigned entries hold [`UNASSIGNED`]. A point with a semantic label
/// always has a cluster id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub cluster_id: Vec<i32>,
    pub semantic_label: Vec<i32>,
    pub provenance: Vec<i32>,
}

impl LabelMatrix {
    pub fn unassigned(len: usize) -> Self {
        LabelMatrix {
            cluster_id: vec![UNASSIGNED; len],
            semantic_label: vec![UNASSIGNED; len],
            provenance: vec![UNASSIGNED; len],
        }
    }

    pub fn len(&self) -> usize {
        self.cluster_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_id.is_empty()
    }

    /// Number of distinct non-negative cluster ids.
    pub fn cluster_count(&self) -> usize {
        let mut ids: Vec<i32> = self.cluster_id.iter().copied().filter(|&c| c >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Fraction of points carrying a semantic label.
    pub fn coverage(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let labeled = self.semantic_label.iter().filter(|&&s| s >= 0).count();
        labeled as f64 / self.len() as f64
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let n = self.cluster_id.len();
        for (what, len) in [
            ("semantic_label", self.semantic_label.len()),
            ("provenance", self.provenance.len()),
        ] {
            if len != n {
                return Err(CloudError::LengthMismatch {
                    what,
                    got: len,
                    expected: n,
                });
            }
        }
        if let Some(i) = (0..n).find(|&i| self.semantic_label[i] >= 0 && self.cluster_id[i] < 0) {
            return Err(CloudError::Invalid(format!(
                "point {i} has a semantic label but no cluster"
            )));
        }
        Ok(())
    }
}

/// Output flavors for [`write_labeled_cloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutput {
    /// One `cluster_id semantic_label` line per point.
    LabelsText,
    /// ASCII PLY colored by semantic label.
    ColoredPly,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, CloudError> {
    let bytes = std::fs::read(path).map_err(|e| CloudError::io(path, e))?;
    let scene_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    let (points, colors) = match format {
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => ply::parse(&bytes, format)?,
        CloudFormat::Xyz => text::parse_xyz(&bytes, false)?,
        CloudFormat::XyzRgb => text::parse_xyz(&bytes, true)?,
    };
    PointCloud::new(points, colors, scene_id)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), CloudError> {
    let file = File::create(path).map_err(|e| CloudError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::PlyAscii => ply::write_ascii(&mut w, cloud.points(), cloud.colors()),
        CloudFormat::PlyBinaryLe => ply::write_binary_le(&mut w, cloud.points(), cloud.colors()),
        CloudFormat::Xyz | CloudFormat::XyzRgb => {
            text::write_xyz(&mut w, cloud, format == CloudFormat::XyzRgb)
        }
    };
    res.and_then(|_| w.flush()).map_err(|e| CloudError::io(path, e))
}

pub fn write_labeled_cloud(
    cloud: &PointCloud,
    labels: &LabelMatrix,
    path: &Path,
    mode: LabelOutput,
) -> Result<(), CloudError> {
    if labels.len() != cloud.len() {
        return Err(CloudError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: cloud.len(),
        });
    }
    let file = File::create(path).map_err(|e| CloudError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match mode {
        LabelOutput::LabelsText => text::write_labels(&mut w, labels),
        LabelOutput::ColoredPly => {
            let colors: Vec<Point3> = labels
                .semantic_label
                .iter()
                .map(|&s| {
                    let [r, g, b] = palette_color(s);
                    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
                })
                .collect();
            ply::write_ascii(&mut w, cloud.points(), Some(&colors))
        }
    };
    res.and_then(|_| w.flush()).map_err(|e| CloudError::io(path, e))
}

const PALETTE: [[u8; 3]; 20] = [
    [174, 199, 232],
    [152, 223, 138],
    [31, 119, 180],
    [255, 187, 120],
    [188, 189, 34],
    [140, 86, 75],
    [255, 152, 150],
    [214, 39, 40],
    [197, 176, 213],
    [148, 103, 189],
    [196, 156, 148],
    [23, 190, 207],
    [247, 182, 210],
    [219, 219, 141],
    [255, 127, 14],
    [158, 218, 229],
    [44, 160, 44],
    [112, 128, 144],
    [227, 119, 194],
    [82, 84, 163],
];

/// Gray for unlabeled points.
pub const UNLABELED_COLOR: [u8; 3] = [128, 128, 128];

/// Fixed color per semantic label; labels past the table get a hashed color.
pub fn palette_color(label: i32) -> [u8; 3] {
    if label < 0 {
        return UNLABELED_COLOR;
    }
    let idx = label as usize;
    if idx < PALETTE.len() {
        return PALETTE[idx];
    }
    // splitmix64 finalizer
    let mut z = (label as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let rgb = [(z & 0xFF) as u8, ((z >> 8) & 0xFF) as u8, ((z >> 16) & 0xFF) as u8];
    if rgb == UNLABELED_COLOR {
        [129, 128, 128]
    } else {
        rgb
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, contents: &[u8]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_three_line_xyz() {
        let (_d, path) = tmp("a.xyz", b"0 0 0\n1 0 0\n0 1 0\n");
        let cloud = load_cloud(&path, CloudFormat::Xyz).unwrap();
        assert_eq!(cloud.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(cloud.colors().is_none());
        assert_eq!(cloud.scene_id, "a");
    }

    #[test]
    fn nan_coordinate_reports_line() {
        let (_d, path) = tmp("a.xyz", b"nan 0 0\n");
        match load_cloud(&path, CloudFormat::Xyz) {
            Err(CloudError::NonFinite { location }) => assert_eq!(location, Location::Line(1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xyzrgb_channel_mismatch() {
        let (_d, path) = tmp("a.xyzrgb", b"0 0 0 255 0 0\n1 1 1 255 0\n");
        match load_cloud(&path, CloudFormat::XyzRgb) {
            Err(CloudError::ColorChannels { location, .. }) => {
                assert_eq!(location, Location::Line(2))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn palette_is_stable_and_gray_for_unlabeled() {
        assert_eq!(palette_color(-1), UNLABELED_COLOR);
        for l in 0..200 {
            assert_eq!(palette_color(l), palette_color(l));
            assert_ne!(palette_color(l), UNLABELED_COLOR);
        }
    }

    #[test]
    fn labels_text_is_verbatim() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], None, "s").unwrap();
        let labels = LabelMatrix {
            cluster_id: vec![0, 0, 1],
            semantic_label: vec![2, 2, -1],
            provenance: vec![-1; 3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.txt");
        write_labeled_cloud(&cloud, &labels, &path, LabelOutput::LabelsText).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0 2\n0 2\n1 -1\n");
        let back = load_labels_text(&path).unwrap();
        assert_eq!(back.cluster_id, labels.cluster_id);
        assert_eq!(back.semantic_label, labels.semantic_label);
    }

    #[test]
    fn colored_ply_all_gray_when_unlabeled() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 2.0, 3.0]], None, "s").unwrap();
        let labels = LabelMatrix::unassigned(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_labeled_cloud(&cloud, &labels, &path, LabelOutput::ColoredPly).unwrap();
        let back = load_cloud(&path, CloudFormat::PlyAscii).unwrap();
        for c in back.colors().unwrap() {
            assert_eq!(*c, [128.0 / 255.0; 3]);
        }
    }

    #[test]
    fn label_matrix_invariant() {
        let mut m = LabelMatrix::unassigned(2);
        m.semantic_label[1] = 3;
        assert!(m.validate().is_err());
        m.cluster_id[1] = 0;
        assert!(m.validate().is_ok());
        assert_eq!(m.cluster_count(), 1);
        assert_eq!(m.coverage(), 0.5);
    }

    #[test]
    fn weak_labels_reject_bad_class() {
        assert!(matches!(
            WeakLabels::new(vec![(0, 5)], 5),
            Err(CloudError::ClassOutOfRange { .. })
        ));
        let w = WeakLabels::new(vec![(3, 1)], 2).unwrap();
        assert!(matches!(w.check_range(3), Err(CloudError::IndexOutOfRange { index: 3, len: 3 })));
        assert!(w.check_range(4).is_ok());
        assert_eq!(w.dense(4), vec![-1, -1, -1, 1]);
    }
}
