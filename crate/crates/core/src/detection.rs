//! Axis-aligned pseudo boxes from labeled instances.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::bbox::Aabb;
use crate::cloud::{CloudError, LabelMatrix, Point3, PointCloud};

pub const DEFAULT_MIN_POINTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub min: Point3,
    pub max: Point3,
    pub class_id: i32,
    pub instance_id: i32,
    pub point_count: usize,
    /// Detection score, when one exists.
    pub confidence: Option<f64>,
}

impl Box3D {
    pub fn aabb(&self) -> Aabb {
        Aabb {
            min: self.min,
            max: self.max,
        }
    }
}

/// One tight box per cluster whose majority semantic label is known, not
/// excluded, and backed by at least `min_points` points. Sorted by instance id.
pub fn instance_boxes(
    labels: &LabelMatrix,
    cloud: &PointCloud,
    min_points: usize,
    exclude_classes: &[i32],
) -> Result<Vec<Box3D>, CloudError> {
    if labels.len() != cloud.len() {
        return Err(CloudError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: cloud.len(),
        });
    }
    struct Acc {
        aabb: Aabb,
        count: usize,
        votes: BTreeMap<i32, usize>,
    }
    let mut acc: BTreeMap<i32, Acc> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let c = labels.cluster_id[i];
        if c < 0 {
            continue;
        }
        let a = acc.entry(c).or_insert(Acc {
            aabb: Aabb { min: *p, max: *p },
            count: 0,
            votes: BTreeMap::new(),
        });
        a.aabb.include(p);
        a.count += 1;
        let s = labels.semantic_label[i];
        if s >= 0 {
            *a.votes.entry(s).or_default() += 1;
        }
    }
    Ok(acc
        .into_iter()
        .filter_map(|(id, a)| {
            let (&class, _) = a.votes.iter().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0)))?;
            if a.count < min_points || exclude_classes.contains(&class) {
                return None;
            }
            Some(Box3D {
                min: a.aabb.min,
                max: a.aabb.max,
                class_id: class,
                instance_id: id,
                point_count: a.count,
                confidence: None,
            })
        })
        .collect())
}

/// Volume IoU; zero-volume boxes score 0 unless identical.
pub fn box_iou(a: &Box3D, b: &Box3D) -> f64 {
    a.aabb().iou(&b.aabb())
}

/// 1.0 for every class with at least one box, else 0.0.
pub fn scene_presence_target(boxes: &[Box3D], num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    for b in boxes {
        if b.class_id >= 0 && (b.class_id as usize) < num_classes {
            v[b.class_id as usize] = 1.0;
        }
    }
    v
}

/// Presence vector straight from per-point semantic labels.
pub fn scene_presence_from_labels(labels: &LabelMatrix, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    for &s in &labels.semantic_label {
        if s >= 0 && (s as usize) < num_classes {
            v[s as usize] = 1.0;
        }
    }
    v
}

/// Point count divided by the largest point count.
pub fn pseudo_confidence(boxes: &[Box3D]) -> Vec<f64> {
    let max = boxes.iter().map(|b| b.point_count).max().unwrap_or(0);
    boxes
        .iter()
        .map(|b| b.confidence.unwrap_or(if max > 0 { b.point_count as f64 / max as f64 } else { 0.0 }))
        .collect()
}

fn triple(v: &Point3) -> String {
    format!("[{:.6}, {:.6}, {:.6}]", v[0], v[1], v[2])
}

/// JSON text for `boxes`, ordered by instance id.
pub fn boxes_to_json(boxes: &[Box3D]) -> String {
    let mut sorted: Vec<&Box3D> = boxes.iter().collect();
    sorted.sort_by_key(|b| b.instance_id);
    if sorted.is_empty() {
        return "[]\n".to_string();
    }
    let mut s = String::from("[\n");
    for (k, b) in sorted.iter().enumerate() {
        let _ = write!(
            s,
            "  {{\"instance_id\": {}, \"class_id\": {}, \"min\": {}, \"max\": {}, \"points\": {}",
            b.instance_id,
            b.class_id,
            triple(&b.min),
            triple(&b.max),
            b.point_count
        );
        if let Some(c) = b.confidence {
            let _ = write!(s, ", \"confidence\": {c:.6}");
        }
        s.push('}');
        if k + 1 < sorted.len() {
            s.push(',');
        }
        s.push('\n');
    }
    s.push_str("]\n");
    s
}

pub fn export_boxes(boxes: &[Box3D], path: &Path) -> Result<(), CloudError> {
    std::fs::write(path, boxes_to_json(boxes)).map_err(|e| CloudError::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    instance_id: i32,
    class_id: i32,
    min: Point3,
    max: Point3,
    points: usize,
    #[serde(default)]
    confidence: Option<f64>,
}

pub fn parse_boxes(text: &str) -> Result<Vec<Box3D>, CloudError> {
    let records: Vec<BoxRecord> =
        serde_json::from_str(text).map_err(|e| CloudError::Invalid(format!("boxes json: {e}")))?;
    records
        .into_iter()
        .map(|r| {
            let ok = (0..3).all(|a| r.min[a].is_finite() && r.max[a].is_finite() && r.min[a] <= r.max[a]);
            if !ok {
                return Err(CloudError::Invalid(format!("box {} has min > max", r.instance_id)));
            }
            Ok(Box3D {
                min: r.min,
                max: r.max,
                class_id: r.class_id,
                instance_id: r.instance_id,
                point_count: r.points,
                confidence: r.confidence,
            })
        })
        .collect()
}

pub fn load_boxes(path: &Path) -> Result<Vec<Box3D>, CloudError> {
    let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
    parse_boxes(&text)
}
