//! Cluster-level region merging.
//!
//! Each round treats clusters like points in the expansion loop: a seed
//! cluster scores its nearest touching clusters (by centroid) and absorbs
//! those whose similarity reaches `cond3`. A merge scoring at least `cond4`
//! sends the grown cluster back to the front of the queue.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::bbox::Aabb;
use crate::cloud::{CloudError, LabelMatrix, Location, Point3, PointCloud, UNASSIGNED};
use crate::octree::dist2;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("round {round} exceeds total {total}")]
    RoundOutOfRange { round: usize, total: usize },
    #[error("total rounds must be at least 1")]
    ZeroRounds,
    #[error("invalid merge thresholds: need cond4 >= cond3 > 0, got {cond3} and {cond4}")]
    Thresholds { cond3: f64, cond4: f64 },
    #[error("k_clusters must be at least 1")]
    ZeroK,
    #[error("inflate must be finite and non-negative, got {0}")]
    Inflate(f64),
    #[error("labels cover {labels} points but the cloud has {cloud}")]
    SizeMismatch { labels: usize, cloud: usize },
    #[error("provider has {provider} classes, expected {expected}")]
    ClassCount { provider: usize, expected: usize },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Which similarity the growing weight `y4` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegChannel {
    /// `y3` weighs the semantic similarity, `y4` the box overlap.
    Literal,
    /// `y3` weighs the box overlap, `y4` the semantic similarity.
    #[default]
    Narrative,
}

impl std::str::FromStr for SegChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(SegChannel::Literal),
            "narrative" => Ok(SegChannel::Narrative),
            other => Err(format!("unknown seg channel {other:?}")),
        }
    }
}

impl std::fmt::Display for SegChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegChannel::Literal => "literal",
            SegChannel::Narrative => "narrative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    pub y4: f64,
}

impl Weights {
    pub fn sum(&self) -> f64 {
        self.y1 + self.y2 + self.y3 + self.y4
    }
}

/// `y1 = y2 = y3 = 1 − m/N`, `y4 = m/N`.
pub fn schedule_weights(round: usize, total: usize) -> Result<Weights, MergeError> {
    if total == 0 {
        return Err(MergeError::ZeroRounds);
    }
    if round > total {
        return Err(MergeError::RoundOutOfRange { round, total });
    }
    let t = round as f64 / total as f64;
    let d = 1.0 - t;
    Ok(Weights {
        y1: d,
        y2: d,
        y3: d,
        y4: t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSchedule {
    pub n_total: usize,
    pub round: usize,
    pub channel: SegChannel,
}

impl MergeSchedule {
    pub fn weights(&self) -> Result<Weights, MergeError> {
        schedule_weights(self.round, self.n_total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterDescriptor {
    pub cluster_id: i32,
    /// Ascending point indices.
    pub point_indices: Vec<usize>,
    pub centroid: Point3,
    pub mean_color: Option<Point3>,
    pub aabb: Aabb,
    pub semantic_row: Vec<f64>,
    /// Argmax of `semantic_row`, or −1 when the row is empty.
    pub dominant_label: i32,
    /// Class carried from the weak labels, or −1.
    pub true_label: i32,
}

impl ClusterDescriptor {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    fn absorb(&mut self, other: ClusterDescriptor) {
        let (na, nb) = (self.len() as f64, other.len() as f64);
        let w = |a: f64, b: f64| (a * na + b * nb) / (na + nb);
        for ax in 0..3 {
            self.centroid[ax] = w(self.centroid[ax], other.centroid[ax]);
        }
        if let (Some(a), Some(b)) = (self.mean_color.as_mut(), other.mean_color) {
            for ax in 0..3 {
                a[ax] = w(a[ax], b[ax]);
            }
        }
        self.aabb = self.aabb.union(&other.aabb);
        for (a, b) in self.semantic_row.iter_mut().zip(&other.semantic_row) {
            *a = w(*a, *b);
        }
        normalize(&mut self.semantic_row);
        self.dominant_label = argmax(&self.semantic_row);
        if self.true_label < 0 {
            self.true_label = other.true_label;
        }
        self.point_indices.extend(other.point_indices);
        self.point_indices.sort_unstable();
    }
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 && s.is_finite() {
        row.iter_mut().for_each(|v| *v /= s);
    } else if !row.is_empty() {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    }
}

fn argmax(row: &[f64]) -> i32 {
    let mut best: Option<usize> = None;
    for (i, v) in row.iter().enumerate() {
        if best.is_none_or(|b| *v > row[b]) {
            best = Some(i);
        }
    }
    best.map_or(UNASSIGNED, |b| b as i32)
}

/// Source of per-cluster class distributions.
pub trait SemanticProvider: Send + Sync {
    fn num_classes(&self) -> usize;
    /// A probability row for the cluster holding `points`.
    fn row(&self, cluster_id: i32, points: &[usize]) -> Vec<f64>;
}

pub struct UniformProvider {
    pub num_classes: usize,
}

impl SemanticProvider for UniformProvider {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn row(&self, _: i32, _: &[usize]) -> Vec<f64> {
        vec![1.0 / self.num_classes as f64; self.num_classes]
    }
}

/// Class histogram of ground-truth labels over the cluster's points.
pub struct OracleProvider {
    pub ground_truth: Vec<i32>,
    pub num_classes: usize,
}

impl SemanticProvider for OracleProvider {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn row(&self, _: i32, points: &[usize]) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        for &i in points {
            let c = self.ground_truth.get(i).copied().unwrap_or(UNASSIGNED);
            if c >= 0 && (c as usize) < self.num_classes {
                row[c as usize] += 1.0;
            }
        }
        normalize(&mut row);
        row
    }
}

/// Rows read from a `clusters <N> classes <C>` file.
#[derive(Debug, Clone)]
pub struct FileProvider {
    rows: BTreeMap<i32, Vec<f64>>,
    num_classes: usize,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self, CloudError> {
        let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CloudError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let header_err = |line| CloudError::Header {
            location: Location::Line(line),
            msg: "expected 'clusters <N> classes <C>'".to_string(),
        };
        let (hl, header) = lines.next().ok_or(header_err(1))?;
        let (clusters, num_classes) = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["clusters", n, "classes", c] => (
                n.parse::<usize>().map_err(|_| header_err(hl))?,
                c.parse::<usize>().map_err(|_| header_err(hl))?,
            ),
            _ => return Err(header_err(hl)),
        };
        if num_classes == 0 {
            return Err(header_err(hl));
        }
        let mut rows = BTreeMap::new();
        for (line, l) in lines {
            let bad = |msg: String| CloudError::Parse {
                location: Location::Line(line),
                msg,
            };
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != num_classes + 1 {
                return Err(bad(format!("expected {} columns, found {}", num_classes + 1, tok.len())));
            }
            let id: i32 = tok[0].parse().map_err(|_| bad(format!("invalid cluster id {:?}", tok[0])))?;
            let mut row = Vec::with_capacity(num_classes);
            for t in &tok[1..] {
                let v: f64 = t.parse().map_err(|_| bad(format!("invalid number {t:?}")))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(bad(format!("probability {v} is negative or not finite")));
                }
                row.push(v);
            }
            normalize(&mut row);
            if rows.insert(id, row).is_some() {
                return Err(bad(format!("cluster {id} listed twice")));
            }
        }
        if rows.len() != clusters {
            return Err(CloudError::Invalid(format!(
                "header announces {clusters} clusters, found {}",
                rows.len()
            )));
        }
        Ok(FileProvider { rows, num_classes })
    }
}

impl SemanticProvider for FileProvider {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn row(&self, cluster_id: i32, _: &[usize]) -> Vec<f64> {
        match self.rows.get(&cluster_id) {
            Some(r) => r.clone(),
            None => {
                log::warn!("no semantic row for cluster {cluster_id}; using uniform");
                vec![1.0 / self.num_classes as f64; self.num_classes]
            }
        }
    }
}

/// One descriptor per live cluster id, ascending by id.
pub fn build_descriptors(
    labels: &LabelMatrix,
    cloud: &PointCloud,
    provider: &dyn SemanticProvider,
) -> Result<Vec<ClusterDescriptor>, MergeError> {
    if labels.len() != cloud.len() {
        return Err(MergeError::SizeMismatch {
            labels: labels.len(),
            cloud: cloud.len(),
        });
    }
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.cluster_id.iter().enumerate() {
        if c >= 0 {
            members.entry(c).or_default().push(i);
        }
    }
    let points = cloud.points();
    let colors = cloud.colors();
    let out = members
        .into_iter()
        .map(|(cluster_id, idx)| {
            let n = idx.len() as f64;
            let mean = |get: &dyn Fn(usize) -> Point3| {
                let mut m = [0.0; 3];
                for &i in &idx {
                    let v = get(i);
                    for a in 0..3 {
                        m[a] += v[a];
                    }
                }
                m.map(|v| v / n)
            };
            let centroid = mean(&|i| points[i]);
            let mean_color = colors.map(|c| mean(&|i| c[i]));
            let aabb = Aabb::from_points(idx.iter().map(|&i| &points[i])).expect("non-empty cluster");
            let mut votes: BTreeMap<i32, usize> = BTreeMap::new();
            for &i in &idx {
                if labels.semantic_label[i] >= 0 {
                    *votes.entry(labels.semantic_label[i]).or_default() += 1;
                }
            }
            let true_label = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map_or(UNASSIGNED, |(&c, _)| c);
            let mut semantic_row = provider.row(cluster_id, &idx);
            normalize(&mut semantic_row);
            ClusterDescriptor {
                cluster_id,
                dominant_label: argmax(&semantic_row),
                point_indices: idx,
                centroid,
                mean_color,
                aabb,
                semantic_row,
                true_label,
            }
        })
        .collect();
    Ok(out)
}

/// `(M_color, M_scale, M_iou)`, each in `[0, 1]`. `M_color` is 0.5 when
/// either cluster has no color.
pub fn geometric_similarities(a: &ClusterDescriptor, b: &ClusterDescriptor, inflate: f64) -> (f64, f64, f64) {
    let m_color = match (a.mean_color, b.mean_color) {
        (Some(ca), Some(cb)) => (1.0 - dist2(&ca, &cb).sqrt() / 3f64.sqrt()).clamp(0.0, 1.0),
        _ => 0.5,
    };
    let (da, db) = (a.aabb.diagonal(), b.aabb.diagonal());
    let m_scale = if da == 0.0 && db == 0.0 {
        1.0
    } else {
        da.min(db) / da.max(db)
    };
    let m_iou = a.aabb.inflate(inflate).iou(&b.aabb.inflate(inflate));
    (m_color, m_scale, m_iou)
}

/// `1 / (1 + ‖p − q‖)`.
pub fn semantic_similarity(p: &[f64], q: &[f64]) -> f64 {
    let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 / (1.0 + d2.sqrt())
}

/// Weighted similarity score. Without color the color weight is shared
/// equally by the other three terms.
pub fn similarity(
    a: &ClusterDescriptor,
    b: &ClusterDescriptor,
    w: &Weights,
    channel: SegChannel,
    inflate: f64,
) -> f64 {
    let (m_color, m_scale, m_iou) = geometric_similarities(a, b, inflate);
    let m_seg = semantic_similarity(&a.semantic_row, &b.semantic_row);
    let (m_a, m_b) = match channel {
        SegChannel::Literal => (m_seg, m_iou),
        SegChannel::Narrative => (m_iou, m_seg),
    };
    if a.mean_color.is_some() && b.mean_color.is_some() {
        w.y1 * m_color + w.y2 * m_scale + w.y3 * m_a + w.y4 * m_b
    } else {
        let share = w.y1 / 3.0;
        (w.y2 + share) * m_scale + (w.y3 + share) * m_a + (w.y4 + share) * m_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeConfig {
    pub rounds: usize,
    pub cond3: f64,
    pub cond4: f64,
    pub k_clusters: usize,
    pub inflate: f64,
    pub channel: SegChannel,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            rounds: 10,
            cond3: 1.25,
            cond4: 1.5,
            k_clusters: 8,
            inflate: 0.05,
            channel: SegChannel::Narrative,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if self.rounds == 0 {
            return Err(MergeError::ZeroRounds);
        }
        if !(self.cond3 > 0.0 && self.cond4 >= self.cond3) {
            return Err(MergeError::Thresholds {
                cond3: self.cond3,
                cond4: self.cond4,
            });
        }
        if self.k_clusters == 0 {
            return Err(MergeError::ZeroK);
        }
        if !(self.inflate.is_finite() && self.inflate >= 0.0) {
            return Err(MergeError::Inflate(self.inflate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundStats {
    pub round: usize,
    pub clusters_before: usize,
    pub clusters_after: usize,
    pub merges: usize,
    /// Merges refused because both clusters carried different true labels.
    pub refused: usize,
}

/// One pass of cluster expansion.
///
/// Seeds are the clusters carrying true labels (ascending id), then every
/// other cluster from smallest to largest. Candidates for a seed are its
/// `k_clusters` nearest live clusters by centroid among those whose boxes,
/// inflated by `inflate`, intersect the seed's inflated box. They are scored
/// against the seed as it stood before any of them merged.
pub fn merge_round(
    clusters: Vec<ClusterDescriptor>,
    schedule: &MergeSchedule,
    config: &MergeConfig,
) -> Result<(Vec<ClusterDescriptor>, RoundStats), MergeError> {
    config.validate()?;
    let w = schedule.weights()?;
    let before = clusters.len();
    let mut live: Vec<Option<ClusterDescriptor>> = clusters.into_iter().map(Some).collect();

    let mut order: Vec<usize> = (0..live.len()).collect();
    order.sort_by_key(|&i| {
        let c = live[i].as_ref().expect("all live");
        (c.true_label < 0, if c.true_label < 0 { c.len() } else { 0 }, c.cluster_id)
    });
    let mut starters: VecDeque<usize> = order.into();
    let mut promoted: VecDeque<usize> = VecDeque::new();
    let mut in_promoted = vec![false; live.len()];
    let (mut merges, mut refused) = (0, 0);

    while let Some(s) = promoted.pop_front().or_else(|| starters.pop_front()) {
        in_promoted[s] = false;
        let Some(seed) = live[s].clone() else { continue };
        let reach = seed.aabb.inflate(config.inflate);

        let mut near: Vec<(f64, i32, usize)> = live
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != s)
            .filter_map(|(j, c)| c.as_ref().map(|c| (j, c)))
            .filter(|(_, c)| reach.intersection_volume(&c.aabb.inflate(config.inflate)) > 0.0)
            .map(|(j, c)| (dist2(&seed.centroid, &c.centroid), c.cluster_id, j))
            .collect();
        let k = config.k_clusters.min(near.len());
        if k == 0 {
            continue;
        }
        near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let scored: Vec<(usize, f64)> = near
            .iter()
            .map(|&(_, _, j)| {
                let other = live[j].as_ref().expect("live candidate");
                (j, similarity(&seed, other, &w, schedule.channel, config.inflate))
            })
            .collect();

        let mut promote = false;
        for (j, score) in scored {
            if score < config.cond3 {
                continue;
            }
            let other = live[j].take().expect("live candidate");
            let target = live[s].as_mut().expect("seed is live");
            if target.true_label >= 0 && other.true_label >= 0 && target.true_label != other.true_label {
                log::info!(
                    "refusing merge of cluster {} (class {}) into {} (class {})",
                    other.cluster_id,
                    other.true_label,
                    target.cluster_id,
                    target.true_label
                );
                refused += 1;
                live[j] = Some(other);
                continue;
            }
            target.absorb(other);
            merges += 1;
            promote |= score >= config.cond4;
        }
        if promote && !in_promoted[s] {
            in_promoted[s] = true;
            promoted.push_back(s);
        }
    }

    let mut out: Vec<ClusterDescriptor> = live.into_iter().flatten().collect();
    out.sort_by_key(|c| c.cluster_id);
    let stats = RoundStats {
        round: schedule.round,
        clusters_before: before,
        clusters_after: out.len(),
        merges,
        refused,
    };
    Ok((out, stats))
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub labels: LabelMatrix,
    pub clusters: Vec<ClusterDescriptor>,
    pub rounds: Vec<RoundStats>,
}

/// Runs `config.rounds` merge rounds and writes the result back. Points of a
/// cluster carrying a true label receive that class unless they already hold
/// one; existing semantic labels are never changed.
pub fn run_merging(
    labels: &LabelMatrix,
    cloud: &PointCloud,
    provider: &dyn SemanticProvider,
    config: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    config.validate()?;
    let mut clusters = build_descriptors(labels, cloud, provider)?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let schedule = MergeSchedule {
            n_total: config.rounds,
            round,
            channel: config.channel,
        };
        let (next, stats) = merge_round(clusters, &schedule, config)?;
        log::debug!("merge round {round}: {} -> {} clusters", stats.clusters_before, stats.clusters_after);
        clusters = next;
        rounds.push(stats);
    }

    let mut out = labels.clone();
    for c in &clusters {
        for &i in &c.point_indices {
            out.cluster_id[i] = c.cluster_id;
            if out.semantic_label[i] < 0 {
                out.semantic_label[i] = c.true_label;
            }
        }
    }
    Ok(MergeOutcome {
        labels: out,
        clusters,
        rounds,
    })
}
