//! Seed selection and similar-region expansion.
//!
//! Seeds are the weakly labeled points plus a small fraction of the
//! lowest-curvature points. A popped seed compares each unassigned point among
//! its `k_expand` nearest neighbors:
//!
//! * normal angle `Δφ ≤ γ`: the point joins the seed's cluster, and becomes a
//!   seed itself when also `|Δr| ≤ σ`;
//! * otherwise the point opens a new cluster and becomes a seed.
//!
//! Promoted seeds are drained before the next starting seed is taken, so a
//! region grows to completion before another one starts. Points opening new
//! clusters queue behind the remaining starting seeds.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::cloud::{LabelMatrix, PointCloud, WeakLabels, UNASSIGNED};
use crate::geometry::{normal_angle, LocalGeometry};
use crate::octree::Octree;

#[derive(Debug, Error, PartialEq)]
pub enum ExpansionError {
    #[error("gamma must lie in (0, 90) degrees, got {0}")]
    Gamma(f64),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("seed fraction must lie in (0, 1], got {0}")]
    SeedFraction(f64),
    #[error("k_expand must be at least 1")]
    KExpand,
    #[error("inputs cover different point counts: {0}")]
    SizeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionConfig {
    /// Normal-angle threshold in degrees.
    pub gamma_deg: f64,
    /// Curvature-difference threshold, in the units of the curvature mode.
    pub sigma: f64,
    pub k_expand: usize,
    pub seed_fraction: f64,
    /// Pop budget; `None` means 50 × point count.
    pub max_iterations: Option<usize>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            gamma_deg: 2.2,
            sigma: 0.35,
            k_expand: 16,
            seed_fraction: 0.002,
            max_iterations: None,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<(), ExpansionError> {
        if !(self.gamma_deg > 0.0 && self.gamma_deg < 90.0) {
            return Err(ExpansionError::Gamma(self.gamma_deg));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(ExpansionError::Sigma(self.sigma));
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return Err(ExpansionError::SeedFraction(self.seed_fraction));
        }
        if self.k_expand == 0 {
            return Err(ExpansionError::KExpand);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedOrigin {
    TrueLabel,
    LowCurvature,
    Promoted,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SeedSet {
    pub seeds: Vec<(usize, SeedOrigin)>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.seeds.iter().map(|s| s.0)
    }
}

/// Number of low-curvature seeds for `n` points.
pub fn low_curvature_seed_count(n: usize, fraction: f64) -> usize {
    // tolerate representation error such as 0.002 * 1000 = 2.0000000000000004
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// True-label points first (file order), then the `⌈fraction·N⌉` points of
/// smallest finite curvature, ascending, without duplicates.
pub fn select_seeds(
    geometry: &LocalGeometry,
    weak: &WeakLabels,
    config: &ExpansionConfig,
) -> Result<SeedSet, ExpansionError> {
    config.validate()?;
    let n = geometry.len();
    weak.check_range(n)
        .map_err(|e| ExpansionError::SizeMismatch(e.to_string()))?;

    let mut taken = vec![false; n];
    let mut seeds = Vec::new();
    for &(i, _) in weak.entries() {
        taken[i] = true;
        seeds.push((i, SeedOrigin::TrueLabel));
    }

    let mut finite: Vec<usize> = (0..n).filter(|&i| geometry.curvatures[i].is_finite()).collect();
    finite.sort_by(|&a, &b| {
        geometry.curvatures[a]
            .total_cmp(&geometry.curvatures[b])
            .then(a.cmp(&b))
    });
    let count = low_curvature_seed_count(n, config.seed_fraction).min(finite.len());
    for &i in &finite[..count] {
        if !taken[i] {
            taken[i] = true;
            seeds.push((i, SeedOrigin::LowCurvature));
        }
    }
    Ok(SeedSet { seeds })
}

/// Why the expansion loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    AllLabeled,
    NoSeeds,
    /// A full pass over the live queue assigned nothing.
    NoExpansion,
    MaxIterations,
}

/// One neighbor decision made while expanding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admission {
    pub point: usize,
    pub seed: usize,
    /// `None` when either normal is degenerate.
    pub delta_phi_deg: Option<f64>,
    /// `None` when either curvature is infinite.
    pub delta_r: Option<f64>,
    /// Whether the point joined the seed's cluster (as opposed to opening one).
    #[serde(skip)]
    pub joined: bool,
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub labels: LabelMatrix,
    pub stop: StopReason,
    pub iterations: usize,
    pub admissions: Vec<Admission>,
}

pub fn expand_regions(
    cloud: &PointCloud,
    tree: &Octree,
    geometry: &LocalGeometry,
    seeds: &SeedSet,
    config: &ExpansionConfig,
) -> Result<Expansion, ExpansionError> {
    config.validate()?;
    let n = cloud.len();
    if tree.len() != n || geometry.len() != n {
        return Err(ExpansionError::SizeMismatch(format!(
            "cloud {n}, octree {}, geometry {}",
            tree.len(),
            geometry.len()
        )));
    }
    if let Some(&(i, _)) = seeds.seeds.iter().find(|(i, _)| *i >= n) {
        return Err(ExpansionError::SizeMismatch(format!("seed index {i} of {n}")));
    }

    let points = cloud.points();
    let max_iterations = config.max_iterations.unwrap_or(50 * n);
    let k = (config.k_expand + 1).min(n);
    let within_gamma = |phi: f64| phi <= config.gamma_deg;

    let mut labels = LabelMatrix::unassigned(n);
    let mut admissions = Vec::new();
    let mut starters: VecDeque<usize> = seeds.indices().collect();
    let mut active: VecDeque<usize> = VecDeque::new();
    let mut queued = vec![false; n];
    for &i in &starters {
        queued[i] = true;
    }
    let mut next_cluster: i32 = 0;
    let mut assigned = 0usize;
    let mut iterations = 0usize;
    let mut pass_left = starters.len();
    let mut pass_changes = 0usize;

    let stop = loop {
        if assigned == n {
            break StopReason::AllLabeled;
        }
        if pass_left == 0 {
            if pass_changes == 0 && iterations > 0 {
                break StopReason::NoExpansion;
            }
            pass_left = starters.len() + active.len();
            pass_changes = 0;
        }
        let Some(seed) = active.pop_front().or_else(|| starters.pop_front()) else {
            break StopReason::NoSeeds;
        };
        if iterations >= max_iterations {
            break StopReason::MaxIterations;
        }
        iterations += 1;
        pass_left = pass_left.saturating_sub(1);
        queued[seed] = false;

        if labels.cluster_id[seed] == UNASSIGNED {
            labels.cluster_id[seed] = next_cluster;
            next_cluster += 1;
            assigned += 1;
            pass_changes += 1;
        }
        let cluster = labels.cluster_id[seed];
        let seed_normal = geometry.normals[seed];
        let seed_r = geometry.curvatures[seed];

        let nn = tree.knn(&points[seed], k).expect("k clamped to point count");
        for nb in nn.iter() {
            let i = nb.index;
            if i == seed || labels.cluster_id[i] != UNASSIGNED {
                continue;
            }
            let delta_phi = normal_angle(&geometry.normals[i], &seed_normal).ok();
            let delta_r = (geometry.curvatures[i] - seed_r).abs();
            let delta_r = delta_r.is_finite().then_some(delta_r);
            let joined = delta_phi.is_some_and(within_gamma);

            labels.provenance[i] = seed as i32;
            assigned += 1;
            pass_changes += 1;
            if joined {
                labels.cluster_id[i] = cluster;
                if delta_r.is_some_and(|d| d <= config.sigma) && !queued[i] {
                    queued[i] = true;
                    active.push_back(i);
                }
            } else {
                labels.cluster_id[i] = next_cluster;
                next_cluster += 1;
                if !queued[i] {
                    queued[i] = true;
                    starters.push_back(i);
                }
            }
            admissions.push(Admission {
                point: i,
                seed,
                delta_phi_deg: delta_phi,
                delta_r,
                joined,
            });
        }
    };

    Ok(Expansion {
        labels,
        stop,
        iterations,
        admissions,
    })
}

/// A cluster whose truly labeled points disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelConflict {
    pub cluster: i32,
    /// `(class, count)` pairs, ascending by class.
    pub votes: Vec<(usize, usize)>,
    pub chosen: usize,
}

/// Spreads each cluster's true label to all of its points. Clusters with
/// disagreeing true labels take the majority class (ties to the lower id);
/// truly labeled points always keep their own class.
pub fn attach_cluster_labels(
    labels: &LabelMatrix,
    weak: &WeakLabels,
) -> (LabelMatrix, Vec<LabelConflict>) {
    let mut out = labels.clone();
    let mut next_cluster = out.cluster_id.iter().copied().max().unwrap_or(-1) + 1;
    let mut votes: BTreeMap<i32, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(i, class) in weak.entries() {
        if i >= out.len() {
            continue;
        }
        if out.cluster_id[i] == UNASSIGNED {
            // only reachable when expansion hit its iteration budget
            out.cluster_id[i] = next_cluster;
            next_cluster += 1;
        }
        *votes
            .entry(out.cluster_id[i])
            .or_default()
            .entry(class)
            .or_default() += 1;
    }

    let mut conflicts = Vec::new();
    let mut class_of: BTreeMap<i32, usize> = BTreeMap::new();
    for (&cluster, v) in &votes {
        let (&chosen, _) = v
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty votes");
        if v.len() > 1 {
            let conflict = LabelConflict {
                cluster,
                votes: v.iter().map(|(&c, &n)| (c, n)).collect(),
                chosen,
            };
            log::warn!(
                "cluster {} holds true labels of several classes {:?}; using {}",
                cluster,
                conflict.votes,
                chosen
            );
            conflicts.push(conflict);
        }
        class_of.insert(cluster, chosen);
    }

    for i in 0..out.len() {
        out.semantic_label[i] = class_of
            .get(&out.cluster_id[i])
            .map_or(UNASSIGNED, |&c| c as i32);
    }
    for &(i, class) in weak.entries() {
        if i < out.len() {
            out.semantic_label[i] = class as i32;
        }
    }
    (out, conflicts)
}
