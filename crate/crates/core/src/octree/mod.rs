//! Octree over a fixed point set with k-nearest-neighbor and radius queries.
//!
//! Each octant owns a contiguous slice of a permuted index array, so a whole
//! subtree can be scanned without descending. KNN traversal visits children
//! nearest-first and uses the current k-th best distance as the query ball:
//!
//! 1. an octant that does not overlap the ball is skipped;
//! 2. once the ball lies strictly inside the octant just searched, the search
//!    stops;
//! 3. an octant entirely inside the ball is compared point by point without
//!    visiting its children.
//!
//! Equal distances are broken by the lower point index, so results are fully
//! deterministic.

mod bench;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::Deref;

use thiserror::Error;

use crate::cloud::{Point3, PointCloud};

pub use bench::{bench_knn, brute_force_knn, random_cloud, random_queries, SpeedupReport};

/// Split stops once a cube's half-extent drops below this (meters).
pub const MIN_HALF_EXTENT: f64 = 1e-4;
/// Padding added around the tight bounding cube (meters).
pub const ROOT_PADDING: f64 = 1e-6;
pub const DEFAULT_LEAF_CAPACITY: usize = 32;

const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum OctreeError {
    #[error("cannot build an octree over an empty cloud")]
    EmptyCloud,
    #[error("leaf capacity must be positive")]
    ZeroLeafCapacity,
    #[error("k must be positive")]
    ZeroK,
    #[error("k = {k} exceeds the {n} indexed points")]
    KTooLarge { k: usize, n: usize },
    #[error("search radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared Euclidean distance in m².
    pub dist2: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

/// Neighbors sorted by ascending distance, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList(Vec<Neighbor>);

impl NeighborList {
    pub(crate) fn from_unsorted(mut v: Vec<Neighbor>) -> Self {
        v.sort_by(Neighbor::key_cmp);
        NeighborList(v)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|n| n.index)
    }

    pub fn into_vec(self) -> Vec<Neighbor> {
        self.0
    }
}

impl Deref for NeighborList {
    type Target = [Neighbor];

    fn deref(&self) -> &[Neighbor] {
        &self.0
    }
}

#[derive(Debug, Clone)]
struct Octant {
    center: Point3,
    half: f64,
    start: u32,
    end: u32,
    children: [u32; 8],
    is_leaf: bool,
}

impl Octant {
    /// Squared distance from `q` to the nearest point of the cube.
    fn min_dist2(&self, q: &Point3) -> f64 {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (q[a] - self.center[a]).abs() - self.half;
            if d > 0.0 {
                acc += d * d;
            }
        }
        acc
    }

    /// Squared distance from `q` to the farthest corner of the cube.
    fn max_dist2(&self, q: &Point3) -> f64 {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (q[a] - self.center[a]).abs() + self.half;
            acc += d * d;
        }
        acc
    }

    /// Whether the ball of squared radius `r2` lies strictly inside the cube.
    fn encloses_ball(&self, q: &Point3, r2: f64) -> bool {
        let r = r2.sqrt();
        (0..3).all(|a| (q[a] - self.center[a]).abs() + r < self.half)
    }

    fn contains_point(&self, p: &Point3) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half)
    }
}

/// Read-only view of one leaf, for structural checks.
#[derive(Debug, Clone, Copy)]
pub struct LeafView<'a> {
    pub center: Point3,
    pub half_extent: f64,
    pub depth: usize,
    pub indices: &'a [u32],
}

#[derive(Debug, Clone)]
pub struct Octree {
    points: Vec<Point3>,
    order: Vec<u32>,
    nodes: Vec<Octant>,
    leaf_capacity: usize,
}

pub fn build_octree(cloud: &PointCloud, leaf_capacity: usize) -> Result<Octree, OctreeError> {
    Octree::build(cloud.points(), leaf_capacity)
}

impl Octree {
    pub fn build(points: &[Point3], leaf_capacity: usize) -> Result<Self, OctreeError> {
        if points.is_empty() {
            return Err(OctreeError::EmptyCloud);
        }
        if leaf_capacity == 0 {
            return Err(OctreeError::ZeroLeafCapacity);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let half = 0.5 * extent + ROOT_PADDING;

        let mut tree = Octree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            leaf_capacity,
        };
        let mut scratch = vec![0u32; points.len()];
        tree.nodes.push(Octant {
            center,
            half,
            start: 0,
            end: points.len() as u32,
            children: [NO_CHILD; 8],
            is_leaf: true,
        });
        tree.split(0, &mut scratch);
        Ok(tree)
    }

    fn split(&mut self, node: usize, scratch: &mut [u32]) {
        let Octant {
            center,
            half,
            start,
            end,
            ..
        } = self.nodes[node].clone();
        let count = (end - start) as usize;
        if count <= self.leaf_capacity || half < MIN_HALF_EXTENT {
            return;
        }

        let code = |p: &Point3| -> usize {
            (p[0] >= center[0]) as usize
                | ((p[1] >= center[1]) as usize) << 1
                | ((p[2] >= center[2]) as usize) << 2
        };
        let range = start as usize..end as usize;
        let mut counts = [0usize; 8];
        for &i in &self.order[range.clone()] {
            counts[code(&self.points[i as usize])] += 1;
        }
        let mut offsets = [0usize; 8];
        let mut acc = 0;
        for c in 0..8 {
            offsets[c] = acc;
            acc += counts[c];
        }
        let mut cursor = offsets;
        for &i in &self.order[range.clone()] {
            let c = code(&self.points[i as usize]);
            scratch[cursor[c]] = i;
            cursor[c] += 1;
        }
        self.order[range].copy_from_slice(&scratch[..count]);

        let child_half = 0.5 * half;
        let mut children = [NO_CHILD; 8];
        for c in 0..8 {
            if counts[c] == 0 {
                continue;
            }
            let sign = |bit: usize| if c >> bit & 1 == 1 { 1.0 } else { -1.0 };
            let child_center = [
                center[0] + sign(0) * child_half,
                center[1] + sign(1) * child_half,
                center[2] + sign(2) * child_half,
            ];
            children[c] = self.nodes.len() as u32;
            self.nodes.push(Octant {
                center: child_center,
                half: child_half,
                start: start + offsets[c] as u32,
                end: start + (offsets[c] + counts[c]) as u32,
                children: [NO_CHILD; 8],
                is_leaf: true,
            });
        }
        self.nodes[node].children = children;
        self.nodes[node].is_leaf = false;
        for &child in children.iter().filter(|&&c| c != NO_CHILD) {
            self.split(child as usize, scratch);
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Root cube as `(center, half_extent)`.
    pub fn root_cube(&self) -> (Point3, f64) {
        (self.nodes[0].center, self.nodes[0].half)
    }

    /// Every leaf with its depth (root is depth 0).
    pub fn leaves(&self) -> Vec<LeafView<'_>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((n, depth)) = stack.pop() {
            let node = &self.nodes[n];
            if node.is_leaf {
                out.push(LeafView {
                    center: node.center,
                    half_extent: node.half,
                    depth,
                    indices: &self.order[node.start as usize..node.end as usize],
                });
            } else {
                for &c in node.children.iter().rev().filter(|&&c| c != NO_CHILD) {
                    stack.push((c as usize, depth + 1));
                }
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.leaves().iter().map(|l| l.depth).max().unwrap_or(0)
    }

    /// Checks that each leaf's points lie in its cube and every index appears
    /// exactly once.
    pub fn check_invariants(&self) -> bool {
        let mut seen = vec![false; self.points.len()];
        for leaf in self.leaves() {
            let cube = Octant {
                center: leaf.center,
                half: leaf.half_extent,
                start: 0,
                end: 0,
                children: [NO_CHILD; 8],
                is_leaf: true,
            };
            for &i in leaf.indices {
                let i = i as usize;
                if seen[i] || !cube.contains_point(&self.points[i]) {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn knn(&self, query: &Point3, k: usize) -> Result<NeighborList, OctreeError> {
        self.knn_inner(query, k, None)
    }

    /// Same as [`Octree::knn`] but records the pruning decisions taken.
    pub fn knn_traced(
        &self,
        query: &Point3,
        k: usize,
    ) -> Result<(NeighborList, SearchTrace), OctreeError> {
        let mut trace = SearchTrace::default();
        let list = self.knn_inner(query, k, Some(&mut trace))?;
        Ok((list, trace))
    }

    fn knn_inner(
        &self,
        query: &Point3,
        k: usize,
        trace: Option<&mut SearchTrace>,
    ) -> Result<NeighborList, OctreeError> {
        if k == 0 {
            return Err(OctreeError::ZeroK);
        }
        if k > self.points.len() {
            return Err(OctreeError::KTooLarge {
                k,
                n: self.points.len(),
            });
        }
        let mut search = KnnSearch {
            tree: self,
            query,
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            trace,
        };
        search.visit(0);
        let v = search
            .heap
            .into_vec()
            .into_iter()
            .map(|h| h.0)
            .collect::<Vec<_>>();
        Ok(NeighborList::from_unsorted(v))
    }

    /// All points within `radius` of `query`, nearest first.
    pub fn radius_search(&self, query: &Point3, radius: f64) -> Result<NeighborList, OctreeError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(OctreeError::InvalidRadius(radius));
        }
        let r2 = radius * radius;
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.min_dist2(query) > r2 {
                continue;
            }
            let slice = &self.order[node.start as usize..node.end as usize];
            if node.is_leaf || node.max_dist2(query) <= r2 {
                for &i in slice {
                    let d2 = dist2(query, &self.points[i as usize]);
                    if d2 <= r2 {
                        out.push(Neighbor {
                            index: i as usize,
                            dist2: d2,
                        });
                    }
                }
                continue;
            }
            stack.extend(node.children.iter().filter(|&&c| c != NO_CHILD).map(|&c| c as usize));
        }
        Ok(NeighborList::from_unsorted(out))
    }
}

/// Record of one traced KNN traversal.
#[derive(Debug, Clone, Default)]
pub struct SearchTrace {
    /// Squared query-ball radius each time it changed after the heap filled.
    pub radius2_history: Vec<f64>,
    /// Octants skipped because they did not overlap the ball:
    /// `(center, half_extent, squared radius at the time)`.
    pub pruned: Vec<(Point3, f64, f64)>,
    /// Octants scanned in bulk because the ball contained them.
    pub bulk_scans: usize,
    /// Whether traversal ended early because the ball lay inside an octant.
    pub early_exit: bool,
    pub points_compared: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeapItem(Neighbor);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

struct KnnSearch<'a, 't> {
    tree: &'a Octree,
    query: &'a Point3,
    k: usize,
    heap: BinaryHeap<HeapItem>,
    trace: Option<&'t mut SearchTrace>,
}

impl KnnSearch<'_, '_> {
    fn radius2(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map(|h| h.0.dist2).unwrap_or(f64::INFINITY)
        }
    }

    fn consider(&mut self, index: u32) {
        let cand = Neighbor {
            index: index as usize,
            dist2: dist2(self.query, &self.tree.points[index as usize]),
        };
        let full = self.heap.len() >= self.k;
        if !full {
            self.heap.push(HeapItem(cand));
        } else if cand.key_cmp(&self.heap.peek().unwrap().0) == Ordering::Less {
            self.heap.pop();
            self.heap.push(HeapItem(cand));
        } else {
            return;
        }
        if self.heap.len() >= self.k {
            let r2 = self.radius2();
            if let Some(t) = self.trace.as_deref_mut() {
                if t.radius2_history.last() != Some(&r2) {
                    t.radius2_history.push(r2);
                }
            }
        }
    }

    fn scan(&mut self, node: &Octant) {
        let tree = self.tree;
        let slice = &tree.order[node.start as usize..node.end as usize];
        if let Some(t) = self.trace.as_deref_mut() {
            t.points_compared += slice.len();
        }
        for &i in slice {
            self.consider(i);
        }
    }

    /// Returns true once the search can stop.
    fn visit(&mut self, n: usize) -> bool {
        let tree = self.tree;
        let node = &tree.nodes[n];
        if node.is_leaf {
            self.scan(node);
            return self.done_inside(node);
        }
        if self.radius2().is_finite() && node.max_dist2(self.query) <= self.radius2() {
            if let Some(t) = self.trace.as_deref_mut() {
                t.bulk_scans += 1;
            }
            self.scan(node);
            return self.done_inside(node);
        }

        let mut order: [(f64, u32); 8] = [(f64::INFINITY, NO_CHILD); 8];
        let mut m = 0;
        for &c in node.children.iter().filter(|&&c| c != NO_CHILD) {
            order[m] = (tree.nodes[c as usize].min_dist2(self.query), c);
            m += 1;
        }
        order[..m].sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, c) in &order[..m] {
            let r2 = self.radius2();
            if d2 > r2 {
                if let Some(t) = self.trace.as_deref_mut() {
                    let child = &tree.nodes[c as usize];
                    t.pruned.push((child.center, child.half, r2));
                }
                continue;
            }
            if self.visit(c as usize) {
                return true;
            }
        }
        self.done_inside(node)
    }

    fn done_inside(&mut self, node: &Octant) -> bool {
        let r2 = self.radius2();
        let inside = r2.is_finite() && node.encloses_ball(self.query, r2);
        if inside {
            if let Some(t) = self.trace.as_deref_mut() {
                t.early_exit = true;
            }
        }
        inside
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners() -> Vec<Point3> {
        let mut v = Vec::new();
        for i in 0..8 {
            v.push([(i & 1) as f64, (i >> 1 & 1) as f64, (i >> 2 & 1) as f64]);
        }
        v
    }

    #[test]
    fn single_point_tree() {
        let t = Octree::build(&[[1.0, 2.0, 3.0]], 32).unwrap();
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 1);
        assert_eq!(leaves[0].indices, &[0]);
        assert_eq!(t.depth(), 0);
        assert!(t.check_invariants());
    }

    #[test]
    fn unit_cube_corners_split_once() {
        let t = Octree::build(&corners(), 1).unwrap();
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 8);
        assert!(leaves.iter().all(|l| l.depth == 1 && l.indices.len() == 1));
        assert!(t.check_invariants());
        let (c, h) = t.root_cube();
        assert_eq!(c, [0.5, 0.5, 0.5]);
        assert!((h - (0.5 + ROOT_PADDING)).abs() < 1e-15);
    }

    #[test]
    fn empty_and_bad_args() {
        assert_eq!(Octree::build(&[], 4).unwrap_err(), OctreeError::EmptyCloud);
        let t = Octree::build(&corners(), 2).unwrap();
        assert_eq!(t.knn(&[0.0; 3], 9).unwrap_err(), OctreeError::KTooLarge { k: 9, n: 8 });
        assert_eq!(t.knn(&[0.0; 3], 0).unwrap_err(), OctreeError::ZeroK);
        assert!(t.radius_search(&[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn duplicates_stop_splitting() {
        let pts = vec![[0.25, 0.25, 0.25]; 100];
        let t = Octree::build(&pts, 4).unwrap();
        assert!(t.check_invariants());
        let nn = t.knn(&[0.25, 0.25, 0.25], 3).unwrap();
        assert_eq!(nn.indices().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn knn_at_existing_point() {
        let t = Octree::build(&corners(), 1).unwrap();
        let nn = t.knn(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(nn[0].index, 3);
        assert_eq!(nn[0].dist2, 0.0);
    }

    #[test]
    fn collinear_two_nearest() {
        let pts: Vec<Point3> = (0..4).map(|x| [x as f64, 0.0, 0.0]).collect();
        let t = Octree::build(&pts, 1).unwrap();
        let nn = t.knn(&[0.0; 3], 2).unwrap();
        assert_eq!(nn.indices().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn equal_distances_prefer_lower_index() {
        let t = Octree::build(&corners(), 1).unwrap();
        let nn = t.knn(&[0.5, 0.5, 0.5], 3).unwrap();
        assert_eq!(nn.indices().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn radius_cases() {
        let t = Octree::build(&corners(), 1).unwrap();
        assert!(t.radius_search(&[0.0; 3], 0.5).unwrap().len() == 1);
        assert!(t.radius_search(&[0.5, 0.5, 2.0], 0.5).unwrap().is_empty());
        let r = 3f64.sqrt() / 2.0 + 1e-9;
        assert_eq!(t.radius_search(&[0.5, 0.5, 0.5], r).unwrap().len(), 8);
    }
}
