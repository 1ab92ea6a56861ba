use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{dist2, Neighbor, NeighborList, Octree, OctreeError};
use crate::cloud::{Point3, PointCloud};

/// Linear-scan KNN with the same ordering rules as the octree.
pub fn brute_force_knn(points: &[Point3], query: &Point3, k: usize) -> NeighborList {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            index,
            dist2: dist2(query, p),
        })
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return NeighborList::default();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, Neighbor::key_cmp);
        all.truncate(k);
    }
    NeighborList::from_unsorted(all)
}

/// `n` points uniform in the unit cube.
pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    PointCloud::new(points, None, format!("uniform-{n}-{seed}")).expect("finite points")
}

/// Query positions uniform in the bounding box of `points`.
pub fn random_queries(points: &[Point3], count: usize, seed: u64) -> Vec<Point3> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_EED0_F0C7);
    (0..count)
        .map(|_| {
            let mut q = [0.0; 3];
            for a in 0..3 {
                q[a] = lo[a] + (hi[a] - lo[a]) * rng.random::<f64>();
            }
            q
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub n: usize,
    pub k: usize,
    pub queries: usize,
    pub build_ms: f64,
    pub octree_ms: f64,
    pub brute_ms: f64,
    /// `brute_ms / octree_ms`.
    pub ratio: f64,
    /// Every octree result matched the linear scan exactly.
    pub verified: bool,
}

impl SpeedupReport {
    pub const CSV_HEADER: &'static str = "n,k,octree_ms,brute_ms,ratio,verified";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{}",
            self.n, self.k, self.octree_ms, self.brute_ms, self.ratio, self.verified
        )
    }
}

/// Times octree KNN against a linear scan over the same query set.
/// Octree build time is reported separately and excluded from the ratio.
pub fn bench_knn(
    cloud: &PointCloud,
    k: usize,
    queries: usize,
    seed: u64,
    leaf_capacity: usize,
) -> Result<SpeedupReport, OctreeError> {
    let t0 = Instant::now();
    let tree = Octree::build(cloud.points(), leaf_capacity)?;
    let build_ms = t0.elapsed().as_secs_f64() * 1e3;
    let qs = random_queries(cloud.points(), queries, seed);

    let t1 = Instant::now();
    let fast: Vec<NeighborList> = qs
        .iter()
        .map(|q| tree.knn(q, k))
        .collect::<Result<_, _>>()?;
    let octree_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let slow: Vec<NeighborList> = qs
        .iter()
        .map(|q| brute_force_knn(cloud.points(), q, k))
        .collect();
    let brute_ms = t2.elapsed().as_secs_f64() * 1e3;

    let verified = fast == slow;
    Ok(SpeedupReport {
        n: cloud.len(),
        k,
        queries,
        build_ms,
        octree_ms,
        brute_ms,
        ratio: if octree_ms > 0.0 {
            brute_ms / octree_ms
        } else {
            f64::INFINITY
        },
        verified,
    })
}
