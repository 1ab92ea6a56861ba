//! Deterministic synthetic scenes with ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{LabelMatrix, Point3, PointCloud, WeakLabels};

/// A generated cloud with per-point ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    /// Ground-truth semantic class per point.
    pub semantic: Vec<i32>,
    /// Ground-truth instance per point.
    pub instance: Vec<i32>,
    pub num_classes: usize,
}

impl Scene {
    /// Ground truth as a label matrix (instance ids as clusters).
    pub fn ground_truth(&self) -> LabelMatrix {
        LabelMatrix {
            cluster_id: self.instance.clone(),
            semantic_label: self.semantic.clone(),
            provenance: vec![-1; self.semantic.len()],
        }
    }

    /// `per_instance[k]` labeled points drawn uniformly from instance `k`.
    pub fn sample_weak_labels(&self, per_instance: &[usize], seed: u64) -> WeakLabels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (inst, &count) in per_instance.iter().enumerate() {
            let members: Vec<usize> = (0..self.instance.len())
                .filter(|&i| self.instance[i] == inst as i32)
                .collect();
            let mut picked = Vec::new();
            while picked.len() < count.min(members.len()) {
                let i = members[rng.random_range(0..members.len())];
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            entries.extend(picked.into_iter().map(|i| (i, self.semantic[i] as usize)));
        }
        WeakLabels::new(entries, self.num_classes).expect("valid sampled labels")
    }
}

struct Builder {
    rng: ChaCha8Rng,
    points: Vec<Point3>,
    colors: Vec<Point3>,
    semantic: Vec<i32>,
    instance: Vec<i32>,
    noise: f64,
    color_noise: f64,
}

impl Builder {
    fn new(seed: u64, noise: f64, color_noise: f64) -> Self {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            points: Vec::new(),
            colors: Vec::new(),
            semantic: Vec::new(),
            instance: Vec::new(),
            noise,
            color_noise,
        }
    }

    /// Samples the rectangle `origin + a·u + b·v`, `a ∈ [0, |u|]`,
    /// `b ∈ [0, |v|]`, on a cell-centered grid of roughly `spacing`.
    #[allow(clippy::too_many_arguments)]
    fn rect(
        &mut self,
        origin: Point3,
        u: Point3,
        v: Point3,
        spacing: f64,
        color: Point3,
        semantic: i32,
        instance: i32,
        skip: impl Fn(&Point3) -> bool,
    ) {
        let len = |w: &Point3| (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let nu = (len(&u) / spacing).round().max(1.0) as usize;
        let nv = (len(&v) / spacing).round().max(1.0) as usize;
        let normal = {
            let c = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let l = len(&c);
            [c[0] / l, c[1] / l, c[2] / l]
        };
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + 0.5) / nu as f64;
                let b = (j as f64 + 0.5) / nv as f64;
                let off = if self.noise > 0.0 {
                    self.rng.random_range(-self.noise..self.noise)
                } else {
                    0.0
                };
                let p = [
                    origin[0] + a * u[0] + b * v[0] + off * normal[0],
                    origin[1] + a * u[1] + b * v[1] + off * normal[1],
                    origin[2] + a * u[2] + b * v[2] + off * normal[2],
                ];
                if skip(&p) {
                    continue;
                }
                let mut c = color;
                if self.color_noise > 0.0 {
                    for ch in c.iter_mut() {
                        *ch = (*ch + self.rng.random_range(-self.color_noise..self.color_noise))
                            .clamp(0.0, 1.0);
                    }
                }
                self.points.push(p);
                self.colors.push(c);
                self.semantic.push(semantic);
                self.instance.push(instance);
            }
        }
    }

    fn finish(self, name: &str, num_classes: usize, with_color: bool) -> Scene {
        let colors = with_color.then_some(self.colors);
        Scene {
            cloud: PointCloud::new(self.points, colors, name).expect("finite synthetic points"),
            semantic: self.semantic,
            instance: self.instance,
            num_classes,
        }
    }
}

fn no_skip(_: &Point3) -> bool {
    false
}

/// Two planes meeting at a right angle along the y axis: `z = 0, x ≥ 0`
/// (class 0) and `x = 0, z ≥ 0` (class 1). Each plane has `along × across`
/// points at `spacing` meters.
pub fn perpendicular_planes(along: usize, across: usize, spacing: f64, seed: u64) -> Scene {
    let mut b = Builder::new(seed, 0.0, 0.0);
    let w = along as f64 * spacing;
    let d = across as f64 * spacing;
    b.rect([0.0; 3], [d, 0.0, 0.0], [0.0, w, 0.0], spacing, [0.5; 3], 0, 0, no_skip);
    b.rect([0.0; 3], [0.0, 0.0, d], [0.0, w, 0.0], spacing, [0.5; 3], 1, 1, no_skip);
    b.finish("perpendicular-planes", 2, false)
}

/// Two horizontal `side × side` planes `gap` meters apart (classes 0 and 1).
pub fn parallel_planes(side: usize, spacing: f64, gap: f64, seed: u64) -> Scene {
    let mut b = Builder::new(seed, 0.0, 0.0);
    let e = side as f64 * spacing;
    b.rect([0.0; 3], [e, 0.0, 0.0], [0.0, e, 0.0], spacing, [0.5; 3], 0, 0, no_skip);
    b.rect([0.0, 0.0, gap], [e, 0.0, 0.0], [0.0, e, 0.0], spacing, [0.5; 3], 1, 1, no_skip);
    b.finish("parallel-planes", 2, false)
}

/// One colored plane cut into a 2×2 arrangement of `side × side`-point
/// tiles separated by `gap` meters. Instances are the tiles; every point is
/// class 0.
pub fn split_plane_tiles(side: usize, spacing: f64, gap: f64) -> Scene {
    let mut b = Builder::new(0, 0.0, 0.0);
    let e = side as f64 * spacing;
    for t in 0..4 {
        let ox = (t % 2) as f64 * (e + gap);
        let oy = (t / 2) as f64 * (e + gap);
        b.rect([ox, oy, 0.0], [e, 0.0, 0.0], [0.0, e, 0.0], spacing, [0.6, 0.4, 0.2], 0, t, no_skip);
    }
    b.finish("tiles", 1, true)
}

pub const ROOM_CLASSES: [&str; 4] = ["floor", "wall", "table", "cabinet"];

/// A 5 m × 5 m room: floor, two walls and two boxes of different sizes and
/// colors, about 4.6×10⁴ points at 3.5 cm spacing.
///
/// Instances: 0 floor, 1 and 2 walls, 3 table box, 4 cabinet box.
pub fn synthetic_room(seed: u64) -> Scene {
    let s = 0.035;
    let mut b = Builder::new(seed, 1e-4, 0.02);
    let floor = [0.35, 0.25, 0.15];
    let wall = [0.9, 0.9, 0.85];
    let red = [0.8, 0.2, 0.2];
    let blue = [0.2, 0.3, 0.8];
    // (min corner, size) of the two boxes
    let boxes = [([1.5, 1.5, 0.0], [1.0, 0.8, 0.7]), ([3.2, 3.0, 0.0], [0.6, 0.6, 1.2])];
    let under_box = |p: &Point3| {
        boxes.iter().any(|(o, sz)| {
            p[0] > o[0] && p[0] < o[0] + sz[0] && p[1] > o[1] && p[1] < o[1] + sz[1]
        })
    };

    b.rect([0.0; 3], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0], s, floor, 0, 0, under_box);
    b.rect([0.0; 3], [5.0, 0.0, 0.0], [0.0, 0.0, 2.5], s, wall, 1, 1, no_skip);
    b.rect([0.0; 3], [0.0, 5.0, 0.0], [0.0, 0.0, 2.5], s, wall, 1, 2, no_skip);

    for (k, ((o, sz), color)) in boxes.iter().zip([red, blue]).enumerate() {
        let class = 2 + k as i32;
        let inst = 3 + k as i32;
        let [x, y, z] = *o;
        let [dx, dy, dz] = *sz;
        b.rect([x, y, z + dz], [dx, 0.0, 0.0], [0.0, dy, 0.0], s, color, class, inst, no_skip);
        b.rect([x, y, z], [dx, 0.0, 0.0], [0.0, 0.0, dz], s, color, class, inst, no_skip);
        b.rect([x, y + dy, z], [dx, 0.0, 0.0], [0.0, 0.0, dz], s, color, class, inst, no_skip);
        b.rect([x, y, z], [0.0, dy, 0.0], [0.0, 0.0, dz], s, color, class, inst, no_skip);
        b.rect([x + dx, y, z], [0.0, dy, 0.0], [0.0, 0.0, dz], s, color, class, inst, no_skip);
    }
    b.finish("synthetic-room", ROOM_CLASSES.len(), true)
}

/// 20 weak labels spread over the room's five instances.
pub fn room_weak_labels(scene: &Scene, seed: u64) -> WeakLabels {
    scene.sample_weak_labels(&[5, 3, 3, 4, 5], seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_size_and_labels() {
        let room = synthetic_room(7);
        let n = room.cloud.len();
        assert!((40_000..60_000).contains(&n), "{n}");
        let weak = room_weak_labels(&room, 7);
        assert_eq!(weak.len(), 20);
        for &(i, c) in weak.entries() {
            assert_eq!(room.semantic[i], c as i32);
        }
        assert_eq!(synthetic_room(7).cloud, room.cloud);
    }

    #[test]
    fn planes_sizes() {
        assert_eq!(perpendicular_planes(50, 200, 0.02, 0).cloud.len(), 20_000);
        assert_eq!(split_plane_tiles(10, 0.1, 0.02).cloud.len(), 400);
    }
}
