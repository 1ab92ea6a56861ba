//! Axis-aligned boxes shared by merging and detection.

use serde::{Deserialize, Serialize};

use crate::cloud::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Tight box around `points`; `None` when empty.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb { min: first, max: first };
        for p in it {
            b.include(p);
        }
        Some(b)
    }

    pub fn include(&mut self, p: &Point3) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut b = *self;
        b.include(&other.min);
        b.include(&other.max);
        b
    }

    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    /// Grows every face outward by `margin` meters.
    pub fn inflate(&self, margin: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - margin, self.min[1] - margin, self.min[2] - margin],
            max: [self.max[0] + margin, self.max[1] + margin, self.max[2] + margin],
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        let mut v = 1.0;
        for a in 0..3 {
            let lo = self.min[a].max(other.min[a]);
            let hi = self.max[a].min(other.max[a]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }

    /// Volume IoU. Zero-volume boxes score 0 unless the two boxes are
    /// identical, which scores 1.
    pub fn iou(&self, other: &Aabb) -> f64 {
        if self == other {
            return 1.0;
        }
        let (va, vb) = (self.volume(), other.volume());
        if va <= 0.0 || vb <= 0.0 {
            return 0.0;
        }
        let inter = self.intersection_volume(other);
        let union = va + vb - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}
