//! Per-point normals and curvature from k-neighborhood covariance.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{Point3, PointCloud};
use crate::octree::Octree;

pub const DEFAULT_GEOMETRY_K: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("neighborhood size must be at least 3, got {0}")]
    NeighborhoodTooSmall(usize),
    #[error("octree indexes {tree} points but the cloud has {cloud}")]
    TreeMismatch { tree: usize, cloud: usize },
    #[error("normal_angle called with a zero vector")]
    ZeroVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    /// `λ0 / (λ0 + λ1 + λ2)`, dimensionless.
    SurfaceVariation,
    /// Surface variation divided by the mean neighbor distance, in m⁻¹.
    #[default]
    RadiusNormalized,
}

impl std::str::FromStr for CurvatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "surface-variation" => Ok(CurvatureMode::SurfaceVariation),
            "radius-normalized" => Ok(CurvatureMode::RadiusNormalized),
            other => Err(format!("unknown curvature mode {other:?}")),
        }
    }
}

impl std::fmt::Display for CurvatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CurvatureMode::SurfaceVariation => "surface-variation",
            CurvatureMode::RadiusNormalized => "radius-normalized",
        })
    }
}

/// Normals and curvatures for every point of a cloud.
///
/// Degenerate points (fewer than three distinct neighbor positions) carry a
/// zero normal and infinite curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGeometry {
    pub normals: Vec<Point3>,
    pub curvatures: Vec<f64>,
    pub curvature_mode: CurvatureMode,
    pub k_used: usize,
}

impl LocalGeometry {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn is_degenerate(&self, i: usize) -> bool {
        self.normals[i] == [0.0; 3]
    }
}

/// Result of fitting a plane to a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Point3,
    /// Ascending eigenvalues of the neighborhood covariance.
    pub eigenvalues: [f64; 3],
}

impl PlaneFit {
    pub fn surface_variation(&self) -> f64 {
        let sum: f64 = self.eigenvalues.iter().sum();
        if sum > 0.0 {
            self.eigenvalues[0] / sum
        } else {
            0.0
        }
    }
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for a in 1..3 {
        if v[a].abs() > v[best].abs() {
            best = a;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for i in 0..3 {
        if a[i] != b[i] {
            return a[i] < b[i];
        }
    }
    false
}

/// Fits a plane by covariance eigendecomposition. Returns `None` when the
/// positions hold fewer than three distinct points.
pub fn fit_plane(points: &[Point3]) -> Option<PlaneFit> {
    let mut distinct: Vec<&Point3> = Vec::with_capacity(3);
    for p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
            if distinct.len() == 3 {
                break;
            }
        }
    }
    if distinct.len() < 3 {
        return None;
    }

    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.map(|i| eig.eigenvalues[i].max(0.0));

    let mut normal = canonical_sign(eig.eigenvectors.column(order[0]).into_owned());
    let scale = values.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    if (values[1] - values[0]) <= 1e-12 * scale {
        let other = canonical_sign(eig.eigenvectors.column(order[1]).into_owned());
        if lex_less(&other, &normal) {
            normal = other;
        }
    }
    let normal = normal.normalize();
    Some(PlaneFit {
        normal: [normal[0], normal[1], normal[2]],
        eigenvalues: values,
    })
}

pub fn estimate_geometry(
    cloud: &PointCloud,
    tree: &Octree,
    k: usize,
    mode: CurvatureMode,
) -> Result<LocalGeometry, GeometryError> {
    if k < 3 {
        return Err(GeometryError::NeighborhoodTooSmall(k));
    }
    if tree.len() != cloud.len() {
        return Err(GeometryError::TreeMismatch {
            tree: tree.len(),
            cloud: cloud.len(),
        });
    }
    let k_used = k.min(cloud.len());
    let points = cloud.points();

    let per_point: Vec<(Point3, f64)> = (0..points.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(k_used),
            |buf, i| {
                let nn = tree.knn(&points[i], k_used).expect("k_used <= len");
                buf.clear();
                buf.extend(nn.indices().map(|j| points[j]));
                let Some(fit) = fit_plane(buf) else {
                    return ([0.0; 3], f64::INFINITY);
                };
                let sv = fit.surface_variation();
                let curvature = match mode {
                    CurvatureMode::SurfaceVariation => sv,
                    CurvatureMode::RadiusNormalized => {
                        let others: Vec<f64> = nn
                            .iter()
                            .filter(|n| n.index != i)
                            .map(|n| n.dist2.sqrt())
                            .collect();
                        let mean = others.iter().sum::<f64>() / others.len().max(1) as f64;
                        if mean > 0.0 {
                            sv / mean
                        } else {
                            f64::INFINITY
                        }
                    }
                };
                (fit.normal, curvature)
            },
        )
        .collect();

    let (normals, curvatures) = per_point.into_iter().unzip();
    Ok(LocalGeometry {
        normals,
        curvatures,
        curvature_mode: mode,
        k_used,
    })
}

/// Angle between two normals in degrees, folded into `[0, 90]` because
/// estimated normals have no consistent orientation.
pub fn normal_angle(n1: &Point3, n2: &Point3) -> Result<f64, GeometryError> {
    let a = Vector3::new(n1[0], n1[1], n1[2]);
    let b = Vector3::new(n2[0], n2[1], n2[2]);
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    let phi = cos.acos().to_degrees();
    Ok(phi.min(180.0 - phi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(points: Vec<Point3>, k: usize, mode: CurvatureMode) -> LocalGeometry {
        let cloud = PointCloud::new(points, None, "t").unwrap();
        let tree = Octree::build(cloud.points(), 8).unwrap();
        estimate_geometry(&cloud, &tree, k, mode).unwrap()
    }

    fn grid_plane(n: usize) -> Vec<Point3> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // slight stagger keeps neighborhoods from being perfectly symmetric
                v.push([i as f64 * 0.1 + (j % 3) as f64 * 0.01, j as f64 * 0.1, 0.0]);
            }
        }
        v
    }

    #[test]
    fn plane_has_vertical_normals_and_zero_curvature() {
        let g = geometry(grid_plane(12), 16, CurvatureMode::SurfaceVariation);
        for (n, c) in g.normals.iter().zip(&g.curvatures) {
            assert!((n[2].abs() - 1.0).abs() < 1e-9, "{n:?}");
            assert!(c.abs() < 1e-12);
        }
        assert_eq!(g.k_used, 16);
    }

    #[test]
    fn identical_neighbors_are_degenerate() {
        let mut pts = vec![[1.0, 1.0, 1.0]; 20];
        pts.push([5.0, 5.0, 5.0]);
        let g = geometry(pts, 8, CurvatureMode::RadiusNormalized);
        assert_eq!(g.normals[0], [0.0; 3]);
        assert!(g.curvatures[0].is_infinite());
        assert!(g.is_degenerate(0));
    }

    #[test]
    fn k_below_three_rejected() {
        let cloud = PointCloud::new(grid_plane(3), None, "t").unwrap();
        let tree = Octree::build(cloud.points(), 8).unwrap();
        assert_eq!(
            estimate_geometry(&cloud, &tree, 2, CurvatureMode::SurfaceVariation).unwrap_err(),
            GeometryError::NeighborhoodTooSmall(2)
        );
    }

    #[test]
    fn normals_are_unit_or_zero() {
        let g = geometry(grid_plane(6), 5, CurvatureMode::SurfaceVariation);
        for n in &g.normals {
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-6 || norm == 0.0);
        }
    }

    #[test]
    fn normal_angle_cases() {
        assert_eq!(normal_angle(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(normal_angle(&[0.0, 0.0, 1.0], &[0.0, 0.0, -1.0]).unwrap(), 0.0);
        assert!((normal_angle(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(normal_angle(&[0.0; 3], &[1.0, 0.0, 0.0]), Err(GeometryError::ZeroVector));
        let a = normal_angle(&[0.0, 0.6, 0.8], &[0.0, -0.8, 0.6]).unwrap();
        assert!((a - 90.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_pick_a_deterministic_normal() {
        let pts: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let a = fit_plane(&pts).unwrap();
        let b = fit_plane(&pts).unwrap();
        assert_eq!(a, b);
        assert!(a.normal[0].abs() < 1e-9);
        assert!(a.surface_variation().abs() < 1e-12);
    }
}
