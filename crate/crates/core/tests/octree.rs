use proptest::prelude::*;

use pseudolabel::cloud::Point3;
use pseudolabel::octree::{brute_force_knn, dist2, Octree};

fn cloud_strategy() -> impl Strategy<Value = Vec<Point3>> {
    let coord = prop_oneof![-5.0..5.0f64, (-3i32..3).prop_map(f64::from)];
    prop::collection::vec([coord.clone(), coord.clone(), coord], 1..400)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn knn_matches_linear_scan(
        points in cloud_strategy(),
        cap in 1usize..40,
        k in 1usize..30,
        q in [-6.0..6.0f64, -6.0..6.0f64, -6.0..6.0f64],
    ) {
        let tree = Octree::build(&points, cap).unwrap();
        prop_assert!(tree.check_invariants());
        let k = k.min(points.len());
        let got = tree.knn(&q, k).unwrap();
        let want = brute_force_knn(&points, &q, k);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn queries_at_cloud_points_find_themselves(points in cloud_strategy(), cap in 1usize..40) {
        let tree = Octree::build(&points, cap).unwrap();
        for (i, p) in points.iter().enumerate().take(50) {
            let nn = tree.knn(p, 1).unwrap();
            prop_assert_eq!(nn[0].dist2, 0.0);
            prop_assert!(points[nn[0].index] == points[i]);
        }
    }

    #[test]
    fn radius_search_is_exact(points in cloud_strategy(), r in 0.01..4.0f64) {
        let tree = Octree::build(&points, 8).unwrap();
        let q = points[0];
        let mut got: Vec<usize> = tree.radius_search(&q, r).unwrap().indices().collect();
        got.sort_unstable();
        let want: Vec<usize> = (0..points.len()).filter(|&i| dist2(&points[i], &q) <= r * r).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn leaves_partition_the_points(points in cloud_strategy(), cap in 1usize..40) {
        let tree = Octree::build(&points, cap).unwrap();
        let mut seen: Vec<usize> = tree.leaves().iter().flat_map(|l| l.indices.iter().map(|&i| i as usize)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..points.len()).collect::<Vec<_>>());
    }
}

#[test]
fn rejects_bad_input() {
    assert!(Octree::build(&[], 8).is_err());
    assert!(Octree::build(&[[0.0; 3]], 0).is_err());
    let tree = Octree::build(&[[0.0; 3], [1.0; 3]], 8).unwrap();
    assert!(tree.knn(&[0.0; 3], 0).is_err());
    assert!(tree.knn(&[0.0; 3], 3).is_err());
}

#[test]
fn duplicate_points_tie_by_index() {
    let points = vec![[1.0, 1.0, 1.0]; 100];
    let tree = Octree::build(&points, 4).unwrap();
    let nn = tree.knn(&[1.0, 1.0, 1.0], 5).unwrap();
    assert_eq!(nn.indices().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
}
