use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use pseudolabel::cloud::{PointCloud, WeakLabels, UNASSIGNED};
use pseudolabel::expansion::{
    attach_cluster_labels, expand_regions, select_seeds, Expansion, ExpansionConfig, SeedOrigin, StopReason,
};
use pseudolabel::geometry::{estimate_geometry, CurvatureMode};
use pseudolabel::octree::Octree;
use pseudolabel::synthetic::{parallel_planes, perpendicular_planes, synthetic_room, Scene};

fn expand(cloud: &PointCloud, weak: &WeakLabels, cfg: &ExpansionConfig) -> Expansion {
    let tree = Octree::build(cloud.points(), 32).unwrap();
    let geom = estimate_geometry(cloud, &tree, 16, CurvatureMode::RadiusNormalized).unwrap();
    let seeds = select_seeds(&geom, weak, cfg).unwrap();
    expand_regions(cloud, &tree, &geom, &seeds, cfg).unwrap()
}

fn clusters_by_instance(scene: &Scene, cluster_id: &[i32]) -> BTreeMap<i32, BTreeSet<i32>> {
    let mut m: BTreeMap<i32, BTreeSet<i32>> = BTreeMap::new();
    for (i, &c) in cluster_id.iter().enumerate() {
        m.entry(c).or_default().insert(scene.instance[i]);
    }
    m
}

#[test]
fn parallel_planes_never_share_a_cluster() {
    let scene = parallel_planes(40, 0.02, 0.1, 0);
    let weak = scene.sample_weak_labels(&[2, 2], 1);
    let e = expand(&scene.cloud, &weak, &ExpansionConfig::default());
    assert!(e.labels.cluster_id.iter().all(|&c| c != UNASSIGNED));
    for (c, planes) in clusters_by_instance(&scene, &e.labels.cluster_id) {
        assert_eq!(planes.len(), 1, "cluster {c} spans both planes");
    }
    let mut sizes: Vec<usize> = e.labels.cluster_id.iter().fold(BTreeMap::new(), |mut m: BTreeMap<i32, usize>, &c| {
        *m.entry(c).or_default() += 1;
        m
    })
    .into_values()
    .collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes[0] + sizes[1], scene.cloud.len());
}

#[test]
fn perpendicular_planes_split_at_the_crease() {
    let scene = perpendicular_planes(20, 60, 0.02, 0);
    let weak = scene.sample_weak_labels(&[1, 1], 0);
    let e = expand(&scene.cloud, &weak, &ExpansionConfig::default());
    let by_cluster = clusters_by_instance(&scene, &e.labels.cluster_id);
    let (a, b) = (weak.entries()[0].0, weak.entries()[1].0);
    assert_ne!(e.labels.cluster_id[a], e.labels.cluster_id[b]);
    assert_eq!(by_cluster[&e.labels.cluster_id[a]].len(), 1);
    assert_eq!(by_cluster[&e.labels.cluster_id[b]].len(), 1);
}

#[test]
fn admissions_are_sound() {
    let scene = synthetic_room(3);
    let weak = scene.sample_weak_labels(&[3, 2, 2, 2, 2], 3);
    let cfg = ExpansionConfig::default();
    let e = expand(&scene.cloud, &weak, &cfg);
    let mut seen = BTreeSet::new();
    for a in &e.admissions {
        assert!(seen.insert(a.point), "point {} admitted twice", a.point);
        assert_eq!(e.labels.provenance[a.point], a.seed as i32);
        let same = e.labels.cluster_id[a.point] == e.labels.cluster_id[a.seed];
        assert_eq!(same, a.joined);
        if a.joined {
            assert!(a.delta_phi_deg.unwrap() <= cfg.gamma_deg);
        } else {
            assert!(a.delta_phi_deg.is_none_or(|phi| phi > cfg.gamma_deg));
        }
    }
    let assigned = e.labels.cluster_id.iter().filter(|&&c| c != UNASSIGNED).count();
    let seeds_opened = assigned - e.admissions.len();
    assert!(seeds_opened > 0);
    assert_eq!(e.stop, StopReason::AllLabeled);
}

#[test]
fn expansion_is_deterministic() {
    let scene = synthetic_room(2);
    let weak = scene.sample_weak_labels(&[4, 4, 4, 4, 4], 2);
    let cfg = ExpansionConfig::default();
    let a = expand(&scene.cloud, &weak, &cfg);
    let b = expand(&scene.cloud, &weak, &cfg);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.admissions, b.admissions);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn true_labels_seed_first_and_are_preserved() {
    let scene = synthetic_room(5);
    let weak = scene.sample_weak_labels(&[4, 3, 3, 3, 3], 5);
    let cfg = ExpansionConfig::default();
    let tree = Octree::build(scene.cloud.points(), 32).unwrap();
    let geom = estimate_geometry(&scene.cloud, &tree, 16, CurvatureMode::RadiusNormalized).unwrap();
    let seeds = select_seeds(&geom, &weak, &cfg).unwrap();
    for (k, &(i, _)) in weak.entries().iter().enumerate() {
        assert_eq!(seeds.seeds[k], (i, SeedOrigin::TrueLabel));
    }
    assert!(seeds.seeds[weak.len()..].iter().all(|s| s.1 == SeedOrigin::LowCurvature));
    let e = expand_regions(&scene.cloud, &tree, &geom, &seeds, &cfg).unwrap();
    let (labels, _) = attach_cluster_labels(&e.labels, &weak);
    for &(i, c) in weak.entries() {
        assert_eq!(labels.semantic_label[i], c as i32);
    }
}

#[test]
fn iteration_budget_stops_early() {
    let scene = parallel_planes(20, 0.02, 0.1, 0);
    let weak = scene.sample_weak_labels(&[1, 1], 0);
    let cfg = ExpansionConfig {
        max_iterations: Some(3),
        ..ExpansionConfig::default()
    };
    let e = expand(&scene.cloud, &weak, &cfg);
    assert_eq!(e.stop, StopReason::MaxIterations);
    assert_eq!(e.iterations, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn clusters_are_seeds_plus_joins(
        gamma in 1.0..30.0f64,
        sigma in 0.05..2.0f64,
        k in 4usize..24,
        seed in 0u64..50,
    ) {
        let scene = perpendicular_planes(8, 20, 0.02, seed);
        let weak = scene.sample_weak_labels(&[1, 1], seed);
        let cfg = ExpansionConfig { gamma_deg: gamma, sigma, k_expand: k, ..ExpansionConfig::default() };
        let e = expand(&scene.cloud, &weak, &cfg);
        prop_assert!(e.labels.validate().is_ok());
        prop_assert_ne!(e.stop, StopReason::MaxIterations);
        let joined = e.admissions.iter().filter(|a| a.joined).count();
        let assigned = e.labels.cluster_id.iter().filter(|&&c| c != UNASSIGNED).count();
        prop_assert_eq!(e.labels.cluster_count() + joined, assigned);
        if e.stop == StopReason::AllLabeled {
            prop_assert_eq!(assigned, scene.cloud.len());
        }
    }
}
