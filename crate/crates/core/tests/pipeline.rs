use std::path::{Path, PathBuf};

use pseudolabel::merge::OracleProvider;
use pseudolabel::pipeline::{run_on, run_pipeline, PipelineConfig, ProviderSpec, Stage};
use pseudolabel::synthetic::{room_weak_labels, synthetic_room};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/room")
}

fn oracle_config() -> PipelineConfig {
    PipelineConfig {
        provider: ProviderSpec::Oracle(fixtures().join("ground_truth.txt")),
        ..PipelineConfig::default()
    }
}

#[test]
fn report_tracks_stages() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_pipeline(
        &oracle_config(),
        &fixtures().join("room.ply"),
        &fixtures().join("weak_labels.txt"),
        dir.path(),
    )
    .unwrap();
    let stages: Vec<Stage> = r.report.stages.iter().map(|s| s.stage).collect();
    assert_eq!(
        stages,
        [Stage::Load, Stage::Octree, Stage::Geometry, Stage::Expand, Stage::Merge, Stage::Boxes, Stage::Write]
    );
    let expand = &r.report.stages[3];
    let merge = &r.report.stages[4];
    assert!(merge.clusters.unwrap() < expand.clusters.unwrap());
    assert!(r.report.final_coverage >= r.report.coverage_after_expansion);
    let mut prev = usize::MAX;
    for round in &r.report.merge_rounds {
        assert!(round.clusters_before <= prev && round.clusters_after <= round.clusters_before);
        prev = round.clusters_after;
    }
    for path in [
        &r.report.outputs.labels,
        &r.report.outputs.colored_ply,
        &r.report.outputs.provenance,
        &r.report.outputs.boxes,
        &r.report.outputs.report,
    ] {
        assert!(path.exists(), "{}", path.display());
    }
    assert_eq!(r.boxes.len(), r.report.boxes);
}

#[test]
fn empty_weak_labels_fail_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let weak = dir.path().join("weak.txt");
    std::fs::write(&weak, "").unwrap();
    let e = run_pipeline(&PipelineConfig::default(), &fixtures().join("room.ply"), &weak, dir.path()).unwrap_err();
    assert_eq!(e.stage, Stage::Load);
    assert!(e.is_input_error());
    assert!(e.to_string().starts_with("load:"));
}

#[test]
fn thread_count_does_not_change_labels() {
    let scene = synthetic_room(4);
    let weak = room_weak_labels(&scene, 4);
    let oracle = OracleProvider {
        ground_truth: scene.semantic.clone(),
        num_classes: scene.num_classes,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        let config = PipelineConfig {
            threads,
            ..PipelineConfig::default()
        };
        let out = dir.path().join(threads.to_string());
        std::fs::create_dir_all(&out).unwrap();
        let r = run_on(&config, &scene.cloud, &weak, &oracle, &out).unwrap();
        outputs.push((r.labels, std::fs::read(out.join("boxes.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}
