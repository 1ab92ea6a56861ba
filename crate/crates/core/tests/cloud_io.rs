use proptest::prelude::*;

use pseudolabel::cloud::{
    load_cloud, load_labels_text, parse_weak_labels, write_cloud, write_labeled_cloud, CloudFormat, LabelMatrix,
    LabelOutput, PointCloud,
};

fn cloud_strategy() -> impl Strategy<Value = PointCloud> {
    (1usize..60, any::<bool>()).prop_flat_map(|(n, colored)| {
        (
            prop::collection::vec([-1e3..1e3f64, -1e3..1e3f64, -1e3..1e3f64], n),
            prop::collection::vec([0u8..=255, 0u8..=255, 0u8..=255], n),
        )
            .prop_map(move |(p, c)| {
                let colors = colored.then(|| c.iter().map(|c| c.map(|v| f64::from(v) / 255.0)).collect());
                PointCloud::new(p, colors, "p").unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn formats_round_trip(cloud in cloud_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [
            ("a.ply", CloudFormat::PlyAscii),
            ("b.ply", CloudFormat::PlyBinaryLe),
            ("c.xyzrgb", CloudFormat::XyzRgb),
            ("d.xyz", CloudFormat::Xyz),
        ] {
            let path = dir.path().join(name);
            write_cloud(&cloud, &path, fmt).unwrap();
            prop_assert_eq!(CloudFormat::detect(&path).unwrap(), fmt);
            let back = load_cloud(&path, fmt).unwrap();
            // float32 storage in PLY, six decimals in text
            let close = back.points().iter().zip(cloud.points()).all(|(a, b)| {
                (0..3).all(|k| (a[k] - b[k]).abs() <= 1e-6 + 1.2e-7 * b[k].abs())
            });
            prop_assert!(close && back.len() == cloud.len());
            match fmt {
                CloudFormat::Xyz => prop_assert!(back.colors().is_none()),
                CloudFormat::XyzRgb => {
                    let want = cloud.colors().map(<[_]>::to_vec).unwrap_or_else(|| vec![[0.0; 3]; cloud.len()]);
                    let got = back.colors().unwrap();
                    prop_assert!(got.iter().zip(&want).all(|(a, b)| (0..3).all(|k| (a[k] - b[k]).abs() < 1e-9)));
                }
                _ => {
                    prop_assert_eq!(back.colors().is_some(), cloud.colors().is_some());
                    if let (Some(a), Some(b)) = (back.colors(), cloud.colors()) {
                        prop_assert!(a.iter().zip(b).all(|(x, y)| (0..3).all(|k| (x[k] - y[k]).abs() < 1e-6)));
                    }
                }
            }
        }
    }

    #[test]
    fn labels_round_trip(ids in prop::collection::vec((-1i32..50, -1i32..5), 1..80)) {
        let n = ids.len();
        let cloud = PointCloud::new(vec![[0.0; 3]; n], None, "l").unwrap();
        let labels = LabelMatrix {
            cluster_id: ids.iter().map(|p| p.0).collect(),
            semantic_label: ids.iter().map(|p| if p.0 < 0 { -1 } else { p.1 }).collect(),
            provenance: vec![-1; n],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        write_labeled_cloud(&cloud, &labels, &path, LabelOutput::LabelsText).unwrap();
        prop_assert_eq!(load_labels_text(&path).unwrap(), labels);
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "0 0 0\n1 2\n").unwrap();
    assert!(load_cloud(&bad, CloudFormat::Xyz).is_err());
    std::fs::write(&bad, "0 0 nan\n").unwrap();
    assert!(load_cloud(&bad, CloudFormat::Xyz).is_err());
    assert!(CloudFormat::detect(std::path::Path::new("x.obj")).is_err());
    assert!(parse_weak_labels("classes 2\n0 0\n0 1\n").is_err());
    assert!(parse_weak_labels("classes 2\n0 2\n").is_err());
    assert!(parse_weak_labels("").is_err());
    let ok = parse_weak_labels("# comment\nclasses 3\n4 2\n1 0\n").unwrap();
    assert_eq!(ok.entries(), &[(4, 2), (1, 0)]);
    assert_eq!(ok.num_classes(), 3);
}
