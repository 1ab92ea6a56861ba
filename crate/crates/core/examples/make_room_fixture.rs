//! Writes the synthetic room as a binary PLY plus weak labels and ground
//! truth: `cargo run --example make_room_fixture -- <out-dir> [seed]`.

use std::io::Write;
use std::path::PathBuf;

use pseudolabel::cloud::{write_cloud, write_labeled_cloud, CloudFormat, LabelOutput};
use pseudolabel::synthetic::{room_weak_labels, synthetic_room, ROOM_CLASSES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixtures/room".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    std::fs::create_dir_all(&dir)?;

    let scene = synthetic_room(seed);
    write_cloud(&scene.cloud, &dir.join("room.ply"), CloudFormat::PlyBinaryLe)?;
    write_labeled_cloud(&scene.cloud, &scene.ground_truth(), &dir.join("ground_truth.txt"), LabelOutput::LabelsText)?;

    let weak = room_weak_labels(&scene, seed);
    let mut f = std::fs::File::create(dir.join("weak_labels.txt"))?;
    writeln!(f, "# {}", ROOM_CLASSES.join(" "))?;
    writeln!(f, "classes {}", weak.num_classes())?;
    for (i, c) in weak.entries() {
        writeln!(f, "{i} {c}")?;
    }
    println!("{} points, {} weak labels -> {}", scene.cloud.len(), weak.len(), dir.display());
    Ok(())
}
