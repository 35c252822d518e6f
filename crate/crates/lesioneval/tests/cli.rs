//! End-to-end tests of the `lesioneval` binary: exit codes, error
//! messages, and a hand-checked lesion PRC fixture.

use std::path::Path;
use std::process::{Command, Output};

use lesioneval::volgrid::{
    write_grid, write_mask, CaseEntry, DatasetManifest, GridGeom, Mask, Split, VoxelGrid,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lesioneval"))
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = bin();
    for a in args {
        cmd.arg(a.as_ref());
    }
    cmd.output().expect("binary runs")
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_64() {
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("prc"));

    let bad = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(bad.status.code(), Some(64));
}

#[test]
fn missing_input_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["label", "--mask"])
        .arg(dir.path().join("nope.rvol"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.rvol"));
}

#[test]
fn loss_iwbce_without_weights_names_the_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let g = GridGeom::new([4, 4, 4], [1.0, 1.0, 1.0]).unwrap();
    let prob = VoxelGrid::new(g, vec![0.25; g.voxel_count()]).unwrap();
    let mut y = vec![0u8; g.voxel_count()];
    y[0] = 1;
    let mask = Mask::new(g, y).unwrap();
    let prob_path = dir.path().join("prob.rvol");
    let mask_path = dir.path().join("mask.rvol");
    write_grid(&prob, &prob_path).unwrap();
    write_mask(&mask, &mask_path).unwrap();

    let out = run(&[
        &"loss",
        &"--prob",
        &prob_path,
        &"--mask",
        &mask_path,
        &"--kind",
        &"iwbce",
        &"--out",
        &dir.path().join("out"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--weights"), "stderr was: {stderr}");

    // the same invocation with --kind bce succeeds
    let ok = run(&[
        &"loss",
        &"--prob",
        &prob_path,
        &"--mask",
        &mask_path,
        &"--kind",
        &"bce",
        &"--out",
        &dir.path().join("out"),
    ]);
    assert_eq!(ok.status.code(), Some(0), "{:?}", ok);
    assert!(dir.path().join("out/loss.json").is_file());
}

/// Fixture: two 2-voxel ground-truth lesions; one predicted component
/// overlapping the first lesion with certainty 0.9 and one false positive
/// with certainty 0.6. Hand-computed curve:
///
/// | threshold | tp | fp | fn | precision | recall |
/// |-----------|----|----|----|-----------|--------|
/// | 0.5       | 1  | 1  | 1  | 0.5       | 0.5    |
/// | 0.6       | 1  | 0  | 1  | 1.0       | 0.5    |
/// | 0.9       | 0  | 0  | 2  | 1.0       | 0.0    |
fn write_prc_fixture(dir: &Path) -> std::path::PathBuf {
    let g = GridGeom::new([12, 6, 6], [1.0, 1.0, 1.0]).unwrap();
    let mut gt = vec![0u8; g.voxel_count()];
    gt[g.index(0, 0, 0)] = 1;
    gt[g.index(1, 0, 0)] = 1;
    gt[g.index(8, 0, 0)] = 1;
    gt[g.index(9, 0, 0)] = 1;
    let mut prob = vec![0.0f32; g.voxel_count()];
    prob[g.index(0, 0, 0)] = 0.9;
    prob[g.index(4, 4, 4)] = 0.6;

    write_mask(&Mask::new(g, gt).unwrap(), &dir.join("gt.rvol")).unwrap();
    let prob = VoxelGrid::new(g, prob).unwrap();
    write_grid(&prob, &dir.join("prob.rvol")).unwrap();
    write_grid(&prob, &dir.join("image.rvol")).unwrap();

    let manifest = DatasetManifest {
        split: Split::Holdout,
        cases: vec![CaseEntry {
            id: "toy".into(),
            image: "image.rvol".into(),
            gt: "gt.rvol".into(),
            prob: Some("prob.rvol".into()),
        }],
    };
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}

#[test]
fn prc_toy_curve_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_prc_fixture(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[&"prc", &"--manifest", &manifest, &"--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);

    let csv = std::fs::read_to_string(out_dir.join("prc.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("threshold,tp,fp,fn,precision,recall"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let expect = [
        [0.5, 1.0, 1.0, 1.0, 0.5, 0.5],
        [0.6, 1.0, 0.0, 1.0, 1.0, 0.5],
        [0.9, 0.0, 0.0, 2.0, 1.0, 0.0],
    ];
    for (row, want) in rows.iter().zip(&expect) {
        // thresholds pass through f32 storage, so compare loosely there
        assert!((row[0] - want[0]).abs() < 1e-6, "row {row:?} vs {want:?}");
        assert_eq!(&row[1..], &want[1..], "row {row:?} vs {want:?}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["cases"], 1);
    assert_eq!(summary["gt_lesions"], 2);
    assert_eq!(summary["base_precision"], 0.5);
    assert_eq!(summary["base_recall"], 0.5);
    assert!(out_dir.join("run_manifest.json").is_file());
}

#[test]
fn label_and_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = GridGeom::new([6, 6, 6], [1.0, 1.0, 1.0]).unwrap();
    let mut y = vec![0u8; g.voxel_count()];
    y[g.index(0, 0, 0)] = 1;
    y[g.index(5, 5, 5)] = 1;
    let mask_path = dir.path().join("mask.rvol");
    write_mask(&Mask::new(g, y).unwrap(), &mask_path).unwrap();

    let label_out = dir.path().join("labels");
    let out = run(&[&"label", &"--mask", &mask_path, &"--out", &label_out]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let components: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(label_out.join("components.json")).unwrap())
            .unwrap();
    assert_eq!(components["component_count"], 2);

    let weights_out = dir.path().join("weights");
    let out = run(&[
        &"weights",
        &"--mask",
        &mask_path,
        &"--beta",
        &"0.5",
        &"--out",
        &weights_out,
    ]);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let weights: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(weights_out.join("weights.json")).unwrap())
            .unwrap();
    // each singleton component carries w = beta * total / size = 0.5 * 216
    assert_eq!(weights["component_weights"][1], 108.0);
    assert_eq!(weights["component_weights"][2], 108.0);
}
