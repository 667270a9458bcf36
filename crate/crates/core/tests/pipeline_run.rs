use std::collections::BTreeMap;
use std::path::Path;

use uhfsegkit::ensemble::{ChannelEntry, EnsembleManifest, FoldEntry};
use uhfsegkit::grid::{Geometry, VoxelData, VoxelGrid};
use uhfsegkit::nifti::{load_nifti, save_nifti};
use uhfsegkit::pipeline::{run_pipeline, PipelineManifest, StageStatus, REPORT_FILE};
use uhfsegkit::{Error, LabelMap};

const N: usize = 20;

fn subject_maps() -> (LabelMap, VoxelGrid) {
    let g = Geometry::with_spacing([N; 3], [1.0; 3]).unwrap();
    let mut labels = vec![0u32; g.len()];
    let mut mask = vec![0u8; g.len()];
    for (idx, l) in labels.iter_mut().enumerate() {
        let [i, j, k] = g.coords(idx);
        let depth = [i, j, k, N - 1 - i, N - 1 - j, N - 1 - k].into_iter().min().unwrap();
        let left = i < N / 2;
        mask[idx] = u8::from(depth >= 1);
        *l = match depth {
            0 | 1 => 0,
            2 | 3 => if left { 3 } else { 42 },
            _ if (8..12).contains(&j) && (8..12).contains(&k) && (5..8).contains(&i) => 17,
            _ if (8..12).contains(&j) && (8..12).contains(&k) && (12..15).contains(&i) => 53,
            _ => if left { 2 } else { 41 },
        };
    }
    (
        LabelMap::with_inferred_convention(g.clone(), labels).unwrap(),
        VoxelGrid::new(g, VoxelData::U8(mask)).unwrap(),
    )
}

/// Writes one-hot channel volumes and a manifest for `map` into `dir`,
/// imitating the output of an external model.
fn fake_model_output(map: &LabelMap, ids: &[u32], dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let channels = ids
        .iter()
        .map(|&id| {
            let file = format!("p{id}.nii.gz");
            let v: Vec<f32> = map.labels().iter().map(|&l| if l == id { 1.0 } else { 0.0 }).collect();
            save_nifti(&VoxelGrid::new(map.geometry().clone(), VoxelData::F32(v)).unwrap(), dir.join(&file), true).unwrap();
            ChannelEntry { file: file.into(), label_id: id }
        })
        .collect();
    let m = EnsembleManifest { folds: vec![FoldEntry { channels }] };
    std::fs::write(dir.join("probabilities.json"), serde_json::to_string(&m).unwrap()).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
}

fn fixture(subjects: &[(&str, &str, bool)], group_stats: bool) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let (labels, mask) = subject_maps();
    save_nifti(&labels.to_grid(), root.join("labels.nii.gz"), true).unwrap();
    save_nifti(&mask, root.join("mask.nii.gz"), true).unwrap();
    std::fs::write(root.join("broken.nii.gz"), b"\x1f\x8bnot really gzip").unwrap();

    // The fake segmenter returns the prepared labels; the fake parceller
    // returns a two-region split of whatever cortex it is given.
    let mut prepped = labels.labels().to_vec();
    for (l, m) in prepped.iter_mut().zip(mask.data().to_f64_vec()) {
        if *l == 0 && m > 0.0 {
            *l = 24;
        }
    }
    let prepped = LabelMap::with_inferred_convention(labels.geometry().clone(), prepped).unwrap();
    fake_model_output(&prepped, &[0, 2, 3, 17, 24, 41, 42, 53], &root.join("seg_model"));
    let cortex: Vec<u32> = labels.labels().iter().map(|&l| if l == 3 || l == 42 { 3 } else { 0 }).collect();
    let cortex = LabelMap::with_inferred_convention(labels.geometry().clone(), cortex).unwrap();
    fake_model_output(&cortex, &[0, 3], &root.join("parc_model"));
    std::fs::write(root.join("fake_model.sh"), "#!/bin/sh\nset -e\ntest -f \"$3\"\ncp \"$1\"/* \"$2\"/\n").unwrap();

    let subj: Vec<String> = subjects
        .iter()
        .map(|(id, group, broken)| {
            let labels = if *broken { "broken.nii.gz" } else { "labels.nii.gz" };
            format!(r#"{{"id": "{id}", "group": "{group}", "inputs": {{"aseg": "{labels}", "mask": "mask.nii.gz", "t1": "mask.nii.gz"}}}}"#)
        })
        .collect();
    let stats = if group_stats {
        r#", "group_stats": {"volumetry": "vol", "group_a": "A", "group_b": "B", "alpha": 0.05, "m": 2, "rois": ["Left-Hippocampus", "Right-Hippocampus"]}"#
    } else {
        ""
    };
    let text = format!(
        r#"{{
  "subjects": [{subjects}],
  "output_root": "out",
  "seed": 9,
  "stages": [
    {{"name": "prep", "kind": "prep_labels", "labels": "aseg", "mask": "mask"}},
    {{"name": "synth", "kind": "synth", "labels": "prep"}},
    {{"name": "fine", "kind": "resample", "source": "prep", "spacing": [0.8, 0.8, 0.8]}},
    {{"name": "back", "kind": "resample", "source": "fine", "like": "t1"}},
    {{"name": "roundtrip", "kind": "evaluate", "gt": "prep", "pred": "back", "mode": "whole-brain"}},
    {{"name": "seg", "kind": "segment", "image": "t1", "command": ["sh", "fake_model.sh", "seg_model", "{{out_dir}}", "{{image}}"]}},
    {{"name": "ctx", "kind": "extract_cortex", "labels": "seg"}},
    {{"name": "parc", "kind": "parcellate", "image": "t1", "cortex": "ctx", "command": ["sh", "fake_model.sh", "parc_model", "{{out_dir}}", "{{cortex}}"]}},
    {{"name": "vol", "kind": "volumetry", "labels": "seg"}}
  ]{stats}
}}"#,
        subjects = subj.join(", ")
    );
    std::fs::write(root.join("manifest.json"), text).unwrap();
    Fixture { _tmp: tmp, root }
}

fn hashes(report_path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(report_path)
        .unwrap()
        .lines()
        .flat_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["artifacts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
                .collect::<Vec<_>>()
        })
        .collect()
}

// The scripts are run from the current directory, so every manifest run
// happens with the fixture root as cwd. Tests in this file share one lock.
static CWD: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn run_in(fx: &Fixture, jobs: usize) -> uhfsegkit::pipeline::RunReport {
    let _g = CWD.lock().unwrap_or_else(|e| e.into_inner());
    let prev = std::env::current_dir().unwrap();
    std::env::set_current_dir(&fx.root).unwrap();
    let m = PipelineManifest::read(&fx.root.join("manifest.json")).unwrap();
    let r = run_pipeline(&m, jobs);
    std::env::set_current_dir(prev).unwrap();
    r.unwrap()
}

#[test]
fn failing_subject_is_isolated() {
    let fx = fixture(&[("good", "A", false), ("bad", "B", true)], false);
    let report = run_in(&fx, 2);
    assert_eq!(report.failed_subjects, vec!["bad".to_string()]);
    assert_eq!(report.exit_code(), 2);

    let good: Vec<_> = report.records.iter().filter(|r| r.subject == "good").collect();
    assert_eq!(good.len(), 9);
    assert!(good.iter().all(|r| r.status == StageStatus::Ok), "{good:?}");
    let bad: Vec<_> = report.records.iter().filter(|r| r.subject == "bad").collect();
    assert_eq!(bad[0].status, StageStatus::Failed);
    assert!(bad[0].error.is_some());
    assert!(bad[1..].iter().all(|r| r.status == StageStatus::Skipped));

    let out = fx.root.join("out/good");
    let seg = LabelMap::from_grid_inferred(&load_nifti(out.join("seg.nii.gz")).unwrap()).unwrap();
    let prep = LabelMap::from_grid_inferred(&load_nifti(out.join("prep.nii.gz")).unwrap()).unwrap();
    assert_eq!(seg.labels(), prep.labels());
    let parc = LabelMap::from_grid_inferred(&load_nifti(out.join("parc.nii.gz")).unwrap()).unwrap();
    assert_eq!(parc.present_ids().into_iter().collect::<Vec<_>>(), vec![3]);

    let csv = std::fs::read_to_string(out.join("roundtrip.csv")).unwrap();
    assert!(csv.lines().count() > 5);
    assert_eq!(std::fs::read_to_string(fx.root.join("out").join(REPORT_FILE)).unwrap().lines().count(), 18);
}

#[test]
fn reruns_reproduce_artifacts() {
    let fx = fixture(&[("s1", "A", false), ("s2", "A", false), ("s3", "B", false), ("s4", "B", false)], true);
    let first = run_in(&fx, 1);
    assert_eq!(first.exit_code(), 0, "{:?}", first.records.iter().find(|r| r.error.is_some()));
    let a = hashes(&fx.root.join("out").join(REPORT_FILE));
    let second = run_in(&fx, 4);
    assert_eq!(second.exit_code(), 0);
    let b = hashes(&fx.root.join("out").join(REPORT_FILE));
    assert_eq!(a, b);
    assert!(a.contains_key("group_stats.csv"));
    assert!(a.keys().any(|k| k.starts_with("s3/synth/")));
    let stats = std::fs::read_to_string(fx.root.join("out/group_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 3, "{stats}");
}

#[test]
fn invalid_manifests_are_rejected() {
    let base = Path::new("/tmp");
    let cases = [
        r#"{"subjects": [], "output_root": "o", "stages": [{"name": "v", "kind": "volumetry", "labels": "a"}]}"#,
        r#"{"subjects": [{"id": "s", "inputs": {"a": "a"}}], "output_root": "o", "stages": [{"name": "v", "kind": "volumetry", "labels": "b"}]}"#,
        r#"{"subjects": [{"id": "s", "inputs": {"a": "a"}}], "output_root": "o", "stages": [{"name": "v", "kind": "teleport", "labels": "a"}]}"#,
        r#"{"subjects": [{"id": "s", "inputs": {"a": "a"}}], "output_root": "o", "stages": [
            {"name": "c", "kind": "extract_cortex", "labels": "a"},
            {"name": "p", "kind": "parcellate", "image": "a", "cortex": "c", "command": ["x"]}]}"#,
        r#"{"subjects": [{"id": "s", "inputs": {"a": "a"}}], "output_root": "o", "stages": [
            {"name": "r", "kind": "resample", "source": "a"}]}"#,
        r#"{"subjects": [{"id": "../s", "inputs": {"a": "a"}}], "output_root": "o", "stages": [{"name": "v", "kind": "volumetry", "labels": "a"}]}"#,
    ];
    for text in cases {
        assert!(matches!(PipelineManifest::from_json(text, base), Err(Error::Manifest(_))), "{text}");
    }
}
