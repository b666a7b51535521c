use std::path::Path;
use std::process::{Command, Output};

use ctxaug::dataset::{write_dataset, AnnotatedImage, CategoryTable, Dataset, Format, ObjectAnnotation};
use ctxaug::raster::Mask;
use image::{Rgb, RgbImage};

fn ctxaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxaug"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(dir: &Path, n: usize) {
    let images = (0..n)
        .map(|i| {
            let pixels = RgbImage::from_fn(64, 48, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, (i * 20) as u8]));
            let objects = (0..2)
                .map(|k| {
                    let x0 = 4 + 30 * k + i as u32 % 5;
                    let mask = Mask::from_fn(64, 48, |x, y| x >= x0 && x < x0 + 18 && (10..30).contains(&y));
                    ObjectAnnotation::from_mask(k + 1, mask).unwrap()
                })
                .collect();
            AnnotatedImage {
                image_id: (i + 1).to_string(),
                pixels,
                objects,
                semantic_map: None,
                source: Default::default(),
            }
        })
        .collect();
    let ds = Dataset {
        images,
        categories: CategoryTable::from_source([(1, "cat".to_string()), (2, "dog".to_string())]),
    };
    write_dataset(&ds, Format::Coco, dir, Default::default()).unwrap();
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 4);
    let o = ctxaug(&["validate", "--input", path(dir.path()), "--format-in", "coco"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim(), "ok: 4 images, 8 objects, 2 classes");
}

#[test]
fn augment_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let out = dir.path().join("out");
    fixture(&input, 8);
    let o = ctxaug(&[
        "augment",
        "--input",
        path(&input),
        "--output",
        path(&out),
        "--format-in",
        "coco",
        "--format-out",
        "voc",
        "--mode",
        "random",
        "--prob",
        "1",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("Annotations").is_dir());
    let o = ctxaug(&["stats", "--input", path(&out), "--format-in", "voc", "--json"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["synthetic"], v["manifest_pastes"]);
    assert!(v["synthetic"].as_u64().unwrap() > 0);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fixture(&input, 6);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "mode = \"context\"\nscorer = \"oracle\"\npaste_probability = 1.0\nformat_in = \"coco\"\n").unwrap();
    let out = dir.path().join("out");
    let dumps = dir.path().join("dumps");
    let o = ctxaug(&[
        "augment",
        "--input",
        path(&input),
        "--output",
        path(&out),
        "--config",
        path(&cfg),
        "--max-paste",
        "1",
        "--dump-candidates",
        path(&dumps),
    ]);
    assert!(o.status.success(), "{o:?}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for rec in manifest["images"].as_array().unwrap() {
        assert!(rec["pastes"].as_array().unwrap().len() <= 1);
    }
    assert_eq!(std::fs::read_dir(&dumps).unwrap().count(), 6);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "pastes_per_image = 4\n").unwrap();
    let o = ctxaug(&[
        "augment",
        "--input",
        path(dir.path()),
        "--output",
        path(&dir.path().join("out")),
        "--config",
        path(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    let o = ctxaug(&["augment", "--input", "x", "--output", "y", "--format-in", "coco", "--prob", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn unreachable_scorer_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2);
    let out = dir.path().join("out");
    let o = ctxaug(&[
        "augment",
        "--input",
        path(dir.path()),
        "--output",
        path(&out),
        "--format-in",
        "coco",
        "--scorer",
        "tcp:127.0.0.1:1",
    ]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(!out.exists());
}

#[test]
fn broken_annotations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(
        dir.path().join("annotations.json"),
        r#"{"images": [], "categories": [{"id": 1, "name": "cat"}],
            "annotations": [{"id": 3, "image_id": 5, "category_id": 1, "bbox": [0, 0, 1, 1]}]}"#,
    )
    .unwrap();
    let o = ctxaug(&["validate", "--input", path(dir.path()), "--format-in", "coco"]);
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains('3'));
}

#[test]
fn stats_on_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(
        dir.path().join("annotations.json"),
        r#"{"images": [], "categories": [], "annotations": []}"#,
    )
    .unwrap();
    let o = ctxaug(&["stats", "--input", path(dir.path()), "--format-in", "coco"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("images: 0"), "{text}");
    assert!(text.contains("instances: 0 (0 synthetic)"), "{text}");
}

#[test]
fn export_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fixture(&input, 6);
    let ctx = dir.path().join("ctx");
    let o = ctxaug(&[
        "export-context",
        "--input",
        path(&input),
        "--output",
        path(&ctx),
        "--format-in",
        "coco",
        "--regime",
        "normal-data",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(ctx.join("split_a/labels.csv").is_file());
    assert!(ctx.join("split_b/labels.csv").is_file());

    let prev = dir.path().join("preview");
    let o = ctxaug(&[
        "preview",
        "--input",
        path(&input),
        "--image-id",
        "2",
        "--output",
        path(&prev),
        "--format-in",
        "coco",
        "--scorer",
        "oracle",
        "--prob",
        "1",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(prev.join("2_side_by_side.png").is_file());
    assert!(prev.join("2_candidates.png").is_file());
    assert!(prev.join("2_candidates.json").is_file());
}
