mod common;

use std::path::Path;
use std::sync::Arc;

use ctxaug::dataset::{load_dir, write_dataset, Dataset, Format, Manifest, MANIFEST_FILE};
use ctxaug::pipeline::{
    augment_dataset, augment_dir, candidate_color, export_context_set, preview, stats, AugmentConfig, Engine,
    Mode, Regime, Schedule,
};
use ctxaug::context::ContextualImage;
use ctxaug::geometry::iou;
use ctxaug::placement::{CandidateDump, RandomSelector, DEFAULT_CANDIDATES};
use ctxaug::scorer::{OracleScorer, ScoreVector, Scorer};
use ctxaug::Error;

fn base_config() -> AugmentConfig {
    AugmentConfig {
        mode: Mode::Context,
        scorer: Some("oracle".into()),
        format_in: Some(Format::Coco),
        seed: 17,
        workers: 2,
        ..AugmentConfig::default()
    }
}

fn on_disk(ds: &Dataset, dir: &Path) {
    write_dataset(ds, Format::Coco, dir, Manifest::default()).unwrap();
}

fn without_manifest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    common::tree(dir)
        .into_iter()
        .filter(|(p, _)| p != MANIFEST_FILE)
        .collect()
}

#[test]
fn zero_probability_copies_the_input_exactly() {
    let ds = common::scenes(12, 64, 48, 1);
    let dir = tempfile::tempdir().unwrap();
    on_disk(&ds, &dir.path().join("in"));
    let config = AugmentConfig {
        paste_probability: 0.0,
        ..base_config()
    };
    let m = augment_dir(&config, &dir.path().join("in"), &dir.path().join("out"), None).unwrap();
    assert_eq!(m.paste_count(), 0);
    assert!(m.images.iter().all(|r| !r.augmented && r.note.is_none()));
    assert_eq!(without_manifest(&dir.path().join("in")), without_manifest(&dir.path().join("out")));
}

#[test]
fn certain_paste_with_oracle_places_one_or_two_objects() {
    let ds = common::scenes(20, 96, 64, 2);
    let config = AugmentConfig {
        paste_probability: 1.0,
        ..base_config()
    };
    let out = augment_dataset(&config, &ds).unwrap();
    let mut augmented = 0;
    for r in &out.manifest.images {
        assert!(r.pastes.len() <= config.max_placements);
        if r.augmented {
            augmented += 1;
            assert!(!r.pastes.is_empty());
            for p in &r.pastes {
                assert!(p.score.unwrap() > config.threshold);
                assert!(iou(&p.pasted_box, &p.placement_box) > 0.0);
            }
        } else {
            assert_eq!(r.note.as_deref(), Some("no matched candidate"));
        }
    }
    assert!(augmented >= 10, "{augmented} of 20 augmented");
    let ids: Vec<&str> = out.dataset.images.iter().map(|i| i.image_id.as_str()).collect();
    let mut expect = Vec::new();
    for r in &out.manifest.images {
        expect.push(r.image_id.clone());
        if r.augmented {
            expect.push(format!("{}_aug", r.image_id));
        }
    }
    assert_eq!(ids, expect);
    out.dataset.validate().unwrap();
    let synthetic: usize = out
        .dataset
        .images
        .iter()
        .flat_map(|i| &i.objects)
        .filter(|o| o.is_synthetic)
        .count();
    assert_eq!(synthetic, out.manifest.paste_count());
}

#[test]
fn random_mode_equals_context_engine_with_random_selector() {
    let ds = common::scenes(15, 96, 64, 3);
    let random = AugmentConfig {
        mode: Mode::Random,
        paste_probability: 1.0,
        scorer: None,
        ..base_config()
    };
    let direct = augment_dataset(&random, &ds).unwrap();
    let context = AugmentConfig {
        paste_probability: 1.0,
        ..base_config()
    };
    let scorer: Arc<dyn Scorer> = Arc::new(OracleScorer::new(&ds));
    let engine = Engine::prepare(context.clone(), &ds, Some(scorer)).unwrap();
    let classes = engine.database().unwrap().classes();
    let shim = RandomSelector {
        classes,
        count: context.max_placements,
        proposals: DEFAULT_CANDIDATES,
        neighbors: true,
    };
    let shimmed = engine.with_selector(Box::new(shim)).run(&ds).unwrap();
    assert_eq!(direct.dataset, shimmed.dataset);
    assert_eq!(direct.manifest.images, shimmed.manifest.images);
    assert!(direct.manifest.paste_count() > 0);
}

#[test]
fn linear_decay_schedule_augments_about_a_quarter() {
    let ds = common::scenes(1000, 24, 24, 4);
    let config = AugmentConfig {
        mode: Mode::Random,
        scorer: None,
        schedule: Schedule::LinearDecay,
        paste_probability: 0.5,
        workers: 4,
        ..base_config()
    };
    let out = augment_dataset(&config, &ds).unwrap();
    let decided = out
        .manifest
        .images
        .iter()
        .filter(|r| r.augmented || r.note.is_some())
        .count();
    assert!((205..=295).contains(&decided), "{decided}");
    let first = &out.manifest.images[0];
    let last = &out.manifest.images[999];
    assert!((first.probability - 0.5).abs() < 1e-12);
    assert!((last.probability - 0.0005).abs() < 1e-12);
}

fn one_class_dataset(objects_per_image: &[usize]) -> Dataset {
    let mut ds = Dataset {
        images: Vec::new(),
        categories: ctxaug::dataset::CategoryTable::from_source([(1, "cat".to_string())]),
    };
    for (i, &k) in objects_per_image.iter().enumerate() {
        let mut im = common::scene(&(i + 1).to_string(), 90, 60, 100 + i as u64);
        im.objects.clear();
        for s in 0..k {
            let cx = 15.0 + 30.0 * s as f64;
            let mask = common::ellipse(90, 60, cx, 30.0, 10.0, 8.0);
            im.objects.push(ctxaug::dataset::ObjectAnnotation::from_mask(1, mask).unwrap());
        }
        ds.images.push(im);
    }
    ds
}

fn csv_rows(dir: &Path) -> Vec<(String, u32)> {
    let text = std::fs::read_to_string(dir.join("labels.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,label"));
    lines
        .map(|l| {
            let (p, c) = l.split_once(',').unwrap();
            (p.to_string(), c.parse().unwrap())
        })
        .collect()
}

#[test]
fn normal_data_export_balances_positives() {
    let ds = one_class_dataset(&[3, 1, 2, 0, 3, 1]);
    assert_eq!(ds.box_count(), 10);
    let dir = tempfile::tempdir().unwrap();
    let config = AugmentConfig {
        regime: Regime::NormalData,
        ..base_config()
    };
    let out = export_context_set(&config, &ds, &dir.path().join("ctx")).unwrap();
    assert_eq!(out.len(), 2);
    for s in &out {
        assert_eq!(s.positives, 5);
        assert_eq!(s.backgrounds, 15);
        let rows = csv_rows(&s.dir);
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.iter().filter(|r| r.1 == 1).count(), 5);
        let pngs = std::fs::read_dir(s.dir.join("images")).unwrap().count();
        assert_eq!(pngs, rows.len());
        for (p, _) in &rows {
            assert!(s.dir.join(p).is_file());
        }
    }
    let again = tempfile::tempdir().unwrap();
    export_context_set(&config, &ds, &again.path().join("ctx")).unwrap();
    assert_eq!(common::tree(&dir.path().join("ctx")), common::tree(&again.path().join("ctx")));
}

#[test]
fn small_data_export_uses_every_positive() {
    let ds = one_class_dataset(&[2, 1, 0]);
    let dir = tempfile::tempdir().unwrap();
    let config = AugmentConfig {
        bg_ratio: 2,
        backgrounds_per_empty_image: 4,
        ..base_config()
    };
    let out = export_context_set(&config, &ds, &dir.path().join("ctx")).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].positives, 3);
    assert_eq!(out[0].backgrounds, 6 + 4);
    assert_eq!(csv_rows(&out[0].dir).len(), 13);
}

#[test]
fn stats_count_synthetic_objects_from_provenance() {
    let ds = common::scenes(10, 96, 64, 5);
    let dir = tempfile::tempdir().unwrap();
    on_disk(&ds, &dir.path().join("in"));
    let config = AugmentConfig {
        paste_probability: 1.0,
        format_out: Some(Format::Voc),
        ..base_config()
    };
    let m = augment_dir(&config, &dir.path().join("in"), &dir.path().join("out"), None).unwrap();
    assert!(m.paste_count() > 0);
    let back = load_dir(Format::Voc, &dir.path().join("out")).unwrap();
    let report = stats(&back);
    assert_eq!(report.synthetic, m.paste_count());
    assert_eq!(report.images, ds.images.len() + m.images.iter().filter(|r| r.augmented).count());
    assert_eq!(report.classes.iter().map(|c| c.synthetic).sum::<usize>(), report.synthetic);
    let loaded = Manifest::load(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.images, m.images);
}

#[test]
fn enlarge_mode_replaces_objects_in_place() {
    let ds = common::scenes(12, 96, 64, 6);
    let config = AugmentConfig {
        mode: Mode::Enlarge,
        scorer: None,
        paste_probability: 1.0,
        ..base_config()
    };
    let out = augment_dataset(&config, &ds).unwrap();
    for r in &out.manifest.images {
        let src = ds.image(&r.image_id).unwrap();
        if src.objects.is_empty() {
            assert_eq!(r.note.as_deref(), Some("no enlargeable object"));
            continue;
        }
        assert!(r.augmented);
        assert_eq!(r.pastes.len(), src.objects.len().min(2));
        for p in &r.pastes {
            assert!((1.2..=1.5).contains(&p.scale));
            assert!(p.blend != "motion_blur");
            assert_eq!(p.source_image_id, r.image_id);
        }
    }
}

struct Down;

impl Scorer for Down {
    fn num_classes(&self) -> usize {
        2
    }

    fn score_batch(&self, _: &[ContextualImage]) -> ctxaug::Result<Vec<ScoreVector>> {
        Err(Error::ScorerUnavailable("down".into()))
    }
}

#[test]
fn failures_leave_no_output_behind() {
    let ds = common::scenes(6, 64, 48, 7);
    let dir = tempfile::tempdir().unwrap();
    on_disk(&ds, &dir.path().join("in"));
    let config = AugmentConfig {
        paste_probability: 1.0,
        ..base_config()
    };
    let failing: Arc<dyn Scorer> = Arc::new(Down);
    let out = dir.path().join("out");
    let e = augment_dir(&config, &dir.path().join("in"), &out, Some(failing)).unwrap_err();
    assert!(matches!(e, Error::ScorerUnavailable(_)), "{e:?}");
    assert!(!out.exists());
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["in"]);

    std::fs::create_dir_all(out.join("keep")).unwrap();
    let e = augment_dir(&config, &dir.path().join("in"), &out, None).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert!(out.join("keep").exists());
}

#[test]
fn preview_is_deterministic_and_matches_the_dump() {
    let ds = common::scenes(8, 96, 64, 8);
    let config = AugmentConfig {
        paste_probability: 1.0,
        ..base_config()
    };
    let scorer: Arc<dyn Scorer> = Arc::new(OracleScorer::new(&ds));
    let engine = Engine::prepare(config, &ds, Some(scorer)).unwrap();
    let id = ds
        .images
        .iter()
        .find(|i| !i.objects.is_empty())
        .unwrap()
        .image_id
        .clone();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = preview(&engine, &ds, &id, a.path()).unwrap();
    preview(&engine, &ds, &id, b.path()).unwrap();
    assert_eq!(common::tree(a.path()), common::tree(b.path()));

    let dump = pa.dump.clone().unwrap();
    let json = std::fs::read_to_string(a.path().join(format!("{id}_candidates.json"))).unwrap();
    let from_disk: CandidateDump = serde_json::from_str(&json).unwrap();
    assert_eq!(from_disk.placed, dump.placed);
    assert_eq!(from_disk.candidates.len(), dump.candidates.len());

    let overlay = image::open(&pa.overlay).unwrap().to_rgb8();
    let (w, h) = overlay.dimensions();
    for &i in &dump.placed {
        let s = dump.candidates[i].bbox.covering_span(w, h);
        assert_eq!(*overlay.get_pixel(s.x0, s.y0), candidate_color(&dump, i));
        assert_eq!(*overlay.get_pixel(s.x1 - 1, s.y1 - 1), image::Rgb([0, 255, 0]));
    }
    let side = image::open(&pa.side_by_side).unwrap().to_rgb8();
    assert_eq!(side.dimensions(), (2 * w, h));

    assert!(matches!(preview(&engine, &ds, "nope", a.path()), Err(Error::NotFound(_))));
}

#[test]
fn config_hash_ignores_workers() {
    let a = base_config();
    let b = AugmentConfig { workers: 7, ..base_config() };
    let c = AugmentConfig { seed: 18, ..base_config() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
}
