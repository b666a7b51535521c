//! Synthetic scenes shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use ctxaug::dataset::{AnnotatedImage, CategoryTable, Dataset, ObjectAnnotation};
use ctxaug::raster::Mask;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SKY_CLASS: u32 = 1;
pub const GROUND_CLASS: u32 = 2;

pub fn categories() -> CategoryTable {
    CategoryTable::from_source([(1, "bird".to_string()), (2, "cow".to_string())])
}

pub fn ellipse(w: u32, h: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

/// A `w × h` scene: sky above, grass below; birds fly in the sky and cows
/// stand on the grass. Objects sit in separate horizontal slots so their
/// masks never overlap.
pub fn scene(id: &str, w: u32, h: u32, seed: u64) -> AnnotatedImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let horizon = h / 2;
    let mut pixels = RgbImage::from_fn(w, h, |_, y| {
        if y < horizon {
            Rgb([110, 160, 230])
        } else {
            Rgb([60, 150, 50])
        }
    });
    for p in pixels.pixels_mut() {
        for c in 0..3 {
            p.0[c] = p.0[c].saturating_add(r.random_range(0..20));
        }
    }
    let slots = 3usize;
    let slot_w = w as f64 / slots as f64;
    let mut objects = Vec::new();
    for s in 0..slots {
        if r.random_range(0.0..1.0) < 0.35 {
            continue;
        }
        let sky = r.random_bool(0.5);
        let rx = r.random_range(0.18..0.4) * slot_w;
        let ry = rx * r.random_range(0.6..1.2);
        let cx = slot_w * (s as f64 + 0.5) + r.random_range(-0.05..0.05) * slot_w;
        let band = horizon as f64;
        let cy = if sky {
            r.random_range(ry + 1.0..(band - ry - 1.0).max(ry + 1.5))
        } else {
            band + r.random_range(ry + 1.0..(band - ry - 1.0).max(ry + 1.5))
        };
        let mask = ellipse(w, h, cx, cy, rx, ry);
        let color = if sky { Rgb([240, 240, 240]) } else { Rgb([90, 60, 30]) };
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    pixels.put_pixel(x, y, color);
                }
            }
        }
        let class = if sky { SKY_CLASS } else { GROUND_CLASS };
        if let Some(o) = ObjectAnnotation::from_mask(class, mask) {
            objects.push(o);
        }
    }
    AnnotatedImage {
        image_id: id.to_string(),
        pixels,
        objects,
        semantic_map: None,
        source: PathBuf::new(),
    }
}

/// `n` scenes with numeric ids `1..=n`.
pub fn scenes(n: usize, w: u32, h: u32, seed: u64) -> Dataset {
    Dataset {
        images: (0..n)
            .map(|i| scene(&(i + 1).to_string(), w, h, seed.wrapping_mul(1_000_003) + i as u64))
            .collect(),
        categories: categories(),
    }
}

/// Same scenes with the masks dropped: a box-only dataset.
pub fn boxes_only(ds: &Dataset) -> Dataset {
    let mut ds = ds.clone();
    for im in &mut ds.images {
        for o in &mut im.objects {
            o.mask = None;
        }
    }
    ds
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
