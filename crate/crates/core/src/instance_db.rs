//! Database of object cut-outs and the candidate-box matching rule.
//!
//! A cut-out matches a candidate box when some isotropic scale factor `f` in
//! `[0.5, 1.5]` makes its box fit inside the candidate while covering at
//! least 80% of the candidate's area.

use std::path::Path;

use image::RgbImage;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_label_png, read_rgb, write_label_png, write_rgb_png, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{shape_params, BBox, ShapeParams};
use crate::raster::{crop_rgb, LabelMap, Mask};

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 1.5;
pub const MIN_CANDIDATE_COVERAGE: f64 = 0.8;
pub const DEFAULT_MIN_PIXELS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCutout {
    pub class_id: ClassId,
    /// Source pixels over the tight box of the mask.
    pub pixels: RgbImage,
    pub mask: Mask,
    pub source_image_id: String,
    pub original_shape: ShapeParams,
}

impl InstanceCutout {
    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }

    /// Cuts the object under `mask` out of `pixels`; `None` if the mask is empty.
    pub fn extract(
        class_id: ClassId,
        pixels: &RgbImage,
        mask: &Mask,
        source_image_id: &str,
    ) -> Option<Self> {
        let span = mask.tight_span()?;
        let bbox = span.to_box()?;
        Some(InstanceCutout {
            class_id,
            pixels: crop_rgb(pixels, &span),
            mask: mask.crop(&span),
            source_image_id: source_image_id.to_string(),
            original_shape: shape_params(&bbox, pixels.width(), pixels.height()).ok()?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct InstanceDatabase {
    cutouts: Vec<InstanceCutout>,
    /// `by_class[c]` lists cut-out indices of class `c` (index 0 unused).
    by_class: Vec<Vec<usize>>,
}

/// A matched cut-out and the scale factor to apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub cutout: usize,
    pub scale: f64,
}

/// Closed interval of admissible scale factors for a cut-out of size
/// `w × h` in `candidate`, or `None` if empty.
pub fn admissible_scales(w: f64, h: f64, candidate: &BBox) -> Option<(f64, f64)> {
    let (cw, ch) = (candidate.width(), candidate.height());
    let need = MIN_CANDIDATE_COVERAGE * cw * ch;
    let mut lo = MIN_SCALE.max((need / (w * h)).sqrt());
    while lo * w * (lo * h) < need {
        lo = lo.next_up();
    }
    let mut hi = MAX_SCALE.min(cw / w).min(ch / h);
    while hi * w > cw || hi * h > ch {
        hi = hi.next_down();
    }
    (lo <= hi).then_some((lo, hi))
}

/// Checks the three matching constraints for a concrete factor.
pub fn satisfies_match(w: f64, h: f64, f: f64, candidate: &BBox) -> bool {
    (MIN_SCALE..=MAX_SCALE).contains(&f)
        && f * w <= candidate.width()
        && f * h <= candidate.height()
        && f * w * (f * h) >= MIN_CANDIDATE_COVERAGE * candidate.area()
}

impl InstanceDatabase {
    /// One cut-out per non-crowd masked object with at least `min_pixels`
    /// foreground pixels.
    pub fn build(dataset: &Dataset, min_pixels: u64) -> Result<Self> {
        let any_mask = dataset
            .images
            .iter()
            .flat_map(|im| &im.objects)
            .any(|o| o.mask.is_some());
        if !any_mask {
            return Err(Error::MissingMasks);
        }
        let mut db = InstanceDatabase {
            cutouts: Vec::new(),
            by_class: vec![Vec::new(); dataset.num_classes() + 1],
        };
        for im in &dataset.images {
            for o in &im.objects {
                if o.is_crowd {
                    continue;
                }
                let Some(mask) = &o.mask else { continue };
                if mask.area() < min_pixels {
                    continue;
                }
                if let Some(c) = InstanceCutout::extract(o.class_id, &im.pixels, mask, &im.image_id) {
                    db.push(c);
                }
            }
        }
        Ok(db)
    }

    pub fn from_cutouts(num_classes: usize, cutouts: impl IntoIterator<Item = InstanceCutout>) -> Self {
        let mut db = InstanceDatabase {
            cutouts: Vec::new(),
            by_class: vec![Vec::new(); num_classes + 1],
        };
        for c in cutouts {
            db.push(c);
        }
        db
    }

    fn push(&mut self, c: InstanceCutout) {
        let k = c.class_id as usize;
        if self.by_class.len() <= k {
            self.by_class.resize(k + 1, Vec::new());
        }
        self.by_class[k].push(self.cutouts.len());
        self.cutouts.push(c);
    }

    pub fn len(&self) -> usize {
        self.cutouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cutouts.is_empty()
    }

    pub fn get(&self, index: usize) -> &InstanceCutout {
        &self.cutouts[index]
    }

    pub fn cutouts(&self) -> &[InstanceCutout] {
        &self.cutouts
    }

    pub fn bucket(&self, class_id: ClassId) -> &[usize] {
        self.by_class
            .get(class_id as usize)
            .map_or(&[], Vec::as_slice)
    }

    /// Classes with at least one cut-out, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        self.by_class
            .iter()
            .enumerate()
            .filter(|(c, b)| *c > 0 && !b.is_empty())
            .map(|(c, _)| c as ClassId)
            .collect()
    }

    /// Picks a uniformly random admissible cut-out of `class_id` for
    /// `candidate` and a factor uniform over its admissible interval.
    pub fn match_candidate<R: Rng + ?Sized>(
        &self,
        candidate: &BBox,
        class_id: ClassId,
        rng: &mut R,
    ) -> Result<Match> {
        let admissible: Vec<(usize, (f64, f64))> = self
            .bucket(class_id)
            .iter()
            .filter_map(|&i| {
                let c = &self.cutouts[i];
                admissible_scales(c.width() as f64, c.height() as f64, candidate).map(|r| (i, r))
            })
            .collect();
        let &(cutout, (lo, hi)) = admissible.choose(rng).ok_or(Error::NoMatch)?;
        let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        Ok(Match { cutout, scale })
    }

    /// Hash of everything the database is built from.
    pub fn content_hash(dataset: &Dataset, min_pixels: u64) -> String {
        let mut h = Sha256::new();
        h.update(min_pixels.to_le_bytes());
        for im in &dataset.images {
            h.update(im.image_id.as_bytes());
            h.update([0]);
            h.update(im.pixels.as_raw());
            for o in &im.objects {
                h.update(o.class_id.to_le_bytes());
                h.update([o.is_crowd as u8]);
                if let Some(m) = &o.mask {
                    let bytes: Vec<u8> = m.as_slice().iter().map(|&v| v as u8).collect();
                    h.update(&bytes);
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes one PNG pair per cut-out plus `index.json`.
    pub fn save_cache(&self, dir: &Path, dataset_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.cutouts.len());
        for (i, c) in self.cutouts.iter().enumerate() {
            let rgb = format!("{i:06}_rgb.png");
            let mask = format!("{i:06}_mask.png");
            write_rgb_png(&c.pixels, &dir.join(&rgb))?;
            let labels: Vec<u8> = c.mask.as_slice().iter().map(|&v| v as u8).collect();
            let map = LabelMap::from_vec(c.width(), c.height(), labels).expect("mask dims");
            write_label_png(&map, &dir.join(&mask))?;
            entries.push(CacheEntry {
                class_id: c.class_id,
                source_image_id: c.source_image_id.clone(),
                pixels: rgb,
                mask,
                original_shape: c.original_shape,
            });
        }
        let index = CacheIndex {
            dataset_hash: dataset_hash.to_string(),
            num_classes: self.by_class.len().saturating_sub(1),
            entries,
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("serializable") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a cache written by [`save_cache`](Self::save_cache); `Ok(None)`
    /// when it is missing or was built from different data.
    pub fn load_cache(dir: &Path, dataset_hash: &str) -> Result<Option<Self>> {
        let path = dir.join("index.json");
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CacheIndex = serde_json::from_str(&text)
            .map_err(|e| crate::dataset::json_error(&path, &text, e))?;
        if index.dataset_hash != dataset_hash {
            return Ok(None);
        }
        let mut cutouts = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let pixels = read_rgb(&dir.join(&e.pixels))?;
            let labels = read_label_png(&dir.join(&e.mask))?;
            let mask = Mask::from_vec(
                labels.width(),
                labels.height(),
                labels.as_slice().iter().map(|&v| v != 0).collect(),
            )
            .expect("label dims");
            if mask.dims() != pixels.dimensions() {
                return Err(Error::Integrity(format!("cache entry {} size mismatch", e.pixels)));
            }
            cutouts.push(InstanceCutout {
                class_id: e.class_id,
                pixels,
                mask,
                source_image_id: e.source_image_id,
                original_shape: e.original_shape,
            });
        }
        Ok(Some(Self::from_cutouts(index.num_classes, cutouts)))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    dataset_hash: String,
    num_classes: usize,
    entries: Vec<CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    class_id: ClassId,
    source_image_id: String,
    pixels: String,
    mask: String,
    original_shape: ShapeParams,
}
