//! Annotated image records and their COCO / VOC codecs.

mod coco;
mod png_io;
mod rle;
mod voc;
mod writer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{LabelMap, Mask, VOID_LABEL};

pub use coco::load_coco;
pub use png_io::{read_label_png, read_rgb, write_label_png, write_rgb_png};
pub use rle::{counts_from_string, counts_to_string, decode_rle, encode_rle, RleMask};
pub use voc::{load_voc, VocPaths, VOC_CLASSES};
pub use writer::{write_dataset, ImageRecord, Manifest, PasteRecord, MANIFEST_FILE, PROVENANCE_FILE};

/// Class index in `1..=C`; 0 is reserved for background.
pub type ClassId = u32;

/// Largest supported class count. Label maps are 8-bit and 255 is void.
pub const MAX_CLASSES: usize = 254;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub mask: Option<Mask>,
    pub is_synthetic: bool,
    pub is_crowd: bool,
}

impl ObjectAnnotation {
    pub fn from_box(class_id: ClassId, bbox: BBox) -> Self {
        ObjectAnnotation {
            class_id,
            bbox,
            mask: None,
            is_synthetic: false,
            is_crowd: false,
        }
    }

    /// Object whose box is the tight box of `mask`; `None` for an empty mask.
    pub fn from_mask(class_id: ClassId, mask: Mask) -> Option<Self> {
        let bbox = mask.tight_box()?;
        Some(ObjectAnnotation {
            class_id,
            bbox,
            mask: Some(mask),
            is_synthetic: false,
            is_crowd: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub objects: Vec<ObjectAnnotation>,
    pub semantic_map: Option<LabelMap>,
    pub source: PathBuf,
}

impl AnnotatedImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// True when every object carries an instance mask.
    pub fn has_instance_masks(&self) -> bool {
        self.objects.iter().all(|o| o.mask.is_some())
    }

    /// Checks the record invariants.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for (i, o) in self.objects.iter().enumerate() {
            let ctx = || format!("image {} object {i}", self.image_id);
            if o.class_id == 0 || o.class_id as usize > num_classes {
                return Err(Error::Integrity(format!(
                    "{}: class {} out of range 1..={num_classes}",
                    ctx(),
                    o.class_id
                )));
            }
            if !o.bbox.is_valid() || !o.bbox.fits_in(w, h) {
                return Err(Error::Integrity(format!(
                    "{}: box {:?} outside {w}x{h}",
                    ctx(),
                    o.bbox
                )));
            }
            if let Some(m) = &o.mask {
                if m.dims() != (w, h) {
                    return Err(Error::Integrity(format!("{}: mask size mismatch", ctx())));
                }
                if m.tight_box() != Some(o.bbox) {
                    return Err(Error::Integrity(format!(
                        "{}: box {:?} is not the tight box of its mask",
                        ctx(),
                        o.bbox
                    )));
                }
            }
        }
        if let Some(sm) = &self.semantic_map {
            if sm.dims() != (w, h) {
                return Err(Error::Integrity(format!(
                    "image {}: semantic map size mismatch",
                    self.image_id
                )));
            }
            if let Some(&bad) = sm
                .as_slice()
                .iter()
                .find(|&&v| v != VOID_LABEL && v as usize > num_classes)
            {
                return Err(Error::Integrity(format!(
                    "image {}: semantic label {bad} exceeds {num_classes} classes",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Contiguous id in `1..=C`.
    pub id: ClassId,
    /// Id used by the source annotation file.
    pub source_id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub categories: Vec<Category>,
}

impl CategoryTable {
    /// Assigns contiguous ids in the given order.
    pub fn from_source(entries: impl IntoIterator<Item = (u64, String)>) -> Self {
        CategoryTable {
            categories: entries
                .into_iter()
                .enumerate()
                .map(|(i, (source_id, name))| Category {
                    id: i as ClassId + 1,
                    source_id,
                    name,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn by_source_id(&self, source_id: u64) -> Option<ClassId> {
        self.categories
            .iter()
            .find(|c| c.source_id == source_id)
            .map(|c| c.id)
    }

    pub fn by_name(&self, name: &str) -> Option<ClassId> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.id)
    }

    pub fn get(&self, id: ClassId) -> Option<&Category> {
        id.checked_sub(1)
            .and_then(|i| self.categories.get(i as usize))
    }

    pub fn name(&self, id: ClassId) -> &str {
        self.get(id).map_or("?", |c| c.name.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    pub categories: CategoryTable,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn validate(&self) -> Result<()> {
        self.images
            .iter()
            .try_for_each(|im| im.validate(self.num_classes()))
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Coco,
    Voc,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco" => Ok(Format::Coco),
            "voc" => Ok(Format::Voc),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// Loads a dataset from a directory laid out the way [`write_dataset`]
/// writes it (`annotations.json` + `images/` for COCO; the usual VOC
/// subdirectories otherwise), then applies the provenance sidecar if any.
pub fn load_dir(format: Format, root: &Path) -> Result<Dataset> {
    let mut ds = match format {
        Format::Coco => load_coco(&root.join("annotations.json"), &root.join("images"))?,
        Format::Voc => load_voc(&VocPaths::under_root(root))?,
    };
    let sidecar = root.join(PROVENANCE_FILE);
    if sidecar.exists() {
        apply_provenance(&mut ds, &sidecar)?;
    }
    Ok(ds)
}

/// Synthetic-object flags keyed by image id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub synthetic: BTreeMap<String, Vec<usize>>,
}

pub fn apply_provenance(ds: &mut Dataset, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prov: Provenance = serde_json::from_str(&text).map_err(|e| json_error(path, &text, e))?;
    for im in &mut ds.images {
        if let Some(idx) = prov.synthetic.get(&im.image_id) {
            let n = im.objects.len();
            for &i in idx {
                let o = im.objects.get_mut(i).ok_or_else(|| {
                    Error::Integrity(format!(
                        "provenance refers to object {i} of image {} which has {n}",
                        im.image_id
                    ))
                })?;
                o.is_synthetic = true;
            }
        }
    }
    Ok(())
}

pub(crate) fn json_error(path: &Path, text: &str, e: serde_json::Error) -> Error {
    let offset = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: e.to_string(),
    }
}

/// Snaps boxes of masked objects to their tight boxes, clips box-only
/// objects to the image, and drops objects that end up empty.
pub(crate) fn normalize_objects(image_id: &str, w: u32, h: u32, objects: &mut Vec<ObjectAnnotation>) {
    objects.retain_mut(|o| {
        if let Some(m) = &o.mask {
            match m.tight_box() {
                Some(tight) => {
                    let dev = [
                        (tight.x_min - o.bbox.x_min).abs(),
                        (tight.y_min - o.bbox.y_min).abs(),
                        (tight.x_max - o.bbox.x_max).abs(),
                        (tight.y_max - o.bbox.y_max).abs(),
                    ]
                    .into_iter()
                    .fold(0.0, f64::max);
                    if dev > 2.0 {
                        log::warn!(
                            "image {image_id}: box {:?} deviates {dev:.1}px from mask, snapped to {:?}",
                            o.bbox,
                            tight
                        );
                    }
                    o.bbox = tight;
                    return true;
                }
                None => {
                    log::warn!("image {image_id}: empty instance mask dropped, keeping box");
                    o.mask = None;
                }
            }
        }
        match o.bbox.clip(w, h) {
            Some(b) => {
                o.bbox = b;
                true
            }
            None => {
                log::warn!("image {image_id}: box {:?} outside image, dropped", o.bbox);
                false
            }
        }
    });
}
