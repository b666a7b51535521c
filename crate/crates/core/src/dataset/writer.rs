use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::png_io::{encode_rgb_png, write_label_png};
use super::rle::{counts_to_string, encode_rle};
use super::voc::CLASSES_FILE;
use super::{AnnotatedImage, CategoryTable, Dataset, Format, Provenance};
use crate::annotate::instances_to_semantic;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::LabelMap;

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output manifest. Contains no timestamps so that reruns are byte-identical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: Option<Format>,
    pub files: Vec<String>,
    pub categories: CategoryTable,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub augmented: bool,
    pub probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub pastes: Vec<PasteRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    pub class_id: u32,
    pub placement_box: BBox,
    pub pasted_box: BBox,
    pub blend: String,
    pub scale: f64,
    pub source_image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Manifest {
    pub fn paste_count(&self) -> usize {
        self.images.iter().map(|r| r.pastes.len()).sum()
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| super::json_error(path, &text, e))
    }
}

fn file_stem_for(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

struct Out<'a> {
    root: &'a Path,
    files: Vec<String>,
}

impl Out<'_> {
    fn dir(&self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))
    }

    fn bytes(&mut self, rel: String, data: &[u8]) -> Result<()> {
        let p = self.root.join(&rel);
        std::fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
        self.files.push(rel);
        Ok(())
    }

    fn label(&mut self, rel: String, map: &LabelMap) -> Result<()> {
        write_label_png(map, &self.root.join(&rel))?;
        self.files.push(rel);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.bytes(rel.to_string(), text.as_bytes())
    }
}

fn provenance(ds: &Dataset, ids: &[String]) -> Provenance {
    let mut synthetic = BTreeMap::new();
    for (im, id) in ds.images.iter().zip(ids) {
        let idx: Vec<usize> = im
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_synthetic)
            .map(|(i, _)| i)
            .collect();
        if !idx.is_empty() {
            synthetic.insert(id.clone(), idx);
        }
    }
    Provenance { synthetic }
}

/// Writes `ds` under `out_dir` and returns the completed manifest (also
/// written as `manifest.json`). `template` supplies the run metadata.
pub fn write_dataset(
    ds: &Dataset,
    format: Format,
    out_dir: &Path,
    template: Manifest,
) -> Result<Manifest> {
    let mut out = Out {
        root: out_dir,
        files: Vec::new(),
    };
    out.dir("")?;
    match format {
        Format::Coco => write_coco(ds, &mut out)?,
        Format::Voc => write_voc(ds, &mut out)?,
    }
    out.json(PROVENANCE_FILE, &provenance(ds, &emitted_ids(ds, format)))?;

    let mut files = std::mem::take(&mut out.files);
    files.push(MANIFEST_FILE.to_string());
    files.sort();
    let manifest = Manifest {
        format: Some(format),
        files,
        categories: ds.categories.clone(),
        ..template
    };
    out.json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct CocoOutImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct CocoOutRle {
    size: [u32; 2],
    counts: String,
}

#[derive(Serialize)]
struct CocoOutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [i64; 4],
    area: u64,
    iscrowd: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    segmentation: Option<CocoOutRle>,
}

#[derive(Serialize)]
struct CocoOutCategory {
    id: u64,
    name: String,
}

#[derive(Serialize)]
struct CocoOut {
    images: Vec<CocoOutImage>,
    annotations: Vec<CocoOutAnnotation>,
    categories: Vec<CocoOutCategory>,
}

/// COCO ids for `images`: numeric image ids are kept, anything else (or a
/// repeated id) gets the next unused number after the largest one.
fn numeric_ids(images: &[AnnotatedImage]) -> Vec<u64> {
    let parsed: Vec<Option<u64>> = images.iter().map(|i| i.image_id.parse().ok()).collect();
    let mut next = parsed.iter().flatten().max().map_or(1, |m| m + 1);
    let mut used = std::collections::HashSet::new();
    parsed
        .into_iter()
        .map(|p| match p {
            Some(id) if used.insert(id) => id,
            _ => {
                while used.contains(&next) {
                    next += 1;
                }
                used.insert(next);
                next
            }
        })
        .collect()
}

/// Image ids as a reader of the written dataset will see them.
fn emitted_ids(ds: &Dataset, format: Format) -> Vec<String> {
    match format {
        Format::Coco => numeric_ids(&ds.images).iter().map(u64::to_string).collect(),
        Format::Voc => ds.images.iter().map(|i| file_stem_for(&i.image_id)).collect(),
    }
}

fn write_coco(ds: &Dataset, out: &mut Out) -> Result<()> {
    out.dir("images")?;
    let ids = numeric_ids(&ds.images);
    let mut coco = CocoOut {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: ds
            .categories
            .categories
            .iter()
            .map(|c| CocoOutCategory {
                id: c.source_id,
                name: c.name.clone(),
            })
            .collect(),
    };
    let mut ann_id = 1;
    for (im, &id) in ds.images.iter().zip(&ids) {
        let file_name = format!("{}.png", file_stem_for(&im.image_id));
        out.bytes(format!("images/{file_name}"), &encode_rgb_png(&im.pixels))?;
        coco.images.push(CocoOutImage {
            id,
            file_name,
            width: im.width(),
            height: im.height(),
        });
        for o in &im.objects {
            let b = o.bbox.rounded();
            let category_id = ds
                .categories
                .get(o.class_id)
                .map(|c| c.source_id)
                .ok_or_else(|| Error::Integrity(format!("unknown class {}", o.class_id)))?;
            let (area, segmentation) = match &o.mask {
                Some(m) => {
                    let rle = encode_rle(m);
                    (
                        m.area(),
                        Some(CocoOutRle {
                            size: [rle.height, rle.width],
                            counts: counts_to_string(&rle.counts),
                        }),
                    )
                }
                None => (b.area() as u64, None),
            };
            coco.annotations.push(CocoOutAnnotation {
                id: ann_id,
                image_id: id,
                category_id,
                bbox: [
                    b.x_min as i64,
                    b.y_min as i64,
                    (b.x_max - b.x_min) as i64,
                    (b.y_max - b.y_min) as i64,
                ],
                area,
                iscrowd: o.is_crowd as u8,
                segmentation,
            });
            ann_id += 1;
        }
    }
    out.json("annotations.json", &coco)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn voc_xml(im: &AnnotatedImage, file_name: &str, categories: &CategoryTable) -> String {
    let mut x = String::new();
    x.push_str("<annotation>\n");
    x.push_str(&format!("  <filename>{}</filename>\n", xml_escape(file_name)));
    x.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        im.width(),
        im.height()
    ));
    x.push_str(&format!(
        "  <segmented>{}</segmented>\n",
        im.has_instance_masks() as u8
    ));
    for o in &im.objects {
        let b = o.bbox.rounded();
        x.push_str("  <object>\n");
        x.push_str(&format!(
            "    <name>{}</name>\n",
            xml_escape(categories.name(o.class_id))
        ));
        x.push_str(&format!(
            "    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n",
            b.x_min as i64 + 1,
            b.y_min as i64 + 1,
            b.x_max as i64,
            b.y_max as i64
        ));
        x.push_str("  </object>\n");
    }
    x.push_str("</annotation>\n");
    x
}

fn write_voc(ds: &Dataset, out: &mut Out) -> Result<()> {
    for d in ["Annotations", "JPEGImages", "SegmentationClass", "SegmentationObject"] {
        out.dir(d)?;
    }
    let mut names = String::new();
    for c in &ds.categories.categories {
        names.push_str(&c.name);
        names.push('\n');
    }
    out.bytes(CLASSES_FILE.to_string(), names.as_bytes())?;

    for im in &ds.images {
        let stem = file_stem_for(&im.image_id);
        let file_name = format!("{stem}.png");
        out.bytes(
            format!("JPEGImages/{file_name}"),
            &encode_rgb_png(&im.pixels),
        )?;
        out.bytes(
            format!("Annotations/{stem}.xml"),
            voc_xml(im, &file_name, &ds.categories).as_bytes(),
        )?;

        let masked = im.has_instance_masks() && (!im.objects.is_empty() || im.semantic_map.is_some());
        if masked {
            if im.objects.len() >= 255 {
                return Err(Error::Integrity(format!(
                    "image {}: {} instances do not fit an 8-bit object map",
                    im.image_id,
                    im.objects.len()
                )));
            }
            let mut inst = LabelMap::new(im.width(), im.height());
            for (i, o) in im.objects.iter().enumerate() {
                let m = o.mask.as_ref().expect("checked has_instance_masks");
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        if m.get(x, y) {
                            inst.set(x, y, i as u8 + 1);
                        }
                    }
                }
            }
            out.label(format!("SegmentationObject/{stem}.png"), &inst)?;
        }
        let semantic = match &im.semantic_map {
            Some(s) => Some(s.clone()),
            None if masked => Some(instances_to_semantic(&im.objects, im.width(), im.height())?),
            None => None,
        };
        if let Some(s) = semantic {
            out.label(format!("SegmentationClass/{stem}.png"), &s)?;
        }
    }
    Ok(())
}
