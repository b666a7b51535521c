use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    normalize_objects, read_label_png, read_rgb, AnnotatedImage, CategoryTable, ClassId, Dataset,
    ObjectAnnotation, MAX_CLASSES,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{Mask, VOID_LABEL};

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// File that pins the class order of a VOC-layout directory.
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Debug, Default)]
pub struct VocPaths {
    pub xml_dir: PathBuf,
    pub image_dir: PathBuf,
    pub seg_class_dir: Option<PathBuf>,
    pub seg_object_dir: Option<PathBuf>,
    /// Class order; defaults to the 20 VOC classes (plus any unknown names,
    /// sorted, appended after them).
    pub class_names: Option<Vec<String>>,
}

impl VocPaths {
    /// Standard `Annotations/`, `JPEGImages/`, `SegmentationClass/`,
    /// `SegmentationObject/` layout; the segmentation dirs are optional.
    pub fn under_root(root: &Path) -> Self {
        let opt = |name: &str| {
            let p = root.join(name);
            p.is_dir().then_some(p)
        };
        let class_names = std::fs::read_to_string(root.join(CLASSES_FILE))
            .ok()
            .map(|s| {
                s.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            });
        VocPaths {
            xml_dir: root.join("Annotations"),
            image_dir: root.join("JPEGImages"),
            seg_class_dir: opt("SegmentationClass"),
            seg_object_dir: opt("SegmentationObject"),
            class_names,
        }
    }
}

#[derive(Debug)]
struct VocRecord {
    xml_path: PathBuf,
    stem: String,
    filename: Option<String>,
    objects: Vec<(String, BBox)>,
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn parse_xml(path: &Path) -> Result<VocRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| {
        let pos = e.pos();
        let offset = text
            .split_inclusive('\n')
            .take(pos.row.saturating_sub(1) as usize)
            .map(str::len)
            .sum::<usize>()
            + pos.col.saturating_sub(1) as usize;
        parse_err(path, offset, e.to_string())
    })?;
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(parse_err(
            path,
            root.range().start,
            format!("expected <annotation>, found <{}>", root.tag_name().name()),
        ));
    }
    fn child<'a, 'i>(n: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
        n.children().find(|c| c.has_tag_name(name))
    }
    let text_of = |n: roxmltree::Node| n.text().map(str::trim).unwrap_or("").to_string();

    let filename = child(root, "filename").map(text_of);
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child(obj, "name")
            .map(text_of)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, obj.range().start, "<object> without <name>"))?;
        let bnd = child(obj, "bndbox")
            .ok_or_else(|| parse_err(path, obj.range().start, "<object> without <bndbox>"))?;
        let coord = |tag: &str| -> Result<f64> {
            let node = child(bnd, tag)
                .ok_or_else(|| parse_err(path, bnd.range().start, format!("missing <{tag}>")))?;
            text_of(node)
                .parse::<f64>()
                .map_err(|e| parse_err(path, node.range().start, format!("<{tag}>: {e}")))
        };
        // 1-based inclusive -> 0-based half-open
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        let bbox = BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax)
            .map_err(|e| parse_err(path, bnd.range().start, e.to_string()))?;
        objects.push((name, bbox));
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(VocRecord {
        xml_path: path.to_path_buf(),
        stem,
        filename,
        objects,
    })
}

fn class_table(records: &[VocRecord], explicit: Option<&[String]>) -> Result<CategoryTable> {
    let names: Vec<String> = match explicit {
        Some(n) => n.to_vec(),
        None => {
            let mut names: Vec<String> = VOC_CLASSES.iter().map(|s| s.to_string()).collect();
            let mut extra: Vec<String> = records
                .iter()
                .flat_map(|r| r.objects.iter().map(|(n, _)| n.clone()))
                .filter(|n| !VOC_CLASSES.contains(&n.as_str()))
                .collect();
            extra.sort();
            extra.dedup();
            names.extend(extra);
            names
        }
    };
    if names.len() > MAX_CLASSES {
        return Err(Error::Integrity(format!(
            "{} classes exceed the supported {MAX_CLASSES}",
            names.len()
        )));
    }
    Ok(CategoryTable::from_source(
        names.into_iter().enumerate().map(|(i, n)| (i as u64 + 1, n)),
    ))
}

fn find_image(dir: &Path, rec: &VocRecord) -> Result<PathBuf> {
    let mut tried = Vec::new();
    if let Some(f) = &rec.filename {
        tried.push(dir.join(f));
    }
    for ext in ["jpg", "png", "jpeg"] {
        tried.push(dir.join(format!("{}.{ext}", rec.stem)));
    }
    tried
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| Error::NotFound(format!("image for {}", rec.xml_path.display())))
}

/// Loads a VOC-style dataset: one XML per image, optional class and
/// instance PNGs named after the XML stem.
pub fn load_voc(paths: &VocPaths) -> Result<Dataset> {
    let mut xmls: Vec<PathBuf> = std::fs::read_dir(&paths.xml_dir)
        .map_err(|e| Error::io(&paths.xml_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    xmls.sort();

    let records = xmls
        .par_iter()
        .map(|p| parse_xml(p))
        .collect::<Result<Vec<_>>>()?;
    let categories = class_table(&records, paths.class_names.as_deref())?;
    let num_classes = categories.len();

    let images = records
        .par_iter()
        .map(|rec| {
            let img_path = find_image(&paths.image_dir, rec)?;
            let pixels = read_rgb(&img_path)?;
            let (w, h) = pixels.dimensions();
            let mut objects = rec
                .objects
                .iter()
                .map(|(name, bbox)| {
                    let class_id: ClassId = categories.by_name(name).ok_or_else(|| {
                        Error::Integrity(format!(
                            "{}: class {name:?} not in class list",
                            rec.xml_path.display()
                        ))
                    })?;
                    Ok(ObjectAnnotation::from_box(class_id, *bbox))
                })
                .collect::<Result<Vec<_>>>()?;

            let png_for = |dir: &Option<PathBuf>| {
                dir.as_ref()
                    .map(|d| d.join(format!("{}.png", rec.stem)))
                    .filter(|p| p.is_file())
            };

            let semantic_map = match png_for(&paths.seg_class_dir) {
                Some(p) => {
                    let map = read_label_png(&p)?;
                    if map.dims() != (w, h) {
                        return Err(Error::Integrity(format!(
                            "{}: class map size differs from image",
                            p.display()
                        )));
                    }
                    if let Some(&bad) = map
                        .as_slice()
                        .iter()
                        .find(|&&v| v != VOID_LABEL && v as usize > num_classes)
                    {
                        return Err(Error::Integrity(format!(
                            "{}: label {bad} exceeds {num_classes} classes",
                            p.display()
                        )));
                    }
                    Some(map)
                }
                None => None,
            };

            if let Some(p) = png_for(&paths.seg_object_dir) {
                let inst = read_label_png(&p)?;
                if inst.dims() != (w, h) {
                    return Err(Error::Integrity(format!(
                        "{}: object map size differs from image",
                        p.display()
                    )));
                }
                let max_index = inst
                    .as_slice()
                    .iter()
                    .filter(|&&v| v != VOID_LABEL)
                    .copied()
                    .max()
                    .unwrap_or(0) as usize;
                if max_index != objects.len() {
                    return Err(Error::Integrity(format!(
                        "{}: {max_index} instances in object map but {} objects in XML",
                        p.display(),
                        objects.len()
                    )));
                }
                let mut masks = vec![Mask::new(w, h); objects.len()];
                for y in 0..h {
                    for x in 0..w {
                        let v = inst.get(x, y);
                        if v != 0 && v != VOID_LABEL {
                            masks[v as usize - 1].set(x, y, true);
                        }
                    }
                }
                for (o, m) in objects.iter_mut().zip(masks) {
                    o.mask = Some(m);
                }
            }

            normalize_objects(&rec.stem, w, h, &mut objects);
            Ok(AnnotatedImage {
                image_id: rec.stem.clone(),
                pixels,
                objects,
                semantic_map,
                source: img_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset { images, categories })
}
