use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::Value;

use super::rle::{counts_from_string, decode_rle, RleMask};
use super::{
    json_error, normalize_objects, read_rgb, AnnotatedImage, CategoryTable, Dataset,
    ObjectAnnotation, MAX_CLASSES,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Mask;

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    segmentation: Option<Value>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Loads a COCO-style annotation file. Category ids are remapped to
/// `1..=C` in the order of the `categories` array.
pub fn load_coco(json_path: &Path, image_root: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| json_error(json_path, &text, e))?;

    if file.categories.len() > MAX_CLASSES {
        return Err(Error::Integrity(format!(
            "{} categories exceed the supported {MAX_CLASSES}",
            file.categories.len()
        )));
    }
    let categories =
        CategoryTable::from_source(file.categories.iter().map(|c| (c.id, c.name.clone())));

    let image_index: HashMap<u64, usize> = file
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();

    let mut orphans: Vec<u64> = file
        .annotations
        .iter()
        .filter(|a| !image_index.contains_key(&a.image_id))
        .map(|a| a.id)
        .collect();
    if !orphans.is_empty() {
        orphans.sort_unstable();
        return Err(Error::Integrity(format!(
            "annotations reference missing images: {orphans:?}"
        )));
    }

    let mut per_image: BTreeMap<usize, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &file.annotations {
        per_image.entry(image_index[&a.image_id]).or_default().push(a);
    }

    let images = file
        .images
        .par_iter()
        .enumerate()
        .map(|(idx, meta)| {
            let path = image_root.join(&meta.file_name);
            let pixels = read_rgb(&path)?;
            if pixels.dimensions() != (meta.width, meta.height) {
                return Err(Error::Integrity(format!(
                    "image {} is {}x{} on disk but {}x{} in annotations",
                    meta.id,
                    pixels.width(),
                    pixels.height(),
                    meta.width,
                    meta.height
                )));
            }
            let mut objects = Vec::new();
            for a in per_image.get(&idx).map(Vec::as_slice).unwrap_or(&[]) {
                let class_id = categories.by_source_id(a.category_id).ok_or_else(|| {
                    Error::Integrity(format!(
                        "annotation {} has unknown category {}",
                        a.id, a.category_id
                    ))
                })?;
                let [x, y, w, h] = a.bbox;
                let mask = match &a.segmentation {
                    Some(seg) => decode_segmentation(a.id, seg, meta.width, meta.height)?,
                    None => None,
                };
                let bbox = match BBox::from_xywh(x, y, w, h) {
                    Ok(b) => b,
                    Err(_) => match mask.as_ref().and_then(Mask::tight_box) {
                        Some(b) => b,
                        None => {
                            log::warn!("annotation {}: degenerate bbox skipped", a.id);
                            continue;
                        }
                    },
                };
                objects.push(ObjectAnnotation {
                    class_id,
                    bbox,
                    mask,
                    is_synthetic: false,
                    is_crowd: a.iscrowd != 0,
                });
            }
            let image_id = meta.id.to_string();
            normalize_objects(&image_id, meta.width, meta.height, &mut objects);
            Ok(AnnotatedImage {
                image_id,
                pixels,
                objects,
                semantic_map: None,
                source: path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset { images, categories })
}

fn decode_segmentation(ann_id: u64, seg: &Value, w: u32, h: u32) -> Result<Option<Mask>> {
    let unsupported = || Error::UnsupportedMask {
        annotation_id: ann_id,
    };
    match seg {
        Value::Array(polys) if polys.is_empty() => Ok(None),
        Value::Array(polys) => {
            let mut rings = Vec::with_capacity(polys.len());
            for p in polys {
                let coords = p.as_array().ok_or_else(unsupported)?;
                let flat: Vec<f64> = coords
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(unsupported))
                    .collect::<Result<_>>()?;
                if !flat.len().is_multiple_of(2) || flat.len() < 6 {
                    return Err(unsupported());
                }
                rings.push(flat.chunks(2).map(|c| (c[0], c[1])).collect::<Vec<_>>());
            }
            Ok(Some(rasterize_polygons(&rings, w, h)))
        }
        Value::Object(obj) => {
            let size = obj
                .get("size")
                .and_then(Value::as_array)
                .filter(|s| s.len() == 2)
                .ok_or_else(unsupported)?;
            let rh = size[0].as_u64().ok_or_else(unsupported)? as u32;
            let rw = size[1].as_u64().ok_or_else(unsupported)? as u32;
            if (rw, rh) != (w, h) {
                return Err(Error::Integrity(format!(
                    "annotation {ann_id}: RLE size {rw}x{rh} differs from image {w}x{h}"
                )));
            }
            let counts = match obj.get("counts") {
                Some(Value::String(s)) => counts_from_string(s)?,
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| v.as_u64().ok_or_else(unsupported))
                    .collect::<Result<_>>()?,
                _ => return Err(unsupported()),
            };
            let mask = decode_rle(&RleMask {
                height: rh,
                width: rw,
                counts,
            })?;
            Ok(Some(mask))
        }
        _ => Err(unsupported()),
    }
}

/// Even-odd fill of the union of polygon rings, sampling at pixel centers.
pub(crate) fn rasterize_polygons(rings: &[Vec<(f64, f64)>], w: u32, h: u32) -> Mask {
    let mut mask = Mask::new(w, h);
    let mut xs = Vec::new();
    for ring in rings {
        for y in 0..h {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..ring.len() {
                let (x0, y0) = ring[i];
                let (x1, y1) = ring[(i + 1) % ring.len()];
                if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                    xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // pixel centers x + 0.5 in [a, b)
                let start = (pair[0] - 0.5).ceil().max(0.0) as u32;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as u32).min(w);
                for x in start..end {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Crossing-number point-in-polygon test, independent of the scanline fill.
    fn inside(ring: &[(f64, f64)], px: f64, py: f64) -> bool {
        let mut c = false;
        let n = ring.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = ring[i];
            let (xj, yj) = ring[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                c = !c;
            }
            j = i;
        }
        c
    }

    #[test]
    fn square_polygon_has_16_pixels() {
        let ring = vec![(0., 0.), (4., 0.), (4., 4.), (0., 4.)];
        let m = rasterize_polygons(std::slice::from_ref(&ring), 8, 8);
        let oracle = (0..8)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| inside(&ring, x as f64 + 0.5, y as f64 + 0.5))
            .count();
        assert_eq!(oracle, 16);
        assert_eq!(m.area(), 16);
    }

    #[test]
    fn triangle_matches_point_in_polygon() {
        let ring = vec![(1.3, 0.7), (17.9, 4.2), (6.1, 15.5)];
        let m = rasterize_polygons(std::slice::from_ref(&ring), 20, 20);
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(
                    m.get(x, y),
                    inside(&ring, x as f64 + 0.5, y as f64 + 0.5),
                    "pixel {x},{y}"
                );
            }
        }
    }
}
