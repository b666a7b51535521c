//! Approximate instance masks from a semantic map plus boxes.
//!
//! Boxes are visited in one random order per image; each labeled pixel goes
//! to the first box in that order that contains it and has the pixel's class.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{ClassId, Dataset};
use crate::geometry::{coverage, BBox};
use crate::instance_db::{InstanceCutout, InstanceDatabase};
use crate::raster::{LabelMap, Mask};
use crate::rng;

/// Minimum coverage of the ground-truth box by the mask's tight box.
pub const MIN_BOX_COVERAGE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct WeakInstance {
    pub class_id: ClassId,
    pub gt_box: BBox,
    pub mask: Mask,
}

pub fn approximate<R: Rng + ?Sized>(
    semantic_map: &LabelMap,
    boxes: &[(ClassId, BBox)],
    rng: &mut R,
) -> Vec<WeakInstance> {
    let (w, h) = semantic_map.dims();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.shuffle(rng);

    let mut masks = vec![Mask::new(w, h); boxes.len()];
    for y in 0..h {
        for x in 0..w {
            let label = semantic_map.get(x, y) as ClassId;
            if label == 0 {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(&i) = order
                .iter()
                .find(|&&i| boxes[i].0 == label && boxes[i].1.contains_point(px, py))
            {
                masks[i].set(x, y, true);
            }
        }
    }
    boxes
        .iter()
        .zip(masks)
        .map(|(&(class_id, gt_box), mask)| WeakInstance {
            class_id,
            gt_box,
            mask,
        })
        .collect()
}

/// Keeps an instance iff its mask's tight box covers at least 40% of the
/// ground-truth box (inclusive). Empty masks are dropped.
pub fn quality_filter(instance: &WeakInstance) -> bool {
    instance
        .mask
        .tight_box()
        .is_some_and(|b| coverage(&b, &instance.gt_box) >= MIN_BOX_COVERAGE)
}

/// Builds a cut-out database from semantic maps and boxes for images that
/// lack instance masks. Images without a semantic map contribute nothing.
pub fn weak_database(dataset: &Dataset, seed: u64, min_pixels: u64) -> InstanceDatabase {
    let mut cutouts = Vec::new();
    for im in &dataset.images {
        let Some(map) = &im.semantic_map else { continue };
        let boxes: Vec<(ClassId, BBox)> = im
            .objects
            .iter()
            .filter(|o| !o.is_crowd)
            .map(|o| (o.class_id, o.bbox))
            .collect();
        let mut r = rng::stream(seed, &im.image_id, rng::purpose::WEAK);
        for inst in approximate(map, &boxes, &mut r) {
            if !quality_filter(&inst) || inst.mask.area() < min_pixels {
                continue;
            }
            if let Some(c) = InstanceCutout::extract(inst.class_id, &im.pixels, &inst.mask, &im.image_id) {
                cutouts.push(c);
            }
        }
    }
    InstanceDatabase::from_cutouts(dataset.num_classes(), cutouts)
}
