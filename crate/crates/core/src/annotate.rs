//! Annotation rewriting after a paste.
//!
//! Box-only datasets drop an existing object when its box overlaps the
//! pasted object's tight box with IoU above 0.8. Datasets with instance
//! masks use visible-part semantics instead: pasted pixels are removed from
//! every existing mask and an object that loses more than 80% of its pixels
//! is dropped.

use crate::dataset::{ClassId, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::raster::{LabelMap, Mask};

pub const BOX_DELETE_IOU: f64 = 0.8;
pub const OCCLUSION_DISCARD: f64 = 0.8;

fn pasted_object(pasted_mask: &Mask, pasted_class: ClassId, keep_mask: bool) -> Result<ObjectAnnotation> {
    let bbox = pasted_mask
        .tight_box()
        .ok_or_else(|| Error::Precondition("pasted mask is empty".into()))?;
    Ok(ObjectAnnotation {
        class_id: pasted_class,
        bbox,
        mask: keep_mask.then(|| pasted_mask.clone()),
        is_synthetic: true,
        is_crowd: false,
    })
}

/// Appends the pasted object and deletes objects whose box has IoU > 0.8
/// with the pasted tight box.
pub fn update_boxes(
    objects: &mut Vec<ObjectAnnotation>,
    pasted_mask: &Mask,
    pasted_class: ClassId,
) -> Result<()> {
    let new = pasted_object(pasted_mask, pasted_class, false)?;
    objects.retain(|o| iou(&o.bbox, &new.bbox) <= BOX_DELETE_IOU);
    objects.push(new);
    Ok(())
}

/// Appends the pasted instance, removes its pixels from every existing mask,
/// discards objects occluded by more than 80%, and re-tightens the rest.
pub fn update_instances(
    objects: &mut Vec<ObjectAnnotation>,
    pasted_mask: &Mask,
    pasted_class: ClassId,
) -> Result<()> {
    if objects.iter().any(|o| o.mask.is_none()) {
        return Err(Error::Precondition(
            "update_instances requires masks on every object".into(),
        ));
    }
    let new = pasted_object(pasted_mask, pasted_class, true)?;
    objects.retain_mut(|o| {
        let m = o.mask.as_mut().expect("checked above");
        let area = m.area();
        if area == 0 {
            return false;
        }
        let hidden = m.intersection_area(pasted_mask);
        if hidden as f64 / area as f64 > OCCLUSION_DISCARD {
            return false;
        }
        if hidden > 0 {
            m.subtract(pasted_mask);
            match m.tight_box() {
                Some(b) => o.bbox = b,
                None => return false,
            }
        }
        true
    });
    objects.push(new);
    Ok(())
}

/// Dispatches to [`update_instances`] when every object has a mask, else to
/// [`update_boxes`].
pub fn apply_paste(
    objects: &mut Vec<ObjectAnnotation>,
    pasted_mask: &Mask,
    pasted_class: ClassId,
) -> Result<()> {
    if objects.iter().all(|o| o.mask.is_some()) {
        update_instances(objects, pasted_mask, pasted_class)
    } else {
        update_boxes(objects, pasted_mask, pasted_class)
    }
}

/// Paints each instance's class into a map; 0 elsewhere.
pub fn instances_to_semantic(objects: &[ObjectAnnotation], width: u32, height: u32) -> Result<LabelMap> {
    let mut map = LabelMap::new(width, height);
    let mut owner = vec![false; width as usize * height as usize];
    for o in objects {
        let Some(m) = &o.mask else { continue };
        if m.dims() != (width, height) {
            return Err(Error::Integrity("instance mask size mismatch".into()));
        }
        let label = u8::try_from(o.class_id)
            .ok()
            .filter(|&l| l != 0 && l != crate::raster::VOID_LABEL)
            .ok_or_else(|| Error::Integrity(format!("class {} has no 8-bit label", o.class_id)))?;
        for (i, _) in m.as_slice().iter().enumerate().filter(|(_, &v)| v) {
            if owner[i] {
                return Err(Error::Integrity(format!(
                    "instance masks overlap at pixel ({}, {})",
                    i as u32 % width,
                    i as u32 / width
                )));
            }
            owner[i] = true;
            map.set(i as u32 % width, i as u32 / width, label);
        }
    }
    Ok(map)
}
