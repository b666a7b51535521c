//! Axis-aligned box arithmetic.
//!
//! Coordinates are continuous pixel coordinates (x right, y down). When a box
//! is rasterized it owns the pixels whose centers fall in `[min, max)`, so an
//! integer box `(0, 0, 10, 10)` owns exactly the 10×10 pixels `0..10`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with `x_min < x_max` and `y_min < y_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Scale (square root of relative area) and aspect ratio (width / height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub scale: f64,
    pub aspect: f64,
}

/// Half-open integer pixel ranges `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelSpan {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelSpan {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn to_box(self) -> Option<BBox> {
        if self.is_empty() {
            return None;
        }
        Some(BBox {
            x_min: self.x0 as f64,
            y_min: self.y0 as f64,
            x_max: self.x1 as f64,
            y_max: self.y1 as f64,
        })
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Precondition(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )))
        }
    }

    /// Builds a box from COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        b.is_valid().then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits_in(&self, image_w: u32, image_h: u32) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= image_w as f64
            && self.y_max <= image_h as f64
    }

    /// Clips to the image frame; `None` when nothing is left.
    pub fn clip(&self, image_w: u32, image_h: u32) -> Option<BBox> {
        self.intersection(&BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: image_w as f64,
            y_max: image_h as f64,
        })
    }

    pub fn full(image_w: u32, image_h: u32) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: image_w as f64,
            y_max: image_h as f64,
        }
    }

    /// Pixels whose centers lie inside the box, clamped to the image.
    pub fn pixel_span(&self, image_w: u32, image_h: u32) -> PixelSpan {
        let lo = |v: f64, max: u32| ((v - 0.5).ceil().max(0.0) as u32).min(max);
        PixelSpan {
            x0: lo(self.x_min, image_w),
            y0: lo(self.y_min, image_h),
            x1: lo(self.x_max, image_w),
            y1: lo(self.y_max, image_h),
        }
    }

    /// Every pixel the box touches, clamped to the image.
    pub fn covering_span(&self, image_w: u32, image_h: u32) -> PixelSpan {
        PixelSpan {
            x0: (self.x_min.floor().max(0.0) as u32).min(image_w),
            y0: (self.y_min.floor().max(0.0) as u32).min(image_h),
            x1: (self.x_max.ceil().max(0.0) as u32).min(image_w),
            y1: (self.y_max.ceil().max(0.0) as u32).min(image_h),
        }
    }

    /// Integer-rounded copy, used at serialization boundaries.
    pub fn rounded(&self) -> BBox {
        BBox {
            x_min: self.x_min.round(),
            y_min: self.y_min.round(),
            x_max: self.x_max.round(),
            y_max: self.y_max.round(),
        }
    }
}

/// Intersection over union; symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Fraction of `outer` covered by `inner`: `area(inner ∩ outer) / area(outer)`.
///
/// Not symmetric; `outer` is the denominator.
pub fn coverage(inner: &BBox, outer: &BBox) -> f64 {
    inner.intersection_area(outer) / outer.area()
}

pub fn shape_params(b: &BBox, image_w: u32, image_h: u32) -> Result<ShapeParams> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::Precondition("empty image".into()));
    }
    if !b.fits_in(image_w, image_h) {
        return Err(Error::Precondition(format!(
            "box {b:?} exceeds {image_w}x{image_h} image"
        )));
    }
    let image_area = image_w as f64 * image_h as f64;
    Ok(ShapeParams {
        scale: (b.area() / image_area).sqrt(),
        aspect: b.width() / b.height(),
    })
}

/// Box side lengths implied by `p` in an image of the given size.
pub fn shape_size(p: &ShapeParams, image_w: u32, image_h: u32) -> (f64, f64) {
    let image_area = image_w as f64 * image_h as f64;
    (
        p.scale * (image_area * p.aspect).sqrt(),
        p.scale * (image_area / p.aspect).sqrt(),
    )
}

// Tolerates float noise on sizes that land exactly on the image border.
const FIT_EPS: f64 = 1e-9;

/// Inverse of [`shape_params`], centered at `center`.
pub fn box_from_shape(
    p: &ShapeParams,
    center: (f64, f64),
    image_w: u32,
    image_h: u32,
) -> Result<BBox> {
    let (w, h) = shape_size(p, image_w, image_h);
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::NoFit);
    }
    let b = BBox::from_center(center.0, center.1, w, h).map_err(|_| Error::NoFit)?;
    let (iw, ih) = (image_w as f64, image_h as f64);
    if b.x_min < -FIT_EPS || b.y_min < -FIT_EPS || b.x_max > iw + FIT_EPS || b.y_max > ih + FIT_EPS
    {
        return Err(Error::NoFit);
    }
    Ok(BBox {
        x_min: b.x_min.max(0.0),
        y_min: b.y_min.max(0.0),
        x_max: b.x_max.min(iw),
        y_max: b.y_max.min(ih),
    })
}
