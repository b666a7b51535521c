//! Binary masks, label maps, and the bilinear resampler shared by blending
//! and context extraction.

use image::{Rgb, RgbImage};

use crate::geometry::{BBox, PixelSpan};

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Mask {
            width,
            height,
            data,
        })
    }

    /// Mask with the pixels owned by `b` set.
    pub fn from_box(width: u32, height: u32, b: &BBox) -> Self {
        let s = b.pixel_span(width, height);
        let mut m = Mask::new(width, height);
        for y in s.y0..s.y1 {
            for x in s.x0..s.x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> u64 {
        self.data.iter().filter(|&&v| v).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn intersection_area(&self, other: &Mask) -> u64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count() as u64
    }

    /// Clears every pixel set in `other`.
    pub fn subtract(&mut self, other: &Mask) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a &= !b;
        }
    }

    pub fn tight_span(&self) -> Option<PixelSpan> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            let row = &self.data[(y * self.width) as usize..((y + 1) * self.width) as usize];
            if let Some(first) = row.iter().position(|&v| v) {
                let last = row.iter().rposition(|&v| v).unwrap();
                x0 = x0.min(first as u32);
                x1 = x1.max(last as u32 + 1);
                y0 = y0.min(y);
                y1 = y + 1;
            }
        }
        (x0 != u32::MAX).then_some(PixelSpan { x0, y0, x1, y1 })
    }

    /// Smallest box containing every set pixel.
    pub fn tight_box(&self) -> Option<BBox> {
        self.tight_span().and_then(PixelSpan::to_box)
    }

    pub fn crop(&self, s: &PixelSpan) -> Mask {
        Mask::from_fn(s.width(), s.height(), |x, y| self.get(s.x0 + x, s.y0 + y))
    }
}

/// Class-indexed raster; 0 is background, 255 is the VOC "void" label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

pub const VOID_LABEL: u8 = 255;

impl LabelMap {
    pub fn new(width: u32, height: u32) -> Self {
        LabelMap {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self, label: u8) -> u64 {
        self.data.iter().filter(|&&v| v == label).count() as u64
    }
}

/// Reads pixel `(x, y)` with coordinates clamped to the raster.
#[inline]
fn texel(img: &RgbImage, x: i64, y: i64) -> [u8; 3] {
    let cx = x.clamp(0, img.width() as i64 - 1) as u32;
    let cy = y.clamp(0, img.height() as i64 - 1) as u32;
    img.get_pixel(cx, cy).0
}

/// Bilinear sample at continuous pixel-center coordinates, edge-clamped.
pub fn sample_rgb(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let (tx, ty) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let p00 = texel(img, ix, iy);
    let p10 = texel(img, ix + 1, iy);
    let p01 = texel(img, ix, iy + 1);
    let p11 = texel(img, ix + 1, iy + 1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
    out
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Source coordinate of output pixel `o` when mapping `[src0, src0 + src_len)`
/// onto `out_len` pixels. Pixel centers map to pixel centers.
#[inline]
pub fn source_coord(o: u32, out_len: u32, src0: f64, src_len: f64) -> f64 {
    src0 + (o as f64 + 0.5) * src_len / out_len as f64
}

/// Resamples the continuous region `region` of `img` to `out_w × out_h`.
pub fn resize_region(img: &RgbImage, region: &BBox, out_w: u32, out_h: u32) -> RgbImage {
    let mut out = RgbImage::new(out_w, out_h);
    for oy in 0..out_h {
        let sy = source_coord(oy, out_h, region.y_min, region.height()) - 0.5;
        for ox in 0..out_w {
            let sx = source_coord(ox, out_w, region.x_min, region.width()) - 0.5;
            let v = sample_rgb(img, sx, sy);
            out.put_pixel(ox, oy, Rgb([to_u8(v[0]), to_u8(v[1]), to_u8(v[2])]));
        }
    }
    out
}

pub fn resize_rgb(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    resize_region(img, &BBox::full(img.width(), img.height()), out_w, out_h)
}

/// Bilinear resize of a mask, thresholded at one half.
pub fn resize_mask(mask: &Mask, out_w: u32, out_h: u32) -> Mask {
    let (w, h) = mask.dims();
    let at = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, w as i64 - 1) as u32;
        let cy = y.clamp(0, h as i64 - 1) as u32;
        mask.get(cx, cy) as u8 as f64
    };
    Mask::from_fn(out_w, out_h, |ox, oy| {
        let sx = source_coord(ox, out_w, 0.0, w as f64) - 0.5;
        let sy = source_coord(oy, out_h, 0.0, h as f64) - 0.5;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (tx, ty) = (sx - x0, sy - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty >= 0.5
    })
}

pub fn crop_rgb(img: &RgbImage, s: &PixelSpan) -> RgbImage {
    image::imageops::crop_imm(img, s.x0, s.y0, s.width(), s.height()).to_image()
}
