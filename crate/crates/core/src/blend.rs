//! Compositing cut-outs into images.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ObjectAnnotation;
use crate::error::{Error, Result};
use crate::geometry::{BBox, PixelSpan};
use crate::instance_db::InstanceCutout;
use crate::raster::{sample_rgb, to_u8, Mask};

pub const GAUSSIAN_SIGMA: f64 = 2.0;
/// Kernel truncation radius, 3σ.
pub const GAUSSIAN_RADIUS: u32 = 6;
pub const LINEAR_RAMP: f64 = 5.0;
pub const MOTION_LENGTH: usize = 7;
pub const MIN_ENLARGE_FACTOR: f64 = 1.2;
pub const MAX_ENLARGE_FACTOR: f64 = 1.5;
pub const COLOR_JITTER: f64 = 0.1;

/// Slack allowed when checking that a target box lies in the image.
const FIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    None,
    GaussianEdge,
    LinearEdge,
    MotionBlur,
}

impl BlendMode {
    pub const ALL: [BlendMode; 4] = [
        BlendMode::None,
        BlendMode::GaussianEdge,
        BlendMode::LinearEdge,
        BlendMode::MotionBlur,
    ];

    /// Modes that only touch the neighborhood of the pasted object.
    pub const EDGE: [BlendMode; 3] = [BlendMode::None, BlendMode::GaussianEdge, BlendMode::LinearEdge];

    pub fn as_str(self) -> &'static str {
        match self {
            BlendMode::None => "none",
            BlendMode::GaussianEdge => "gaussian_edge",
            BlendMode::LinearEdge => "linear_edge",
            BlendMode::MotionBlur => "motion_blur",
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    /// Distance beyond the target box that the mode may change, or `None`
    /// when it touches the whole image.
    pub fn support_radius(self) -> Option<u32> {
        match self {
            BlendMode::None | BlendMode::LinearEdge => Some(0),
            BlendMode::GaussianEdge => Some(GAUSSIAN_RADIUS),
            BlendMode::MotionBlur => None,
        }
    }
}

impl std::fmt::Display for BlendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendSpec {
    pub mode: BlendMode,
    /// Where the scaled cut-out lands.
    pub target: BBox,
    pub scale: f64,
}

impl BlendSpec {
    /// Cut-out scaled by `scale` and centered in `candidate`.
    pub fn centered(cutout: &InstanceCutout, candidate: &BBox, scale: f64, mode: BlendMode) -> Result<Self> {
        let (cx, cy) = candidate.center();
        let target = BBox::from_center(
            cx,
            cy,
            scale * cutout.width() as f64,
            scale * cutout.height() as f64,
        )?;
        Ok(BlendSpec { mode, target, scale })
    }
}

/// The scaled cut-out resampled onto the image grid over `span`.
struct Layer {
    span: PixelSpan,
    colors: Vec<[f64; 3]>,
    hard: Vec<bool>,
}

impl Layer {
    fn idx(&self, x: u32, y: u32) -> usize {
        ((y - self.span.y0) * self.span.width() + (x - self.span.x0)) as usize
    }

    fn hard_at(&self, x: i64, y: i64) -> bool {
        let s = &self.span;
        if x < s.x0 as i64 || y < s.y0 as i64 || x >= s.x1 as i64 || y >= s.y1 as i64 {
            return false;
        }
        self.hard[self.idx(x as u32, y as u32)]
    }
}

fn dilate(s: PixelSpan, r: u32, w: u32, h: u32) -> PixelSpan {
    PixelSpan {
        x0: s.x0.saturating_sub(r),
        y0: s.y0.saturating_sub(r),
        x1: (s.x1 + r).min(w),
        y1: (s.y1 + r).min(h),
    }
}

/// Samples cut-out colors over `span` and its mask over the pixels whose
/// centers fall inside `target`.
fn rasterize(cutout: &InstanceCutout, target: &BBox, span: PixelSpan, w: u32, h: u32) -> Layer {
    let (cw, ch) = (cutout.width() as f64, cutout.height() as f64);
    let sx = cw / target.width();
    let sy = ch / target.height();
    let inner = target.pixel_span(w, h);
    let mut colors = Vec::with_capacity((span.width() * span.height()) as usize);
    let mut hard = Vec::with_capacity(colors.capacity());
    let m = &cutout.mask;
    let mask_at = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, m.width() as i64 - 1) as u32;
        let cy = y.clamp(0, m.height() as i64 - 1) as u32;
        m.get(cx, cy) as u8 as f64
    };
    for y in span.y0..span.y1 {
        let v = (y as f64 + 0.5 - target.y_min) * sy - 0.5;
        for x in span.x0..span.x1 {
            let u = (x as f64 + 0.5 - target.x_min) * sx - 0.5;
            colors.push(sample_rgb(&cutout.pixels, u, v));
            let inside = x >= inner.x0 && x < inner.x1 && y >= inner.y0 && y < inner.y1;
            let on = inside && {
                let (u0, v0) = (u.floor(), v.floor());
                let (tx, ty) = (u - u0, v - v0);
                let (iu, iv) = (u0 as i64, v0 as i64);
                let top = mask_at(iu, iv) * (1.0 - tx) + mask_at(iu + 1, iv) * tx;
                let bot = mask_at(iu, iv + 1) * (1.0 - tx) + mask_at(iu + 1, iv + 1) * tx;
                top * (1.0 - ty) + bot * ty >= 0.5
            };
            hard.push(on);
        }
    }
    Layer { span, colors, hard }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = GAUSSIAN_RADIUS as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Hard mask convolved with a truncated, normalized Gaussian.
fn gaussian_alpha(layer: &Layer) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = GAUSSIAN_RADIUS as i64;
    let s = layer.span;
    let (sw, sh) = (s.width() as usize, s.height() as usize);
    let mut rows = vec![0.0; sw * sh];
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = s.x0 as i64 + x as i64 + j as i64 - r;
                if layer.hard_at(xx, s.y0 as i64 + y as i64) {
                    acc += kv;
                }
            }
            rows[y * sw + x] = acc;
        }
    }
    let mut out = vec![0.0; sw * sh];
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if (0..sh as i64).contains(&yy) {
                    acc += kv * rows[yy as usize * sw + x];
                }
            }
            out[y * sw + x] = acc;
        }
    }
    out
}

/// Inside the hard mask, distance to the nearest outside pixel over the
/// ramp length, capped at one; zero outside.
fn linear_alpha(layer: &Layer) -> Vec<f64> {
    let s = layer.span;
    let reach = LINEAR_RAMP.ceil() as i64;
    let mut out = Vec::with_capacity(layer.hard.len());
    for y in s.y0 as i64..s.y1 as i64 {
        for x in s.x0 as i64..s.x1 as i64 {
            if !layer.hard_at(x, y) {
                out.push(0.0);
                continue;
            }
            let mut d2 = f64::INFINITY;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if !layer.hard_at(x + dx, y + dy) {
                        d2 = d2.min((dx * dx + dy * dy) as f64);
                    }
                }
            }
            out.push((d2.sqrt() / LINEAR_RAMP).min(1.0));
        }
    }
    out
}

fn composite(image: &mut RgbImage, layer: &Layer, alpha: &[f64]) -> Mask {
    let mut pasted = Mask::new(image.width(), image.height());
    let s = layer.span;
    for y in s.y0..s.y1 {
        for x in s.x0..s.x1 {
            let i = layer.idx(x, y);
            let a = alpha[i];
            if a <= 0.0 {
                continue;
            }
            let c = layer.colors[i];
            let px = image.get_pixel_mut(x, y);
            for ch in 0..3 {
                let v = if a >= 1.0 {
                    c[ch]
                } else {
                    a * c[ch] + (1.0 - a) * px.0[ch] as f64
                };
                px.0[ch] = to_u8(v);
            }
            if a > 0.5 {
                pasted.set(x, y, true);
            }
        }
    }
    pasted
}

/// Convolves the whole image with a centered line kernel of
/// [`MOTION_LENGTH`] taps at angle `theta`.
pub fn motion_blur(image: &RgbImage, theta: f64) -> RgbImage {
    let (dx, dy) = (theta.cos(), theta.sin());
    let half = (MOTION_LENGTH / 2) as i64;
    let n = MOTION_LENGTH as f64;
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let mut acc = [0.0; 3];
        for t in -half..=half {
            let s = sample_rgb(image, x as f64 + t as f64 * dx, y as f64 + t as f64 * dy);
            for c in 0..3 {
                acc[c] += s[c];
            }
        }
        Rgb([to_u8(acc[0] / n), to_u8(acc[1] / n), to_u8(acc[2] / n)])
    })
}

fn paste(
    image: &RgbImage,
    cutout: &InstanceCutout,
    spec: &BlendSpec,
    allow_clip: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(RgbImage, Mask)> {
    let (w, h) = image.dimensions();
    let t = &spec.target;
    let fits = t.is_valid()
        && t.x_min >= -FIT_TOLERANCE
        && t.y_min >= -FIT_TOLERANCE
        && t.x_max <= w as f64 + FIT_TOLERANCE
        && t.y_max <= h as f64 + FIT_TOLERANCE;
    if !t.is_valid() || (!allow_clip && !fits) {
        return Err(Error::Precondition(format!(
            "paste target {t:?} does not fit a {w}x{h} image"
        )));
    }
    let inner = t.pixel_span(w, h);
    let mut out = image.clone();
    if inner.is_empty() {
        return Ok((out, Mask::new(w, h)));
    }
    let (layer, alpha) = match spec.mode {
        BlendMode::GaussianEdge => {
            let layer = rasterize(cutout, t, dilate(inner, GAUSSIAN_RADIUS, w, h), w, h);
            let alpha = gaussian_alpha(&layer);
            (layer, alpha)
        }
        BlendMode::LinearEdge => {
            let layer = rasterize(cutout, t, inner, w, h);
            let alpha = linear_alpha(&layer);
            (layer, alpha)
        }
        BlendMode::None | BlendMode::MotionBlur => {
            let layer = rasterize(cutout, t, inner, w, h);
            let alpha = layer.hard.iter().map(|&b| b as u8 as f64).collect();
            (layer, alpha)
        }
    };
    let pasted = composite(&mut out, &layer, &alpha);
    if spec.mode == BlendMode::MotionBlur {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        out = motion_blur(&out, theta);
    }
    Ok((out, pasted))
}

/// Composites `cutout` into `image` at `spec.target`. Returns the new image
/// and the mask of pixels whose blend weight exceeds one half.
pub fn blend<R: Rng + ?Sized>(
    image: &RgbImage,
    cutout: &InstanceCutout,
    spec: &BlendSpec,
    rng: &mut R,
) -> Result<(RgbImage, Mask)> {
    paste(image, cutout, spec, false, rng)
}

/// Parameters of one enlarge-and-reblend step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnlargeParams {
    pub factor: f64,
    pub color: [f64; 3],
    pub mode: BlendMode,
}

impl EnlargeParams {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let factor = rng.random_range(MIN_ENLARGE_FACTOR..=MAX_ENLARGE_FACTOR);
        let mut color = [1.0; 3];
        for c in &mut color {
            *c = rng.random_range(1.0 - COLOR_JITTER..=1.0 + COLOR_JITTER);
        }
        let mode = BlendMode::EDGE[rng.random_range(0..BlendMode::EDGE.len())];
        EnlargeParams { factor, color, mode }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enlarged {
    pub pixels: RgbImage,
    pub pasted_mask: Mask,
    pub params: EnlargeParams,
}

/// Re-pastes a masked object over itself, scaled about its center and
/// slightly recolored. Parts that leave the image are clipped.
pub fn enlarge_reblend<R: Rng + ?Sized>(
    image: &RgbImage,
    object: &ObjectAnnotation,
    rng: &mut R,
) -> Result<Enlarged> {
    let params = EnlargeParams::draw(rng);
    enlarge_with(image, object, params, rng)
}

/// [`enlarge_reblend`] with explicit parameters.
pub fn enlarge_with<R: Rng + ?Sized>(
    image: &RgbImage,
    object: &ObjectAnnotation,
    params: EnlargeParams,
    rng: &mut R,
) -> Result<Enlarged> {
    let mask = object
        .mask
        .as_ref()
        .ok_or_else(|| Error::Precondition("enlarging needs an instance mask".into()))?;
    let mut cutout = InstanceCutout::extract(object.class_id, image, mask, "")
        .ok_or_else(|| Error::Precondition("enlarging an empty mask".into()))?;
    for p in cutout.pixels.pixels_mut() {
        for c in 0..3 {
            p.0[c] = to_u8(p.0[c] as f64 * params.color[c]);
        }
    }
    let tight = mask.tight_box().expect("non-empty mask");
    let (cx, cy) = tight.center();
    let target = BBox::from_center(
        cx,
        cy,
        tight.width() * params.factor,
        tight.height() * params.factor,
    )?;
    let spec = BlendSpec {
        mode: params.mode,
        target,
        scale: params.factor,
    };
    let (pixels, pasted_mask) = paste(image, &cutout, &spec, true, rng)?;
    Ok(Enlarged {
        pixels,
        pasted_mask,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ShapeParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc_cutout(r: u32) -> InstanceCutout {
        let d = 2 * r + 1;
        let mask = Mask::from_fn(d, d, |x, y| {
            let (dx, dy) = (x as i64 - r as i64, y as i64 - r as i64);
            dx * dx + dy * dy <= (r * r) as i64
        });
        InstanceCutout {
            class_id: 1,
            pixels: RgbImage::from_fn(d, d, |x, y| Rgb([200, (x * 7) as u8, (y * 5) as u8])),
            mask,
            source_image_id: "src".into(),
            original_shape: ShapeParams { scale: 0.5, aspect: 1.0 },
        }
    }

    fn noise_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 37 + y * 11) as u8, (x * 3 + y * 29) as u8, 90]))
    }

    fn spec(mode: BlendMode, target: BBox, scale: f64) -> BlendSpec {
        BlendSpec { mode, target, scale }
    }

    #[test]
    fn hard_paste_changes_only_masked_pixels() {
        let img = noise_image(40, 40);
        let cut = disc_cutout(6);
        let t = BBox::new(10., 12., 23., 25.).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, pasted) = blend(&img, &cut, &spec(BlendMode::None, t, 1.0), &mut rng).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                if pasted.get(x, y) {
                    let c = cut.pixels.get_pixel(x - 10, y - 12);
                    assert_eq!(out.get_pixel(x, y), c);
                    assert!(cut.mask.get(x - 10, y - 12));
                } else {
                    assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                }
            }
        }
        assert_eq!(pasted.area(), cut.mask.area());
    }

    #[test]
    fn pasted_mask_stays_in_target() {
        let img = noise_image(64, 48);
        let cut = disc_cutout(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in BlendMode::ALL {
            let t = BBox::from_center(30.3, 21.7, 15.0 * 1.37, 15.0 * 1.37).unwrap();
            let (_, pasted) = blend(&img, &cut, &spec(mode, t, 1.37), &mut rng).unwrap();
            let tb = pasted.tight_box().unwrap();
            assert!(tb.x_min >= t.x_min - 1.0 && tb.x_max <= t.x_max + 1.0, "{mode}");
            assert!(tb.y_min >= t.y_min - 1.0 && tb.y_max <= t.y_max + 1.0, "{mode}");
        }
    }

    #[test]
    fn gaussian_edge_is_local() {
        // direct 2D convolution oracle on a 32x32 fixture
        let img = noise_image(32, 32);
        let cut = disc_cutout(4);
        let t = BBox::new(12., 12., 21., 21.).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = blend(&img, &cut, &spec(BlendMode::GaussianEdge, t, 1.0), &mut rng).unwrap();
        let hard = Mask::from_fn(32, 32, |x, y| {
            (12..21).contains(&x) && (12..21).contains(&y) && cut.mask.get(x - 12, y - 12)
        });
        let s2 = GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
        let norm: f64 = (-6i64..=6)
            .map(|i| (-(i * i) as f64 / (2.0 * s2)).exp())
            .sum::<f64>()
            .powi(2);
        for y in 0..32i64 {
            for x in 0..32i64 {
                let mut a = 0.0;
                let mut dist2 = i64::MAX;
                for yy in 0..32i64 {
                    for xx in 0..32i64 {
                        if hard.get(xx as u32, yy as u32) {
                            let (dx, dy) = (xx - x, yy - y);
                            dist2 = dist2.min(dx * dx + dy * dy);
                            if dx.abs() <= 6 && dy.abs() <= 6 {
                                a += (-((dx * dx + dy * dy) as f64) / (2.0 * s2)).exp();
                            }
                        }
                    }
                }
                a /= norm;
                let o = out.get_pixel(x as u32, y as u32).0;
                let i = img.get_pixel(x as u32, y as u32).0;
                if (dist2 as f64).sqrt() > 3.0 * GAUSSIAN_SIGMA {
                    for c in 0..3 {
                        assert!((o[c] as i32 - i[c] as i32).abs() <= 1);
                    }
                }
                if a < 1e-12 {
                    assert_eq!(o, i);
                }
            }
        }
    }

    #[test]
    fn linear_edge_ramps_inward() {
        let img = RgbImage::from_pixel(30, 30, Rgb([0, 0, 0]));
        let mut cut = disc_cutout(0);
        cut.mask = Mask::from_fn(20, 20, |_, _| true);
        cut.pixels = RgbImage::from_pixel(20, 20, Rgb([250, 250, 250]));
        let t = BBox::new(5., 5., 25., 25.).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, pasted) = blend(&img, &cut, &spec(BlendMode::LinearEdge, t, 1.0), &mut rng).unwrap();
        // boundary pixel is one pixel from the outside: alpha 1/5
        assert_eq!(out.get_pixel(5, 15).0[0], 50);
        assert_eq!(out.get_pixel(7, 15).0[0], 150);
        assert_eq!(out.get_pixel(15, 15).0[0], 250);
        assert_eq!(out.get_pixel(4, 15).0[0], 0);
        assert!(!pasted.get(6, 15) && pasted.get(7, 15));
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let img = noise_image(20, 20);
        let cut = disc_cutout(5);
        let t = BBox::new(15., 15., 26., 26.).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            blend(&img, &cut, &spec(BlendMode::None, t, 1.0), &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn blending_is_deterministic() {
        let img = noise_image(50, 50);
        let cut = disc_cutout(8);
        let t = BBox::from_center(25.0, 25.0, 17.0 * 1.2, 17.0 * 1.2).unwrap();
        for mode in BlendMode::ALL {
            let a = blend(&img, &cut, &spec(mode, t, 1.2), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = blend(&img, &cut, &spec(mode, t, 1.2), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b);
        }
    }

    fn object_on(img_w: u32, img_h: u32, b: BBox) -> ObjectAnnotation {
        let (cx, cy) = b.center();
        let r = b.width().min(b.height()) / 2.0;
        let m = Mask::from_fn(img_w, img_h, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            dx * dx + dy * dy <= r * r
        });
        ObjectAnnotation::from_mask(2, m).unwrap()
    }

    #[test]
    fn enlarge_identity_hook() {
        let img = noise_image(60, 60);
        let obj = object_on(60, 60, BBox::new(20., 20., 40., 40.).unwrap());
        let p = EnlargeParams {
            factor: 1.0,
            color: [1.0; 3],
            mode: BlendMode::None,
        };
        let e = enlarge_with(&img, &obj, p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(e.pixels, img);
        assert_eq!(Some(&e.pasted_mask), obj.mask.as_ref());
    }

    #[test]
    fn enlarge_covers_original() {
        let img = noise_image(100, 100);
        let obj = object_on(100, 100, BBox::new(30., 30., 60., 60.).unwrap());
        let tight = obj.bbox;
        let p = EnlargeParams {
            factor: 1.2,
            color: [1.05, 0.95, 1.0],
            mode: BlendMode::None,
        };
        let e = enlarge_with(&img, &obj, p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let orig = obj.mask.as_ref().unwrap();
        assert_eq!(orig.intersection_area(&e.pasted_mask), orig.area());
        let nb = e.pasted_mask.tight_box().unwrap();
        assert!((nb.width() - 1.2 * tight.width()).abs() <= 1.0);
        assert!((nb.height() - 1.2 * tight.height()).abs() <= 1.0);
    }

    #[test]
    fn enlarge_draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = EnlargeParams::draw(&mut rng);
            assert!((MIN_ENLARGE_FACTOR..=MAX_ENLARGE_FACTOR).contains(&p.factor));
            assert!(p.color.iter().all(|c| (0.9..=1.1).contains(c)));
            assert_ne!(p.mode, BlendMode::MotionBlur);
        }
    }

    #[test]
    fn enlarge_near_border_clips() {
        let img = noise_image(40, 40);
        let obj = object_on(40, 40, BBox::new(0., 0., 20., 20.).unwrap());
        let p = EnlargeParams {
            factor: 1.5,
            color: [1.0; 3],
            mode: BlendMode::GaussianEdge,
        };
        let e = enlarge_with(&img, &obj, p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(e.pasted_mask.tight_box().unwrap().fits_in(40, 40));
    }
}
