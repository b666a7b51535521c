//! Contextual images: a neighborhood crop around a box with the box itself
//! painted over, resized to a fixed square. These are what the context
//! scorer sees, both when it is trained and when candidates are scored.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::dataset::{AnnotatedImage, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::raster::{crop_rgb, resize_region, source_coord};
use crate::rng;
use crate::shape_model::ShapeHistogram;

pub const CONTEXT_SIZE: u32 = 300;
pub const FILL: [u8; 3] = [128, 128, 128];
pub const MIN_ENLARGE: f64 = 1.5;
pub const MAX_ENLARGE: f64 = 3.0;
/// Background boxes must overlap every ground-truth box with IoU below this.
pub const BACKGROUND_MAX_IOU: f64 = 0.2;
pub const BACKGROUND_TRIES: usize = 50;
pub const DEFAULT_BG_RATIO: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ContextualImage {
    pub image_id: String,
    /// `CONTEXT_SIZE`² raster; `None` when only the geometry was drawn
    /// (for scorers that do not look at pixels).
    pub pixels: Option<RgbImage>,
    /// Training label, 0 for background.
    pub label: Option<ClassId>,
    pub source_box: BBox,
    pub neighborhood: BBox,
}

/// Enlarges `b` about its center by a factor uniform in `[1.5, 3.0]`,
/// clipped to the image and snapped outward to whole pixels.
pub fn draw_neighborhood<R: Rng + ?Sized>(b: &BBox, image_w: u32, image_h: u32, rng: &mut R) -> BBox {
    let g = rng.random_range(MIN_ENLARGE..=MAX_ENLARGE);
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() * g / 2.0, b.height() * g / 2.0);
    let x0 = (cx - hw).max(0.0).min(b.x_min).floor();
    let y0 = (cy - hh).max(0.0).min(b.y_min).floor();
    let x1 = (cx + hw).min(image_w as f64).max(b.x_max).ceil().min(image_w as f64);
    let y1 = (cy + hh).min(image_h as f64).max(b.y_max).ceil().min(image_h as f64);
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

/// Paints `b` with the fill color inside `neighborhood`, then resamples the
/// neighborhood to `CONTEXT_SIZE`². Output pixels whose source location is
/// inside the box are set to the fill color exactly.
pub fn render_contextual(pixels: &RgbImage, b: &BBox, neighborhood: &BBox) -> RgbImage {
    let (w, h) = pixels.dimensions();
    let span = neighborhood.covering_span(w, h);
    let mut crop = crop_rgb(pixels, &span);
    let hole = b.covering_span(w, h);
    for y in hole.y0.max(span.y0)..hole.y1.min(span.y1) {
        for x in hole.x0.max(span.x0)..hole.x1.min(span.x1) {
            crop.put_pixel(x - span.x0, y - span.y0, Rgb(FILL));
        }
    }
    let local = BBox {
        x_min: neighborhood.x_min - span.x0 as f64,
        y_min: neighborhood.y_min - span.y0 as f64,
        x_max: neighborhood.x_max - span.x0 as f64,
        y_max: neighborhood.y_max - span.y0 as f64,
    };
    let mut out = resize_region(&crop, &local, CONTEXT_SIZE, CONTEXT_SIZE);
    for oy in 0..CONTEXT_SIZE {
        let sy = source_coord(oy, CONTEXT_SIZE, neighborhood.y_min, neighborhood.height());
        if sy < b.y_min || sy >= b.y_max {
            continue;
        }
        for ox in 0..CONTEXT_SIZE {
            let sx = source_coord(ox, CONTEXT_SIZE, neighborhood.x_min, neighborhood.width());
            if sx >= b.x_min && sx < b.x_max {
                out.put_pixel(ox, oy, Rgb(FILL));
            }
        }
    }
    out
}

/// Draws a neighborhood for `b` and renders the masked crop.
pub fn make_contextual<R: Rng + ?Sized>(image: &AnnotatedImage, b: &BBox, rng: &mut R) -> ContextualImage {
    let mut c = contextual_geometry(image, b, rng);
    c.pixels = Some(render_contextual(&image.pixels, b, &c.neighborhood));
    c
}

/// Like [`make_contextual`] but without rendering; consumes the same draws.
pub fn contextual_geometry<R: Rng + ?Sized>(image: &AnnotatedImage, b: &BBox, rng: &mut R) -> ContextualImage {
    let neighborhood = draw_neighborhood(b, image.width(), image.height(), rng);
    ContextualImage {
        image_id: image.image_id.clone(),
        pixels: None,
        label: None,
        source_box: *b,
        neighborhood,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainingSetOptions {
    pub bg_ratio: usize,
    /// Backgrounds drawn from images that have no ground-truth boxes.
    pub backgrounds_per_empty_image: usize,
    pub render: bool,
}

impl Default for TrainingSetOptions {
    fn default() -> Self {
        TrainingSetOptions {
            bg_ratio: DEFAULT_BG_RATIO,
            backgrounds_per_empty_image: 0,
            render: true,
        }
    }
}

/// Contextual training samples of one image: a positive per non-crowd
/// ground-truth box, then `bg_ratio` backgrounds per positive.
pub fn training_samples_for_image(
    image: &AnnotatedImage,
    sampler: &crate::shape_model::ShapeSampler<'_>,
    opts: &TrainingSetOptions,
    seed: u64,
) -> Vec<ContextualImage> {
    let positives: Vec<usize> = (0..image.objects.len())
        .filter(|&i| !image.objects[i].is_crowd)
        .collect();
    let mut r = rng::stream(seed, &image.image_id, rng::purpose::CONTEXT);
    training_samples_with(image, sampler, opts, &positives, &mut r)
}

/// Samples for the objects at `positives` plus `bg_ratio` backgrounds per
/// positive (or `backgrounds_per_empty_image` when `positives` is empty and
/// the image has no boxes at all). Backgrounds avoid every box.
pub fn training_samples_with<R: Rng + ?Sized>(
    image: &AnnotatedImage,
    sampler: &crate::shape_model::ShapeSampler<'_>,
    opts: &TrainingSetOptions,
    positives: &[usize],
    r: &mut R,
) -> Vec<ContextualImage> {
    let render = |c: &mut ContextualImage| {
        if opts.render {
            c.pixels = Some(render_contextual(&image.pixels, &c.source_box, &c.neighborhood));
        }
    };
    let mut out = Vec::new();
    for &i in positives {
        let o = &image.objects[i];
        let mut c = contextual_geometry(image, &o.bbox, r);
        c.label = Some(o.class_id);
        render(&mut c);
        out.push(c);
    }
    let wanted = if image.objects.is_empty() {
        opts.backgrounds_per_empty_image
    } else {
        positives.len() * opts.bg_ratio
    };
    let all_boxes: Vec<BBox> = image.objects.iter().map(|o| o.bbox).collect();
    let mut made = 0;
    for _ in 0..wanted {
        let accepted = (0..BACKGROUND_TRIES).find_map(|_| {
            let b = sampler
                .sample_box(image.width(), image.height(), r, 1)
                .ok()?;
            all_boxes
                .iter()
                .all(|g| iou(&b, g) < BACKGROUND_MAX_IOU)
                .then_some(b)
        });
        let Some(b) = accepted else { continue };
        let mut c = contextual_geometry(image, &b, r);
        c.label = Some(0);
        render(&mut c);
        out.push(c);
        made += 1;
    }
    if made < wanted {
        log::warn!(
            "image {}: only {made} of {wanted} background contexts accepted",
            image.image_id
        );
    }
    out
}

/// Streams contextual training samples over the whole dataset, image by
/// image. Deterministic given the dataset order and `seed`.
pub fn gen_training_set<'a>(
    dataset: &'a Dataset,
    hist: &'a ShapeHistogram,
    opts: TrainingSetOptions,
    seed: u64,
) -> Result<impl Iterator<Item = ContextualImage> + 'a> {
    let sampler = hist.sampler()?;
    Ok(dataset
        .images
        .iter()
        .flat_map(move |im| training_samples_for_image(im, &sampler, &opts, seed)))
}

pub const LABELS_FILE: &str = "labels.csv";

/// Writes rendered samples as `images/NNNNNNN.png` plus `labels.csv`
/// (`path,label`). Returns the number of samples written.
pub fn write_export(samples: impl IntoIterator<Item = ContextualImage>, dir: &Path) -> Result<usize> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let csv_path = dir.join(LABELS_FILE);
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "path,label").map_err(|e| Error::io(&csv_path, e))?;
    let mut n = 0;
    for s in samples {
        let pixels = s
            .pixels
            .as_ref()
            .ok_or_else(|| Error::Precondition("export needs rendered contextual images".into()))?;
        let label = s
            .label
            .ok_or_else(|| Error::Precondition("export needs labeled contextual images".into()))?;
        let rel = format!("images/{n:07}.png");
        crate::dataset::write_rgb_png(pixels, &dir.join(&rel))?;
        writeln!(csv, "{rel},{label}").map_err(|e| Error::io(&csv_path, e))?;
        n += 1;
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(n)
}
