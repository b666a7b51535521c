//! 2D histogram over box (scale, aspect) and sampling from it.
//!
//! Scale bins are uniform over (0, 1]; aspect bins are uniform in
//! `log2(aspect)` over [-3, 3], with aspects outside that range clipped into
//! the end bins. Samples are jittered uniformly within the chosen bin.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{shape_params, shape_size, BBox, ShapeParams};

pub const SCALE_BINS: usize = 16;
pub const ASPECT_BINS: usize = 16;
pub const LOG2_ASPECT_RANGE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeHistogram {
    pub scale_edges: Vec<f64>,
    /// Edges over `log2(aspect)`.
    pub aspect_edges: Vec<f64>,
    /// `counts[scale_bin][aspect_bin]`.
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    // first edge e with v < e, minus one
    let i = edges.partition_point(|&e| e <= v);
    i.saturating_sub(1).min(bins - 1)
}

impl ShapeHistogram {
    pub fn empty() -> Self {
        ShapeHistogram {
            scale_edges: uniform_edges(0.0, 1.0, SCALE_BINS),
            aspect_edges: uniform_edges(-LOG2_ASPECT_RANGE, LOG2_ASPECT_RANGE, ASPECT_BINS),
            counts: vec![vec![0; ASPECT_BINS]; SCALE_BINS],
            total: 0,
        }
    }

    pub fn bin(&self, p: &ShapeParams) -> (usize, usize) {
        let la = p
            .aspect
            .log2()
            .clamp(-LOG2_ASPECT_RANGE, LOG2_ASPECT_RANGE);
        (bin_of(&self.scale_edges, p.scale), bin_of(&self.aspect_edges, la))
    }

    pub fn add(&mut self, p: &ShapeParams) {
        let (s, a) = self.bin(p);
        self.counts[s][a] += 1;
        self.total += 1;
    }

    pub fn from_shapes<'a>(shapes: impl IntoIterator<Item = &'a ShapeParams>) -> Result<Self> {
        let mut h = Self::empty();
        for p in shapes {
            h.add(p);
        }
        if h.total == 0 {
            return Err(Error::EmptyDistribution);
        }
        Ok(h)
    }

    /// One count per non-crowd ground-truth box.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let mut shapes = Vec::with_capacity(dataset.box_count());
        for im in &dataset.images {
            for o in im.objects.iter().filter(|o| !o.is_crowd) {
                shapes.push(shape_params(&o.bbox, im.width(), im.height())?);
            }
        }
        Self::from_shapes(&shapes)
    }

    pub fn probability(&self, scale_bin: usize, aspect_bin: usize) -> f64 {
        self.counts[scale_bin][aspect_bin] as f64 / self.total as f64
    }

    pub fn validate(&self) -> Result<()> {
        let monotone = |e: &[f64]| e.len() >= 2 && e.windows(2).all(|w| w[0] < w[1]);
        if !monotone(&self.scale_edges) || !monotone(&self.aspect_edges) {
            return Err(Error::Integrity("histogram edges are not increasing".into()));
        }
        if self.scale_edges[0] < 0.0 || *self.scale_edges.last().unwrap() > 1.0 {
            return Err(Error::Integrity("scale edges must lie in [0, 1]".into()));
        }
        if self.counts.len() != self.scale_edges.len() - 1
            || self
                .counts
                .iter()
                .any(|r| r.len() != self.aspect_edges.len() - 1)
        {
            return Err(Error::Integrity("histogram counts do not match edges".into()));
        }
        let sum: u64 = self.counts.iter().flatten().sum();
        if sum != self.total {
            return Err(Error::Integrity(format!(
                "histogram total {} differs from count sum {sum}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: Self =
            serde_json::from_str(&text).map_err(|e| crate::dataset::json_error(path, &text, e))?;
        h.validate()?;
        Ok(h)
    }

    /// Weighted bin sampler; build once and reuse for many draws.
    pub fn sampler(&self) -> Result<ShapeSampler<'_>> {
        if self.total == 0 {
            return Err(Error::EmptyDistribution);
        }
        let weights = WeightedIndex::new(self.counts.iter().flatten().copied())
            .map_err(|_| Error::EmptyDistribution)?;
        Ok(ShapeSampler { hist: self, weights })
    }
}

pub struct ShapeSampler<'a> {
    hist: &'a ShapeHistogram,
    weights: WeightedIndex<u64>,
}

impl ShapeSampler<'_> {
    pub fn sample_shape<R: Rng + ?Sized>(&self, rng: &mut R) -> ShapeParams {
        let h = self.hist;
        let flat = self.weights.sample(rng);
        let na = h.aspect_edges.len() - 1;
        let (si, ai) = (flat / na, flat % na);
        let (s_lo, s_hi) = (h.scale_edges[si], h.scale_edges[si + 1]);
        let (a_lo, a_hi) = (h.aspect_edges[ai], h.aspect_edges[ai + 1]);
        let scale = loop {
            let s = rng.random_range(s_lo..s_hi);
            if s > 0.0 {
                break s;
            }
        };
        let aspect = rng.random_range(a_lo..a_hi).exp2();
        ShapeParams { scale, aspect }
    }

    /// Draws a shape and a position where the box fits; up to `max_tries`
    /// shapes are tried.
    pub fn sample_box<R: Rng + ?Sized>(
        &self,
        image_w: u32,
        image_h: u32,
        rng: &mut R,
        max_tries: usize,
    ) -> Result<BBox> {
        for _ in 0..max_tries {
            let shape = self.sample_shape(rng);
            if let Ok(b) = place_shape(&shape, image_w, image_h, rng) {
                return Ok(b);
            }
        }
        Err(Error::NoFit)
    }
}

pub fn sample_shape<R: Rng + ?Sized>(hist: &ShapeHistogram, rng: &mut R) -> Result<ShapeParams> {
    Ok(hist.sampler()?.sample_shape(rng))
}

pub fn sample_box<R: Rng + ?Sized>(
    hist: &ShapeHistogram,
    image_w: u32,
    image_h: u32,
    rng: &mut R,
    max_tries: usize,
) -> Result<BBox> {
    hist.sampler()?.sample_box(image_w, image_h, rng, max_tries)
}

/// Positions a box of the given shape uniformly over the centers where it
/// fits entirely inside the image.
pub fn place_shape<R: Rng + ?Sized>(
    shape: &ShapeParams,
    image_w: u32,
    image_h: u32,
    rng: &mut R,
) -> Result<BBox> {
    const EPS: f64 = 1e-9;
    let (w, h) = shape_size(shape, image_w, image_h);
    let (iw, ih) = (image_w as f64, image_h as f64);
    if !(w > 0.0 && h > 0.0) || w > iw + EPS || h > ih + EPS {
        return Err(Error::NoFit);
    }
    let (w, h) = (w.min(iw), h.min(ih));
    let x0 = if w < iw { rng.random_range(0.0..iw - w) } else { 0.0 };
    let y0 = if h < ih { rng.random_range(0.0..ih - h) } else { 0.0 };
    BBox::new(x0, y0, x0 + w, y0 + h).map_err(|_| Error::NoFit)
}
