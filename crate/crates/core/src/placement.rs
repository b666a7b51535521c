//! Candidate boxes, their scoring, and the choice of where to paste.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, ClassId};
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::rng;
use crate::scorer::{Gateway, ScoreVector, DEFAULT_VARIANTS};
use crate::shape_model::ShapeSampler;

pub const DEFAULT_CANDIDATES: usize = 200;
pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MAX_PLACEMENTS: usize = 2;
pub const NEIGHBORS_PER_OBJECT: usize = 2;
/// Neighbor centers move by up to this fraction of the box side.
pub const NEIGHBOR_SHIFT: f64 = 0.5;
pub const NEIGHBOR_SIZE_JITTER: f64 = 0.1;
/// Kept placements overlap each other with IoU strictly below this.
pub const MAX_OVERLAP_IOU: f64 = 0.3;
/// Shape draws per sampled candidate before it is given up.
pub const SAMPLE_TRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Sampled,
    Neighbor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementCandidate {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub origin: Origin,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores: Option<ScoreVector>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_class: Option<ClassId>,
}

impl PlacementCandidate {
    pub fn new(bbox: BBox, origin: Origin) -> Self {
        PlacementCandidate {
            bbox,
            origin,
            scores: None,
            selected_class: None,
        }
    }

    /// Averaged score of the selected class.
    pub fn selected_score(&self) -> Option<f64> {
        Some(self.scores.as_ref()?.get(self.selected_class?))
    }
}

/// `n` boxes drawn from the shape model, followed by
/// [`NEIGHBORS_PER_OBJECT`] jittered copies of every non-crowd object box.
pub fn propose<R: Rng + ?Sized>(
    image: &AnnotatedImage,
    sampler: &ShapeSampler,
    n: usize,
    rng: &mut R,
) -> Vec<PlacementCandidate> {
    let (w, h) = (image.width(), image.height());
    let mut out = sample_candidates(image, sampler, n, rng);
    for o in image.objects.iter().filter(|o| !o.is_crowd) {
        for _ in 0..NEIGHBORS_PER_OBJECT {
            if let Some(b) = neighbor_box(&o.bbox, w, h, rng) {
                out.push(PlacementCandidate::new(b, Origin::Neighbor));
            }
        }
    }
    out
}

/// The sampled part of [`propose`]; draws the same random numbers.
pub fn sample_candidates<R: Rng + ?Sized>(
    image: &AnnotatedImage,
    sampler: &ShapeSampler,
    n: usize,
    rng: &mut R,
) -> Vec<PlacementCandidate> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(n);
    let mut dropped = 0;
    for _ in 0..n {
        match sampler.sample_box(w, h, rng, SAMPLE_TRIES) {
            Ok(b) => out.push(PlacementCandidate::new(b, Origin::Sampled)),
            Err(_) => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "image {}: {dropped} of {n} candidate boxes did not fit after {SAMPLE_TRIES} tries",
            image.image_id
        );
    }
    out
}

/// `b` with its center shifted by up to half a side and each side scaled
/// by a factor in [0.9, 1.1], clipped to the image.
pub fn neighbor_box<R: Rng + ?Sized>(b: &BBox, image_w: u32, image_h: u32, rng: &mut R) -> Option<BBox> {
    let dx = rng.random_range(-NEIGHBOR_SHIFT..=NEIGHBOR_SHIFT) * b.width();
    let dy = rng.random_range(-NEIGHBOR_SHIFT..=NEIGHBOR_SHIFT) * b.height();
    let sw = rng.random_range(1.0 - NEIGHBOR_SIZE_JITTER..=1.0 + NEIGHBOR_SIZE_JITTER);
    let sh = rng.random_range(1.0 - NEIGHBOR_SIZE_JITTER..=1.0 + NEIGHBOR_SIZE_JITTER);
    let (cx, cy) = b.center();
    BBox::from_center(cx + dx, cy + dy, b.width() * sw, b.height() * sh)
        .ok()?
        .clip(image_w, image_h)
        .filter(BBox::is_valid)
}

/// Marks each scored candidate whose best non-background class scores
/// strictly above `threshold`.
pub fn mark_selected(candidates: &mut [PlacementCandidate], threshold: f64) {
    for c in candidates {
        c.selected_class = c.scores.as_ref().and_then(|s| {
            let (class, score) = s.best_class();
            (score > threshold).then_some(class)
        });
    }
}

/// Indices of selected candidates by descending selected-class score, ties
/// by index.
pub fn rank(candidates: &[PlacementCandidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].selected_class.is_some())
        .collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (candidates[a].selected_score(), candidates[b].selected_score());
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

/// Walks `order` keeping boxes that overlap no kept box with IoU ≥ 0.3,
/// until `max` are kept. `accept` may still refuse a box (for instance
/// when no cut-out fits it); the walk then moves on.
pub fn greedy_non_overlapping<T>(
    boxes: impl Fn(usize) -> BBox,
    order: &[usize],
    max: usize,
    mut accept: impl FnMut(usize) -> Result<Option<T>>,
) -> Result<Vec<T>> {
    let mut kept_boxes: Vec<BBox> = Vec::new();
    let mut kept = Vec::new();
    for &i in order {
        if kept.len() >= max {
            break;
        }
        let b = boxes(i);
        if kept_boxes.iter().any(|k| iou(k, &b) >= MAX_OVERLAP_IOU) {
            continue;
        }
        if let Some(t) = accept(i)? {
            kept_boxes.push(b);
            kept.push(t);
        }
    }
    Ok(kept)
}

/// Scores every candidate (mean over `variants` contextual images), marks
/// the ones above `threshold`, and returns up to `max_placements` mutually
/// non-overlapping selections in rank order.
pub fn select<R: Rng + ?Sized>(
    image: &AnnotatedImage,
    candidates: &mut [PlacementCandidate],
    gateway: &Gateway,
    threshold: f64,
    variants: usize,
    max_placements: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    score_candidates(image, candidates, gateway, variants, rng)?;
    mark_selected(candidates, threshold);
    let order = rank(candidates);
    greedy_non_overlapping(|i| candidates[i].bbox, &order, max_placements, |i| Ok(Some(i)))
}

pub fn score_candidates<R: Rng + ?Sized>(
    image: &AnnotatedImage,
    candidates: &mut [PlacementCandidate],
    gateway: &Gateway,
    variants: usize,
    rng: &mut R,
) -> Result<()> {
    let boxes: Vec<BBox> = candidates.iter().map(|c| c.bbox).collect();
    let scores = gateway.averaged_scores(image, &boxes, variants, rng)?;
    for (c, s) in candidates.iter_mut().zip(scores) {
        c.scores = Some(s);
    }
    Ok(())
}

/// A candidate to try, with the class to paste into it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub candidate: usize,
    pub class_id: ClassId,
    pub score: Option<f64>,
}

/// Decides which candidates to try, in order, and with which class. The
/// caller enforces the overlap rule and the placement cap while matching.
pub trait CandidateSelector: Send + Sync {
    /// Number of sampled candidates to propose.
    fn candidate_count(&self) -> usize;

    /// Whether neighbor candidates are added.
    fn wants_neighbors(&self) -> bool;

    fn choose(
        &self,
        image: &AnnotatedImage,
        candidates: &mut [PlacementCandidate],
        seed: u64,
    ) -> Result<Vec<Choice>>;
}

/// Scores candidates through the gateway.
pub struct ContextSelector {
    pub gateway: Gateway,
    pub candidates: usize,
    pub threshold: f64,
    pub variants: usize,
}

impl ContextSelector {
    pub fn new(gateway: Gateway) -> Self {
        ContextSelector {
            gateway,
            candidates: DEFAULT_CANDIDATES,
            threshold: DEFAULT_THRESHOLD,
            variants: DEFAULT_VARIANTS,
        }
    }
}

impl CandidateSelector for ContextSelector {
    fn candidate_count(&self) -> usize {
        self.candidates
    }

    fn wants_neighbors(&self) -> bool {
        true
    }

    fn choose(
        &self,
        image: &AnnotatedImage,
        candidates: &mut [PlacementCandidate],
        seed: u64,
    ) -> Result<Vec<Choice>> {
        let mut r = rng::stream(seed, &image.image_id, rng::purpose::SCORE);
        score_candidates(image, candidates, &self.gateway, self.variants, &mut r)?;
        mark_selected(candidates, self.threshold);
        Ok(rank(candidates)
            .into_iter()
            .map(|i| Choice {
                candidate: i,
                class_id: candidates[i].selected_class.expect("ranked"),
                score: candidates[i].selected_score(),
            })
            .collect())
    }
}

/// Baseline without a scorer: the first `count` sampled candidates, each
/// with a class drawn uniformly from `classes`.
pub struct RandomSelector {
    pub classes: Vec<ClassId>,
    pub count: usize,
    /// Candidates to propose; only the first `count` sampled ones are used.
    pub proposals: usize,
    pub neighbors: bool,
}

impl RandomSelector {
    pub fn new(classes: Vec<ClassId>, count: usize) -> Self {
        RandomSelector {
            classes,
            count,
            proposals: count,
            neighbors: false,
        }
    }
}

impl CandidateSelector for RandomSelector {
    fn candidate_count(&self) -> usize {
        self.proposals
    }

    fn wants_neighbors(&self) -> bool {
        self.neighbors
    }

    fn choose(
        &self,
        image: &AnnotatedImage,
        candidates: &mut [PlacementCandidate],
        seed: u64,
    ) -> Result<Vec<Choice>> {
        if self.classes.is_empty() {
            return Ok(Vec::new());
        }
        let mut r = rng::stream(seed, &image.image_id, rng::purpose::CLASS);
        Ok(candidates
            .iter_mut()
            .enumerate()
            .filter(|(_, c)| c.origin == Origin::Sampled)
            .take(self.count)
            .map(|(i, c)| {
                let class_id = self.classes[r.random_range(0..self.classes.len())];
                c.selected_class = Some(class_id);
                Choice {
                    candidate: i,
                    class_id,
                    score: None,
                }
            })
            .collect())
    }
}

/// Per-image candidate dump, as written by `--dump-candidates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDump {
    pub image_id: String,
    pub candidates: Vec<PlacementCandidate>,
    /// Indices of candidates that received a paste.
    pub placed: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObjectAnnotation;
    use crate::scorer::{FnScorer, ScriptedScorer};
    use crate::shape_model::ShapeHistogram;
    use crate::geometry::ShapeParams;
    use image::RgbImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn image(objects: Vec<ObjectAnnotation>) -> AnnotatedImage {
        AnnotatedImage {
            image_id: "img".into(),
            pixels: RgbImage::new(200, 150),
            objects,
            semantic_map: None,
            source: Default::default(),
        }
    }

    fn hist() -> ShapeHistogram {
        let shapes: Vec<ShapeParams> = (1..=20)
            .map(|i| ShapeParams {
                scale: 0.05 * i as f64,
                aspect: 0.5 + 0.1 * i as f64,
            })
            .collect();
        ShapeHistogram::from_shapes(&shapes).unwrap()
    }

    fn scored(bbox: BBox, scores: Vec<f64>) -> PlacementCandidate {
        PlacementCandidate {
            bbox,
            origin: Origin::Sampled,
            scores: Some(ScoreVector::new(scores).unwrap()),
            selected_class: None,
        }
    }

    #[test]
    fn proposal_counts() {
        let h = hist();
        let s = h.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = propose(&image(vec![]), &s, 200, &mut rng);
        assert_eq!(c.len(), 200);
        assert!(c.iter().all(|c| c.origin == Origin::Sampled));

        let objs = vec![
            ObjectAnnotation::from_box(1, bx(10., 10., 50., 60.)),
            ObjectAnnotation::from_box(2, bx(100., 20., 190., 140.)),
            ObjectAnnotation::from_box(1, bx(0., 100., 30., 150.)),
        ];
        let c = propose(&image(objs), &s, 200, &mut rng);
        let sampled = c.iter().filter(|c| c.origin == Origin::Sampled).count();
        assert_eq!(sampled, 200);
        assert!(c.len() > 200 && c.len() <= 206);
        assert!(c.iter().all(|c| c.bbox.fits_in(200, 150) && c.bbox.is_valid()));
    }

    #[test]
    fn neighbor_jitter_law() {
        let b = bx(40., 40., 80., 60.);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let n = neighbor_box(&b, 1000, 1000, &mut rng).unwrap();
            let (cx, cy) = n.center();
            assert!((cx - 60.0).abs() <= 20.0 + 1e-9 && (cy - 50.0).abs() <= 10.0 + 1e-9);
            assert!((36.0 - 1e-9..=44.0 + 1e-9).contains(&n.width()));
            assert!((18.0 - 1e-9..=22.0 + 1e-9).contains(&n.height()));
        }
    }

    #[test]
    fn strict_threshold() {
        let mut c = vec![
            scored(bx(0., 0., 10., 10.), vec![0.29, 0.0, 0.0, 0.0, 0.0, 0.71]),
            scored(bx(50., 50., 60., 60.), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        mark_selected(&mut c, 0.7);
        assert_eq!(c[0].selected_class, Some(5));
        assert_eq!(c[1].selected_class, None);

        let mut c = vec![scored(bx(0., 0., 10., 10.), vec![0.3, 0.7]); 5];
        mark_selected(&mut c, 0.7);
        assert!(rank(&c).is_empty());
    }

    fn best_pair_by_brute_force(c: &[PlacementCandidate]) -> Vec<usize> {
        let sel: Vec<usize> = (0..c.len()).filter(|&i| c[i].selected_class.is_some()).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                if iou(&c[i].bbox, &c[j].bbox) >= MAX_OVERLAP_IOU {
                    continue;
                }
                let s = c[i].selected_score().unwrap() + c[j].selected_score().unwrap();
                if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                    best = Some((s, vec![i, j]));
                }
            }
        }
        best.map(|b| b.1).unwrap_or_default()
    }

    #[test]
    fn top_two_non_overlapping() {
        let mut c = vec![
            scored(bx(0., 0., 40., 40.), vec![0.1, 0.9, 0.0]),
            scored(bx(2., 2., 42., 42.), vec![0.05, 0.0, 0.95]),
            scored(bx(100., 0., 140., 40.), vec![0.2, 0.8, 0.0]),
            scored(bx(100., 60., 140., 100.), vec![0.25, 0.75, 0.0]),
            scored(bx(5., 0., 45., 40.), vec![0.12, 0.88, 0.0]),
            scored(bx(150., 100., 190., 140.), vec![0.5, 0.5, 0.0]),
        ];
        mark_selected(&mut c, 0.7);
        assert_eq!(c.iter().filter(|c| c.selected_class.is_some()).count(), 5);
        let order = rank(&c);
        let kept = greedy_non_overlapping(|i| c[i].bbox, &order, 2, |i| Ok(Some(i))).unwrap();
        assert_eq!(kept, vec![1, 2]);
        let mut brute = best_pair_by_brute_force(&c);
        brute.sort();
        assert_eq!(kept, brute);
    }

    #[test]
    fn ties_break_by_index() {
        let mut c = vec![
            scored(bx(0., 0., 10., 10.), vec![0.2, 0.8]),
            scored(bx(20., 0., 30., 10.), vec![0.2, 0.8]),
            scored(bx(40., 0., 50., 10.), vec![0.2, 0.8]),
        ];
        mark_selected(&mut c, 0.7);
        assert_eq!(rank(&c), vec![0, 1, 2]);
    }

    #[test]
    fn selection_through_gateway() {
        let im = image(vec![]);
        let h = hist();
        let s = h.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cands = propose(&im, &s, 200, &mut rng);
        let target = cands[17].bbox;
        let scorer = FnScorer::new(5, move |c| {
            if c.source_box == target {
                ScoreVector::new(vec![0.29, 0.0, 0.0, 0.0, 0.0, 0.71]).unwrap()
            } else {
                ScoreVector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()
            }
        });
        let g = Gateway::new(Arc::new(scorer));
        let kept = select(&im, &mut cands, &g, 0.7, 3, 2, &mut rng).unwrap();
        assert_eq!(kept, vec![17]);
        assert_eq!(cands[17].selected_class, Some(5));

        let flat = Gateway::new(Arc::new(ScriptedScorer::new(vec![
            ScoreVector::new(vec![0.3, 0.7]).unwrap(),
        ])));
        let mut cands = propose(&im, &s, 200, &mut rng);
        assert!(select(&im, &mut cands, &flat, 0.7, 3, 2, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn random_selector_takes_first_sampled() {
        let im = image(vec![ObjectAnnotation::from_box(1, bx(10., 10., 50., 60.))]);
        let h = hist();
        let s = h.sampler().unwrap();
        let mut cands = propose(&im, &s, 10, &mut ChaCha8Rng::seed_from_u64(0));
        let sel = RandomSelector::new(vec![1, 2, 3], 2);
        let ch = sel.choose(&im, &mut cands, 7).unwrap();
        assert_eq!(ch.iter().map(|c| c.candidate).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(ch, sel.choose(&im, &mut cands, 7).unwrap());
    }
}
