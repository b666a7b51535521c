//! End-to-end augmentation, contextual-set export, statistics and previews.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::apply_paste;
use crate::blend::{blend, enlarge_reblend, BlendMode, BlendSpec};
use crate::context::{training_samples_with, write_export, ContextualImage, TrainingSetOptions};
use crate::dataset::{
    write_dataset, AnnotatedImage, ClassId, Dataset, Format, ImageRecord, Manifest,
    ObjectAnnotation, PasteRecord,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::instance_db::{InstanceDatabase, DEFAULT_MIN_PIXELS};
use crate::placement::{
    greedy_non_overlapping, propose, sample_candidates, CandidateDump, CandidateSelector,
    ContextSelector, RandomSelector, DEFAULT_CANDIDATES, DEFAULT_MAX_PLACEMENTS,
    DEFAULT_THRESHOLD,
};
use crate::raster::Mask;
use crate::rng;
use crate::scorer::{Gateway, Scorer, ScorerSpec, DEFAULT_VARIANTS};
use crate::shape_model::ShapeHistogram;
use crate::weak::weak_database;

/// Suffix appended to the id of an augmented copy.
pub const AUGMENTED_SUFFIX: &str = "_aug";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Context,
    Random,
    Enlarge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    LinearDecay,
}

/// Where cut-outs come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    /// Instance masks when the dataset has any, else semantic maps.
    #[default]
    Auto,
    Masks,
    Weak,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One export over the whole dataset.
    #[default]
    SmallData,
    /// Two exports with per-class balanced positives.
    NormalData,
}

macro_rules! parse_snake {
    ($t:ty, $what:literal) => {
        impl std::str::FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
                    .map_err(|_| Error::Config(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

parse_snake!(Mode, "mode");
parse_snake!(Schedule, "schedule");
parse_snake!(InstanceSource, "instance source");
parse_snake!(Regime, "regime");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mode: Mode,
    pub paste_probability: f64,
    pub schedule: Schedule,
    pub max_placements: usize,
    pub threshold: f64,
    pub variants: usize,
    pub candidates: usize,
    pub bg_ratio: usize,
    pub seed: u64,
    pub scorer: Option<String>,
    pub scorer_timeout_secs: u64,
    pub format_in: Option<Format>,
    pub format_out: Option<Format>,
    pub min_pixels: u64,
    pub instances: InstanceSource,
    pub regime: Regime,
    pub backgrounds_per_empty_image: usize,
    /// 0 uses every core. Does not affect the output.
    pub workers: usize,
    /// Directory for per-image candidate dumps. Does not affect the output.
    pub dump_candidates: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mode: Mode::Context,
            paste_probability: 0.5,
            schedule: Schedule::Constant,
            max_placements: DEFAULT_MAX_PLACEMENTS,
            threshold: DEFAULT_THRESHOLD,
            variants: DEFAULT_VARIANTS,
            candidates: DEFAULT_CANDIDATES,
            bg_ratio: crate::context::DEFAULT_BG_RATIO,
            seed: 0,
            scorer: None,
            scorer_timeout_secs: 30,
            format_in: None,
            format_out: None,
            min_pixels: DEFAULT_MIN_PIXELS,
            instances: InstanceSource::Auto,
            regime: Regime::SmallData,
            backgrounds_per_empty_image: 0,
            workers: 0,
            dump_candidates: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.paste_probability) {
            return bad(format!("paste_probability {} outside [0, 1]", self.paste_probability));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.max_placements == 0 {
            return bad("max_placements must be at least 1".into());
        }
        if self.variants == 0 {
            return bad("variants must be at least 1".into());
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if let Some(s) = &self.scorer {
            s.parse::<ScorerSpec>()?;
        }
        Ok(())
    }

    /// Hash of every setting that can change the output.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.dump_candidates = None;
        let text = serde_json::to_string(&c).expect("serializable");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Paste probability of the image at `index` out of `count`.
    pub fn probability(&self, index: usize, count: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.paste_probability,
            Schedule::LinearDecay => {
                let t = if count == 0 { 0.0 } else { index as f64 / count as f64 };
                self.paste_probability * (1.0 - t)
            }
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.scorer_timeout_secs)
    }
}

/// Shape model, cut-out database, and placement policy for one run.
pub struct Engine {
    pub config: AugmentConfig,
    hist: Option<ShapeHistogram>,
    db: Option<InstanceDatabase>,
    selector: Option<Box<dyn CandidateSelector>>,
}

pub struct ImageOutcome {
    pub record: ImageRecord,
    pub augmented: Option<AnnotatedImage>,
    pub dump: Option<CandidateDump>,
}

pub struct AugmentOutput {
    pub dataset: Dataset,
    pub manifest: Manifest,
    pub dumps: Vec<CandidateDump>,
}

pub fn build_database(dataset: &Dataset, config: &AugmentConfig) -> Result<InstanceDatabase> {
    let has_masks = dataset
        .images
        .iter()
        .flat_map(|i| &i.objects)
        .any(|o| o.mask.is_some());
    let has_maps = dataset.images.iter().any(|i| i.semantic_map.is_some());
    match config.instances {
        InstanceSource::Masks => InstanceDatabase::build(dataset, config.min_pixels),
        InstanceSource::Weak if has_maps => Ok(weak_database(dataset, config.seed, config.min_pixels)),
        InstanceSource::Auto if has_masks => InstanceDatabase::build(dataset, config.min_pixels),
        InstanceSource::Auto if has_maps => Ok(weak_database(dataset, config.seed, config.min_pixels)),
        _ => Err(Error::MissingMasks),
    }
}

/// Instantiates the configured scorer for context mode; `None` otherwise.
pub fn connect_scorer(config: &AugmentConfig, dataset: &Dataset) -> Result<Option<Arc<dyn Scorer>>> {
    if config.mode != Mode::Context {
        return Ok(None);
    }
    let spec: ScorerSpec = config
        .scorer
        .as_deref()
        .ok_or_else(|| Error::Config("context mode needs a scorer".into()))?
        .parse()?;
    spec.connect(dataset, config.timeout()).map(Some)
}

impl Engine {
    /// Fits the shape model and builds the cut-out database as the mode
    /// requires. Context mode needs `scorer`.
    pub fn prepare(config: AugmentConfig, dataset: &Dataset, scorer: Option<Arc<dyn Scorer>>) -> Result<Self> {
        config.validate()?;
        if config.mode == Mode::Enlarge {
            return Ok(Engine {
                config,
                hist: None,
                db: None,
                selector: None,
            });
        }
        let hist = ShapeHistogram::fit(dataset)?;
        let db = build_database(dataset, &config)?;
        let selector: Box<dyn CandidateSelector> = match config.mode {
            Mode::Context => {
                let scorer = scorer.ok_or_else(|| Error::Config("context mode needs a scorer".into()))?;
                Box::new(ContextSelector {
                    gateway: Gateway::new(scorer),
                    candidates: config.candidates,
                    threshold: config.threshold,
                    variants: config.variants,
                })
            }
            _ => Box::new(RandomSelector::new(db.classes(), config.max_placements)),
        };
        Ok(Engine {
            config,
            hist: Some(hist),
            db: Some(db),
            selector: Some(selector),
        })
    }

    /// Replaces the candidate selector; everything else stays as prepared.
    pub fn with_selector(mut self, selector: Box<dyn CandidateSelector>) -> Self {
        self.selector = Some(selector);
        self
    }

    pub fn database(&self) -> Option<&InstanceDatabase> {
        self.db.as_ref()
    }

    pub fn histogram(&self) -> Option<&ShapeHistogram> {
        self.hist.as_ref()
    }

    /// Augments every image on a pool of `config.workers` threads. Output
    /// order and content do not depend on the worker count.
    pub fn run(&self, dataset: &Dataset) -> Result<AugmentOutput> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = dataset.images.len();
        let outcomes = pool.install(|| {
            dataset
                .images
                .par_iter()
                .enumerate()
                .map(|(i, im)| self.augment_image(i, n, im))
                .collect::<Vec<_>>()
        });
        let mut images = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        let mut dumps = Vec::new();
        for (im, outcome) in dataset.images.iter().zip(outcomes) {
            let o = outcome?;
            images.push(im.clone());
            if let Some(a) = o.augmented {
                images.push(a);
            }
            records.push(o.record);
            dumps.extend(o.dump);
        }
        let manifest = Manifest {
            seed: Some(self.config.seed),
            config_hash: Some(self.config.hash()),
            images: records,
            ..Manifest::default()
        };
        Ok(AugmentOutput {
            dataset: Dataset {
                images,
                categories: dataset.categories.clone(),
            },
            manifest,
            dumps,
        })
    }

    /// Decides whether to augment image `index` of `count` and, if so,
    /// produces the augmented copy.
    pub fn augment_image(&self, index: usize, count: usize, image: &AnnotatedImage) -> Result<ImageOutcome> {
        let p = self.config.probability(index, count);
        let mut decide = rng::stream(self.config.seed, &image.image_id, rng::purpose::DECIDE);
        let mut record = ImageRecord {
            image_id: image.image_id.clone(),
            augmented: false,
            probability: p,
            note: None,
            pastes: Vec::new(),
        };
        if decide.random::<f64>() >= p {
            return Ok(ImageOutcome {
                record,
                augmented: None,
                dump: None,
            });
        }
        let mut out = image.clone();
        out.image_id = format!("{}{AUGMENTED_SUFFIX}", image.image_id);
        let (pastes, dump) = match self.config.mode {
            Mode::Enlarge => (self.enlarge(&mut out, &image.image_id)?, None),
            _ => {
                let (pastes, dump) = self.paste_into(image, &mut out)?;
                (pastes, Some(dump))
            }
        };
        if pastes.is_empty() {
            log::debug!("image {}: nothing pasted", image.image_id);
            record.note = Some(match self.config.mode {
                Mode::Enlarge => "no enlargeable object".into(),
                _ => "no matched candidate".into(),
            });
            return Ok(ImageOutcome {
                record,
                augmented: None,
                dump,
            });
        }
        record.augmented = true;
        record.pastes = pastes;
        Ok(ImageOutcome {
            record,
            augmented: Some(out),
            dump,
        })
    }

    fn paste_into(&self, image: &AnnotatedImage, out: &mut AnnotatedImage) -> Result<(Vec<PasteRecord>, CandidateDump)> {
        let hist = self.hist.as_ref().expect("prepared");
        let db = self.db.as_ref().expect("prepared");
        let selector = self.selector.as_ref().expect("prepared");
        let seed = self.config.seed;
        let id = &image.image_id;

        let sampler = hist.sampler()?;
        let mut propose_rng = rng::stream(seed, id, rng::purpose::PROPOSE);
        let mut candidates = if selector.wants_neighbors() {
            propose(image, &sampler, selector.candidate_count(), &mut propose_rng)
        } else {
            sample_candidates(image, &sampler, selector.candidate_count(), &mut propose_rng)
        };
        let choices = selector.choose(image, &mut candidates, seed)?;

        let mut match_rng = rng::stream(seed, id, rng::purpose::MATCH);
        let mut blend_rng = rng::stream(seed, id, rng::purpose::BLEND);
        let order: Vec<usize> = (0..choices.len()).collect();
        let placed = greedy_non_overlapping(
            |k| candidates[choices[k].candidate].bbox,
            &order,
            self.config.max_placements,
            |k| {
                let ch = choices[k];
                let b = candidates[ch.candidate].bbox;
                let m = match db.match_candidate(&b, ch.class_id, &mut match_rng) {
                    Ok(m) => m,
                    Err(Error::NoMatch) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let cutout = db.get(m.cutout);
                let mode = BlendMode::random(&mut blend_rng);
                let spec = BlendSpec::centered(cutout, &b, m.scale, mode)?;
                let (pixels, pasted) = blend(&out.pixels, cutout, &spec, &mut blend_rng)?;
                let Some(pasted_box) = pasted.tight_box() else {
                    return Ok(None);
                };
                out.pixels = pixels;
                paint_semantic(out, &pasted, ch.class_id);
                apply_paste(&mut out.objects, &pasted, ch.class_id)?;
                Ok(Some((
                    ch.candidate,
                    PasteRecord {
                        class_id: ch.class_id,
                        placement_box: b,
                        pasted_box,
                        blend: mode.as_str().to_string(),
                        scale: m.scale,
                        source_image_id: cutout.source_image_id.clone(),
                        score: ch.score,
                    },
                )))
            },
        )?;
        let dump = CandidateDump {
            image_id: id.clone(),
            candidates,
            placed: placed.iter().map(|(i, _)| *i).collect(),
        };
        Ok((placed.into_iter().map(|(_, r)| r).collect(), dump))
    }

    fn enlarge(&self, out: &mut AnnotatedImage, source_id: &str) -> Result<Vec<PasteRecord>> {
        let mut r = rng::stream(self.config.seed, source_id, rng::purpose::ENLARGE);
        let mut eligible: Vec<ObjectAnnotation> = out
            .objects
            .iter()
            .filter(|o| o.mask.is_some() && !o.is_crowd && !o.is_synthetic)
            .cloned()
            .collect();
        eligible.shuffle(&mut r);
        eligible.truncate(self.config.max_placements);
        let mut pastes = Vec::new();
        for obj in eligible {
            // an earlier enlargement may have covered or trimmed this one
            let Some(pos) = out.objects.iter().position(|o| *o == obj) else {
                continue;
            };
            let e = enlarge_reblend(&out.pixels, &obj, &mut r)?;
            let Some(pasted_box) = e.pasted_mask.tight_box() else {
                continue;
            };
            out.objects.remove(pos);
            out.pixels = e.pixels;
            paint_semantic(out, &e.pasted_mask, obj.class_id);
            apply_paste(&mut out.objects, &e.pasted_mask, obj.class_id)?;
            pastes.push(PasteRecord {
                class_id: obj.class_id,
                placement_box: obj.bbox,
                pasted_box,
                blend: e.params.mode.as_str().to_string(),
                scale: e.params.factor,
                source_image_id: source_id.to_string(),
                score: None,
            });
        }
        Ok(pastes)
    }
}

fn paint_semantic(image: &mut AnnotatedImage, pasted: &Mask, class_id: ClassId) {
    if let Some(map) = &mut image.semantic_map {
        for y in 0..pasted.height() {
            for x in 0..pasted.width() {
                if pasted.get(x, y) {
                    map.set(x, y, class_id as u8);
                }
            }
        }
    }
}

/// Prepares an engine with the configured scorer and augments `dataset`.
pub fn augment_dataset(config: &AugmentConfig, dataset: &Dataset) -> Result<AugmentOutput> {
    let scorer = connect_scorer(config, dataset)?;
    Engine::prepare(config.clone(), dataset, scorer)?.run(dataset)
}

fn partial_dir(out_dir: &Path) -> PathBuf {
    let name = out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out_dir.with_file_name(format!(".{name}.partial"))
}

fn ensure_empty_target(out_dir: &Path) -> Result<()> {
    if out_dir.exists() {
        let mut entries = std::fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                out_dir.display()
            )));
        }
        std::fs::remove_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    Ok(())
}

/// Runs `write` into a scratch directory next to `out_dir` and moves it
/// into place on success; the scratch directory is removed on failure.
pub fn write_atomically<T>(out_dir: &Path, write: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    ensure_empty_target(out_dir)?;
    let tmp = partial_dir(out_dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    match write(&tmp) {
        Ok(v) => {
            std::fs::rename(&tmp, out_dir).map_err(|e| Error::io(out_dir, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn dump_file_name(image_id: &str) -> String {
    let stem: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{stem}.json")
}

pub fn write_dumps(dumps: &[CandidateDump], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in dumps {
        let p = dir.join(dump_file_name(&d.image_id));
        let text = serde_json::to_string_pretty(d).expect("serializable");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Loads `input`, augments it, and writes the result to `out_dir`. Nothing
/// is left behind at `out_dir` if any step fails.
pub fn augment_dir(
    config: &AugmentConfig,
    input: &Path,
    out_dir: &Path,
    scorer: Option<Arc<dyn Scorer>>,
) -> Result<Manifest> {
    let format_in = config
        .format_in
        .ok_or_else(|| Error::Config("input format not set".into()))?;
    let format_out = config.format_out.unwrap_or(format_in);
    let dataset = crate::dataset::load_dir(format_in, input)?;
    let scorer = match scorer {
        Some(s) => Some(s),
        None => connect_scorer(config, &dataset)?,
    };
    let engine = Engine::prepare(config.clone(), &dataset, scorer)?;
    let output = engine.run(&dataset)?;
    let manifest = write_atomically(out_dir, |tmp| {
        write_dataset(&output.dataset, format_out, tmp, output.manifest.clone())
    })?;
    if let Some(dir) = &config.dump_candidates {
        write_dumps(&output.dumps, dir)?;
    }
    Ok(manifest)
}

/// Positives per split: `splits[s][image]` lists the object indices that
/// go to split `s`. Each class is shuffled and dealt alternately, starting
/// with the split that has fewer positives so far.
pub fn split_positives(dataset: &Dataset, seed: u64) -> [Vec<Vec<usize>>; 2] {
    let n = dataset.images.len();
    let mut splits = [vec![Vec::new(); n], vec![Vec::new(); n]];
    let mut totals = [0usize; 2];
    for class in 1..=dataset.num_classes() as ClassId {
        let mut members: Vec<(usize, usize)> = dataset
            .images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| {
                im.objects
                    .iter()
                    .enumerate()
                    .filter(move |(_, o)| o.class_id == class && !o.is_crowd)
                    .map(move |(j, _)| (i, j))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            log::warn!(
                "class {} has a single positive; it goes wholly to one split",
                dataset.categories.name(class)
            );
        }
        let mut r = rng::stream(seed, &format!("class-{class}"), rng::purpose::SPLIT);
        members.shuffle(&mut r);
        let first = if totals[1] < totals[0] { 1 } else { 0 };
        for (k, (i, j)) in members.into_iter().enumerate() {
            let s = (first + k) % 2;
            splits[s][i].push(j);
            totals[s] += 1;
        }
    }
    for s in &mut splits {
        for v in s.iter_mut() {
            v.sort_unstable();
        }
    }
    splits
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub positives: usize,
    pub backgrounds: usize,
    /// Positives per class id (index 0 unused).
    pub per_class: Vec<usize>,
}

const EXPORT_CHUNK: usize = 32;

fn export_one(
    dataset: &Dataset,
    hist: &ShapeHistogram,
    opts: &TrainingSetOptions,
    positives: &[Vec<usize>],
    stream_index: Option<u64>,
    seed: u64,
    dir: &Path,
) -> Result<ExportSummary> {
    let sampler = hist.sampler()?;
    let mut summary = ExportSummary {
        dir: dir.to_path_buf(),
        per_class: vec![0; dataset.num_classes() + 1],
        ..Default::default()
    };
    let make = |i: usize| -> Vec<ContextualImage> {
        let im = &dataset.images[i];
        let mut r = match stream_index {
            None => rng::stream(seed, &im.image_id, rng::purpose::CONTEXT),
            Some(k) => rng::substream(seed, &im.image_id, rng::purpose::CONTEXT, k),
        };
        training_samples_with(im, &sampler, opts, &positives[i], &mut r)
    };
    let indices: Vec<usize> = (0..dataset.images.len()).collect();
    let samples = indices.chunks(EXPORT_CHUNK).flat_map(|chunk| {
        chunk
            .par_iter()
            .map(|&i| make(i))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
    });
    let counted = samples.inspect(|s| match s.label {
        Some(0) | None => summary.backgrounds += 1,
        Some(c) => {
            summary.positives += 1;
            summary.per_class[c as usize] += 1;
        }
    });
    write_export(counted, dir)?;
    Ok(summary)
}

/// Writes contextual training images. The small-data regime writes one
/// set to `out_dir`; the normal-data regime writes `split_a/` and
/// `split_b/` with per-class positive counts that differ by at most one.
pub fn export_context_set(config: &AugmentConfig, dataset: &Dataset, out_dir: &Path) -> Result<Vec<ExportSummary>> {
    config.validate()?;
    let hist = ShapeHistogram::fit(dataset)?;
    let opts = TrainingSetOptions {
        bg_ratio: config.bg_ratio,
        backgrounds_per_empty_image: config.backgrounds_per_empty_image,
        render: true,
    };
    write_atomically(out_dir, |tmp| match config.regime {
        Regime::SmallData => {
            let all: Vec<Vec<usize>> = dataset
                .images
                .iter()
                .map(|im| (0..im.objects.len()).filter(|&j| !im.objects[j].is_crowd).collect())
                .collect();
            let mut s = export_one(dataset, &hist, &opts, &all, None, config.seed, tmp)?;
            s.dir = out_dir.to_path_buf();
            Ok(vec![s])
        }
        Regime::NormalData => {
            let splits = split_positives(dataset, config.seed);
            let no_empty = TrainingSetOptions {
                backgrounds_per_empty_image: 0,
                ..opts
            };
            let mut out = Vec::new();
            for (k, (name, positives)) in ["split_a", "split_b"].iter().zip(&splits).enumerate() {
                // empty images contribute backgrounds to the first split only
                let o = if k == 0 { &opts } else { &no_empty };
                let mut s = export_one(dataset, &hist, o, positives, Some(k as u64 + 1), config.seed, &tmp.join(name))?;
                s.dir = out_dir.join(name);
                out.push(s);
            }
            Ok(out)
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub id: ClassId,
    pub name: String,
    pub instances: usize,
    pub synthetic: usize,
    pub with_mask: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub images: usize,
    pub instances: usize,
    pub synthetic: usize,
    pub classes: Vec<ClassStats>,
    /// Shape-histogram counts, `[scale bin][aspect bin]`; absent without boxes.
    pub shape_counts: Option<Vec<Vec<u64>>>,
    pub scale_edges: Option<Vec<f64>>,
    pub aspect_edges: Option<Vec<f64>>,
}

pub fn stats(dataset: &Dataset) -> StatsReport {
    let mut classes: Vec<ClassStats> = dataset
        .categories
        .categories
        .iter()
        .map(|c| ClassStats {
            id: c.id,
            name: c.name.clone(),
            ..Default::default()
        })
        .collect();
    let mut report = StatsReport {
        images: dataset.images.len(),
        ..Default::default()
    };
    for o in dataset.images.iter().flat_map(|i| &i.objects) {
        report.instances += 1;
        report.synthetic += o.is_synthetic as usize;
        if let Some(c) = (o.class_id as usize).checked_sub(1).and_then(|i| classes.get_mut(i)) {
            c.instances += 1;
            c.synthetic += o.is_synthetic as usize;
            c.with_mask += o.mask.is_some() as usize;
        }
    }
    report.classes = classes;
    if let Ok(h) = ShapeHistogram::fit(dataset) {
        report.shape_counts = Some(h.counts.clone());
        report.scale_edges = Some(h.scale_edges.clone());
        report.aspect_edges = Some(h.aspect_edges.clone());
    }
    report
}

pub struct PreviewOutput {
    pub side_by_side: PathBuf,
    pub overlay: PathBuf,
    pub dump: Option<CandidateDump>,
    pub augmented: bool,
}

/// Augments one image exactly as a full run would and writes
/// `<id>_side_by_side.png`, `<id>_candidates.png` and, when candidates were
/// proposed, `<id>_candidates.json` into `out_dir`.
pub fn preview(engine: &Engine, dataset: &Dataset, image_id: &str, out_dir: &Path) -> Result<PreviewOutput> {
    let index = dataset
        .images
        .iter()
        .position(|i| i.image_id == image_id)
        .ok_or_else(|| Error::NotFound(format!("image {image_id}")))?;
    let original = &dataset.images[index];
    let outcome = engine.augment_image(index, dataset.images.len(), original)?;
    let after = outcome.augmented.as_ref().unwrap_or(original);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = dump_file_name(image_id).trim_end_matches(".json").to_string();

    let (w, h) = original.pixels.dimensions();
    let mut side = RgbImage::from_pixel(2 * w, h, Rgb([0, 0, 0]));
    image::imageops::replace(&mut side, &original.pixels, 0, 0);
    image::imageops::replace(&mut side, &after.pixels, w as i64, 0);
    let side_path = out_dir.join(format!("{stem}_side_by_side.png"));
    crate::dataset::write_rgb_png(&side, &side_path)?;

    let overlay = match &outcome.dump {
        Some(d) => draw_candidates(&original.pixels, d),
        None => original.pixels.clone(),
    };
    let overlay_path = out_dir.join(format!("{stem}_candidates.png"));
    crate::dataset::write_rgb_png(&overlay, &overlay_path)?;
    if let Some(d) = &outcome.dump {
        write_dumps(std::slice::from_ref(d), out_dir)?;
        let from = out_dir.join(dump_file_name(&d.image_id));
        let to = out_dir.join(format!("{stem}_candidates.json"));
        std::fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(PreviewOutput {
        side_by_side: side_path,
        overlay: overlay_path,
        augmented: outcome.augmented.is_some(),
        dump: outcome.dump,
    })
}

/// Color of a candidate outline: green when pasted into, yellow when above
/// threshold, otherwise red scaled by the best class score.
pub fn candidate_color(dump: &CandidateDump, index: usize) -> Rgb<u8> {
    let c = &dump.candidates[index];
    if dump.placed.contains(&index) {
        return Rgb([0, 255, 0]);
    }
    if c.selected_class.is_some() {
        return Rgb([255, 255, 0]);
    }
    let s = c.scores.as_ref().map_or(0.0, |s| s.best_class().1);
    Rgb([(64.0 + 191.0 * s).round() as u8, 0, 0])
}

/// Outlines every candidate of `dump` on a copy of `pixels`; pasted and
/// selected candidates are drawn last.
pub fn draw_candidates(pixels: &RgbImage, dump: &CandidateDump) -> RgbImage {
    let mut out = pixels.clone();
    let mut order: Vec<usize> = (0..dump.candidates.len()).collect();
    order.sort_by_key(|&i| {
        (
            dump.placed.contains(&i),
            dump.candidates[i].selected_class.is_some(),
            i,
        )
    });
    for i in order {
        outline(&mut out, &dump.candidates[i].bbox, candidate_color(dump, i));
    }
    out
}

fn outline(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let s = b.covering_span(img.width(), img.height());
    if s.is_empty() {
        return;
    }
    for x in s.x0..s.x1 {
        img.put_pixel(x, s.y0, color);
        img.put_pixel(x, s.y1 - 1, color);
    }
    for y in s.y0..s.y1 {
        img.put_pixel(s.x0, y, color);
        img.put_pixel(s.x1 - 1, y, color);
    }
}
