//! Context scorers and the gateway that talks to them.
//!
//! External scorers speak protocol version 1: UTF-8 JSON, one message per
//! LF-terminated line. The scorer first sends a handshake
//! `{"protocol": 1, "num_classes": C}`; each request is
//! `{"id": N, "w": 300, "h": 300, "rgb": "<base64 of raw RGB8, row-major>"}`
//! and each response is `{"id": N, "scores": [C + 1 floats]}` or
//! `{"id": N, "error": "..."}`. Responses may come back in any order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{contextual_geometry, render_contextual, ContextualImage, CONTEXT_SIZE};
use crate::dataset::{AnnotatedImage, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const PROTOCOL_VERSION: u32 = 1;
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_MAX_BATCH: usize = 64;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 128;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_VARIANTS: usize = 3;

/// Scores over `C + 1` classes; index 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Validates the simplex constraints.
    pub fn new(values: Vec<f64>) -> std::result::Result<Self, String> {
        if values.len() < 2 {
            return Err(format!("expected at least 2 scores, got {}", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("score {v} outside [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(format!("scores sum to {sum}"));
        }
        Ok(ScoreVector(values))
    }

    pub fn uniform(num_classes: usize) -> Self {
        ScoreVector(vec![1.0 / (num_classes + 1) as f64; num_classes + 1])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.0.get(class as usize).copied().unwrap_or(0.0)
    }

    /// Highest-scoring non-background class; lowest index wins ties.
    pub fn best_class(&self) -> (ClassId, f64) {
        let mut best = (1, self.0[1]);
        for (c, &v) in self.0.iter().enumerate().skip(2) {
            if v > best.1 {
                best = (c as ClassId, v);
            }
        }
        best
    }

    /// Componentwise arithmetic mean. Each component is summed in sorted
    /// order as offsets from its minimum, so the result does not depend on
    /// input order and equal inputs give that value back exactly.
    pub fn mean(vectors: &[ScoreVector]) -> Result<ScoreVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Precondition("mean of no score vectors".into()))?;
        let n = first.0.len();
        if vectors.iter().any(|v| v.0.len() != n) {
            return Err(Error::protocol(None, "score vectors of different lengths"));
        }
        let k = vectors.len() as f64;
        let values = (0..n)
            .map(|i| {
                let mut col: Vec<f64> = vectors.iter().map(|v| v.0[i]).collect();
                col.sort_by(f64::total_cmp);
                let lo = col[0];
                lo + col.iter().map(|v| v - lo).sum::<f64>() / k
            })
            .collect();
        Ok(ScoreVector(values))
    }
}

pub trait Scorer: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Whether the scorer reads `ContextualImage::pixels`. When false the
    /// gateway skips rendering.
    fn needs_pixels(&self) -> bool {
        true
    }

    /// One vector per input, in input order.
    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>>;
}

/// Equal score for every class.
pub struct UniformScorer {
    pub num_classes: usize,
}

impl Scorer for UniformScorer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        Ok(vec![ScoreVector::uniform(self.num_classes); batch.len()])
    }
}

/// Test scorer that reads ground truth instead of pixels: a box gets 0.9
/// for the classes of GT objects it overlaps with IoU ≥ 0.3 (split evenly),
/// otherwise 0.9 for background; the remaining 0.1 is spread over the other
/// entries.
pub struct OracleScorer {
    num_classes: usize,
    ground_truth: HashMap<String, Vec<(ClassId, BBox)>>,
}

pub const ORACLE_IOU: f64 = 0.3;
pub const ORACLE_MASS: f64 = 0.9;

impl OracleScorer {
    pub fn new(dataset: &Dataset) -> Self {
        let ground_truth = dataset
            .images
            .iter()
            .map(|im| {
                let gt = im
                    .objects
                    .iter()
                    .filter(|o| !o.is_synthetic)
                    .map(|o| (o.class_id, o.bbox))
                    .collect();
                (im.image_id.clone(), gt)
            })
            .collect();
        OracleScorer {
            num_classes: dataset.num_classes(),
            ground_truth,
        }
    }

    pub fn score_box(&self, image_id: &str, b: &BBox) -> ScoreVector {
        let n = self.num_classes + 1;
        let mut hits: Vec<ClassId> = self
            .ground_truth
            .get(image_id)
            .map(|gt| {
                gt.iter()
                    .filter(|(_, g)| iou(g, b) >= ORACLE_IOU)
                    .map(|&(c, _)| c)
                    .collect()
            })
            .unwrap_or_default();
        hits.sort_unstable();
        hits.dedup();
        let winners: Vec<usize> = if hits.is_empty() {
            vec![0]
        } else {
            hits.iter().map(|&c| c as usize).collect()
        };
        let rest = n - winners.len();
        let mut v = vec![
            if rest > 0 {
                (1.0 - ORACLE_MASS) / rest as f64
            } else {
                0.0
            };
            n
        ];
        let share = if rest > 0 {
            ORACLE_MASS / winners.len() as f64
        } else {
            1.0 / n as f64
        };
        for w in winners {
            v[w] = share;
        }
        ScoreVector(v)
    }
}

impl Scorer for OracleScorer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        Ok(batch
            .iter()
            .map(|c| self.score_box(&c.image_id, &c.source_box))
            .collect())
    }
}

/// Scorer backed by a closure over the contextual image geometry.
pub struct FnScorer<F> {
    num_classes: usize,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&ContextualImage) -> ScoreVector + Send + Sync,
{
    pub fn new(num_classes: usize, f: F) -> Self {
        FnScorer { num_classes, f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&ContextualImage) -> ScoreVector + Send + Sync,
{
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        Ok(batch.iter().map(&self.f).collect())
    }
}

/// Replays a fixed script of vectors, one per scored image, cycling.
pub struct ScriptedScorer {
    num_classes: usize,
    script: Vec<ScoreVector>,
    cursor: Mutex<usize>,
}

impl ScriptedScorer {
    pub fn new(script: Vec<ScoreVector>) -> Self {
        let num_classes = script.first().map_or(0, ScoreVector::num_classes);
        ScriptedScorer {
            num_classes,
            script,
            cursor: Mutex::new(0),
        }
    }
}

impl Scorer for ScriptedScorer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        let mut cur = self.cursor.lock().unwrap();
        Ok(batch
            .iter()
            .map(|_| {
                let v = self.script[*cur % self.script.len()].clone();
                *cur += 1;
                v
            })
            .collect())
    }
}

/// Front end every pipeline stage scores through: chunks batches, checks
/// the responses, and implements k-variant averaging.
#[derive(Clone)]
pub struct Gateway {
    scorer: Arc<dyn Scorer>,
    max_batch: usize,
}

impl Gateway {
    pub fn new(scorer: Arc<dyn Scorer>) -> Self {
        Gateway {
            scorer,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.scorer.num_classes()
    }

    pub fn score_batch(&self, images: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.max_batch) {
            let scores = self.scorer.score_batch(chunk)?;
            if scores.len() != chunk.len() {
                return Err(Error::protocol(
                    None,
                    format!("{} scores for {} images", scores.len(), chunk.len()),
                ));
            }
            for s in &scores {
                if s.num_classes() != self.num_classes() {
                    return Err(Error::protocol(
                        None,
                        format!("{} classes scored, expected {}", s.num_classes(), self.num_classes()),
                    ));
                }
                ScoreVector::new(s.0.clone()).map_err(|m| Error::protocol(None, m))?;
            }
            out.extend(scores);
        }
        Ok(out)
    }

    /// Mean score over `k` independently drawn contextual images of `b`.
    pub fn averaged_score<R: Rng + ?Sized>(
        &self,
        image: &AnnotatedImage,
        b: &BBox,
        k: usize,
        rng: &mut R,
    ) -> Result<ScoreVector> {
        Ok(self
            .averaged_scores(image, std::slice::from_ref(b), k, rng)?
            .remove(0))
    }

    /// [`averaged_score`](Self::averaged_score) for many boxes in one pass;
    /// contexts are drawn box by box, `k` at a time.
    pub fn averaged_scores<R: Rng + ?Sized>(
        &self,
        image: &AnnotatedImage,
        boxes: &[BBox],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<ScoreVector>> {
        if k == 0 {
            return Err(Error::Precondition("need at least one variant".into()));
        }
        let render = self.scorer.needs_pixels();
        let mut contexts = Vec::with_capacity(boxes.len() * k);
        for b in boxes {
            for _ in 0..k {
                let mut c = contextual_geometry(image, b, rng);
                if render {
                    c.pixels = Some(render_contextual(&image.pixels, b, &c.neighborhood));
                }
                contexts.push(c);
            }
        }
        let scores = self.score_batch(&contexts)?;
        scores.chunks(k).map(ScoreVector::mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScorerSpec {
    Process(String),
    Tcp(String),
    Uniform,
    Oracle,
}

impl std::str::FromStr for ScorerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("process:") {
            return Ok(ScorerSpec::Process(cmd.to_string()));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            return Ok(ScorerSpec::Tcp(addr.to_string()));
        }
        match s {
            "uniform" => Ok(ScorerSpec::Uniform),
            "oracle" => Ok(ScorerSpec::Oracle),
            other => Err(Error::Config(format!(
                "unknown scorer {other:?}; expected process:<cmd>, tcp:<host:port>, uniform or oracle"
            ))),
        }
    }
}

impl std::fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerSpec::Process(c) => write!(f, "process:{c}"),
            ScorerSpec::Tcp(a) => write!(f, "tcp:{a}"),
            ScorerSpec::Uniform => f.write_str("uniform"),
            ScorerSpec::Oracle => f.write_str("oracle"),
        }
    }
}

impl ScorerSpec {
    /// Instantiates the backend. `dataset` supplies C and, for the oracle,
    /// the ground truth.
    pub fn connect(&self, dataset: &Dataset, timeout: Duration) -> Result<Arc<dyn Scorer>> {
        let scorer: Arc<dyn Scorer> = match self {
            ScorerSpec::Uniform => Arc::new(UniformScorer {
                num_classes: dataset.num_classes(),
            }),
            ScorerSpec::Oracle => Arc::new(OracleScorer::new(dataset)),
            ScorerSpec::Process(cmd) => Arc::new(StreamScorer::spawn(cmd, timeout)?),
            ScorerSpec::Tcp(addr) => Arc::new(StreamScorer::connect_tcp(addr, timeout)?),
        };
        if scorer.num_classes() != dataset.num_classes() {
            return Err(Error::protocol(
                None,
                format!(
                    "scorer reports {} classes, dataset has {}",
                    scorer.num_classes(),
                    dataset.num_classes()
                ),
            ));
        }
        Ok(scorer)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    w: u32,
    h: u32,
    rgb: &'a str,
}

#[derive(Deserialize)]
struct WireHandshake {
    protocol: u32,
    num_classes: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    id: u64,
    #[serde(default)]
    scores: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
}

type Reply = Result<Vec<f64>>;

/// Counting semaphore bounding requests in flight.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self, deadline: Instant) -> bool {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            free = self.cv.wait_timeout(free, deadline - now).unwrap().0;
        }
        *free -= 1;
        true
    }

    fn release(&self) {
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

struct Shared {
    pending: Mutex<HashMap<u64, Sender<Reply>>>,
    closed: Mutex<Option<String>>,
    permits: Permits,
}

impl Shared {
    fn fail_all(&self, why: &str) {
        *self.closed.lock().unwrap() = Some(why.to_string());
        for (_, tx) in self.pending.lock().unwrap().drain() {
            let _ = tx.send(Err(Error::ScorerUnavailable(why.to_string())));
            self.permits.release();
        }
    }
}

/// Client for an external scorer over a byte stream (child stdio or TCP).
/// Requests from any number of threads are multiplexed onto one stream and
/// matched back by id.
pub struct StreamScorer {
    shared: Arc<Shared>,
    writer: Mutex<Box<dyn Write + Send>>,
    next_id: AtomicU64,
    num_classes: usize,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

impl StreamScorer {
    /// Runs `cmd` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(cmd: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::ScorerUnavailable(format!("cannot start {cmd:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut s = Self::from_stream(stdout, stdin, timeout)?;
        s.child = Some(Mutex::new(child));
        Ok(s)
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::ScorerUnavailable(format!("cannot connect to {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| Error::ScorerUnavailable(e.to_string()))?;
        Self::from_stream(reader, stream, timeout)
    }

    /// Waits for the handshake, then starts the response dispatcher.
    pub fn from_stream(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        Self::with_in_flight(reader, writer, timeout, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_in_flight(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Result<Self> {
        let shared = Arc::new(Shared {
            pending: Mutex::new(HashMap::new()),
            closed: Mutex::new(None),
            permits: Permits {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        });
        let (hs_tx, hs_rx) = mpsc::channel::<Result<usize>>();
        let reader_shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("scorer-reader".into())
            .spawn(move || read_loop(BufReader::new(reader), reader_shared, hs_tx))
            .map_err(|e| Error::ScorerUnavailable(e.to_string()))?;
        let num_classes = match hs_rx.recv_timeout(timeout) {
            Ok(r) => r?,
            Err(_) => return Err(Error::ScorerUnavailable("no handshake from scorer".into())),
        };
        Ok(StreamScorer {
            shared,
            writer: Mutex::new(Box::new(writer)),
            next_id: AtomicU64::new(0),
            num_classes,
            timeout,
            child: None,
        })
    }

    fn send(&self, c: &ContextualImage, deadline: Instant) -> Result<(u64, mpsc::Receiver<Reply>)> {
        let pixels = c
            .pixels
            .as_ref()
            .ok_or_else(|| Error::Precondition("stream scorer needs rendered contexts".into()))?;
        if pixels.dimensions() != (CONTEXT_SIZE, CONTEXT_SIZE) {
            return Err(Error::Precondition("contextual image has wrong size".into()));
        }
        if let Some(why) = self.shared.closed.lock().unwrap().clone() {
            return Err(Error::ScorerUnavailable(why));
        }
        if !self.shared.permits.acquire(deadline) {
            return Err(Error::ScorerUnavailable("timed out waiting for in-flight slot".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.shared.pending.lock().unwrap().insert(id, tx);
        let rgb = base64::engine::general_purpose::STANDARD.encode(pixels.as_raw());
        let mut line = serde_json::to_string(&WireRequest {
            id,
            w: CONTEXT_SIZE,
            h: CONTEXT_SIZE,
            rgb: &rgb,
        })
        .expect("serializable");
        line.push('\n');
        let written = {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = written {
            if self.shared.pending.lock().unwrap().remove(&id).is_some() {
                self.shared.permits.release();
            }
            return Err(Error::ScorerUnavailable(format!("write failed: {e}")));
        }
        Ok((id, rx))
    }
}

impl Scorer for StreamScorer {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn score_batch(&self, batch: &[ContextualImage]) -> Result<Vec<ScoreVector>> {
        let deadline = Instant::now() + self.timeout;
        let mut waiting = Vec::with_capacity(batch.len());
        for c in batch {
            waiting.push(self.send(c, deadline)?);
        }
        let mut out = Vec::with_capacity(batch.len());
        for (id, rx) in waiting {
            let left = deadline.saturating_duration_since(Instant::now());
            let values = match rx.recv_timeout(left) {
                Ok(r) => r?,
                Err(RecvTimeoutError::Timeout) => {
                    if self.shared.pending.lock().unwrap().remove(&id).is_some() {
                        self.shared.permits.release();
                    }
                    return Err(Error::ScorerUnavailable(format!(
                        "no response to request {id} within {:?}",
                        self.timeout
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::ScorerUnavailable("scorer connection closed".into()))
                }
            };
            if values.len() != self.num_classes + 1 {
                return Err(Error::protocol(
                    Some(id),
                    format!("{} scores, expected {}", values.len(), self.num_classes + 1),
                ));
            }
            out.push(ScoreVector::new(values).map_err(|m| Error::protocol(Some(id), m))?);
        }
        Ok(out)
    }
}

impl Drop for StreamScorer {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap();
            // closing stdin lets a well-behaved scorer exit on its own
            drop(std::mem::replace(
                &mut *self.writer.lock().unwrap(),
                Box::new(std::io::sink()),
            ));
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn read_loop(reader: impl BufRead, shared: Arc<Shared>, handshake: Sender<Result<usize>>) {
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(e)) => {
            let _ = handshake.send(Err(Error::ScorerUnavailable(e.to_string())));
            return;
        }
        None => {
            let _ = handshake.send(Err(Error::ScorerUnavailable(
                "scorer closed before handshake".into(),
            )));
            return;
        }
    };
    match serde_json::from_str::<WireHandshake>(&first) {
        Ok(h) if h.protocol == PROTOCOL_VERSION => {
            let _ = handshake.send(Ok(h.num_classes));
        }
        Ok(h) => {
            let _ = handshake.send(Err(Error::protocol(
                None,
                format!("unsupported protocol version {}", h.protocol),
            )));
            return;
        }
        Err(e) => {
            let _ = handshake.send(Err(Error::protocol(None, format!("bad handshake: {e}"))));
            return;
        }
    }
    for line in lines {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                shared.fail_all(&format!("read failed: {e}"));
                return;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let msg: WireResponse = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                log::error!("unparseable scorer message: {e}");
                shared.fail_all(&format!("malformed scorer message: {e}"));
                return;
            }
        };
        let Some(tx) = shared.pending.lock().unwrap().remove(&msg.id) else {
            log::warn!("scorer answered unknown or duplicate id {}", msg.id);
            continue;
        };
        shared.permits.release();
        let reply = match (msg.scores, msg.error) {
            (_, Some(err)) => Err(Error::protocol(Some(msg.id), err)),
            (Some(s), None) => Ok(s),
            (None, None) => Err(Error::protocol(Some(msg.id), "response without scores")),
        };
        let _ = tx.send(reply);
    }
    shared.fail_all("scorer closed the stream");
}
