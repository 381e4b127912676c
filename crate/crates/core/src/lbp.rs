//! Local binary pattern face recognizer.
//!
//! Faces are resized to a canonical square, turned into radius-1 / 8-neighbour
//! LBP code maps, summarised as per-cell 256-bin histograms over a grid, and
//! matched to enrolled templates by chi-square nearest neighbour. A query whose
//! nearest template is farther than the unknown threshold is reported Unknown.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::frame::{FrameError, GrayFrame};

/// Side of the square every face is resized to before feature extraction.
pub const CANONICAL_FACE_SIDE: usize = 96;
pub const BINS: usize = 256;
/// Threshold multiplier over the largest same-subject template distance.
pub const UNKNOWN_THRESHOLD_SCALE: f64 = 1.5;
/// Used when no subject has two views to measure spread from.
pub const FALLBACK_UNKNOWN_THRESHOLD: f64 = 20.0;

const MODEL_MAGIC: &[u8; 4] = b"LBPM";
const MODEL_VERSION: u32 = 1;

pub type SubjectId = u64;
pub type ViewId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LbpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("subject {subject} view {view}: {reason}")]
    BadEnrollmentImage {
        subject: SubjectId,
        view: ViewId,
        reason: String,
    },
    #[error("the model holds no templates")]
    EmptyModel,
    #[error("feature vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("model decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbpConfig {
    pub grid_x: usize,
    pub grid_y: usize,
    pub normalize_cells: bool,
    /// Fixed Unknown cut-off; derived from the training templates when absent.
    pub unknown_threshold: Option<f64>,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            grid_x: 8,
            grid_y: 8,
            normalize_cells: true,
            unknown_threshold: None,
        }
    }
}

impl LbpConfig {
    pub fn feature_len(&self) -> usize {
        self.grid_x * self.grid_y * BINS
    }

    fn validate(&self) -> Result<(), LbpError> {
        if self.grid_x == 0 || self.grid_y == 0 {
            return Err(LbpError::InvalidArgument(format!(
                "grid must be at least 1x1, got {}x{}",
                self.grid_x, self.grid_y
            )));
        }
        if self.grid_x + 2 > CANONICAL_FACE_SIDE || self.grid_y + 2 > CANONICAL_FACE_SIDE {
            return Err(LbpError::InvalidArgument(format!(
                "grid {}x{} exceeds the {}px canonical face",
                self.grid_x, self.grid_y, CANONICAL_FACE_SIDE
            )));
        }
        if let Some(t) = self.unknown_threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(LbpError::InvalidArgument(format!(
                    "unknown threshold must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// LBP code of a 3x3 neighbourhood given row-major.
///
/// Neighbours are visited top-left, top, top-right, right, bottom-right, bottom,
/// bottom-left, left, carrying weights 1, 2, 4, ... 128. A bit is set when the
/// neighbour is at least as bright as the centre.
pub fn lbp_code(n: &[u8; 9]) -> u8 {
    let c = n[4];
    let ring = [n[0], n[1], n[2], n[5], n[8], n[7], n[6], n[3]];
    ring.iter()
        .enumerate()
        .fold(0u8, |code, (bit, &v)| code | (u8::from(v >= c) << bit))
}

/// Code map over interior pixels; border rows and columns are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMap {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u8>,
}

impl CodeMap {
    pub fn new(width: usize, height: usize, codes: Vec<u8>) -> Result<Self, LbpError> {
        if width == 0 || height == 0 || codes.len() != width * height {
            return Err(LbpError::InvalidArgument(format!(
                "code map {width}x{height} with {} codes",
                codes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            codes,
        })
    }
}

pub fn lbp_image(face: &GrayFrame) -> Result<CodeMap, LbpError> {
    let (w, h) = (face.width(), face.height());
    if w < 3 || h < 3 {
        return Err(LbpError::InvalidArgument(format!(
            "face must be at least 3x3, got {w}x{h}"
        )));
    }
    let px = face.pixels();
    let mut codes = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        let (up, mid, down) = (&px[(y - 1) * w..y * w], &px[y * w..(y + 1) * w], &px[(y + 1) * w..(y + 2) * w]);
        for x in 1..w - 1 {
            let c = mid[x];
            let code = u8::from(up[x - 1] >= c)
                | u8::from(up[x] >= c) << 1
                | u8::from(up[x + 1] >= c) << 2
                | u8::from(mid[x + 1] >= c) << 3
                | u8::from(down[x + 1] >= c) << 4
                | u8::from(down[x] >= c) << 5
                | u8::from(down[x - 1] >= c) << 6
                | u8::from(mid[x - 1] >= c) << 7;
            codes.push(code);
        }
    }
    CodeMap::new(w - 2, h - 2, codes)
}

/// Cell index of coordinate `v` along an axis of `len` split into `cells`;
/// leftover pixels fall into the last cell.
#[inline]
fn cell_of(v: usize, len: usize, cells: usize) -> usize {
    (v / (len / cells)).min(cells - 1)
}

/// Concatenated row-major per-cell code histograms.
pub fn grid_histogram(codes: &CodeMap, cfg: &LbpConfig) -> Result<Vec<f64>, LbpError> {
    let (gx, gy) = (cfg.grid_x, cfg.grid_y);
    if gx == 0 || gy == 0 || gx > codes.width || gy > codes.height {
        return Err(LbpError::InvalidArgument(format!(
            "grid {gx}x{gy} does not fit a {}x{} code map",
            codes.width, codes.height
        )));
    }
    let mut hist = vec![0.0f64; gx * gy * BINS];
    for y in 0..codes.height {
        let cy = cell_of(y, codes.height, gy);
        for x in 0..codes.width {
            let cx = cell_of(x, codes.width, gx);
            let code = codes.codes[y * codes.width + x] as usize;
            hist[(cy * gx + cx) * BINS + code] += 1.0;
        }
    }
    if cfg.normalize_cells {
        for cell in hist.chunks_exact_mut(BINS) {
            let total: f64 = cell.iter().sum();
            if total > 0.0 {
                cell.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    Ok(hist)
}

/// Sum of `(a - b)^2 / (a + b)` over bins where `a + b > 0`.
pub fn chi_square(h1: &[f64], h2: &[f64]) -> Result<f64, LbpError> {
    if h1.len() != h2.len() {
        return Err(LbpError::LengthMismatch(h1.len(), h2.len()));
    }
    Ok(chi_square_unchecked(h1, h2))
}

#[inline]
fn chi_square_unchecked(h1: &[f64], h2: &[f64]) -> f64 {
    h1.iter()
        .zip(h2)
        .filter(|(a, b)| **a + **b > 0.0)
        .map(|(a, b)| {
            let d = a - b;
            d * d / (a + b)
        })
        .sum()
}

/// Feature vector of a face of any size: canonical resize, LBP, grid histogram.
pub fn face_features(face: &GrayFrame, cfg: &LbpConfig) -> Result<Vec<f64>, LbpError> {
    let canonical = face.resize_bilinear(CANONICAL_FACE_SIDE, CANONICAL_FACE_SIDE)?;
    grid_histogram(&lbp_image(&canonical)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTemplate {
    pub subject_id: SubjectId,
    pub view_id: ViewId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "subject_id", rename_all = "snake_case")]
pub enum Verdict {
    Known(SubjectId),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub verdict: Verdict,
    pub best_distance: f64,
    pub runner_up_distance: Option<f64>,
}

/// One enrollment image.
#[derive(Debug, Clone)]
pub struct EnrollmentView {
    pub view_id: ViewId,
    pub image: GrayFrame,
}

/// Enrollment set: subject → views.
pub type Enrollment = BTreeMap<SubjectId, Vec<EnrollmentView>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LbpModel {
    cfg: LbpConfig,
    templates: Vec<FaceTemplate>,
    unknown_threshold: f64,
}

/// Contract shared by every recognizer backend.
pub trait FaceRecognizer: Send + Sync {
    /// Rebuilds the recognizer from scratch.
    fn train(&mut self, enrollment: &Enrollment) -> Result<(), LbpError>;
    fn predict(&self, face: &GrayFrame) -> Result<RecognitionResult, LbpError>;
    /// Drops every template of `subject`; returns how many were removed.
    fn forget(&mut self, subject: SubjectId) -> usize;
    fn is_empty(&self) -> bool;
}

pub fn train(enrollment: &Enrollment, cfg: &LbpConfig) -> Result<LbpModel, LbpError> {
    train_with(enrollment, cfg, ExecMode::default())
}

pub fn train_with(
    enrollment: &Enrollment,
    cfg: &LbpConfig,
    mode: ExecMode,
) -> Result<LbpModel, LbpError> {
    cfg.validate()?;
    let jobs: Vec<(SubjectId, &EnrollmentView)> = enrollment
        .iter()
        .flat_map(|(&s, views)| views.iter().map(move |v| (s, v)))
        .collect();
    if jobs.is_empty() {
        return Err(LbpError::InvalidArgument(
            "enrollment needs at least one subject with one image".into(),
        ));
    }
    let min_w = 3.max(cfg.grid_x + 2);
    let min_h = 3.max(cfg.grid_y + 2);
    let templates: Result<Vec<FaceTemplate>, LbpError> =
        exec::map_slice(mode, &jobs, |&(subject_id, view)| {
            let img = &view.image;
            if img.width() < min_w || img.height() < min_h {
                return Err(LbpError::BadEnrollmentImage {
                    subject: subject_id,
                    view: view.view_id,
                    reason: format!(
                        "image {}x{} is smaller than {min_w}x{min_h}",
                        img.width(),
                        img.height()
                    ),
                });
            }
            Ok(FaceTemplate {
                subject_id,
                view_id: view.view_id,
                features: face_features(img, cfg)?,
            })
        })
        .into_iter()
        .collect();
    let templates = templates?;
    let unknown_threshold = cfg
        .unknown_threshold
        .unwrap_or_else(|| derived_threshold(&templates, mode));
    Ok(LbpModel {
        cfg: cfg.clone(),
        templates,
        unknown_threshold,
    })
}

/// 1.5x the largest distance between two templates of the same subject.
fn derived_threshold(templates: &[FaceTemplate], mode: ExecMode) -> f64 {
    let pairs: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|i| (i + 1..templates.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| templates[i].subject_id == templates[j].subject_id)
        .collect();
    if pairs.is_empty() {
        return FALLBACK_UNKNOWN_THRESHOLD;
    }
    let max = exec::map_slice(mode, &pairs, |&(i, j)| {
        chi_square_unchecked(&templates[i].features, &templates[j].features)
    })
    .into_iter()
    .fold(0.0f64, f64::max);
    if max > 0.0 {
        UNKNOWN_THRESHOLD_SCALE * max
    } else {
        FALLBACK_UNKNOWN_THRESHOLD
    }
}

impl LbpModel {
    pub fn config(&self) -> &LbpConfig {
        &self.cfg
    }

    pub fn templates(&self) -> &[FaceTemplate] {
        &self.templates
    }

    pub fn unknown_threshold(&self) -> f64 {
        self.unknown_threshold
    }

    pub fn predict(&self, face: &GrayFrame) -> Result<RecognitionResult, LbpError> {
        self.predict_with(face, ExecMode::default())
    }

    pub fn predict_with(
        &self,
        face: &GrayFrame,
        mode: ExecMode,
    ) -> Result<RecognitionResult, LbpError> {
        if self.templates.is_empty() {
            return Err(LbpError::EmptyModel);
        }
        let query = face_features(face, &self.cfg)?;
        self.match_features(&query, mode)
    }

    /// Nearest-template verdict for a precomputed feature vector.
    pub fn match_features(
        &self,
        query: &[f64],
        mode: ExecMode,
    ) -> Result<RecognitionResult, LbpError> {
        if self.templates.is_empty() {
            return Err(LbpError::EmptyModel);
        }
        if query.len() != self.cfg.feature_len() {
            return Err(LbpError::LengthMismatch(query.len(), self.cfg.feature_len()));
        }
        let distances = exec::map_slice(mode, &self.templates, |t| {
            chi_square_unchecked(query, &t.features)
        });
        let mut order: Vec<usize> = (0..self.templates.len()).collect();
        order.sort_by(|&a, &b| {
            distances[a]
                .total_cmp(&distances[b])
                .then(self.templates[a].subject_id.cmp(&self.templates[b].subject_id))
                .then(self.templates[a].view_id.cmp(&self.templates[b].view_id))
        });
        let best = order[0];
        let best_distance = distances[best];
        let verdict = if best_distance <= self.unknown_threshold {
            Verdict::Known(self.templates[best].subject_id)
        } else {
            Verdict::Unknown
        };
        Ok(RecognitionResult {
            verdict,
            best_distance,
            runner_up_distance: order.get(1).map(|&i| distances[i]),
        })
    }

    pub fn remove_subject(&mut self, subject: SubjectId) -> usize {
        let before = self.templates.len();
        self.templates.retain(|t| t.subject_id != subject);
        before - self.templates.len()
    }

    /// Versioned little-endian container: magic, version, config, threshold, templates.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.templates.len() * (16 + self.cfg.feature_len() * 8));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.cfg.grid_x as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.grid_y as u32).to_le_bytes());
        out.push(u8::from(self.cfg.normalize_cells));
        match self.cfg.unknown_threshold {
            Some(t) => {
                out.push(1);
                out.extend_from_slice(&t.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.unknown_threshold.to_le_bytes());
        out.extend_from_slice(&(self.templates.len() as u64).to_le_bytes());
        for t in &self.templates {
            out.extend_from_slice(&t.subject_id.to_le_bytes());
            out.extend_from_slice(&t.view_id.to_le_bytes());
            for v in &t.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LbpModel, LbpError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(LbpError::Decode("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(LbpError::Decode(format!("unsupported version {version}")));
        }
        let grid_x = read_u32(&mut r)? as usize;
        let grid_y = read_u32(&mut r)? as usize;
        let mut flags = [0u8; 2];
        read_exact(&mut r, &mut flags[..1])?;
        let normalize_cells = flags[0] != 0;
        read_exact(&mut r, &mut flags[1..])?;
        let fixed = read_f64(&mut r)?;
        let cfg = LbpConfig {
            grid_x,
            grid_y,
            normalize_cells,
            unknown_threshold: (flags[1] != 0).then_some(fixed),
        };
        cfg.validate()
            .map_err(|e| LbpError::Decode(format!("bad config: {e}")))?;
        let unknown_threshold = read_f64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let flen = cfg.feature_len();
        let mut templates = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let subject_id = read_u64(&mut r)?;
            let view_id = read_u64(&mut r)?;
            let features = (0..flen)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>, _>>()?;
            templates.push(FaceTemplate {
                subject_id,
                view_id,
                features,
            });
        }
        if !r.is_empty() {
            return Err(LbpError::Decode(format!("{} trailing bytes", r.len())));
        }
        Ok(LbpModel {
            cfg,
            templates,
            unknown_threshold,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from(mut r: impl Read) -> Result<LbpModel, LbpError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| LbpError::Decode(e.to_string()))?;
        Self::decode(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), LbpError> {
    if r.len() < buf.len() {
        return Err(LbpError::Decode("unexpected end of data".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32, LbpError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, LbpError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, LbpError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// [`FaceRecognizer`] backed by LBP grid histograms.
#[derive(Debug, Clone, Default)]
pub struct LbpRecognizer {
    cfg: LbpConfig,
    model: Option<LbpModel>,
}

impl LbpRecognizer {
    pub fn new(cfg: LbpConfig) -> Self {
        Self { cfg, model: None }
    }

    pub fn from_model(model: LbpModel) -> Self {
        Self {
            cfg: model.cfg.clone(),
            model: Some(model),
        }
    }

    pub fn model(&self) -> Option<&LbpModel> {
        self.model.as_ref()
    }
}

impl FaceRecognizer for LbpRecognizer {
    fn train(&mut self, enrollment: &Enrollment) -> Result<(), LbpError> {
        self.model = Some(train(enrollment, &self.cfg)?);
        Ok(())
    }

    fn predict(&self, face: &GrayFrame) -> Result<RecognitionResult, LbpError> {
        self.model.as_ref().ok_or(LbpError::EmptyModel)?.predict(face)
    }

    fn forget(&mut self, subject: SubjectId) -> usize {
        self.model
            .as_mut()
            .map_or(0, |m| m.remove_subject(subject))
    }

    fn is_empty(&self) -> bool {
        self.model.as_ref().is_none_or(|m| m.templates.is_empty())
    }
}
