//! Per-frame analysis: change gate, person and face detection, orientation,
//! recognition, patch attributes and the summary sentence.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use doorwatch_core::change_gate::{detect_change, GateConfig, GateError};
use doorwatch_core::face_geometry::{
    crop_patches_with_margin, estimate_orientation, needs_frontalization, OrientationConfig,
    OrientationEstimate, DEFAULT_HEAD_MARGIN,
};
use doorwatch_core::lbp::{FaceRecognizer, RecognitionResult, SubjectId, Verdict as FaceVerdict};
use doorwatch_core::summary::{
    classify_attributes, classify_regions, compose_summary, AttributeClassifier, AttributeLabel,
    ClassifierInput, Identity, SummaryError, VisualSummary,
};
use doorwatch_core::{GrayFrame, Rect};
use serde::Serialize;
use thiserror::Error;

use crate::detect::{DetectError, FaceDetector, PersonDetector};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("change gate: {0}")]
    Gate(#[from] GateError),
    #[error("detector: {0}")]
    Detect(#[from] DetectError),
    #[error("summary: {0}")]
    Summary(#[from] SummaryError),
    #[error("cannot read frame {path}: {reason}")]
    Frame { path: PathBuf, reason: String },
    #[error("cannot list frames in {path}: {source}")]
    Source {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CameraSource {
    pub camera_id: String,
    pub location: String,
}

/// How often each stage ran; lets tests check stage ordering.
#[derive(Debug, Default)]
pub struct StageCounters {
    pub gate: AtomicU64,
    pub person_detection: AtomicU64,
    pub face_detection: AtomicU64,
    pub recognition: AtomicU64,
    pub attributes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub gate: u64,
    pub person_detection: u64,
    pub face_detection: u64,
    pub recognition: u64,
    pub attributes: u64,
}

impl StageCounters {
    pub fn snapshot(&self) -> StageCounts {
        StageCounts {
            gate: self.gate.load(Ordering::Relaxed),
            person_detection: self.person_detection.load(Ordering::Relaxed),
            face_detection: self.face_detection.load(Ordering::Relaxed),
            recognition: self.recognition.load(Ordering::Relaxed),
            attributes: self.attributes.load(Ordering::Relaxed),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceFinding {
    pub face_box: Rect,
    pub orientation: Option<OrientationEstimate>,
    pub needs_frontalization: bool,
    pub recognition: Option<RecognitionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonFinding {
    pub person_box: Rect,
    pub face: Option<FaceFinding>,
    pub identity: Identity,
    pub attributes: BTreeSet<AttributeLabel>,
    /// Stages that failed and were skipped for this person.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameAnalysis {
    pub frame_index: u64,
    pub gate_score: u64,
    pub persons: Vec<PersonFinding>,
    pub summary: VisualSummary,
    pub attributes: BTreeSet<AttributeLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzerConfig {
    pub gate: GateConfig,
    pub orientation: OrientationConfig,
    pub head_margin: usize,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            orientation: OrientationConfig::default(),
            head_margin: DEFAULT_HEAD_MARGIN,
        }
    }
}

pub type SharedRecognizer = Arc<RwLock<Box<dyn FaceRecognizer>>>;

pub struct Detectors {
    pub persons: Arc<dyn PersonDetector>,
    pub faces: Arc<dyn FaceDetector>,
}

pub struct Analyzer {
    pub cfg: AnalyzerConfig,
    pub recognizer: SharedRecognizer,
    pub classifier: Arc<dyn AttributeClassifier>,
    pub counters: Arc<StageCounters>,
}

impl Analyzer {
    /// Returns `None` when the gate is closed or nobody was detected.
    ///
    /// `name_of` resolves recognized subjects to display names; a subject it
    /// does not know is reported as unknown.
    pub fn analyze(
        &self,
        camera: &CameraSource,
        frame_index: u64,
        frame: &GrayFrame,
        prev: &GrayFrame,
        detectors: &Detectors,
        name_of: &dyn Fn(SubjectId) -> Option<String>,
    ) -> Result<Option<FrameAnalysis>, PipelineError> {
        StageCounters::bump(&self.counters.gate);
        let gate = detect_change(prev, frame, &self.cfg.gate)?;
        if !gate.active {
            return Ok(None);
        }
        StageCounters::bump(&self.counters.person_detection);
        let boxes = detectors.persons.detect_persons(frame_index, frame)?;
        if boxes.is_empty() {
            return Ok(None);
        }
        let mut persons = Vec::with_capacity(boxes.len());
        for person_box in boxes {
            persons.push(self.person(frame_index, frame, person_box, detectors, name_of)?);
        }
        let headline = persons
            .iter()
            .find(|p| matches!(p.identity, Identity::Known { .. }))
            .or_else(|| persons.iter().find(|p| p.face.is_some()))
            .unwrap_or(&persons[0]);
        let summary = compose_summary(&headline.identity, &camera.location, &headline.attributes)?;
        Ok(Some(FrameAnalysis {
            frame_index,
            gate_score: gate.score,
            attributes: headline.attributes.clone(),
            summary,
            persons,
        }))
    }

    fn person(
        &self,
        frame_index: u64,
        frame: &GrayFrame,
        person_box: Rect,
        detectors: &Detectors,
        name_of: &dyn Fn(SubjectId) -> Option<String>,
    ) -> Result<PersonFinding, PipelineError> {
        let mut notes = Vec::new();
        StageCounters::bump(&self.counters.face_detection);
        let Some(det) = detectors.faces.detect_face(frame_index, frame, person_box)? else {
            return Ok(PersonFinding {
                person_box,
                face: None,
                identity: Identity::PersonNoFace,
                attributes: BTreeSet::new(),
                notes,
            });
        };
        let face_rect = det.face.rect();

        let orientation = match estimate_orientation(&det.landmarks, self.cfg.orientation.tau_deg) {
            Ok(o) => Some(o),
            Err(e) => {
                notes.push(format!("orientation: {e}"));
                None
            }
        };
        let frontalize = orientation.is_some_and(|o| {
            needs_frontalization(
                &o,
                self.cfg.orientation.alpha_band_deg,
                self.cfg.orientation.beta_band_deg,
            )
        });

        StageCounters::bump(&self.counters.recognition);
        let recognition = frame
            .crop(face_rect)
            .map_err(|e| e.to_string())
            .and_then(|crop| {
                self.recognizer
                    .read()
                    .map_err(|_| "recognizer lock poisoned".to_string())?
                    .predict(&crop)
                    .map_err(|e| e.to_string())
            });
        let (identity, recognition) = match recognition {
            Ok(r) => {
                let identity = match r.verdict {
                    FaceVerdict::Known(id) => match name_of(id) {
                        Some(name) => Identity::Known {
                            subject_id: id,
                            name,
                        },
                        None => Identity::Unknown,
                    },
                    FaceVerdict::Unknown => Identity::Unknown,
                };
                (identity, Some(r))
            }
            Err(e) => {
                notes.push(format!("recognition: {e}"));
                (Identity::Unknown, None)
            }
        };

        StageCounters::bump(&self.counters.attributes);
        let person_crop = frame.crop(person_box).ok();
        let attributes = match crop_patches_with_margin(frame, &det.landmarks, &det.face, self.cfg.head_margin) {
            Ok(patches) => classify_attributes(&patches, person_crop.as_ref(), self.classifier.as_ref()),
            Err(e) => {
                notes.push(format!("patches: {e}"));
                let regions: Vec<_> = person_crop.iter().map(|c| (ClassifierInput::Person, c)).collect();
                classify_regions(&regions, self.classifier.as_ref())
            }
        };
        let attributes = attributes.unwrap_or_else(|e| {
            notes.push(format!("attributes: {e}"));
            BTreeSet::new()
        });

        Ok(PersonFinding {
            person_box,
            face: Some(FaceFinding {
                face_box: face_rect,
                orientation,
                needs_frontalization: frontalize,
                recognition,
            }),
            identity,
            attributes,
            notes,
        })
    }
}

/// Numbered frame files in a directory, ordered by number. The frame index is
/// the number in the file stem (`0007.png` is frame 7).
pub fn list_frames(dir: &Path) -> Result<Vec<(u64, PathBuf)>, PipelineError> {
    let source = |e| PipelineError::Source {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(source)? {
        let path = entry.map_err(source)?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "pgm")) {
            continue;
        }
        if let Some(index) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push((index, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_frame(path: &Path) -> Result<GrayFrame, PipelineError> {
    let err = |reason: String| PipelineError::Frame {
        path: path.to_path_buf(),
        reason,
    };
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        return GrayFrame::from_pgm(&bytes).map_err(|e| err(e.to_string()));
    }
    let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
    GrayFrame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
        .map_err(|e| err(e.to_string()))
}

/// Decodes PNG, JPEG or binary PGM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<GrayFrame, String> {
    if bytes.starts_with(b"P5") {
        return GrayFrame::from_pgm(bytes).map_err(|e| e.to_string());
    }
    let img = image::load_from_memory(bytes)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    GrayFrame::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
        .map_err(|e| e.to_string())
}

pub fn encode_png(frame: &GrayFrame) -> Vec<u8> {
    let img = image::GrayImage::from_raw(
        frame.width() as u32,
        frame.height() as u32,
        frame.pixels().to_vec(),
    )
    .expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("png encoding to memory");
    out.into_inner()
}
