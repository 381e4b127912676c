//! Person and face detector interfaces, plus a fixture-backed implementation.
//!
//! A detection fixture is a JSON object keyed by frame index:
//!
//! ```json
//! {"3": [{"person_box": [200, 60, 220, 400],
//!         "face": {"box": [250, 80, 120, 120], "landmarks": [[x, y], ...]}}]}
//! ```
//!
//! `face` is `null` when the person's face is not visible. Frames missing from
//! the fixture contain nobody.

use std::collections::BTreeMap;
use std::path::Path;

use doorwatch_core::face_geometry::{FaceBox, GeometryError, LandmarkSet};
use doorwatch_core::{GrayFrame, Rect};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cannot read detections {path}: {reason}")]
    Load { path: String, reason: String },
    #[error("frame {frame}: {reason}")]
    Invalid { frame: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceDetection {
    pub face: FaceBox,
    pub landmarks: LandmarkSet,
}

pub trait PersonDetector: Send + Sync {
    fn detect_persons(&self, frame_index: u64, frame: &GrayFrame) -> Result<Vec<Rect>, DetectError>;
}

pub trait FaceDetector: Send + Sync {
    /// Face inside `person`, if one is visible.
    fn detect_face(
        &self,
        frame_index: u64,
        frame: &GrayFrame,
        person: Rect,
    ) -> Result<Option<FaceDetection>, DetectError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFace {
    #[serde(rename = "box")]
    pub face_box: [usize; 4],
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturePerson {
    pub person_box: [usize; 4],
    pub face: Option<FixtureFace>,
}

pub type DetectionFixture = BTreeMap<u64, Vec<FixturePerson>>;

fn rect(b: [usize; 4]) -> Rect {
    Rect::new(b[0], b[1], b[2], b[3])
}

/// Replays precomputed detections; serves as both person and face detector.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    frames: BTreeMap<u64, Vec<(Rect, Option<FaceDetection>)>>,
}

impl FixtureDetector {
    pub fn new(fixture: &DetectionFixture) -> Result<Self, DetectError> {
        let mut frames = BTreeMap::new();
        for (&frame, persons) in fixture {
            let invalid = |reason: String| DetectError::Invalid { frame, reason };
            let mut out = Vec::with_capacity(persons.len());
            for p in persons {
                let person = rect(p.person_box);
                if person.area() == 0 {
                    return Err(invalid("empty person box".into()));
                }
                let face = match &p.face {
                    None => None,
                    Some(f) => {
                        let [x, y, w, h] = f.face_box;
                        let face = FaceBox::new(x, y, w, h)
                            .map_err(|e: GeometryError| invalid(e.to_string()))?;
                        let landmarks = LandmarkSet::from_pairs(&f.landmarks)
                            .map_err(|e| invalid(e.to_string()))?;
                        Some(FaceDetection { face, landmarks })
                    }
                };
                out.push((person, face));
            }
            frames.insert(frame, out);
        }
        Ok(Self { frames })
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        let load_err = |reason: String| DetectError::Load {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let fixture: DetectionFixture =
            serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Self::new(&fixture)
    }

    fn check_bounds(frame_index: u64, frame: &GrayFrame, r: Rect) -> Result<(), DetectError> {
        if frame.bounds().contains_rect(&r) {
            Ok(())
        } else {
            Err(DetectError::Invalid {
                frame: frame_index,
                reason: format!(
                    "box {r:?} outside the {}x{} frame",
                    frame.width(),
                    frame.height()
                ),
            })
        }
    }
}

impl PersonDetector for FixtureDetector {
    fn detect_persons(&self, frame_index: u64, frame: &GrayFrame) -> Result<Vec<Rect>, DetectError> {
        let Some(persons) = self.frames.get(&frame_index) else {
            return Ok(Vec::new());
        };
        persons
            .iter()
            .map(|(r, _)| Self::check_bounds(frame_index, frame, *r).map(|_| *r))
            .collect()
    }
}

impl FaceDetector for FixtureDetector {
    fn detect_face(
        &self,
        frame_index: u64,
        frame: &GrayFrame,
        person: Rect,
    ) -> Result<Option<FaceDetection>, DetectError> {
        let Some(face) = self
            .frames
            .get(&frame_index)
            .and_then(|ps| ps.iter().find(|(r, _)| *r == person))
            .and_then(|(_, f)| f.clone())
        else {
            return Ok(None);
        };
        Self::check_bounds(frame_index, frame, face.face.rect())?;
        face.landmarks
            .check_within(frame.width(), frame.height())
            .map_err(|e| DetectError::Invalid {
                frame: frame_index,
                reason: e.to_string(),
            })?;
        Ok(Some(face))
    }
}
