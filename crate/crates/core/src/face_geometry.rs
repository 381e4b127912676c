//! Landmark geometry: head tilt, frontalization gating, attribute patch
//! cropping and capture guidance.
//!
//! Landmarks follow the 68-point layout: 0-16 jaw, 17-26 brows, 27-35 nose,
//! 36-41 and 42-47 the eyes (image left, image right), 48-67 mouth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FrameError, GrayFrame, Rect};

pub const LANDMARK_COUNT: usize = 68;
/// Interior angle at the nose for a level, frontal face.
pub const FRONTAL_ALPHA_DEG: f64 = 120.0;
/// Rows above the face box included in the head patch.
pub const DEFAULT_HEAD_MARGIN: usize = 180;
/// Face boxes with area at or below this ask the person to come closer.
pub const MIN_GUIDED_FACE_AREA: i64 = 1024;

const JAW_LEFT: usize = 0;
const JAW_RIGHT: usize = 16;
const NOSE_BASE: usize = 33;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("slope must be finite, got {0}")]
    NonFiniteSlope(f64),
    #[error("expected {LANDMARK_COUNT} landmarks, got {0}")]
    LandmarkCount(usize),
    #[error("landmark {index} is not finite")]
    NonFiniteLandmark { index: usize },
    #[error("landmark {index} at ({x}, {y}) lies outside a {width}x{height} image")]
    LandmarkOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("jaw endpoints and nose base are collinear")]
    DegenerateGeometry,
    #[error("{patch} patch is empty or inverted: rows {rows:?}, cols {cols:?}")]
    DegenerateLandmarks {
        patch: PatchKind,
        rows: (i64, i64),
        cols: (i64, i64),
    },
    #[error("face box must have positive size")]
    EmptyBox,
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() != LANDMARK_COUNT {
            return Err(GeometryError::LandmarkCount(points.len()));
        }
        if let Some(index) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(GeometryError::NonFiniteLandmark { index });
        }
        Ok(Self { points })
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self, GeometryError> {
        Self::new(pairs.iter().map(|&[x, y]| Point::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Point {
        self.points[index]
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<(), GeometryError> {
        for (index, p) in self.points.iter().enumerate() {
            if p.x < 0.0 || p.y < 0.0 || p.x >= width as f64 || p.y >= height as f64 {
                return Err(GeometryError::LandmarkOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    fn centroid(&self, range: std::ops::Range<usize>) -> Point {
        let n = range.len() as f64;
        let (sx, sy) = self.points[range]
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Mean-face layout scaled into `face`, level and frontal (apex angle 120°).
    pub fn canonical(face: Rect) -> LandmarkSet {
        let unit = canonical_unit_layout();
        let (fx, fy) = (face.x as f64, face.y as f64);
        let (fw, fh) = (face.width as f64, face.height as f64);
        LandmarkSet {
            points: unit
                .into_iter()
                .map(|p| Point::new(fx + p.x * (fw - 1.0), fy + p.y * (fh - 1.0)))
                .collect(),
        }
    }
}

fn canonical_unit_layout() -> Vec<Point> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    // jaw: lower half ellipse from the left temple to the right temple
    for i in 0..17 {
        let t = i as f64 / 16.0;
        pts.push(Point::new(0.5 - 0.5 * (PI * t).cos(), 0.25 + 0.75 * (PI * t).sin()));
    }
    // brows
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push(Point::new(0.10 + 0.32 * t, 0.20 - 0.04 * (PI * t).sin()));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push(Point::new(0.58 + 0.32 * t, 0.20 - 0.04 * (PI * t).sin()));
    }
    // nose bridge
    for i in 0..4 {
        pts.push(Point::new(0.5, 0.25 + 0.07 * i as f64));
    }
    // nostrils: the base (33) sits where the jaw endpoints subtend 120°
    let base_y = 0.25 + 0.5 / (PI / 3.0).tan();
    for (i, dx) in [-0.08, -0.04, 0.0, 0.04, 0.08].into_iter().enumerate() {
        let lift = if i == 2 { 0.0 } else { 0.01 };
        pts.push(Point::new(0.5 + dx, base_y - lift));
    }
    // eyes
    for cx in [0.30, 0.70] {
        for k in 0..6 {
            let a = PI * k as f64 / 3.0;
            pts.push(Point::new(cx - 0.07 * a.cos(), 0.32 - 0.03 * a.sin()));
        }
    }
    // outer lip
    for k in 0..12 {
        let a = 2.0 * PI * k as f64 / 12.0;
        pts.push(Point::new(0.5 - 0.18 * a.cos(), 0.80 - 0.07 * a.sin()));
    }
    // inner lip
    for k in 0..8 {
        let a = 2.0 * PI * k as f64 / 8.0;
        pts.push(Point::new(0.5 - 0.12 * a.cos(), 0.80 - 0.03 * a.sin()));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Face bounding box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl FaceBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyBox);
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.width, self.height)
    }
}

impl From<Rect> for FaceBox {
    fn from(r: Rect) -> Self {
        Self {
            x: r.x,
            y: r.y,
            width: r.width,
            height: r.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tilt {
    Up,
    Down,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationEstimate {
    /// Interior angle at the nose base between the jaw endpoints.
    pub alpha_deg: f64,
    /// Inclination of the line through both eye centroids, in (-90, 90].
    pub beta_deg: f64,
    pub tilt: Tilt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrientationConfig {
    /// Half-width of the neutral band around 120°.
    pub tau_deg: f64,
    pub alpha_band_deg: f64,
    pub beta_band_deg: f64,
}

impl Default for OrientationConfig {
    fn default() -> Self {
        Self {
            tau_deg: 5.0,
            alpha_band_deg: 15.0,
            beta_band_deg: 10.0,
        }
    }
}

/// Acute angle in degrees between two lines given by their slopes.
///
/// Computed from the direction vectors `(1, m1)` and `(1, m2)`; perpendicular
/// lines (`1 + m1*m2 == 0`) give exactly 90.
pub fn line_angle(m1: f64, m2: f64) -> Result<f64, GeometryError> {
    for m in [m1, m2] {
        if !m.is_finite() {
            return Err(GeometryError::NonFiniteSlope(m));
        }
    }
    let dot = 1.0 + m1 * m2;
    if dot == 0.0 {
        return Ok(90.0);
    }
    let cross = (m2 - m1).abs();
    let between = cross.atan2(dot).to_degrees();
    Ok(if between > 90.0 { 180.0 - between } else { between })
}

pub fn classify_tilt(alpha_deg: f64, tau_deg: f64) -> Tilt {
    if alpha_deg > FRONTAL_ALPHA_DEG + tau_deg {
        Tilt::Up
    } else if alpha_deg < FRONTAL_ALPHA_DEG - tau_deg {
        Tilt::Down
    } else {
        Tilt::Neutral
    }
}

/// Folds an angle in degrees into (-90, 90].
fn principal_inclination(deg: f64) -> f64 {
    let mut d = deg % 180.0;
    if d > 90.0 {
        d -= 180.0;
    } else if d <= -90.0 {
        d += 180.0;
    }
    d
}

pub fn estimate_orientation(
    landmarks: &LandmarkSet,
    tau_deg: f64,
) -> Result<OrientationEstimate, GeometryError> {
    let a = landmarks.get(JAW_LEFT);
    let b = landmarks.get(JAW_RIGHT);
    let c = landmarks.get(NOSE_BASE);
    let (ux, uy) = (a.x - c.x, a.y - c.y);
    let (vx, vy) = (b.x - c.x, b.y - c.y);
    let cross = ux * vy - uy * vx;
    let dot = ux * vx + uy * vy;
    let norms = ux.hypot(uy) * vx.hypot(vy);
    if norms == 0.0 || cross.abs() <= 1e-12 * norms {
        return Err(GeometryError::DegenerateGeometry);
    }
    let alpha_deg = cross.abs().atan2(dot).to_degrees();

    let left = landmarks.centroid(36..42);
    let right = landmarks.centroid(42..48);
    let beta_deg = principal_inclination((right.y - left.y).atan2(right.x - left.x).to_degrees());

    Ok(OrientationEstimate {
        alpha_deg,
        beta_deg,
        tilt: classify_tilt(alpha_deg, tau_deg),
    })
}

pub fn needs_frontalization(est: &OrientationEstimate, alpha_band: f64, beta_band: f64) -> bool {
    (est.alpha_deg - FRONTAL_ALPHA_DEG).abs() > alpha_band || est.beta_deg.abs() > beta_band
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Eye,
    Head,
    Beard,
    Mustache,
}

impl std::fmt::Display for PatchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchKind::Eye => "eye",
            PatchKind::Head => "head",
            PatchKind::Beard => "beard",
            PatchKind::Mustache => "mustache",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRects {
    pub eye: Rect,
    pub head: Rect,
    pub beard: Rect,
    pub mustache: Rect,
}

impl PatchRects {
    pub fn iter(&self) -> impl Iterator<Item = (PatchKind, Rect)> {
        [
            (PatchKind::Eye, self.eye),
            (PatchKind::Head, self.head),
            (PatchKind::Beard, self.beard),
            (PatchKind::Mustache, self.mustache),
        ]
        .into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub kind: PatchKind,
    pub rect: Rect,
    pub image: GrayFrame,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    pub eye: Patch,
    pub head: Patch,
    pub beard: Patch,
    pub mustache: Patch,
}

impl PatchSet {
    pub fn iter(&self) -> impl Iterator<Item = &Patch> {
        [&self.eye, &self.head, &self.beard, &self.mustache].into_iter()
    }
}

/// Landmark coordinate as a pixel index (truncated toward zero, as integer
/// landmark detectors report them).
fn px(v: f64) -> i64 {
    v.floor() as i64
}

fn half_open(
    patch: PatchKind,
    rows: (i64, i64),
    cols: (i64, i64),
) -> Result<Rect, GeometryError> {
    if rows.1 <= rows.0 || cols.1 <= cols.0 || rows.0 < 0 || cols.0 < 0 {
        return Err(GeometryError::DegenerateLandmarks { patch, rows, cols });
    }
    Ok(Rect::new(
        cols.0 as usize,
        rows.0 as usize,
        (cols.1 - cols.0) as usize,
        (rows.1 - rows.0) as usize,
    ))
}

/// Rectangles of the eye, head, beard and mustache patches.
///
/// - eye: rows `[l19.y, l29.y)`, cols `[l0.x, l16.x)`
/// - head: rows `[max(0, box.y - head_margin), l24.y)`, cols `[box.x, l16.x)`
/// - beard: rows `[l4.y, l8.y)`, cols `[l4.x, l12.x)`
/// - mustache: rows `[l30.y, l4.y)`, cols `[l4.x, l12.x)`
pub fn patch_rects(
    landmarks: &LandmarkSet,
    face: &FaceBox,
    head_margin: usize,
) -> Result<PatchRects, GeometryError> {
    let l = |i: usize| {
        let p = landmarks.get(i);
        (px(p.x), px(p.y))
    };
    let (x1, _) = l(0);
    let (x2, _) = l(16);
    let (_, y3) = l(29);
    let (_, y4) = l(19);
    let (_, y5) = l(24);
    let (x6, y6) = l(4);
    let (x7, _) = l(12);
    let (_, y8) = l(8);
    let (_, y9) = l(30);

    let head_top = (face.y as i64 - head_margin as i64).max(0);
    Ok(PatchRects {
        eye: half_open(PatchKind::Eye, (y4, y3), (x1, x2))?,
        head: half_open(PatchKind::Head, (head_top, y5), (face.x as i64, x2))?,
        beard: half_open(PatchKind::Beard, (y6, y8), (x6, x7))?,
        mustache: half_open(PatchKind::Mustache, (y9, y6), (x6, x7))?,
    })
}

pub fn crop_patches(
    image: &GrayFrame,
    landmarks: &LandmarkSet,
    face: &FaceBox,
) -> Result<PatchSet, GeometryError> {
    crop_patches_with_margin(image, landmarks, face, DEFAULT_HEAD_MARGIN)
}

pub fn crop_patches_with_margin(
    image: &GrayFrame,
    landmarks: &LandmarkSet,
    face: &FaceBox,
    head_margin: usize,
) -> Result<PatchSet, GeometryError> {
    let rects = patch_rects(landmarks, face, head_margin)?;
    let cut = |kind, rect| -> Result<Patch, GeometryError> {
        Ok(Patch {
            kind,
            rect,
            image: image.crop(rect)?,
        })
    };
    Ok(PatchSet {
        eye: cut(PatchKind::Eye, rects.eye)?,
        head: cut(PatchKind::Head, rects.head)?,
        beard: cut(PatchKind::Beard, rects.beard)?,
        mustache: cut(PatchKind::Mustache, rects.mustache)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBand {
    /// Smaller than 20x20; too little texture to classify.
    Reject,
    Small,
    Medium,
    Large,
}

pub fn patch_size_band(rect: &Rect) -> SizeBand {
    match rect.width.min(rect.height) {
        0..=19 => SizeBand::Reject,
        20..=31 => SizeBand::Small,
        32..=63 => SizeBand::Medium,
        _ => SizeBand::Large,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureGuidance {
    TooSmallComeCloser,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    LeftEdge,
    TopEdge,
    RightEdge,
    BottomEdge,
    Center,
}

impl CaptureGuidance {
    pub const ALL: [CaptureGuidance; 10] = [
        CaptureGuidance::TooSmallComeCloser,
        CaptureGuidance::TopLeft,
        CaptureGuidance::TopRight,
        CaptureGuidance::BottomLeft,
        CaptureGuidance::BottomRight,
        CaptureGuidance::LeftEdge,
        CaptureGuidance::TopEdge,
        CaptureGuidance::RightEdge,
        CaptureGuidance::BottomEdge,
        CaptureGuidance::Center,
    ];

    /// Feedback phrase shown to the person being enrolled.
    pub fn phrase(self) -> &'static str {
        match self {
            CaptureGuidance::TooSmallComeCloser => "Face is small. come closer",
            CaptureGuidance::TopLeft => "Face in top left",
            CaptureGuidance::TopRight => "Face in top right",
            CaptureGuidance::BottomLeft => "Face in bottom left",
            CaptureGuidance::BottomRight => "Face in bottom right",
            CaptureGuidance::LeftEdge => "Face in left edge",
            CaptureGuidance::TopEdge => "Face in top edge",
            CaptureGuidance::RightEdge => "Face in right edge",
            CaptureGuidance::BottomEdge => "Face in bottom edge",
            CaptureGuidance::Center => "Face in center",
        }
    }
}

impl std::fmt::Display for CaptureGuidance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.phrase())
    }
}

/// Where the face sits in the preview, judged from the corners of a box grown
/// by half its size on each side. Checks run in a fixed order and the first hit
/// wins.
pub fn guide_capture(frame_width: usize, frame_height: usize, face: &FaceBox) -> CaptureGuidance {
    let (w, h) = (frame_width as i64, frame_height as i64);
    let (x, y) = (face.x as i64, face.y as i64);
    let (bw, bh) = (face.width as i64, face.height as i64);

    let x1 = x - bw / 2;
    let y1 = y - bh / 2;
    let x2 = x1 + 3 * bw / 2;
    let y2 = y - bh / 2;
    let x3 = x - bw / 2;
    let y3 = y + 3 * bh / 2;
    let x4 = x + 3 * bw / 2;
    let y4 = y + 3 * bh / 2;

    if bw * bh <= MIN_GUIDED_FACE_AREA {
        CaptureGuidance::TooSmallComeCloser
    } else if x1 <= 0 && y1 <= 0 {
        CaptureGuidance::TopLeft
    } else if x2 >= w && y2 <= 0 {
        CaptureGuidance::TopRight
    } else if x3 <= 0 && y3 >= h {
        CaptureGuidance::BottomLeft
    } else if x4 >= w && y4 >= h {
        CaptureGuidance::BottomRight
    } else if x1 <= 0 {
        CaptureGuidance::LeftEdge
    } else if y1 <= 0 {
        CaptureGuidance::TopEdge
    } else if x2 >= w {
        CaptureGuidance::RightEdge
    } else if y4 >= h {
        CaptureGuidance::BottomEdge
    } else {
        CaptureGuidance::Center
    }
}
