//! Frame-to-frame change gating.
//!
//! Two consecutive frames are gamma corrected, differenced, binarized per pixel
//! and the binarized values summed. A frame is active when that sum reaches the
//! global threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::frame::GrayFrame;

/// Minimum activity of a 32x32 face-sized region flipping fully: 32 * 32 * 255.
pub const CONSERVATIVE_GLOBAL_THRESHOLD: u64 = 32 * 32 * 255;
pub const DEFAULT_GLOBAL_THRESHOLD: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("frame dimensions differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("adaptive window must be odd, at least 3 and no larger than {max}; got {window}")]
    InvalidWindow { window: usize, max: usize },
    #[error("a labeled stream needs at least 2 frames, got {0}")]
    StreamTooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelMode {
    #[default]
    Binary,
    AdaptiveGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub gamma: f64,
    pub pixel_mode: PixelMode,
    pub pixel_threshold: u8,
    pub adaptive_window: usize,
    pub adaptive_offset: i32,
    pub global_threshold: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            pixel_mode: PixelMode::Binary,
            pixel_threshold: 25,
            adaptive_window: 11,
            adaptive_offset: 5,
            global_threshold: DEFAULT_GLOBAL_THRESHOLD,
        }
    }
}

impl GateConfig {
    /// Default settings with the face-sized 261120 global threshold.
    pub fn conservative() -> Self {
        Self {
            global_threshold: CONSERVATIVE_GLOBAL_THRESHOLD,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(GateError::InvalidGamma(self.gamma));
        }
        if self.adaptive_window < 3 || self.adaptive_window.is_multiple_of(2) {
            return Err(GateError::InvalidWindow {
                window: self.adaptive_window,
                max: usize::MAX,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeDecision {
    pub score: u64,
    pub active: bool,
    pub binary_mask: GrayFrame,
}

pub fn gamma_correct(frame: &GrayFrame, gamma: f64) -> Result<GrayFrame, GateError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(GateError::InvalidGamma(gamma));
    }
    if gamma == 1.0 {
        return Ok(frame.clone());
    }
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        let mapped = 255.0 * (v as f64 / 255.0).powf(gamma);
        *slot = mapped.round().clamp(0.0, 255.0) as u8;
    }
    Ok(frame.map(|p| lut[p as usize]))
}

fn check_dims(a: &GrayFrame, b: &GrayFrame) -> Result<(), GateError> {
    if a.same_dimensions(b) {
        Ok(())
    } else {
        Err(GateError::DimensionMismatch {
            a_w: a.width(),
            a_h: a.height(),
            b_w: b.width(),
            b_h: b.height(),
        })
    }
}

pub fn frame_diff(a: &GrayFrame, b: &GrayFrame) -> Result<GrayFrame, GateError> {
    check_dims(a, b)?;
    let pixels = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&p, &q)| p.abs_diff(q))
        .collect();
    Ok(GrayFrame::new(a.width(), a.height(), pixels).expect("dimensions already valid"))
}

/// 255 where `diff > threshold`, else 0.
pub fn binarize(diff: &GrayFrame, threshold: u8) -> GrayFrame {
    diff.map(|p| if p > threshold { 255 } else { 0 })
}

/// Normalized 1-D Gaussian taps for an odd window, using the usual
/// `sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8` width.
pub fn gaussian_kernel(window: usize) -> Vec<f64> {
    let sigma = 0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Local-threshold binarization against a Gaussian-weighted neighbourhood mean.
///
/// A pixel maps to 255 when it exceeds `mean - offset`. Borders use mirror padding.
pub fn adaptive_binarize(
    diff: &GrayFrame,
    window: usize,
    offset: i32,
) -> Result<GrayFrame, GateError> {
    let (w, h) = (diff.width(), diff.height());
    let max = w.min(h);
    if window < 3 || window.is_multiple_of(2) || window > max {
        return Err(GateError::InvalidWindow { window, max });
    }
    let kernel = gaussian_kernel(window);
    let half = (window / 2) as isize;

    // separable: horizontal then vertical
    let mut horiz = vec![0.0f64; w * h];
    for y in 0..h {
        let row = diff.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - half, w);
                acc += wt * f64::from(row[sx]);
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut mean = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - half, h);
                mean += wt * horiz[sy * w + x];
            }
            let threshold = mean - f64::from(offset);
            if f64::from(diff.get(x, y)) > threshold {
                out[y * w + x] = 255;
            }
        }
    }
    Ok(GrayFrame::new(w, h, out).expect("dimensions already valid"))
}

/// Sum of mask values; 255 per set pixel.
pub fn mask_score(mask: &GrayFrame) -> u64 {
    mask.pixels().iter().map(|&p| u64::from(p)).sum()
}

pub fn detect_change(
    prev: &GrayFrame,
    curr: &GrayFrame,
    cfg: &GateConfig,
) -> Result<ChangeDecision, GateError> {
    check_dims(prev, curr)?;
    let a = gamma_correct(prev, cfg.gamma)?;
    let b = gamma_correct(curr, cfg.gamma)?;
    let diff = frame_diff(&a, &b)?;
    let binary_mask = match cfg.pixel_mode {
        PixelMode::Binary => binarize(&diff, cfg.pixel_threshold),
        PixelMode::AdaptiveGaussian => {
            adaptive_binarize(&diff, cfg.adaptive_window, cfg.adaptive_offset)?
        }
    };
    let score = mask_score(&binary_mask);
    Ok(ChangeDecision {
        score,
        active: score >= cfg.global_threshold,
        binary_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// TP / (TP + FP), 1.0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    /// TP / (TP + FN), 1.0 when nothing was labeled positive.
    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Outcome of running the gate over a labeled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GateEvaluation {
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    /// One row per consecutive pair, indexed by the second frame.
    pub rows: Vec<GateRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateRow {
    pub index: usize,
    pub score: u64,
    pub active: bool,
    pub label: bool,
}

/// Scores of every consecutive pair: element `i` compares frame `i` with `i + 1`.
pub fn score_stream(
    frames: &[GrayFrame],
    cfg: &GateConfig,
    mode: ExecMode,
) -> Result<Vec<u64>, GateError> {
    pair_scores(frames.len(), |i| &frames[i], cfg, mode)
}

fn pair_scores<'a, F>(
    len: usize,
    frame_at: F,
    cfg: &GateConfig,
    mode: ExecMode,
) -> Result<Vec<u64>, GateError>
where
    F: Fn(usize) -> &'a GrayFrame + Sync + Send,
{
    if len < 2 {
        return Err(GateError::StreamTooShort(len));
    }
    exec::map_range(mode, len - 1, |i| {
        detect_change(frame_at(i), frame_at(i + 1), cfg).map(|d| d.score)
    })
    .into_iter()
    .collect()
}

/// Confusion counts of thresholding precomputed pair scores against the labels of
/// the second frame of each pair.
pub fn confusion_at(scores: &[u64], labels: &[bool], global_threshold: u64) -> Confusion {
    let mut c = Confusion::default();
    for (score, &label) in scores.iter().zip(&labels[1..]) {
        c.add(*score >= global_threshold, label);
    }
    c
}

pub fn evaluate_gate(
    stream: &[(GrayFrame, bool)],
    cfg: &GateConfig,
) -> Result<GateEvaluation, GateError> {
    evaluate_gate_with(stream, cfg, ExecMode::default())
}

pub fn evaluate_gate_with(
    stream: &[(GrayFrame, bool)],
    cfg: &GateConfig,
    mode: ExecMode,
) -> Result<GateEvaluation, GateError> {
    let scores = pair_scores(stream.len(), |i| &stream[i].0, cfg, mode)?;
    let labels: Vec<bool> = stream.iter().map(|(_, l)| *l).collect();
    let confusion = confusion_at(&scores, &labels, cfg.global_threshold);
    let rows = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| GateRow {
            index: i + 1,
            score,
            active: score >= cfg.global_threshold,
            label: labels[i + 1],
        })
        .collect();
    Ok(GateEvaluation {
        precision: confusion.precision(),
        recall: confusion.recall(),
        confusion,
        rows,
    })
}
