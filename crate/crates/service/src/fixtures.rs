//! Generator for the `john_at_entrance` demo stream.
//!
//! Eight 640×480 frames from camera `cam1` at the entrance: three empty
//! frames, John walking in at frame 3 and standing still through frame 5,
//! then an empty doorway for frames 6 and 7. John's face is a procedural
//! texture with a frontal landmark layout, and his person crop is labelled
//! `cellphone` in the attribute manifest.

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use doorwatch_core::face_geometry::{FaceBox, LandmarkSet};
use doorwatch_core::summary::{patch_fingerprint, AttributeLabel, ManifestClassifier};
use doorwatch_core::{GrayFrame, Rect};

use crate::detect::{DetectionFixture, FixtureFace, FixturePerson};
use crate::pipeline::encode_png;

pub const WIDTH: usize = 640;
pub const HEIGHT: usize = 480;
pub const FRAME_COUNT: u64 = 8;
pub const CAMERA_ID: &str = "cam1";
pub const LOCATION: &str = "entrance";
pub const PERSON_NAME: &str = "John";
pub const PERSON_BOX: Rect = Rect::new(220, 60, 200, 400);
pub const FACE_BOX: Rect = Rect::new(260, 80, 120, 120);
/// Frames in which John is in view.
pub const PRESENT: std::ops::RangeInclusive<u64> = 3..=5;

pub fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap()
}

fn hash(mut v: u64) -> u64 {
    v = v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    v = (v ^ (v >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    v ^ (v >> 31)
}

fn noise(seed: u64, x: usize, y: usize, amp: i32) -> i32 {
    let h = hash(seed ^ ((x as u64) << 20) ^ ((y as u64) << 40));
    (h % (2 * amp as u64 + 1)) as i32 - amp
}

fn clamp(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn background() -> GrayFrame {
    GrayFrame::from_fn(WIDTH, HEIGHT, |x, y| {
        clamp(60 + (x / 16) as i32 + (y / 12) as i32 + noise(1, x, y, 2))
    })
    .expect("fixed dimensions")
}

/// John's face texture at face-local coordinates.
pub fn face_texture(x: usize, y: usize) -> u8 {
    let (fx, fy) = (x as f64, y as f64);
    let v = 128.0
        + 50.0 * (fx * 0.31 + fy * 0.17).sin()
        + 30.0 * (fy * 0.23 - fx * 0.11).cos();
    clamp(v.round() as i32 + noise(7, x, y, 6))
}

fn with_john(bg: &GrayFrame) -> GrayFrame {
    let mut f = bg.clone();
    for y in PERSON_BOX.y..PERSON_BOX.bottom() {
        for x in PERSON_BOX.x..PERSON_BOX.right() {
            let v = 200 - ((y - PERSON_BOX.y) / 8) as i32 + noise(3, x, y, 4);
            f.set(x, y, clamp(v));
        }
    }
    for y in 0..FACE_BOX.height {
        for x in 0..FACE_BOX.width {
            f.set(FACE_BOX.x + x, FACE_BOX.y + y, face_texture(x, y));
        }
    }
    f
}

pub struct JohnAtEntrance {
    pub frames: Vec<GrayFrame>,
    pub detections: DetectionFixture,
    /// Full enrollment captures, each with John's face at [`FACE_BOX`].
    pub enrollment: Vec<GrayFrame>,
    pub manifest: ManifestClassifier,
}

/// Where [`JohnAtEntrance::write`] put things.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub config: PathBuf,
    pub frames: PathBuf,
    pub enrollment: Vec<PathBuf>,
}

impl JohnAtEntrance {
    pub fn generate() -> Self {
        let bg = background();
        let john = with_john(&bg);
        let frames = (0..FRAME_COUNT)
            .map(|i| if PRESENT.contains(&i) { john.clone() } else { bg.clone() })
            .collect();

        let landmarks: Vec<[f64; 2]> = LandmarkSet::canonical(FACE_BOX)
            .points()
            .iter()
            .map(|p| [p.x, p.y])
            .collect();
        let detections = PRESENT
            .map(|i| {
                (
                    i,
                    vec![FixturePerson {
                        person_box: [PERSON_BOX.x, PERSON_BOX.y, PERSON_BOX.width, PERSON_BOX.height],
                        face: Some(FixtureFace {
                            face_box: [FACE_BOX.x, FACE_BOX.y, FACE_BOX.width, FACE_BOX.height],
                            landmarks: landmarks.clone(),
                        }),
                    }],
                )
            })
            .collect();

        // the first capture matches the stream exactly; the rest add sensor noise
        let enrollment = (0..3u64)
            .map(|k| {
                if k == 0 {
                    john.clone()
                } else {
                    GrayFrame::from_fn(WIDTH, HEIGHT, |x, y| {
                        clamp(i32::from(john.get(x, y)) + noise(100 + k, x, y, 3))
                    })
                    .expect("fixed dimensions")
                }
            })
            .collect();

        let mut manifest = ManifestClassifier::new();
        let person = john.crop(PERSON_BOX).expect("person box inside the frame");
        manifest.insert(patch_fingerprint(&person), AttributeLabel::Cellphone);

        Self {
            frames,
            detections,
            enrollment,
            manifest,
        }
    }

    pub fn face_box() -> FaceBox {
        FaceBox::from(FACE_BOX)
    }

    /// Writes frames, detections, enrollment captures, the attribute manifest
    /// and a matching `config.toml` under `root`.
    pub fn write(&self, root: &Path) -> std::io::Result<FixturePaths> {
        let frames_dir = root.join("frames").join(CAMERA_ID);
        let enroll_dir = root.join("enroll");
        std::fs::create_dir_all(&frames_dir)?;
        std::fs::create_dir_all(&enroll_dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            std::fs::write(frames_dir.join(format!("{i:04}.png")), encode_png(f))?;
        }
        std::fs::write(
            frames_dir.join("detections.json"),
            serde_json::to_string_pretty(&self.detections)?,
        )?;
        let mut enrollment = Vec::new();
        for (i, f) in self.enrollment.iter().enumerate() {
            let p = enroll_dir.join(format!("john_{}.png", i + 1));
            std::fs::write(&p, encode_png(f))?;
            enrollment.push(p);
        }
        std::fs::write(root.join("attributes.tsv"), self.manifest.to_manifest())?;
        let config = root.join("config.toml");
        std::fs::write(&config, CONFIG_TOML)?;
        Ok(FixturePaths {
            root: root.to_path_buf(),
            config,
            frames: frames_dir,
            enrollment,
        })
    }
}

const CONFIG_TOML: &str = r#"listen = "127.0.0.1:8080"
operators = ["operator-token"]
attribute_manifest = "attributes.tsv"

[[cameras]]
id = "cam1"
location = "entrance"
frames = "frames/cam1"

[notifications]
window_secs = 60

[[notifications.users]]
name = "owner"
mms = "+15550100"
"#;
