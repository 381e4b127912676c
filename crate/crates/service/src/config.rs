//! Service configuration, read from a TOML file.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! home_utc_offset_minutes = 60
//! operators = ["alice"]
//! attribute_manifest = "attributes.tsv"
//!
//! [[cameras]]
//! id = "cam1"
//! location = "entrance"
//! frames = "frames/cam1"
//!
//! [gate]
//! global_threshold = 100000
//!
//! [door]
//! hold_secs = 30
//! relay_url = "http://192.168.1.40"
//!
//! [notifications]
//! window_secs = 60
//! [[notifications.users]]
//! name = "owner"
//! mms = "+15550100"
//! email = "owner@example.org"
//! ```

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::FixedOffset;
use doorwatch_core::change_gate::GateConfig;
use doorwatch_core::face_geometry::OrientationConfig;
use doorwatch_core::lbp::LbpConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    /// Report windows are computed in this offset from UTC.
    pub home_utc_offset_minutes: i32,
    /// Operator tokens allowed to command the door.
    pub operators: Vec<String>,
    pub cameras: Vec<CameraConfig>,
    pub gate: GateConfig,
    pub orientation: OrientationConfig,
    pub recognizer: LbpConfig,
    pub door: DoorConfig,
    pub notifications: NotificationConfig,
    /// Fingerprint-to-label manifest for the stub attribute classifier.
    pub attribute_manifest: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            home_utc_offset_minutes: 0,
            operators: Vec::new(),
            cameras: Vec::new(),
            gate: GateConfig::default(),
            orientation: OrientationConfig::default(),
            recognizer: LbpConfig::default(),
            door: DoorConfig::default(),
            notifications: NotificationConfig::default(),
            attribute_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub id: String,
    pub location: String,
    /// Directory of numbered frames.
    pub frames: Option<PathBuf>,
    /// Detection fixture; defaults to `detections.json` inside `frames`.
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoorConfig {
    pub hold_secs: i64,
    /// Relay base URL; the in-memory mock relay is used when absent.
    pub relay_url: Option<String>,
    pub relay_timeout_ms: u64,
    pub tick_ms: u64,
}

impl Default for DoorConfig {
    fn default() -> Self {
        Self {
            hold_secs: doorwatch_core::door::DEFAULT_HOLD_SECS,
            relay_url: None,
            relay_timeout_ms: 2_000,
            tick_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotificationConfig {
    /// At most one notification per user and camera within this many seconds.
    pub window_secs: i64,
    pub users: Vec<UserPrefs>,
}

impl Default for NotificationConfig {
    fn default() -> Self {
        Self {
            window_secs: 60,
            users: Vec::new(),
        }
    }
}

/// Channels a user wants, each with its destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserPrefs {
    pub name: String,
    pub mms: Option<String>,
    pub email: Option<String>,
    pub call: Option<String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for cam in &mut self.cameras {
            cam.frames.as_mut().map(fix);
            cam.detections.as_mut().map(fix);
        }
        self.attribute_manifest.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = HashSet::new();
        for cam in &self.cameras {
            if cam.id.trim().is_empty() {
                return Err(ConfigError::Invalid("camera id must not be empty".into()));
            }
            if cam.location.trim().is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "camera {} needs a location label",
                    cam.id
                )));
            }
            if !seen.insert(cam.id.as_str()) {
                return Err(ConfigError::Invalid(format!("camera id {} repeated", cam.id)));
            }
        }
        self.gate
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.door.hold_secs <= 0 {
            return Err(ConfigError::Invalid("door.hold_secs must be positive".into()));
        }
        if self.notifications.window_secs < 0 {
            return Err(ConfigError::Invalid(
                "notifications.window_secs must not be negative".into(),
            ));
        }
        if self.operators.iter().any(|o| o.trim().is_empty()) {
            return Err(ConfigError::Invalid("operator tokens must not be empty".into()));
        }
        self.home_offset()?;
        Ok(())
    }

    pub fn home_offset(&self) -> Result<FixedOffset, ConfigError> {
        FixedOffset::east_opt(self.home_utc_offset_minutes * 60).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "home_utc_offset_minutes {} out of range",
                self.home_utc_offset_minutes
            ))
        })
    }

    pub fn locations(&self) -> HashMap<String, String> {
        self.cameras
            .iter()
            .map(|c| (c.id.clone(), c.location.clone()))
            .collect()
    }

    pub fn camera(&self, id: &str) -> Option<&CameraConfig> {
        self.cameras.iter().find(|c| c.id == id)
    }
}
