//! The running service: store, recognizer, notifier, door and the live event
//! feed, plus the frame ingestion loop that drives them.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use doorwatch_core::door::{ActuatorGateway, MockActuator};
use doorwatch_core::lbp::{FaceRecognizer, LbpError, LbpRecognizer};
use doorwatch_core::store::{
    EventRecord, NewEvent, NewPerson, PersonRecord, Store, StoreError, StoreOptions, Verdict,
    ViewImage, ViewsAdded,
};
use doorwatch_core::summary::{AttributeClassifier, AttributeError, Identity, ManifestClassifier};
use doorwatch_core::GrayFrame;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::clock::{Clock, SystemClock};
use crate::config::{CameraConfig, Config};
use crate::detect::{DetectError, FixtureDetector};
use crate::door_actor::{spawn_door, DoorActorConfig, DoorHandle};
use crate::notify::{Notifier, OutboxTransport, Transport};
use crate::pipeline::{
    encode_png, list_frames, load_frame, Analyzer, AnalyzerConfig, CameraSource, Detectors,
    FrameAnalysis, PipelineError, SharedRecognizer, StageCounters,
};
use crate::relay::HttpRelay;

pub const DETECTIONS_FILE: &str = "detections.json";
pub const DOOR_AUDIT_FILE: &str = "door_audit.log";
const SCENES_DIR: &str = "scenes";

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("recognizer training failed: {0}")]
    Train(#[from] LbpError),
    #[error("attribute manifest: {0}")]
    Manifest(#[from] AttributeError),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown camera {0:?}")]
    UnknownCamera(String),
    #[error("camera {0} has no frame directory configured")]
    NoSource(String),
}

/// Pieces a test or an embedding program may swap out.
pub struct AppParts {
    pub clock: Arc<dyn Clock>,
    pub transport: Option<Box<dyn Transport>>,
    pub actuator: Option<Box<dyn ActuatorGateway>>,
    pub classifier: Option<Arc<dyn AttributeClassifier>>,
}

impl Default for AppParts {
    fn default() -> Self {
        Self {
            clock: Arc::new(SystemClock),
            transport: None,
            actuator: None,
            classifier: None,
        }
    }
}

pub struct App {
    config: Config,
    store: RwLock<Store>,
    recognizer: SharedRecognizer,
    analyzer: Analyzer,
    notifier: Mutex<Notifier>,
    feed: broadcast::Sender<EventRecord>,
    door: DoorHandle,
    clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StreamReport {
    pub frames: u64,
    pub events: u64,
    /// Frames that could not be decoded or did not match the previous size.
    pub skipped: u64,
    pub elapsed_ms: f64,
    pub fps: f64,
    pub max_frame_ms: f64,
}

impl App {
    pub fn open(config: Config, data_dir: &Path, parts: AppParts) -> Result<App, AppError> {
        let store = Store::open(
            data_dir,
            StoreOptions {
                locations: config.locations(),
                home_offset: Some(config.home_offset().map_err(|e| {
                    StoreError::InvalidArgument(e.to_string())
                })?),
            },
        )?;
        let classifier: Arc<dyn AttributeClassifier> = match (parts.classifier, &config.attribute_manifest) {
            (Some(c), _) => c,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|source| AppError::Read {
                    path: path.clone(),
                    source,
                })?;
                Arc::new(ManifestClassifier::parse(&text)?)
            }
            (None, None) => Arc::new(ManifestClassifier::new()),
        };
        let transport = parts
            .transport
            .unwrap_or_else(|| Box::new(OutboxTransport::new(data_dir)));
        let actuator: Box<dyn ActuatorGateway> = match (parts.actuator, &config.door.relay_url) {
            (Some(a), _) => a,
            (None, Some(url)) => Box::new(HttpRelay::new(
                url,
                std::time::Duration::from_millis(config.door.relay_timeout_ms),
            )),
            (None, None) => Box::new(MockActuator::new()),
        };
        let door = spawn_door(
            actuator,
            DoorActorConfig {
                hold: Duration::seconds(config.door.hold_secs),
                tick: std::time::Duration::from_millis(config.door.tick_ms.max(1)),
                audit_log: Some(data_dir.join(DOOR_AUDIT_FILE)),
            },
            parts.clock.clone(),
        );
        let recognizer: SharedRecognizer =
            Arc::new(RwLock::new(Box::new(LbpRecognizer::new(config.recognizer.clone()))));
        let analyzer = Analyzer {
            cfg: AnalyzerConfig {
                gate: config.gate.clone(),
                orientation: config.orientation,
                ..AnalyzerConfig::default()
            },
            recognizer: recognizer.clone(),
            classifier,
            counters: Arc::new(StageCounters::default()),
        };
        let (feed, _) = broadcast::channel(256);
        let app = App {
            notifier: Mutex::new(Notifier::new(&config.notifications, transport)),
            config,
            store: RwLock::new(store),
            recognizer,
            analyzer,
            feed,
            door,
            clock: parts.clock,
        };
        app.retrain()?;
        Ok(app)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn door(&self) -> &DoorHandle {
        &self.door
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn counters(&self) -> &StageCounters {
        &self.analyzer.counters
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventRecord> {
        self.feed.subscribe()
    }

    /// Read access to the store; hold it briefly.
    pub fn store(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.store.read().expect("store lock poisoned")
    }

    fn store_mut(&self) -> std::sync::RwLockWriteGuard<'_, Store> {
        self.store.write().expect("store lock poisoned")
    }

    /// Rebuilds the recognizer from the stored enrollment.
    pub fn retrain(&self) -> Result<(), AppError> {
        let enrollment = self.store().enrollment()?;
        let mut fresh = LbpRecognizer::new(self.config.recognizer.clone());
        if !enrollment.is_empty() {
            fresh.train(&enrollment)?;
        }
        *self.recognizer.write().expect("recognizer lock poisoned") = Box::new(fresh);
        self.store_mut().clear_retrain_flag();
        Ok(())
    }

    pub fn persons(&self) -> Vec<PersonRecord> {
        self.store().persons().cloned().collect()
    }

    pub fn add_person(
        &self,
        person: NewPerson,
        views: Vec<ViewImage>,
        allow_duplicate: bool,
    ) -> Result<ViewsAdded, AppError> {
        let added = self.store_mut().add_person(person, views, allow_duplicate)?;
        self.retrain()?;
        Ok(added)
    }

    pub fn add_views(&self, subject_id: u64, views: Vec<ViewImage>) -> Result<ViewsAdded, AppError> {
        let added = self.store_mut().add_views(subject_id, views)?;
        self.retrain()?;
        Ok(added)
    }

    pub fn delete_person(&self, subject_id: u64) -> Result<usize, AppError> {
        let removed = self.store_mut().delete_person(subject_id)?;
        self.recognizer
            .write()
            .expect("recognizer lock poisoned")
            .forget(subject_id);
        self.retrain()?;
        Ok(removed)
    }

    /// Runs one frame through the pipeline and, when it yields an event,
    /// stores it, notifies and publishes it.
    pub fn process_frame(
        &self,
        camera: &CameraSource,
        frame_index: u64,
        frame: &GrayFrame,
        prev: &GrayFrame,
        detectors: &Detectors,
        timestamp: DateTime<Utc>,
    ) -> Result<Option<EventRecord>, AppError> {
        if self.store().retrain_needed() {
            self.retrain()?;
        }
        let name_of = |id| self.store().person(id).map(|p| p.name.clone());
        let Some(analysis) =
            self.analyzer
                .analyze(camera, frame_index, frame, prev, detectors, &name_of)?
        else {
            return Ok(None);
        };
        let scene = self.save_scene(camera, frame_index, frame)?;
        let event = self.persist(camera, &analysis, timestamp, scene)?;
        let deliveries = self
            .notifier
            .lock()
            .expect("notifier lock poisoned")
            .notify(&event);
        let event = {
            let mut store = self.store_mut();
            store.record_deliveries(event.event_id, &deliveries)?;
            store.event(event.event_id).cloned().unwrap_or(event)
        };
        let _ = self.feed.send(event.clone());
        Ok(Some(event))
    }

    fn save_scene(&self, camera: &CameraSource, index: u64, frame: &GrayFrame) -> Result<String, AppError> {
        let rel = format!("{SCENES_DIR}/{}_{index}.png", camera.camera_id);
        let path = self.store().root().join(&rel);
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(path.parent().expect("scene path has a parent")).map_err(io)?;
        std::fs::write(&path, encode_png(frame)).map_err(io)?;
        Ok(rel)
    }

    fn persist(
        &self,
        camera: &CameraSource,
        analysis: &FrameAnalysis,
        timestamp: DateTime<Utc>,
        scene_image: String,
    ) -> Result<EventRecord, AppError> {
        let verdict = match &analysis.summary.identity {
            Identity::Known { subject_id, name } => Verdict::known(*subject_id, name.clone()),
            Identity::Unknown => Verdict::Unknown,
            Identity::PersonNoFace => Verdict::PersonNoFace,
        };
        let mut store = self.store_mut();
        let id = store.record_event(NewEvent {
            timestamp,
            camera_id: camera.camera_id.clone(),
            location: camera.location.clone(),
            verdict,
            attributes: analysis.attributes.clone(),
            summary_text: analysis.summary.sentence.clone(),
            scene_image,
        })?;
        Ok(store.event(id).cloned().expect("event just recorded"))
    }

    pub fn camera_source(&self, camera_id: &str) -> Result<(CameraSource, &CameraConfig), AppError> {
        let cam = self
            .config
            .camera(camera_id)
            .ok_or_else(|| AppError::UnknownCamera(camera_id.to_string()))?;
        Ok((
            CameraSource {
                camera_id: cam.id.clone(),
                location: cam.location.clone(),
            },
            cam,
        ))
    }

    /// Processes a directory of numbered frames in order. Detections come from
    /// the camera's fixture, or `detections.json` in the directory; without
    /// either nobody is ever detected.
    pub fn run_directory(
        &self,
        camera_id: &str,
        dir: &Path,
        clock: &dyn Clock,
    ) -> Result<StreamReport, AppError> {
        let (camera, cfg) = self.camera_source(camera_id)?;
        let fixture = cfg
            .detections
            .clone()
            .unwrap_or_else(|| dir.join(DETECTIONS_FILE));
        let detector = if fixture.exists() {
            Arc::new(FixtureDetector::load(&fixture)?)
        } else {
            Arc::new(FixtureDetector::default())
        };
        let detectors = Detectors {
            persons: detector.clone(),
            faces: detector,
        };
        self.run_stream(&camera, dir, &detectors, clock)
    }

    pub fn run_stream(
        &self,
        camera: &CameraSource,
        dir: &Path,
        detectors: &Detectors,
        clock: &dyn Clock,
    ) -> Result<StreamReport, AppError> {
        let frames = list_frames(dir)?;
        let started = Instant::now();
        let mut report = StreamReport::default();
        let mut prev: Option<GrayFrame> = None;
        for (index, path) in frames {
            let t0 = Instant::now();
            let timestamp = clock.now();
            report.frames += 1;
            let frame = match load_frame(&path) {
                Ok(f) => f,
                Err(e) => {
                    tracing::warn!(error = %e, "skipping frame");
                    report.skipped += 1;
                    continue;
                }
            };
            if let Some(p) = prev.as_ref().filter(|p| p.same_dimensions(&frame)) {
                match self.process_frame(camera, index, &frame, p, detectors, timestamp) {
                    Ok(Some(_)) => report.events += 1,
                    Ok(None) => {}
                    Err(AppError::Store(e)) => return Err(e.into()),
                    Err(e) => {
                        tracing::warn!(frame = index, error = %e, "frame not analyzed");
                        report.skipped += 1;
                    }
                }
            } else if prev.is_some() {
                tracing::warn!(frame = index, "frame size changed; restarting the gate");
                report.skipped += 1;
            }
            prev = Some(frame);
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            report.max_frame_ms = report.max_frame_ms.max(ms);
        }
        report.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        if report.elapsed_ms > 0.0 {
            report.fps = report.frames as f64 / (report.elapsed_ms / 1e3);
        }
        tracing::info!(camera = %camera.camera_id, frames = report.frames, events = report.events, fps = report.fps, "stream finished");
        Ok(report)
    }

    pub fn camera_dirs(&self) -> Vec<(String, Option<PathBuf>)> {
        self.config
            .cameras
            .iter()
            .map(|c| (c.id.clone(), c.frames.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SteppingClock;
    use crate::config::CameraConfig;

    fn config() -> Config {
        Config {
            cameras: vec![CameraConfig {
                id: "cam1".into(),
                location: "porch".into(),
                frames: None,
                detections: None,
            }],
            ..Config::default()
        }
    }

    #[test]
    fn empty_directory_gives_no_events() {
        let data = tempfile::tempdir().unwrap();
        let frames = tempfile::tempdir().unwrap();
        let app = App::open(config(), data.path(), AppParts::default()).unwrap();
        let clock = SteppingClock::new(DateTime::from_timestamp(0, 0).unwrap(), Duration::seconds(1));
        let r = app.run_directory("cam1", frames.path(), &clock).unwrap();
        assert_eq!((r.frames, r.events), (0, 0));
        assert!(app.store().events().is_empty());
    }

    #[test]
    fn unknown_camera_is_rejected() {
        let data = tempfile::tempdir().unwrap();
        let app = App::open(config(), data.path(), AppParts::default()).unwrap();
        assert!(matches!(
            app.run_directory("cam9", data.path(), &SystemClock),
            Err(AppError::UnknownCamera(_))
        ));
    }

    #[test]
    fn person_without_face_is_stored_and_notified() {
        let data = tempfile::tempdir().unwrap();
        let frames = tempfile::tempdir().unwrap();
        let mut cfg = config();
        cfg.notifications.users.push(crate::config::UserPrefs {
            name: "owner".into(),
            mms: Some("+15550100".into()),
            email: None,
            call: None,
        });
        let app = App::open(cfg, data.path(), AppParts::default()).unwrap();
        let bg = GrayFrame::filled(160, 120, 20).unwrap();
        let fg = GrayFrame::from_fn(160, 120, |x, _| if x > 60 { 220 } else { 20 }).unwrap();
        std::fs::write(frames.path().join("0.pgm"), bg.to_pgm()).unwrap();
        std::fs::write(frames.path().join("1.pgm"), fg.to_pgm()).unwrap();
        std::fs::write(
            frames.path().join(DETECTIONS_FILE),
            r#"{"1": [{"person_box": [70, 10, 60, 100], "face": null}]}"#,
        )
        .unwrap();
        let mut feed = app.subscribe();
        let clock = SteppingClock::new(DateTime::from_timestamp(0, 0).unwrap(), Duration::seconds(1));
        let r = app.run_directory("cam1", frames.path(), &clock).unwrap();
        assert_eq!(r.events, 1);
        let e = feed.try_recv().unwrap();
        assert_eq!(e.summary_text, "A person (no face visible) at porch");
        assert_eq!(e.verdict, Verdict::PersonNoFace);
        assert_eq!(e.notifications.len(), 1);
        assert!(data.path().join("outbox/mms/1.txt").exists());
        assert!(data.path().join(&e.scene_image).exists());
    }
}
