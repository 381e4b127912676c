//! Profiles and event history on disk.
//!
//! Layout under the store root:
//!
//! ```text
//! profiles/<subject_id>/meta              key=value text
//! profiles/<subject_id>/views/<view_id>.pgm
//! tombstones.log                          one deleted subject id per line
//! events.log                              one event per line, CRC-32 checked
//! notifications.log                       delivery attempts per event
//! ```
//!
//! `events.log` records are
//! `event_id<TAB>timestamp_rfc3339<TAB>camera_id<TAB>verdict<TAB>attrs<TAB>summary<TAB>scene_path<TAB>crc32`
//! where the checksum covers everything before the last tab. Text fields escape
//! backslash, tab, CR and LF with a backslash.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, FixedOffset, Months, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::face_geometry::{guide_capture, patch_size_band, CaptureGuidance, FaceBox, SizeBand};
use crate::frame::GrayFrame;
use crate::lbp::{Enrollment, EnrollmentView, SubjectId, ViewId};
use crate::summary::AttributeLabel;

pub type EventId = u64;

const EVENTS_FILE: &str = "events.log";
const NOTIFICATIONS_FILE: &str = "notifications.log";
const TOMBSTONES_FILE: &str = "tombstones.log";
const PROFILES_DIR: &str = "profiles";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure at {path}: {source}; the write was not applied, retry once the disk is writable")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("subject {0} not found")]
    NotFound(SubjectId),
    #[error("a person named {name:?} with contact {contact:?} already exists (subject {existing})")]
    DuplicatePerson {
        name: String,
        contact: String,
        existing: SubjectId,
    },
    #[error("event references subject {0}, which does not exist")]
    StaleReference(SubjectId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every provided view was rejected")]
    AllViewsRejected(Vec<RejectedView>),
    #[error("event for camera {camera_id} at {timestamp} is older than its previous event")]
    OutOfOrder {
        camera_id: String,
        timestamp: DateTime<Utc>,
    },
    #[error("{file} line {line} is corrupt: {reason}")]
    Corrupt {
        file: &'static str,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    Family,
    Friend,
    Caregiver,
}

impl Relationship {
    fn as_str(self) -> &'static str {
        match self {
            Relationship::Family => "family",
            Relationship::Friend => "friend",
            Relationship::Caregiver => "caregiver",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "family" => Some(Relationship::Family),
            "friend" => Some(Relationship::Friend),
            "caregiver" => Some(Relationship::Caregiver),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPerson {
    pub name: String,
    #[serde(default)]
    pub email: String,
    #[serde(default)]
    pub contact: String,
    #[serde(default)]
    pub address: String,
    pub relationship: Relationship,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: ViewId,
    /// Relative to the store root.
    pub image: PathBuf,
    pub pose: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub subject_id: SubjectId,
    pub name: String,
    pub email: String,
    pub contact: String,
    pub address: String,
    pub relationship: Relationship,
    pub views: Vec<ViewRecord>,
}

/// A candidate enrollment picture: the full capture plus where the face is.
#[derive(Debug, Clone)]
pub struct ViewImage {
    pub frame: GrayFrame,
    pub face: Option<FaceBox>,
    pub pose: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    NoFace,
    Guidance { guidance: CaptureGuidance, phrase: String },
    PatchTooSmall,
    FaceOutsideFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedView {
    /// Position in the submitted list.
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewsAdded {
    pub subject_id: SubjectId,
    pub view_ids: Vec<ViewId>,
    pub rejected: Vec<RejectedView>,
}

/// Face crop accepted for enrollment, or why not.
pub fn view_quality(view: &ViewImage) -> Result<GrayFrame, RejectReason> {
    let face = view.face.ok_or(RejectReason::NoFace)?;
    let guidance = guide_capture(view.frame.width(), view.frame.height(), &face);
    if guidance == CaptureGuidance::TooSmallComeCloser {
        return Err(RejectReason::Guidance {
            guidance,
            phrase: guidance.phrase().to_string(),
        });
    }
    if patch_size_band(&face.rect()) == SizeBand::Reject {
        return Err(RejectReason::PatchTooSmall);
    }
    view.frame
        .crop(face.rect())
        .map_err(|_| RejectReason::FaceOutsideFrame)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Known {
        subject_id: SubjectId,
        name: String,
        /// The person has since been deleted; the name is kept for history.
        #[serde(default)]
        deleted: bool,
    },
    Unknown,
    PersonNoFace,
}

impl Verdict {
    pub fn known(subject_id: SubjectId, name: impl Into<String>) -> Self {
        Verdict::Known {
            subject_id,
            name: name.into(),
            deleted: false,
        }
    }

    pub fn class(&self) -> VerdictClass {
        match self {
            Verdict::Known { .. } => VerdictClass::Known,
            Verdict::Unknown => VerdictClass::Unknown,
            Verdict::PersonNoFace => VerdictClass::PersonNoFace,
        }
    }

    fn encode(&self) -> String {
        match self {
            Verdict::Known {
                subject_id, name, ..
            } => format!("known:{subject_id}:{}", escape(name)),
            Verdict::Unknown => "unknown".into(),
            Verdict::PersonNoFace => "person_no_face".into(),
        }
    }

    fn decode(s: &str) -> Option<Verdict> {
        match s {
            "unknown" => Some(Verdict::Unknown),
            "person_no_face" => Some(Verdict::PersonNoFace),
            _ => {
                let rest = s.strip_prefix("known:")?;
                let (id, name) = rest.split_once(':')?;
                Some(Verdict::known(id.parse().ok()?, unescape(name)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictClass {
    Known,
    Unknown,
    PersonNoFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Mms,
    Email,
    Call,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Mms => "mms",
            Channel::Email => "email",
            Channel::Call => "call",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s {
            "mms" => Some(Channel::Mms),
            "email" => Some(Channel::Email),
            "call" => Some(Channel::Call),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Failed,
    RateLimited,
}

impl DeliveryStatus {
    fn as_str(self) -> &'static str {
        match self {
            DeliveryStatus::Delivered => "delivered",
            DeliveryStatus::Failed => "failed",
            DeliveryStatus::RateLimited => "rate_limited",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "delivered" => Some(DeliveryStatus::Delivered),
            "failed" => Some(DeliveryStatus::Failed),
            "rate_limited" => Some(DeliveryStatus::RateLimited),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub channel: Channel,
    pub destination: String,
    pub status: DeliveryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// An event as submitted, before the store assigns its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEvent {
    pub timestamp: DateTime<Utc>,
    pub camera_id: String,
    pub location: String,
    pub verdict: Verdict,
    pub attributes: BTreeSet<AttributeLabel>,
    pub summary_text: String,
    pub scene_image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: EventId,
    pub timestamp: DateTime<Utc>,
    pub camera_id: String,
    pub location: String,
    pub verdict: Verdict,
    pub attributes: BTreeSet<AttributeLabel>,
    pub summary_text: String,
    pub scene_image: String,
    pub notifications: Vec<Delivery>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Daily,
    Weekly,
    Monthly,
}

impl std::str::FromStr for Period {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "daily" => Ok(Period::Daily),
            "weekly" => Ok(Period::Weekly),
            "monthly" => Ok(Period::Monthly),
            other => Err(StoreError::InvalidArgument(format!(
                "period must be daily, weekly or monthly, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub known: u64,
    pub unknown: u64,
    pub person_no_face: u64,
}

impl VerdictCounts {
    pub fn total(&self) -> u64 {
        self.known + self.unknown + self.person_no_face
    }

    fn add(&mut self, class: VerdictClass) {
        match class {
            VerdictClass::Known => self.known += 1,
            VerdictClass::Unknown => self.unknown += 1,
            VerdictClass::PersonNoFace => self.person_no_face += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownDigest {
    pub event_id: EventId,
    pub timestamp: DateTime<Utc>,
    pub location: String,
    pub summary_text: String,
    pub scene_image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub period: Period,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub total: u64,
    pub counts: VerdictCounts,
    pub per_location: BTreeMap<String, u64>,
    pub unknown_digests: Vec<UnknownDigest>,
}

/// Half-open window `[start, anchor)` covered by a report.
///
/// Daily and weekly windows are fixed lengths. The monthly window steps back
/// one calendar month in the home time zone.
pub fn report_window(
    period: Period,
    anchor: DateTime<Utc>,
    home: FixedOffset,
) -> (DateTime<Utc>, DateTime<Utc>) {
    let start = match period {
        Period::Daily => anchor - Duration::days(1),
        Period::Weekly => anchor - Duration::days(7),
        Period::Monthly => anchor
            .with_timezone(&home)
            .checked_sub_months(Months::new(1))
            .map(|t| t.with_timezone(&Utc))
            .unwrap_or(anchor - Duration::days(30)),
    };
    (start, anchor)
}

/// Aggregates the events that fall inside the report window.
pub fn summarize(
    events: &[EventRecord],
    period: Period,
    anchor: DateTime<Utc>,
    home: FixedOffset,
) -> SummaryReport {
    let (start, end) = report_window(period, anchor, home);
    let mut counts = VerdictCounts::default();
    let mut per_location = BTreeMap::new();
    let mut unknown_digests = Vec::new();
    let mut in_window: Vec<&EventRecord> = events
        .iter()
        .filter(|e| e.timestamp >= start && e.timestamp < end)
        .collect();
    in_window.sort_by_key(|e| e.event_id);
    for e in &in_window {
        counts.add(e.verdict.class());
        *per_location.entry(e.location.clone()).or_insert(0) += 1;
        if e.verdict == Verdict::Unknown {
            unknown_digests.push(UnknownDigest {
                event_id: e.event_id,
                timestamp: e.timestamp,
                location: e.location.clone(),
                summary_text: e.summary_text.clone(),
                scene_image: e.scene_image.clone(),
            });
        }
    }
    SummaryReport {
        period,
        start,
        end,
        total: in_window.len() as u64,
        counts,
        per_location,
        unknown_digests,
    }
}

#[derive(Debug, Clone, Default)]
pub struct StoreOptions {
    /// camera_id → location label; events from unlisted cameras use the id.
    pub locations: HashMap<String, String>,
    pub home_offset: Option<FixedOffset>,
}

/// File-backed profile and event store. One owner writes; readers take
/// snapshots through the accessors.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    opts: StoreOptions,
    persons: BTreeMap<SubjectId, PersonRecord>,
    tombstones: BTreeSet<SubjectId>,
    events: Vec<EventRecord>,
    last_per_camera: HashMap<String, DateTime<Utc>>,
    retrain_needed: bool,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>, opts: StoreOptions) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join(PROFILES_DIR)).map_err(io_err(&root))?;
        let mut store = Store {
            root,
            opts,
            persons: BTreeMap::new(),
            tombstones: BTreeSet::new(),
            events: Vec::new(),
            last_per_camera: HashMap::new(),
            retrain_needed: false,
        };
        store.load_tombstones()?;
        store.load_profiles()?;
        store.load_events()?;
        store.load_notifications()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn home_offset(&self) -> FixedOffset {
        self.opts
            .home_offset
            .unwrap_or_else(|| FixedOffset::east_opt(0).expect("zero offset"))
    }

    pub fn location_of(&self, camera_id: &str) -> String {
        self.opts
            .locations
            .get(camera_id)
            .cloned()
            .unwrap_or_else(|| camera_id.to_string())
    }

    pub fn persons(&self) -> impl Iterator<Item = &PersonRecord> {
        self.persons.values()
    }

    pub fn person(&self, id: SubjectId) -> Option<&PersonRecord> {
        self.persons.get(&id)
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn event(&self, id: EventId) -> Option<&EventRecord> {
        // ids are gap-free from 1
        id.checked_sub(1)
            .and_then(|i| self.events.get(i as usize))
    }

    pub fn events_since(&self, after: EventId) -> &[EventRecord] {
        let from = (after as usize).min(self.events.len());
        &self.events[from..]
    }

    pub fn next_event_id(&self) -> EventId {
        self.events.len() as EventId + 1
    }

    pub fn retrain_needed(&self) -> bool {
        self.retrain_needed
    }

    pub fn clear_retrain_flag(&mut self) {
        self.retrain_needed = false;
    }

    /// Decoded enrollment images of every person with views.
    pub fn enrollment(&self) -> Result<Enrollment, StoreError> {
        let mut out = Enrollment::new();
        for p in self.persons.values() {
            let mut views = Vec::with_capacity(p.views.len());
            for v in &p.views {
                let path = self.root.join(&v.image);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let image = GrayFrame::from_pgm(&bytes).map_err(|e| StoreError::Corrupt {
                    file: "view image",
                    line: 0,
                    reason: format!("{}: {e}", path.display()),
                })?;
                views.push(EnrollmentView {
                    view_id: v.view_id,
                    image,
                });
            }
            if !views.is_empty() {
                out.insert(p.subject_id, views);
            }
        }
        Ok(out)
    }

    pub fn add_person(
        &mut self,
        person: NewPerson,
        images: Vec<ViewImage>,
        allow_duplicate: bool,
    ) -> Result<ViewsAdded, StoreError> {
        let name = person.name.trim().to_string();
        if name.is_empty() {
            return Err(StoreError::InvalidArgument("name must not be empty".into()));
        }
        for (field, value) in [
            ("name", &person.name),
            ("email", &person.email),
            ("contact", &person.contact),
            ("address", &person.address),
        ] {
            if value.contains(['\n', '\r']) {
                return Err(StoreError::InvalidArgument(format!(
                    "{field} must be a single line"
                )));
            }
        }
        if !allow_duplicate {
            if let Some(existing) = self
                .persons
                .values()
                .find(|p| p.name == name && p.contact == person.contact)
            {
                return Err(StoreError::DuplicatePerson {
                    name,
                    contact: person.contact,
                    existing: existing.subject_id,
                });
            }
        }
        let (accepted, rejected) = screen_views(images);
        if accepted.is_empty() && !rejected.is_empty() {
            return Err(StoreError::AllViewsRejected(rejected));
        }
        let subject_id = self
            .persons
            .keys()
            .chain(self.tombstones.iter())
            .max()
            .map_or(1, |m| m + 1);
        let mut record = PersonRecord {
            subject_id,
            name,
            email: person.email,
            contact: person.contact,
            address: person.address,
            relationship: person.relationship,
            views: Vec::new(),
        };
        let view_ids = self.write_views(&mut record, accepted)?;
        self.write_meta(&record)?;
        self.persons.insert(subject_id, record);
        if !view_ids.is_empty() {
            self.retrain_needed = true;
        }
        Ok(ViewsAdded {
            subject_id,
            view_ids,
            rejected,
        })
    }

    pub fn add_views(
        &mut self,
        subject_id: SubjectId,
        images: Vec<ViewImage>,
    ) -> Result<ViewsAdded, StoreError> {
        let mut record = self
            .persons
            .get(&subject_id)
            .cloned()
            .ok_or(StoreError::NotFound(subject_id))?;
        let (accepted, rejected) = screen_views(images);
        if accepted.is_empty() && !rejected.is_empty() {
            return Err(StoreError::AllViewsRejected(rejected));
        }
        let view_ids = self.write_views(&mut record, accepted)?;
        self.write_meta(&record)?;
        self.persons.insert(subject_id, record);
        if !view_ids.is_empty() {
            self.retrain_needed = true;
        }
        Ok(ViewsAdded {
            subject_id,
            view_ids,
            rejected,
        })
    }

    /// Removes the profile and its images. Past events keep the name and are
    /// reported as belonging to a deleted person.
    pub fn delete_person(&mut self, subject_id: SubjectId) -> Result<usize, StoreError> {
        let record = self
            .persons
            .get(&subject_id)
            .ok_or(StoreError::NotFound(subject_id))?;
        let removed = record.views.len();
        self.append_line(TOMBSTONES_FILE, &format!("{subject_id}\n"))?;
        let dir = self.profile_dir(subject_id);
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        self.persons.remove(&subject_id);
        self.tombstones.insert(subject_id);
        for e in &mut self.events {
            mark_deleted(&mut e.verdict, &self.tombstones);
        }
        self.retrain_needed = true;
        Ok(removed)
    }

    pub fn record_event(&mut self, event: NewEvent) -> Result<EventId, StoreError> {
        if let Verdict::Known { subject_id, .. } = &event.verdict {
            if !self.persons.contains_key(subject_id) {
                return Err(StoreError::StaleReference(*subject_id));
            }
        }
        if event.camera_id.is_empty() {
            return Err(StoreError::InvalidArgument("camera_id must not be empty".into()));
        }
        if let Some(last) = self.last_per_camera.get(&event.camera_id) {
            if event.timestamp < *last {
                return Err(StoreError::OutOfOrder {
                    camera_id: event.camera_id,
                    timestamp: event.timestamp,
                });
            }
        }
        let event_id = self.next_event_id();
        let line = encode_event_line(event_id, &event);
        self.append_line(EVENTS_FILE, &line)?;
        self.last_per_camera
            .insert(event.camera_id.clone(), event.timestamp);
        self.events.push(EventRecord {
            event_id,
            timestamp: event.timestamp,
            location: self.location_of(&event.camera_id),
            camera_id: event.camera_id,
            verdict: event.verdict,
            attributes: event.attributes,
            summary_text: event.summary_text,
            scene_image: event.scene_image,
            notifications: Vec::new(),
        });
        Ok(event_id)
    }

    pub fn record_deliveries(
        &mut self,
        event_id: EventId,
        deliveries: &[Delivery],
    ) -> Result<(), StoreError> {
        if self.event(event_id).is_none() {
            return Err(StoreError::InvalidArgument(format!("no event {event_id}")));
        }
        let mut text = String::new();
        for d in deliveries {
            let body = format!(
                "{event_id}\t{}\t{}\t{}\t{}",
                d.channel.as_str(),
                escape(&d.destination),
                d.status.as_str(),
                escape(d.detail.as_deref().unwrap_or(""))
            );
            text.push_str(&format!("{body}\t{:08x}\n", crc32fast::hash(body.as_bytes())));
        }
        self.append_line(NOTIFICATIONS_FILE, &text)?;
        let idx = (event_id - 1) as usize;
        self.events[idx].notifications.extend_from_slice(deliveries);
        Ok(())
    }

    pub fn query_summary(&self, period: Period, anchor: DateTime<Utc>) -> SummaryReport {
        summarize(&self.events, period, anchor, self.home_offset())
    }

    fn profile_dir(&self, id: SubjectId) -> PathBuf {
        self.root.join(PROFILES_DIR).join(id.to_string())
    }

    fn write_views(
        &self,
        record: &mut PersonRecord,
        accepted: Vec<(GrayFrame, Option<String>)>,
    ) -> Result<Vec<ViewId>, StoreError> {
        let views_dir = self.profile_dir(record.subject_id).join("views");
        fs::create_dir_all(&views_dir).map_err(io_err(&views_dir))?;
        let first = record.views.iter().map(|v| v.view_id).max().unwrap_or(0) + 1;
        let mut ids = Vec::with_capacity(accepted.len());
        for (next, (face, pose)) in (first..).zip(accepted) {
            let rel = PathBuf::from(PROFILES_DIR)
                .join(record.subject_id.to_string())
                .join("views")
                .join(format!("{next}.pgm"));
            let path = self.root.join(&rel);
            fs::write(&path, face.to_pgm()).map_err(io_err(&path))?;
            record.views.push(ViewRecord {
                view_id: next,
                image: rel,
                pose: pose.map(|p| p.replace(['\n', '\r', ','], " ")),
            });
            ids.push(next);
        }
        Ok(ids)
    }

    fn write_meta(&self, p: &PersonRecord) -> Result<(), StoreError> {
        let mut text = format!(
            "subject_id={}\nname={}\nemail={}\ncontact={}\naddress={}\nrelationship={}\n",
            p.subject_id,
            p.name,
            p.email,
            p.contact,
            p.address,
            p.relationship.as_str()
        );
        for v in &p.views {
            text.push_str(&format!(
                "view={},{},{}\n",
                v.view_id,
                v.image.display(),
                v.pose.as_deref().unwrap_or("")
            ));
        }
        let dir = self.profile_dir(p.subject_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let tmp = dir.join("meta.tmp");
        let path = dir.join("meta");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn append_line(&self, file: &str, text: &str) -> Result<(), StoreError> {
        let path = self.root.join(file);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    fn load_tombstones(&mut self) -> Result<(), StoreError> {
        for (i, line) in read_complete_lines(&self.root.join(TOMBSTONES_FILE))?
            .iter()
            .enumerate()
        {
            let id = line.trim().parse().map_err(|_| StoreError::Corrupt {
                file: TOMBSTONES_FILE,
                line: i + 1,
                reason: format!("not a subject id: {line:?}"),
            })?;
            self.tombstones.insert(id);
        }
        Ok(())
    }

    fn load_profiles(&mut self) -> Result<(), StoreError> {
        let dir = self.root.join(PROFILES_DIR);
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let meta = entry.path().join("meta");
            if !meta.is_file() {
                continue;
            }
            let text = fs::read_to_string(&meta).map_err(io_err(&meta))?;
            let record = parse_meta(&text).ok_or_else(|| StoreError::Corrupt {
                file: "meta",
                line: 0,
                reason: meta.display().to_string(),
            })?;
            self.persons.insert(record.subject_id, record);
        }
        Ok(())
    }

    fn load_events(&mut self) -> Result<(), StoreError> {
        let path = self.root.join(EVENTS_FILE);
        let lines = recover_log(&path)?;
        for (i, line) in lines.iter().enumerate() {
            let (id, ev) = decode_event_line(line).ok_or_else(|| StoreError::Corrupt {
                file: EVENTS_FILE,
                line: i + 1,
                reason: "malformed record".into(),
            })?;
            if id != i as EventId + 1 {
                return Err(StoreError::Corrupt {
                    file: EVENTS_FILE,
                    line: i + 1,
                    reason: format!("expected event id {}, found {id}", i + 1),
                });
            }
            let mut verdict = ev.verdict;
            mark_deleted(&mut verdict, &self.tombstones);
            self.last_per_camera
                .insert(ev.camera_id.clone(), ev.timestamp);
            self.events.push(EventRecord {
                event_id: id,
                timestamp: ev.timestamp,
                location: self.location_of(&ev.camera_id),
                camera_id: ev.camera_id,
                verdict,
                attributes: ev.attributes,
                summary_text: ev.summary_text,
                scene_image: ev.scene_image,
                notifications: Vec::new(),
            });
        }
        Ok(())
    }

    fn load_notifications(&mut self) -> Result<(), StoreError> {
        let path = self.root.join(NOTIFICATIONS_FILE);
        let lines = recover_log(&path)?;
        for (i, line) in lines.iter().enumerate() {
            let corrupt = || StoreError::Corrupt {
                file: NOTIFICATIONS_FILE,
                line: i + 1,
                reason: "malformed record".into(),
            };
            let body = checked_body(line).ok_or_else(corrupt)?;
            let f: Vec<&str> = body.split('\t').collect();
            if f.len() != 5 {
                return Err(corrupt());
            }
            let event_id: EventId = f[0].parse().map_err(|_| corrupt())?;
            let detail = unescape(f[4]).ok_or_else(corrupt)?;
            let d = Delivery {
                channel: Channel::parse(f[1]).ok_or_else(corrupt)?,
                destination: unescape(f[2]).ok_or_else(corrupt)?,
                status: DeliveryStatus::parse(f[3]).ok_or_else(corrupt)?,
                detail: (!detail.is_empty()).then_some(detail),
            };
            let slot = event_id
                .checked_sub(1)
                .and_then(|i| self.events.get_mut(i as usize))
                .ok_or_else(corrupt)?;
            slot.notifications.push(d);
        }
        Ok(())
    }
}

fn mark_deleted(verdict: &mut Verdict, tombstones: &BTreeSet<SubjectId>) {
    if let Verdict::Known {
        subject_id,
        deleted,
        ..
    } = verdict
    {
        if tombstones.contains(subject_id) {
            *deleted = true;
        }
    }
}

fn screen_views(images: Vec<ViewImage>) -> (Vec<(GrayFrame, Option<String>)>, Vec<RejectedView>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (index, v) in images.into_iter().enumerate() {
        match view_quality(&v) {
            Ok(face) => accepted.push((face, v.pose)),
            Err(reason) => rejected.push(RejectedView { index, reason }),
        }
    }
    (accepted, rejected)
}

fn parse_meta(text: &str) -> Option<PersonRecord> {
    let mut kv = HashMap::new();
    let mut views = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=')?;
        if k == "view" {
            let mut parts = v.splitn(3, ',');
            let view_id = parts.next()?.parse().ok()?;
            let image = PathBuf::from(parts.next()?);
            let pose = parts.next().filter(|p| !p.is_empty()).map(str::to_string);
            views.push(ViewRecord {
                view_id,
                image,
                pose,
            });
        } else {
            kv.insert(k, v.to_string());
        }
    }
    Some(PersonRecord {
        subject_id: kv.get("subject_id")?.parse().ok()?,
        name: kv.remove("name")?,
        email: kv.remove("email").unwrap_or_default(),
        contact: kv.remove("contact").unwrap_or_default(),
        address: kv.remove("address").unwrap_or_default(),
        relationship: Relationship::parse(kv.get("relationship")?)?,
        views,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                't' => out.push('\t'),
                'n' => out.push('\n'),
                'r' => out.push('\r'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

fn encode_event_line(event_id: EventId, e: &NewEvent) -> String {
    let attrs: Vec<&str> = e.attributes.iter().map(|a| a.as_str()).collect();
    let body = format!(
        "{event_id}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        escape(&e.camera_id),
        e.verdict.encode(),
        attrs.join(","),
        escape(&e.summary_text),
        escape(&e.scene_image)
    );
    format!("{body}\t{:08x}\n", crc32fast::hash(body.as_bytes()))
}

/// The record text before the checksum, if the checksum matches.
fn checked_body(line: &str) -> Option<&str> {
    let (body, crc) = line.rsplit_once('\t')?;
    let expected = u32::from_str_radix(crc, 16).ok()?;
    (crc.len() == 8 && crc32fast::hash(body.as_bytes()) == expected).then_some(body)
}

fn decode_event_line(line: &str) -> Option<(EventId, NewEvent)> {
    let body = checked_body(line)?;
    let f: Vec<&str> = body.split('\t').collect();
    if f.len() != 7 {
        return None;
    }
    let attributes = if f[4].is_empty() {
        BTreeSet::new()
    } else {
        f[4].split(',')
            .map(|a| a.parse().ok())
            .collect::<Option<BTreeSet<AttributeLabel>>>()?
    };
    let camera_id = unescape(f[2])?;
    Some((
        f[0].parse().ok()?,
        NewEvent {
            timestamp: DateTime::parse_from_rfc3339(f[1]).ok()?.with_timezone(&Utc),
            location: String::new(),
            camera_id,
            verdict: Verdict::decode(f[3])?,
            attributes,
            summary_text: unescape(f[5])?,
            scene_image: unescape(f[6])?,
        },
    ))
}

fn read_complete_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text
            .split_inclusive('\n')
            .filter(|l| l.ends_with('\n'))
            .map(|l| l.trim_end_matches('\n').to_string())
            .collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(StoreError::Io {
            path: path.to_path_buf(),
            source: e,
        }),
    }
}

/// Reads a checksummed log and cuts off a torn tail: bytes after the last
/// newline, or a final line whose checksum does not match. Damage anywhere
/// else is left for the caller to report.
fn recover_log(path: &Path) -> Result<Vec<String>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(StoreError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let mut keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut lines: Vec<String> = String::from_utf8_lossy(&bytes[..keep])
        .lines()
        .map(str::to_string)
        .collect();
    if let Some(last) = lines.last() {
        if checked_body(last).is_none() {
            keep -= last.len() + 1;
            lines.pop();
        }
    }
    if keep < bytes.len() {
        tracing::warn!(
            path = %path.display(),
            dropped = bytes.len() - keep,
            "truncating torn tail of log"
        );
        let f = File::options()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
        f.sync_data().map_err(io_err(path))?;
    }
    Ok(lines)
}
