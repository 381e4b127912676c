//! Event notifications over MMS, email and phone call.
//!
//! Mock transports write one file per event and channel,
//! `outbox/<channel>/<event_id>.txt`, holding one block per recipient.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use doorwatch_core::store::{Channel, Delivery, DeliveryStatus, EventRecord};

use crate::config::{NotificationConfig, UserPrefs};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationMessage {
    pub event_id: u64,
    pub subject: String,
    /// Summary sentence, facial description, time and location.
    pub body: String,
    pub attachment: String,
}

impl NotificationMessage {
    pub fn for_event(e: &EventRecord) -> Self {
        let description = if e.attributes.is_empty() {
            "none".to_string()
        } else {
            e.attributes
                .iter()
                .map(|a| a.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let body = format!(
            "{}\nDescription: {}\nTime: {}\nLocation: {}\n",
            e.summary_text,
            description,
            e.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            e.location
        );
        Self {
            event_id: e.event_id,
            subject: format!("Activity at {}", e.location),
            body,
            attachment: e.scene_image.clone(),
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, channel: Channel, destination: &str, msg: &NotificationMessage) -> Result<(), String>;
}

/// Writes deliveries to files under `<root>/outbox`.
#[derive(Debug, Clone)]
pub struct OutboxTransport {
    root: PathBuf,
}

impl OutboxTransport {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, channel: Channel, event_id: u64) -> PathBuf {
        self.root
            .join("outbox")
            .join(channel.as_str())
            .join(format!("{event_id}.txt"))
    }
}

impl Transport for OutboxTransport {
    fn send(&self, channel: Channel, destination: &str, msg: &NotificationMessage) -> Result<(), String> {
        let path = self.path_for(channel, msg.event_id);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| e.to_string())?;
        write!(
            f,
            "To: {destination}\nSubject: {}\nAttachment: {}\n\n{}\n",
            msg.subject, msg.attachment, msg.body
        )
        .map_err(|e| e.to_string())
    }
}

/// Applies user preferences and the per-user, per-camera frequency limit.
pub struct Notifier {
    users: Vec<UserPrefs>,
    window: Duration,
    transport: Box<dyn Transport>,
    last_sent: HashMap<(String, String), DateTime<Utc>>,
}

impl Notifier {
    pub fn new(cfg: &NotificationConfig, transport: Box<dyn Transport>) -> Self {
        Self {
            users: cfg.users.clone(),
            window: Duration::seconds(cfg.window_secs),
            transport,
            last_sent: HashMap::new(),
        }
    }

    /// Sends (or suppresses) the event to every user; returns one record per
    /// user and channel. Transport errors become `Failed` records.
    pub fn notify(&mut self, event: &EventRecord) -> Vec<Delivery> {
        let msg = NotificationMessage::for_event(event);
        let mut out = Vec::new();
        for user in &self.users {
            let key = (user.name.clone(), event.camera_id.clone());
            let limited = self
                .last_sent
                .get(&key)
                .is_some_and(|last| event.timestamp - *last < self.window);
            let mut delivered = false;
            for (channel, dest) in [
                (Channel::Mms, &user.mms),
                (Channel::Email, &user.email),
                (Channel::Call, &user.call),
            ] {
                let Some(dest) = dest else { continue };
                let (status, detail) = if limited {
                    (DeliveryStatus::RateLimited, None)
                } else {
                    match self.transport.send(channel, dest, &msg) {
                        Ok(()) => {
                            delivered = true;
                            (DeliveryStatus::Delivered, None)
                        }
                        Err(e) => {
                            tracing::warn!(event = event.event_id, channel = channel.as_str(), error = %e, "delivery failed");
                            (DeliveryStatus::Failed, Some(e))
                        }
                    }
                };
                out.push(Delivery {
                    channel,
                    destination: dest.clone(),
                    status,
                    detail,
                });
            }
            if delivered {
                self.last_sent.insert(key, event.timestamp);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use doorwatch_core::store::Verdict;
    use std::collections::BTreeSet;
    use std::sync::{Arc, Mutex};

    fn event(id: u64, secs: i64, camera: &str) -> EventRecord {
        EventRecord {
            event_id: id,
            timestamp: DateTime::from_timestamp(secs, 0).unwrap(),
            camera_id: camera.into(),
            location: "entrance".into(),
            verdict: Verdict::Unknown,
            attributes: BTreeSet::new(),
            summary_text: "An unknown person at the entrance".into(),
            scene_image: format!("scenes/{camera}_{id}.png"),
            notifications: vec![],
        }
    }

    fn user(mms: bool, email: bool, call: bool) -> UserPrefs {
        UserPrefs {
            name: "owner".into(),
            mms: mms.then(|| "+15550100".into()),
            email: email.then(|| "owner@example.org".into()),
            call: call.then(|| "+15550199".into()),
        }
    }

    #[derive(Default, Clone)]
    struct Recorder(Arc<Mutex<Vec<(Channel, String)>>>, bool);

    impl Transport for Recorder {
        fn send(&self, c: Channel, d: &str, _: &NotificationMessage) -> Result<(), String> {
            if self.1 {
                return Err("link down".into());
            }
            self.0.lock().unwrap().push((c, d.to_string()));
            Ok(())
        }
    }

    fn notifier(users: Vec<UserPrefs>, t: Recorder) -> Notifier {
        Notifier::new(
            &NotificationConfig {
                window_secs: 60,
                users,
            },
            Box::new(t),
        )
    }

    #[test]
    fn one_record_per_channel() {
        let rec = Recorder::default();
        let mut n = notifier(vec![user(true, true, true)], rec.clone());
        let d = n.notify(&event(1, 0, "cam1"));
        assert_eq!(
            d.iter().map(|d| d.channel).collect::<Vec<_>>(),
            vec![Channel::Mms, Channel::Email, Channel::Call]
        );
        assert!(d.iter().all(|d| d.status == DeliveryStatus::Delivered));
        assert_eq!(rec.0.lock().unwrap().len(), 3);
    }

    #[test]
    fn second_event_in_window_is_suppressed() {
        let rec = Recorder::default();
        let mut n = notifier(vec![user(true, false, false)], rec.clone());
        assert_eq!(n.notify(&event(1, 0, "cam1"))[0].status, DeliveryStatus::Delivered);
        assert_eq!(n.notify(&event(2, 5, "cam1"))[0].status, DeliveryStatus::RateLimited);
        // other camera has its own window
        assert_eq!(n.notify(&event(3, 6, "cam2"))[0].status, DeliveryStatus::Delivered);
        assert_eq!(n.notify(&event(4, 60, "cam1"))[0].status, DeliveryStatus::Delivered);
        assert_eq!(rec.0.lock().unwrap().len(), 3);
    }

    #[test]
    fn failures_are_recorded_not_raised() {
        let mut n = notifier(vec![user(true, false, false)], Recorder(Default::default(), true));
        let d = n.notify(&event(1, 0, "cam1"));
        assert_eq!(d[0].status, DeliveryStatus::Failed);
        assert_eq!(d[0].detail.as_deref(), Some("link down"));
        // a failed attempt does not open the window
        assert_eq!(n.notify(&event(2, 1, "cam1"))[0].status, DeliveryStatus::Failed);
    }

    #[test]
    fn outbox_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let t = OutboxTransport::new(dir.path());
        let e = event(7, 0, "cam1");
        let msg = NotificationMessage::for_event(&e);
        t.send(Channel::Mms, "+15550100", &msg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("outbox/mms/7.txt")).unwrap();
        assert!(text.starts_with("To: +15550100\n"));
        assert!(text.contains("An unknown person at the entrance\n"));
        assert!(text.contains("Attachment: scenes/cam1_7.png"));
        assert!(text.contains("Description: none"));
    }
}
