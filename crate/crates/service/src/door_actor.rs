//! Runs the door state machine on its own thread. Everything else talks to it
//! through a [`DoorHandle`].

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;

use chrono::Duration;
use doorwatch_core::door::{
    ActuatorGateway, AuditEntry, CommandKind, Door, DoorCommand, DoorError, DoorState,
};

use crate::clock::Clock;

enum Msg {
    Command(DoorCommand, mpsc::Sender<(AuditEntry, DoorState)>),
    Snapshot(mpsc::Sender<DoorState>),
}

#[derive(Debug, Clone)]
pub struct DoorHandle {
    tx: mpsc::Sender<Msg>,
    clock: Arc<dyn Clock>,
    hold: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum DoorActorError {
    #[error(transparent)]
    Command(#[from] DoorError),
    #[error("door controller has stopped")]
    Stopped,
}

pub struct DoorActorConfig {
    pub hold: Duration,
    pub tick: std::time::Duration,
    /// JSON-lines audit trail; not written when absent.
    pub audit_log: Option<PathBuf>,
}

pub fn spawn_door(
    actuator: Box<dyn ActuatorGateway>,
    cfg: DoorActorConfig,
    clock: Arc<dyn Clock>,
) -> DoorHandle {
    let (tx, rx) = mpsc::channel::<Msg>();
    let thread_clock = clock.clone();
    let hold = cfg.hold;
    thread::Builder::new()
        .name("door".into())
        .spawn(move || {
            let mut door = Door::new(actuator, cfg.hold);
            let audit = |entry: &AuditEntry| {
                tracing::info!(outcome = ?entry.outcome, operator = entry.operator.as_deref().unwrap_or("timer"), "door");
                if let Some(path) = &cfg.audit_log {
                    let line = serde_json::to_string(entry).expect("audit entry serializes");
                    let res = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(path)
                        .and_then(|mut f| writeln!(f, "{line}"));
                    if let Err(e) = res {
                        tracing::error!(error = %e, "cannot write door audit log");
                    }
                }
            };
            loop {
                let msg = rx.recv_timeout(cfg.tick);
                if let Some(entry) = door.tick(thread_clock.now()) {
                    audit(&entry);
                }
                match msg {
                    Ok(Msg::Command(cmd, reply)) => {
                        let entry = door.command(&cmd, thread_clock.now());
                        audit(&entry);
                        let _ = reply.send((entry, door.state()));
                    }
                    Ok(Msg::Snapshot(reply)) => {
                        let _ = reply.send(door.state());
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            if !door.state().is_locked() {
                if let Ok(cmd) = DoorCommand::new(CommandKind::Close, "shutdown", thread_clock.now()) {
                    let entry = door.command(&cmd, thread_clock.now());
                    audit(&entry);
                }
            }
        })
        .expect("spawn door thread");
    DoorHandle { tx, clock, hold }
}

impl DoorHandle {
    pub fn hold(&self) -> Duration {
        self.hold
    }

    pub fn command(
        &self,
        kind: CommandKind,
        operator: &str,
        correlation: Option<u64>,
    ) -> Result<(AuditEntry, DoorState), DoorActorError> {
        let mut cmd = DoorCommand::new(kind, operator, self.clock.now())?;
        if let Some(id) = correlation {
            cmd = cmd.correlated(id);
        }
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(Msg::Command(cmd, tx))
            .map_err(|_| DoorActorError::Stopped)?;
        rx.recv().map_err(|_| DoorActorError::Stopped)
    }

    pub fn state(&self) -> Result<DoorState, DoorActorError> {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(Msg::Snapshot(tx))
            .map_err(|_| DoorActorError::Stopped)?;
        rx.recv().map_err(|_| DoorActorError::Stopped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use chrono::DateTime;
    use doorwatch_core::door::{AuditOutcome, MockActuator};

    fn start(clock: Arc<ManualClock>, audit_log: Option<PathBuf>) -> DoorHandle {
        spawn_door(
            Box::new(MockActuator::new()),
            DoorActorConfig {
                hold: Duration::seconds(30),
                tick: std::time::Duration::from_millis(10),
                audit_log,
            },
            clock,
        )
    }

    #[test]
    fn open_then_auto_close() {
        let dir = tempfile::tempdir().unwrap();
        let t0 = DateTime::from_timestamp(1_000, 0).unwrap();
        let clock = Arc::new(ManualClock::new(t0));
        let door = start(clock.clone(), Some(dir.path().join("audit.log")));
        assert!(door.state().unwrap().is_locked());
        let (audit, state) = door.command(CommandKind::Open, "alice", Some(4)).unwrap();
        assert_eq!(audit.outcome, AuditOutcome::Opened);
        assert_eq!(audit.correlation, Some(4));
        assert_eq!(state.auto_close_at(), Some(t0 + Duration::seconds(30)));
        clock.advance(Duration::seconds(30));
        assert!(door.state().unwrap().is_locked());
        let log = std::fs::read_to_string(dir.path().join("audit.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.contains("auto_closed"));
    }

    #[test]
    fn empty_operator_is_rejected() {
        let clock = Arc::new(ManualClock::new(DateTime::from_timestamp(0, 0).unwrap()));
        let door = start(clock, None);
        assert!(matches!(
            door.command(CommandKind::Open, "", None),
            Err(DoorActorError::Command(DoorError::MissingOperator))
        ));
    }
}
