//! Door state machine for a fail-secure (energize-to-open) solenoid lock.
//!
//! The transition functions are pure; [`Door`] pairs the state with an
//! actuator gateway and reverts to Locked whenever the gateway cannot confirm
//! an energize.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HOLD_SECS: i64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DoorMode {
    Locked,
    Unlocked {
        opened_at: DateTime<Utc>,
        auto_close_at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuator {
    Energized,
    DeEnergized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoorState {
    pub mode: DoorMode,
    pub actuator: Actuator,
}

impl Default for DoorState {
    fn default() -> Self {
        Self::locked()
    }
}

impl DoorState {
    pub const fn locked() -> Self {
        Self {
            mode: DoorMode::Locked,
            actuator: Actuator::DeEnergized,
        }
    }

    pub fn is_locked(&self) -> bool {
        self.mode == DoorMode::Locked
    }

    pub fn auto_close_at(&self) -> Option<DateTime<Utc>> {
        match self.mode {
            DoorMode::Unlocked { auto_close_at, .. } => Some(auto_close_at),
            DoorMode::Locked => None,
        }
    }

    fn unlocked(opened_at: DateTime<Utc>, auto_close_at: DateTime<Utc>) -> Self {
        Self {
            mode: DoorMode::Unlocked {
                opened_at,
                auto_close_at,
            },
            actuator: Actuator::Energized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Open,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoorCommand {
    pub kind: CommandKind,
    pub issued_by: String,
    pub issued_at: DateTime<Utc>,
    pub correlation: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DoorError {
    #[error("door commands need an operator identity")]
    MissingOperator,
}

impl DoorCommand {
    pub fn new(
        kind: CommandKind,
        issued_by: impl Into<String>,
        issued_at: DateTime<Utc>,
    ) -> Result<Self, DoorError> {
        let issued_by = issued_by.into();
        if issued_by.trim().is_empty() {
            return Err(DoorError::MissingOperator);
        }
        Ok(Self {
            kind,
            issued_by,
            issued_at,
            correlation: None,
        })
    }

    pub fn correlated(mut self, event_id: u64) -> Self {
        self.correlation = Some(event_id);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorAction {
    Energize,
    DeEnergize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Opened,
    Extended,
    Closed,
    AlreadyLocked,
    AutoClosed,
    ActuatorFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    /// Operator, or `None` for the auto-close timer.
    pub operator: Option<String>,
    pub command: Option<CommandKind>,
    pub correlation: Option<u64>,
    pub outcome: AuditOutcome,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub state: DoorState,
    pub action: Option<ActuatorAction>,
    pub audit: AuditEntry,
}

pub fn handle_command(state: &DoorState, cmd: &DoorCommand, now: DateTime<Utc>, hold: Duration) -> Transition {
    let (next, action, outcome) = match (cmd.kind, state.mode) {
        (CommandKind::Open, DoorMode::Locked) => (
            DoorState::unlocked(now, now + hold),
            Some(ActuatorAction::Energize),
            AuditOutcome::Opened,
        ),
        // deadline already passed but no tick has run yet: a fresh opening
        (CommandKind::Open, DoorMode::Unlocked { auto_close_at, .. }) if now >= auto_close_at => (
            DoorState::unlocked(now, now + hold),
            None,
            AuditOutcome::Opened,
        ),
        (CommandKind::Open, DoorMode::Unlocked { opened_at, .. }) => (
            DoorState::unlocked(opened_at, now + hold),
            None,
            AuditOutcome::Extended,
        ),
        (CommandKind::Close, DoorMode::Unlocked { .. }) => (
            DoorState::locked(),
            Some(ActuatorAction::DeEnergize),
            AuditOutcome::Closed,
        ),
        (CommandKind::Close, DoorMode::Locked) => (*state, None, AuditOutcome::AlreadyLocked),
    };
    Transition {
        state: next,
        action,
        audit: AuditEntry {
            at: now,
            operator: Some(cmd.issued_by.clone()),
            command: Some(cmd.kind),
            correlation: cmd.correlation,
            outcome,
            detail: None,
        },
    }
}

/// Auto-close check; the deadline is inclusive.
pub fn tick(state: &DoorState, now: DateTime<Utc>) -> (DoorState, Option<ActuatorAction>) {
    match state.mode {
        DoorMode::Unlocked { auto_close_at, .. } if now >= auto_close_at => {
            (DoorState::locked(), Some(ActuatorAction::DeEnergize))
        }
        _ => (*state, None),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("actuator did not acknowledge: {0}")]
pub struct ActuatorError(pub String);

/// Switches the lock's power relay.
pub trait ActuatorGateway: Send {
    fn set_energized(&mut self, on: bool) -> Result<(), ActuatorError>;
}

/// In-memory relay that records every request and can be told to fail.
#[derive(Debug, Default, Clone)]
pub struct MockActuator {
    pub calls: Vec<bool>,
    pub energized: bool,
    fail_next: usize,
    fail_energize_always: bool,
}

impl MockActuator {
    pub fn new() -> Self {
        Self::default()
    }

    /// The next `n` requests fail.
    pub fn fail_next(&mut self, n: usize) {
        self.fail_next = n;
    }

    pub fn fail_every_energize(&mut self, on: bool) {
        self.fail_energize_always = on;
    }
}

impl ActuatorGateway for MockActuator {
    fn set_energized(&mut self, on: bool) -> Result<(), ActuatorError> {
        self.calls.push(on);
        if self.fail_next > 0 {
            self.fail_next -= 1;
            return Err(ActuatorError("injected failure".into()));
        }
        if on && self.fail_energize_always {
            return Err(ActuatorError("injected energize failure".into()));
        }
        self.energized = on;
        Ok(())
    }
}

impl<T: ActuatorGateway + ?Sized> ActuatorGateway for Box<T> {
    fn set_energized(&mut self, on: bool) -> Result<(), ActuatorError> {
        (**self).set_energized(on)
    }
}

/// Door state plus the relay it drives. Meant to have a single owner.
pub struct Door<A: ActuatorGateway> {
    state: DoorState,
    hold: Duration,
    actuator: A,
}

impl<A: ActuatorGateway> Door<A> {
    pub fn new(actuator: A, hold: Duration) -> Self {
        Self {
            state: DoorState::locked(),
            hold,
            actuator,
        }
    }

    pub fn state(&self) -> DoorState {
        self.state
    }

    pub fn hold(&self) -> Duration {
        self.hold
    }

    pub fn actuator(&self) -> &A {
        &self.actuator
    }

    pub fn actuator_mut(&mut self) -> &mut A {
        &mut self.actuator
    }

    pub fn command(&mut self, cmd: &DoorCommand, now: DateTime<Utc>) -> AuditEntry {
        let t = handle_command(&self.state, cmd, now, self.hold);
        let mut audit = t.audit;
        match self.apply(t.state, t.action) {
            Ok(()) => {}
            Err(e) => {
                audit.outcome = AuditOutcome::ActuatorFailed;
                audit.detail = Some(e.to_string());
            }
        }
        audit
    }

    /// Returns an audit entry when the timer closed the door.
    pub fn tick(&mut self, now: DateTime<Utc>) -> Option<AuditEntry> {
        let (next, action) = tick(&self.state, now);
        action?;
        let mut audit = AuditEntry {
            at: now,
            operator: None,
            command: None,
            correlation: None,
            outcome: AuditOutcome::AutoClosed,
            detail: None,
        };
        if let Err(e) = self.apply(next, action) {
            audit.outcome = AuditOutcome::ActuatorFailed;
            audit.detail = Some(e.to_string());
        }
        Some(audit)
    }

    fn apply(&mut self, next: DoorState, action: Option<ActuatorAction>) -> Result<(), ActuatorError> {
        match action {
            None => {
                self.state = next;
                Ok(())
            }
            Some(ActuatorAction::Energize) => match self.actuator.set_energized(true) {
                Ok(()) => {
                    self.state = next;
                    Ok(())
                }
                Err(e) => {
                    // best effort to make sure the coil is off
                    let _ = self.actuator.set_energized(false);
                    self.state = DoorState::locked();
                    tracing::warn!(error = %e, "energize failed; door stays locked");
                    Err(e)
                }
            },
            Some(ActuatorAction::DeEnergize) => {
                self.state = DoorState::locked();
                self.actuator.set_energized(false).inspect_err(|e| {
                    tracing::warn!(error = %e, "de-energize not acknowledged");
                })
            }
        }
    }
}
