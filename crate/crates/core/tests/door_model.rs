use chrono::{DateTime, Duration, Utc};
use doorwatch_core::door::{
    Actuator, CommandKind, Door, DoorCommand, DoorMode, DoorState, MockActuator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HOLD_MS: i64 = 3_000;

fn at(ms: i64) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(ms).unwrap()
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Open(i64),
    Close(i64),
    Tick(i64),
}

impl Step {
    fn time(self) -> i64 {
        match self {
            Step::Open(t) | Step::Close(t) | Step::Tick(t) => t,
        }
    }
}

/// Recomputes the state after `history` from scratch: the door is open iff
/// some Open came after the last Close and no tick has observed the deadline
/// of the opening run since.
fn reference(history: &[Step]) -> Option<(i64, i64)> {
    let mut run: Option<(i64, i64)> = None;
    for step in history {
        run = match (*step, run) {
            (Step::Close(_), _) => None,
            (Step::Open(t), Some((opened, deadline))) if t < deadline => Some((opened, t + HOLD_MS)),
            (Step::Open(t), _) => Some((t, t + HOLD_MS)),
            (Step::Tick(t), Some((_, deadline))) if t >= deadline => None,
            (Step::Tick(_), r) => r,
        };
    }
    run
}

fn random_history(rng: &mut ChaCha8Rng, n: usize) -> Vec<Step> {
    let mut t = 0;
    (0..n)
        .map(|_| {
            t += rng.random_range(0..1_500);
            match rng.random_range(0..10) {
                0..=2 => Step::Open(t),
                3 => Step::Close(t),
                _ => Step::Tick(t),
            }
        })
        .collect()
}

fn apply(door: &mut Door<MockActuator>, step: Step) {
    match step {
        Step::Open(t) => {
            door.command(&DoorCommand::new(CommandKind::Open, "op", at(t)).unwrap(), at(t));
        }
        Step::Close(t) => {
            door.command(&DoorCommand::new(CommandKind::Close, "op", at(t)).unwrap(), at(t));
        }
        Step::Tick(t) => {
            door.tick(at(t));
        }
    }
}

#[test]
fn agrees_with_reference_over_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let history = random_history(&mut rng, 10_000);
    let mut door = Door::new(MockActuator::new(), Duration::milliseconds(HOLD_MS));
    let mut last_open = None;
    for (i, &step) in history.iter().enumerate() {
        apply(&mut door, step);
        if let Step::Open(t) = step {
            last_open = Some(t);
        }
        let s = door.state();
        let expected = match reference(&history[..=i]) {
            None => DoorState::locked(),
            Some((o, d)) => DoorState {
                mode: DoorMode::Unlocked { opened_at: at(o), auto_close_at: at(d) },
                actuator: Actuator::Energized,
            },
        };
        assert_eq!(s, expected, "step {i}: {step:?}");
        assert_eq!(s.is_locked(), s.actuator == Actuator::DeEnergized);
        assert_eq!(door.actuator().energized, !s.is_locked());
        if let (Step::Tick(t), false) = (step, s.is_locked()) {
            assert!(t < last_open.unwrap() + HOLD_MS);
        }
    }
}

#[test]
fn actuator_failures_never_unlock() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let history = random_history(&mut rng, 5_000);
    let mut act = MockActuator::new();
    act.fail_every_energize(true);
    let mut door = Door::new(act, Duration::milliseconds(HOLD_MS));
    for step in history {
        apply(&mut door, step);
        assert!(door.state().is_locked());
        assert!(!door.actuator().energized);
    }
}

#[test]
fn flaky_actuator_keeps_power_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let history = random_history(&mut rng, 5_000);
    let mut door = Door::new(MockActuator::new(), Duration::milliseconds(HOLD_MS));
    for step in history {
        if rng.random_range(0..7) == 0 {
            door.actuator_mut().fail_next(1);
        }
        apply(&mut door, step);
        let s = door.state();
        assert_eq!(s.is_locked(), s.actuator == Actuator::DeEnergized);
        if !s.is_locked() {
            assert!(door.actuator().energized);
        }
    }
}

#[test]
fn state_does_not_depend_on_tick_granularity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let horizon = 120_000;
    let mut commands: Vec<Step> = (0..60)
        .map(|_| {
            let t = rng.random_range(0..horizon);
            if rng.random_bool(0.7) { Step::Open(t) } else { Step::Close(t) }
        })
        .collect();
    commands.sort_by_key(|s| s.time());

    let run = |tick_ms: i64| {
        let mut door = Door::new(MockActuator::new(), Duration::milliseconds(HOLD_MS));
        let mut pending = commands.iter().peekable();
        let mut observed = Vec::new();
        let mut now = 0;
        while now <= horizon {
            while let Some(&&c) = pending.peek() {
                if c.time() > now {
                    break;
                }
                apply(&mut door, c);
                pending.next();
            }
            door.tick(at(now));
            if now % 1_000 == 0 {
                observed.push(door.state());
            }
            now += tick_ms;
        }
        observed
    };
    assert_eq!(run(1_000), run(100));
}
