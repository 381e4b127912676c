use std::collections::BTreeSet;

use chrono::{DateTime, Duration, FixedOffset, TimeZone, Utc};
use doorwatch_core::store::{
    summarize, NewEvent, NewPerson, Period, Relationship, Store, StoreOptions, Verdict,
    VerdictCounts,
};
use doorwatch_core::summary::AttributeLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAMERAS: [(&str, &str); 3] = [("cam1", "entrance"), ("cam2", "back door"), ("cam3", "driveway")];

fn options() -> StoreOptions {
    let mut opts = StoreOptions {
        home_offset: FixedOffset::east_opt(2 * 3600),
        ..StoreOptions::default()
    };
    for (c, l) in CAMERAS {
        opts.locations.insert(c.into(), l.into());
    }
    opts
}

fn populate(store: &mut Store, n: usize, seed: u64, start: DateTime<Utc>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store
        .add_person(
            NewPerson {
                name: "John".into(),
                email: String::new(),
                contact: "1".into(),
                address: String::new(),
                relationship: Relationship::Family,
            },
            vec![],
            false,
        )
        .unwrap();
    let mut t = start;
    for _ in 0..n {
        t += Duration::seconds(rng.random_range(0..3 * 3600));
        let cam = CAMERAS[rng.random_range(0..CAMERAS.len())].0;
        let verdict = match rng.random_range(0..3) {
            0 => Verdict::known(1, "John"),
            1 => Verdict::Unknown,
            _ => Verdict::PersonNoFace,
        };
        let mut attributes = BTreeSet::new();
        if rng.random_bool(0.3) {
            attributes.insert(AttributeLabel::Cellphone);
        }
        store
            .record_event(NewEvent {
                timestamp: t,
                camera_id: cam.into(),
                location: String::new(),
                verdict,
                attributes,
                summary_text: format!("event at {t}"),
                scene_image: format!("scenes/{cam}.png"),
            })
            .unwrap();
    }
}

fn add(a: &mut VerdictCounts, b: &VerdictCounts) {
    a.known += b.known;
    a.unknown += b.unknown;
    a.person_no_face += b.person_no_face;
}

#[test]
fn weekly_equals_sum_of_dailies() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path(), options()).unwrap();
    let start = Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap();
    populate(&mut store, 500, 8, start);
    assert_eq!(store.events().len(), 500);

    for anchor_day in [7, 20, 40] {
        let anchor = start + Duration::days(anchor_day) + Duration::minutes(37);
        let weekly = store.query_summary(Period::Weekly, anchor);
        let mut sum = VerdictCounts::default();
        let mut digests = Vec::new();
        let mut total = 0;
        for d in 0..7 {
            let daily = store.query_summary(Period::Daily, anchor - Duration::days(d));
            assert_eq!(daily.counts.total(), daily.total);
            add(&mut sum, &daily.counts);
            total += daily.total;
            digests.extend(daily.unknown_digests.iter().map(|u| u.event_id));
        }
        digests.sort_unstable();
        assert_eq!(weekly.counts, sum);
        assert_eq!(weekly.total, total);
        assert_eq!(
            weekly.unknown_digests.iter().map(|u| u.event_id).collect::<Vec<_>>(),
            digests
        );
        assert_eq!(weekly.per_location.values().sum::<u64>(), weekly.total);
        assert_eq!(weekly.end - weekly.start, Duration::days(7));
    }
}

#[test]
fn counts_match_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path(), options()).unwrap();
    let start = Utc.with_ymd_and_hms(2024, 1, 15, 0, 0, 0).unwrap();
    populate(&mut store, 300, 9, start);
    let anchor = start + Duration::days(30);
    for period in [Period::Daily, Period::Weekly, Period::Monthly] {
        let r = store.query_summary(period, anchor);
        let inside: Vec<_> = store
            .events()
            .iter()
            .filter(|e| e.timestamp >= r.start && e.timestamp < r.end)
            .collect();
        assert_eq!(r.total as usize, inside.len());
        let unknown = inside.iter().filter(|e| e.verdict == Verdict::Unknown).count();
        assert_eq!(r.counts.unknown as usize, unknown);
        assert_eq!(r.unknown_digests.len(), unknown);
    }
}

#[test]
fn replay_reproduces_queries() {
    let dir = tempfile::tempdir().unwrap();
    let start = Utc.with_ymd_and_hms(2024, 2, 1, 0, 0, 0).unwrap();
    let anchor = start + Duration::days(12);
    let before = {
        let mut store = Store::open(dir.path(), options()).unwrap();
        populate(&mut store, 200, 10, start);
        (
            store.events().to_vec(),
            [Period::Daily, Period::Weekly, Period::Monthly].map(|p| store.query_summary(p, anchor)),
        )
    };
    let store = Store::open(dir.path(), options()).unwrap();
    assert_eq!(store.events(), &before.0[..]);
    for (i, p) in [Period::Daily, Period::Weekly, Period::Monthly].into_iter().enumerate() {
        assert_eq!(store.query_summary(p, anchor), before.1[i]);
        assert_eq!(summarize(store.events(), p, anchor, store.home_offset()), before.1[i]);
    }
    let ids: Vec<u64> = store.events().iter().map(|e| e.event_id).collect();
    assert_eq!(ids, (1..=200).collect::<Vec<_>>());
}

#[test]
fn torn_tail_at_every_offset_keeps_complete_records() {
    let dir = tempfile::tempdir().unwrap();
    let start = Utc.with_ymd_and_hms(2024, 2, 1, 0, 0, 0).unwrap();
    {
        let mut store = Store::open(dir.path(), options()).unwrap();
        populate(&mut store, 5, 11, start);
    }
    let log = dir.path().join("events.log");
    let full = std::fs::read(&log).unwrap();
    let last_start = full[..full.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
    for cut in last_start..full.len() {
        std::fs::write(&log, &full[..cut]).unwrap();
        let store = Store::open(dir.path(), options()).unwrap();
        assert_eq!(store.events().len(), 4, "cut at {cut}");
        assert_eq!(std::fs::read(&log).unwrap(), &full[..last_start]);
    }
}
