use chrono::{DateTime, Duration, TimeZone, Utc};
use outage_core::domain::{Outcome, Phase, Severity};
use outage_core::llm_gateway::{cosine, Gateway};
use outage_core::memory::*;
use outage_core::perception::{CriticalEvent, EventKind};
use proptest::prelude::*;
use std::sync::Arc;

const WORDS: &[&str] = &[
    "thermal",
    "cooling",
    "restored",
    "database",
    "failover",
    "primary",
    "replica",
    "network",
    "packet",
    "loss",
    "deploy",
    "rollback",
    "cache",
    "eviction",
    "dns",
    "resolver",
    "queue",
    "backlog",
    "cpu",
    "saturation",
    "disk",
    "full",
    "latency",
    "timeout",
    "region",
    "storage",
];

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap()
}

fn phrase(idx: &[usize]) -> String {
    idx.iter()
        .map(|i| WORDS[i % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

fn phrase_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(0usize..WORDS.len(), 1..6).prop_map(|v| phrase(&v))
}

fn stage_strategy() -> impl Strategy<Value = Phase> {
    (0usize..5).prop_map(|i| Phase::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Pruned dual-field retrieval always equals a full scan.
    #[test]
    fn retrieval_equals_full_scan(
        entries in prop::collection::vec((stage_strategy(), phrase_strategy(), phrase_strategy()), 1..40),
        deactivate in prop::collection::vec(any::<bool>(), 40),
        key_q in phrase_strategy(),
        cond_q in phrase_strategy(),
        k in 1usize..12,
    ) {
        let gw = Gateway::mock(3);
        let mut store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
        for (i, (stage, domain, cond)) in entries.iter().enumerate() {
            let id = store
                .upsert(
                    &gw,
                    KcaDraft::new(
                        KcaKey { stage: *stage, service_domain: domain.clone(), scope: String::new() },
                        cond.clone(),
                        format!("act {i}"),
                        Provenance::Playbook,
                        "prop",
                    ),
                    t0(),
                )
                .unwrap();
            if deactivate[i] {
                store.deactivate(&id, "prop", t0()).unwrap();
            }
        }
        let got = store
            .retrieve(&gw, &KcaQuery { key_text: Some(key_q.clone()), condition_text: Some(cond_q.clone()) }, k)
            .unwrap();

        let qk = gw.embed_one(&key_q).unwrap();
        let qc = gw.embed_one(&cond_q).unwrap();
        let mut want: Vec<(String, f64)> = store
            .entries()
            .iter()
            .filter(|e| e.active)
            .map(|e| {
                (e.kca_id.clone(),
                 0.5 * cosine(&qk.values, &e.key_embedding.values) + 0.5 * cosine(&qc.values, &e.condition_embedding.values))
            })
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(k);

        prop_assert_eq!(got.len(), want.len());
        for ((e, s), (id, ws)) in got.iter().zip(&want) {
            prop_assert_eq!(&e.kca_id, id);
            prop_assert!((s - ws).abs() < 1e-12);
            prop_assert!(e.active);
            prop_assert!((-1.0..=1.0).contains(s));
        }
        prop_assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    /// Caps hold for any input length, eviction is oldest-first, and the
    /// timeline is ordered by timestamp with arrival order breaking ties.
    #[test]
    fn working_memory_bounded_and_ordered(
        items in prop::collection::vec((0u8..3, 0i64..120), 0..200),
        cap in 1usize..20,
    ) {
        let caps = WorkingCaps { events: cap, notes: cap };
        let meta = IncidentMeta { service: "svc".into(), severity: Severity::Sev2, title: "t".into(), opened_at: t0() };
        let mut wm = WorkingMemoryState::open("inc", meta, caps);
        let mut events = 0usize;
        for (n, (kind, minute)) in items.iter().enumerate() {
            let ts = t0() + Duration::minutes(*minute);
            let item = match kind {
                0 => {
                    events += 1;
                    WorkingItem::Event(CriticalEvent {
                        event_id: format!("ev-{n}"),
                        incident_id: "inc".into(),
                        ts,
                        window_index: n as u64,
                        kind: EventKind::Other,
                        summary: "s".into(),
                        delta: String::new(),
                        evidence: Vec::new(),
                        phase: Phase::Detect,
                        significance: 0.3,
                    })
                }
                1 => WorkingItem::Note { ts, text: format!("note {n}") },
                _ => WorkingItem::Action {
                    action_text: format!("act {n}"),
                    ts,
                    result: String::new(),
                    outcome: Outcome::Unknown,
                    dismissed: false,
                    rec_id: None,
                },
            };
            wm.record(item).unwrap();
            prop_assert!(wm.recent_events.len() <= cap);
            prop_assert!(wm.conversation_notes.len() <= cap);
        }
        prop_assert_eq!(wm.event_log.len(), events);
        let kept: Vec<&String> = wm.recent_events.iter().map(|e| &e.event.event_id).collect();
        let tail: Vec<&String> = wm.event_log.iter().skip(events.saturating_sub(cap)).collect();
        prop_assert_eq!(kept, tail);

        let tl = wm.timeline();
        for w in tl.windows(2) {
            prop_assert!(w[0].ts() <= w[1].ts());
        }
        // Items sharing a timestamp keep their arrival order.
        let arrival = |e: &TimelineEntry| -> usize {
            let text = match e {
                TimelineEntry::Event { event_id, .. } => event_id.clone(),
                TimelineEntry::Note { text, .. } => text.clone(),
                TimelineEntry::Action { action_text, .. } => action_text.clone(),
            };
            text.rsplit(['-', ' ']).next().unwrap().parse().unwrap()
        };
        for w in tl.windows(2) {
            if w[0].ts() == w[1].ts() {
                prop_assert!(arrival(&w[0]) < arrival(&w[1]));
            }
        }
    }
}

/// Consolidation never shrinks the active set and re-running is a no-op.
#[test]
fn consolidation_is_monotone_and_idempotent() {
    let gw = Arc::new(Gateway::mock(11));
    let mem = Memory::in_memory(MemoryConfig::default(), gw);
    let mut cases = Vec::new();
    for (i, (hist, act)) in [
        (
            "thermal shutdowns, cooling restored",
            "Initiate staged recovery for DirectDrive",
        ),
        ("primary database unreachable", "Force failover of OrdersDB"),
        (
            "error spike after deployment",
            "Roll back the Portal deployment",
        ),
    ]
    .iter()
    .enumerate()
    {
        let id = format!("inc-{i}");
        mem.open_incident(
            &id,
            IncidentMeta {
                service: "DirectDrive".into(),
                severity: Severity::Sev2,
                title: hist.to_string(),
                opened_at: t0(),
            },
        );
        mem.record_working(
            &id,
            WorkingItem::Event(CriticalEvent {
                event_id: format!("{id}-ev-0000"),
                incident_id: id.clone(),
                ts: t0(),
                window_index: 0,
                kind: EventKind::Other,
                summary: hist.to_string(),
                delta: String::new(),
                evidence: Vec::new(),
                phase: Phase::Mitigate,
                significance: 0.5,
            }),
        )
        .unwrap();
        mem.record_working(
            &id,
            WorkingItem::Action {
                action_text: act.to_string(),
                ts: t0() + Duration::minutes(5),
                result: "ok".into(),
                outcome: Outcome::Success,
                dismissed: false,
                rec_id: None,
            },
        )
        .unwrap();
        mem.close_incident(&id, t0() + Duration::minutes(30))
            .unwrap();
        cases.push(mem.promote_to_episodic(&id, &[]).unwrap());
    }
    let mut active = mem.kca_active_count();
    for round in 0..3 {
        let report = mem.consolidate_long_term(&cases, t0()).unwrap();
        let now = mem.kca_active_count();
        assert!(now >= active);
        if round > 0 {
            assert!(report.created.is_empty());
            assert_eq!(now, active);
        }
        active = now;
    }
    for e in mem.kca_snapshot().entries() {
        assert!(!e.source_ref.is_empty());
    }
}
