use super::*;
use crate::domain::{Outcome, Phase, Severity};
use crate::llm_gateway::cosine;
use crate::perception::{CriticalEvent, EventKind};
use crate::reasoning::Disposition;
use chrono::{Duration, TimeZone};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 3, 47, 0).unwrap()
}

fn gw() -> Arc<Gateway> {
    Arc::new(Gateway::mock(7))
}

fn key(stage: Phase, domain: &str) -> KcaKey {
    KcaKey {
        stage,
        service_domain: domain.into(),
        scope: String::new(),
    }
}

fn draft(stage: Phase, domain: &str, cond: &str, action: &str) -> KcaDraft {
    KcaDraft::new(
        key(stage, domain),
        cond,
        action,
        Provenance::Playbook,
        "fixture",
    )
}

/// Twenty entries, three of them about thermal shutdowns.
const FIXTURE: &[(Phase, &str, &str, &str)] = &[
    (
        Phase::Resolve,
        "storage",
        "thermal shutdown after cooling failure, cooling restored and temperatures stabilizing",
        "Initiate controlled power-up and recovery sequence for {service}",
    ),
    (
        Phase::Mitigate,
        "storage",
        "thermal shutdown of racks while cooling unit is down",
        "Engage facilities to restore cooling for {region}",
    ),
    (
        Phase::Assess,
        "compute",
        "thermal alarms and cooling degradation across the datacenter hall",
        "Assess thermal headroom and shed load in {region}",
    ),
    (
        Phase::Mitigate,
        "database",
        "primary database unreachable and failover not triggered",
        "Force failover of {service} to the secondary replica",
    ),
    (
        Phase::Investigate,
        "database",
        "replication lag growing on read replicas",
        "Inspect replication backlog on {service}",
    ),
    (
        Phase::Mitigate,
        "network",
        "packet loss on backbone link between regions",
        "Reroute traffic away from the degraded link in {region}",
    ),
    (
        Phase::Investigate,
        "network",
        "bgp session flapping with upstream provider",
        "Collect bgp session logs and engage the provider",
    ),
    (
        Phase::Mitigate,
        "deploy",
        "error rate spike right after a new deployment",
        "Roll back the latest deployment of {service}",
    ),
    (
        Phase::Detect,
        "monitoring",
        "alert storm from synthetic probes",
        "Acknowledge alerts and open an outage bridge",
    ),
    (
        Phase::Assess,
        "identity",
        "token issuance latency high for sign-in requests",
        "Assess customer impact on sign-in for {service}",
    ),
    (
        Phase::Mitigate,
        "compute",
        "cpu saturation on frontend fleet during traffic surge",
        "Scale out the frontend fleet of {service}",
    ),
    (
        Phase::Mitigate,
        "storage",
        "disk full on log volume of storage nodes",
        "Purge rotated logs and expand the volume",
    ),
    (
        Phase::Resolve,
        "deploy",
        "rollback completed and error rate back to baseline",
        "Validate health checks and close the deployment freeze",
    ),
    (
        Phase::Investigate,
        "dns",
        "name resolution failures for internal zones",
        "Check dns resolver health and recent zone changes",
    ),
    (
        Phase::Mitigate,
        "dns",
        "stale dns records pointing to retired hosts",
        "Flush resolver caches and republish records",
    ),
    (
        Phase::Mitigate,
        "cache",
        "cache hit ratio collapsed after eviction storm",
        "Warm the cache tier and throttle cold reads",
    ),
    (
        Phase::Resolve,
        "database",
        "failover completed and writes succeeding on new primary",
        "Rebuild the old primary as a replica",
    ),
    (
        Phase::Assess,
        "network",
        "customers in one region report timeouts",
        "Assess scope of timeouts by region",
    ),
    (
        Phase::Investigate,
        "compute",
        "memory leak suspected in worker processes",
        "Capture heap dumps from workers of {service}",
    ),
    (
        Phase::Mitigate,
        "queue",
        "message backlog growing on ingestion queue",
        "Add consumers and throttle producers",
    ),
];

fn fixture_store(gw: &Gateway) -> KcaStore {
    let mut store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
    for (stage, domain, cond, action) in FIXTURE {
        store
            .upsert(gw, draft(*stage, domain, cond, action), t0())
            .unwrap();
    }
    store
}

/// Full scan over every active entry; the independent ranking oracle.
fn brute_force(
    store: &KcaStore,
    gw: &Gateway,
    key_text: &str,
    cond_text: &str,
    k: usize,
) -> Vec<(String, f64)> {
    let qk = gw.embed_one(key_text).unwrap();
    let qc = gw.embed_one(cond_text).unwrap();
    let mut all: Vec<(String, f64)> = store
        .entries()
        .iter()
        .filter(|e| e.active)
        .map(|e| {
            let s = 0.5 * cosine(&qk.values, &e.key_embedding.values)
                + 0.5 * cosine(&qc.values, &e.condition_embedding.values);
            (e.kca_id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn self_retrieval_scores_one() {
    let gw = gw();
    let mut store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
    let id = store
        .upsert(
            &gw,
            draft(
                Phase::Mitigate,
                "database",
                "primary unreachable",
                "failover {service}",
            ),
            t0(),
        )
        .unwrap();
    let q = KcaQuery {
        key_text: Some("Mitigate database".into()),
        condition_text: Some("primary unreachable".into()),
    };
    let hits = store.retrieve(&gw, &q, 5).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].0.kca_id, id);
    assert!((hits[0].1 - 1.0).abs() < 1e-6);
}

#[test]
fn slots_are_validated() {
    let gw = gw();
    let mut store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
    let mut ok = draft(Phase::Mitigate, "db", "primary down", "failover {service}");
    ok.slots = Some(vec!["service".into()]);
    assert!(store.upsert(&gw, ok, t0()).is_ok());
    let mut orphan = draft(
        Phase::Mitigate,
        "db",
        "primary down",
        "failover {service} in {region}",
    );
    orphan.slots = Some(vec!["service".into()]);
    assert!(
        matches!(store.upsert(&gw, orphan, t0()), Err(MemoryError::OrphanSlot(s)) if s == "region")
    );
}

#[test]
fn wrong_embedding_dim_rejected() {
    let gw = gw();
    let mut store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
    let mut d = draft(Phase::Mitigate, "db", "primary down", "failover");
    d.key_embedding = Some(EmbeddingVectorFixture::of_dim(8));
    assert!(matches!(
        store.upsert(&gw, d, t0()),
        Err(MemoryError::DimMismatch { got: 8, .. })
    ));
}

struct EmbeddingVectorFixture;

impl EmbeddingVectorFixture {
    fn of_dim(n: usize) -> crate::llm_gateway::EmbeddingVector {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        crate::llm_gateway::EmbeddingVector::new(v, "mock")
    }
}

#[test]
fn k_beyond_store_returns_everything_sorted() {
    let gw = gw();
    let store = fixture_store(&gw);
    let q = KcaQuery {
        key_text: Some("Mitigate storage".into()),
        condition_text: Some("disk full".into()),
    };
    let hits = store.retrieve(&gw, &q, 100).unwrap();
    assert_eq!(hits.len(), FIXTURE.len());
    assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn thermal_entries_rank_first() {
    let gw = gw();
    let store = fixture_store(&gw);
    let q = KcaQuery {
        key_text: None,
        condition_text: Some("thermal shutdown cooling restored".into()),
    };
    let hits = store.retrieve(&gw, &q, 3).unwrap();
    let thermal: BTreeSetIds = store
        .entries()
        .iter()
        .filter(|e| e.condition.contains("thermal"))
        .map(|e| e.kca_id.clone())
        .collect();
    assert_eq!(thermal.len(), 3);
    let got: BTreeSetIds = hits.iter().map(|(e, _)| e.kca_id.clone()).collect();
    assert_eq!(got, thermal);

    // Oracle: condition-only brute force agrees.
    let qc = gw.embed_one("thermal shutdown cooling restored").unwrap();
    let mut oracle: Vec<(String, f64)> = store
        .entries()
        .iter()
        .map(|e| {
            (
                e.kca_id.clone(),
                cosine(&qc.values, &e.condition_embedding.values),
            )
        })
        .collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ids: Vec<String> = hits.iter().map(|(e, _)| e.kca_id.clone()).collect();
    let oracle_ids: Vec<String> = oracle.into_iter().take(3).map(|(id, _)| id).collect();
    assert_eq!(ids, oracle_ids);
}

type BTreeSetIds = std::collections::BTreeSet<String>;

#[test]
fn dual_query_matches_brute_force() {
    let gw = gw();
    let store = fixture_store(&gw);
    for (kt, ct) in [
        (
            "Resolve storage",
            "cooling restored temperatures stabilizing",
        ),
        ("Mitigate database", "primary database unreachable"),
        ("Assess network", "timeouts in one region"),
        ("Detect", "alert storm"),
    ] {
        for k in [1, 3, 5, 7, 20] {
            let q = KcaQuery {
                key_text: Some(kt.into()),
                condition_text: Some(ct.into()),
            };
            let got: Vec<(String, f64)> = store
                .retrieve(&gw, &q, k)
                .unwrap()
                .into_iter()
                .map(|(e, s)| (e.kca_id, s))
                .collect();
            let want = brute_force(&store, &gw, kt, ct, k);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0, "query {kt:?}/{ct:?} k={k}");
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn empty_store_and_bad_query() {
    let gw = gw();
    let store = KcaStore::new(gw.embedding_dim(), gw.provider_id());
    let q = KcaQuery {
        key_text: Some("Mitigate".into()),
        condition_text: None,
    };
    assert!(store.retrieve(&gw, &q, 5).unwrap().is_empty());
    assert!(store.retrieve(&gw, &KcaQuery::default(), 5).is_err());
    assert!(store.retrieve(&gw, &q, 0).is_err());
}

#[test]
fn deactivated_entries_vanish_from_retrieval() {
    let gw = gw();
    let mem = Memory::in_memory(MemoryConfig::default(), gw.clone());
    let id = mem
        .upsert_kca(
            draft(Phase::Mitigate, "db", "primary down", "failover"),
            t0(),
        )
        .unwrap();
    mem.expert_review(ReviewOp::Deactivate { kca_id: id.clone() }, "alice", t0())
        .unwrap();
    let q = KcaQuery {
        key_text: Some("Mitigate db".into()),
        condition_text: Some("primary down".into()),
    };
    assert!(mem.retrieve_kca(&q, 5).unwrap().is_empty());
    assert!(!mem.kca_get(&id).unwrap().active);
}

#[test]
fn edit_reembeds_only_changed_field() {
    let gw = gw();
    let mem = Memory::in_memory(MemoryConfig::default(), gw);
    let id = mem
        .upsert_kca(
            draft(Phase::Mitigate, "db", "primary down", "failover"),
            t0(),
        )
        .unwrap();
    let before = mem.kca_get(&id).unwrap();
    let patch = KcaPatch {
        condition: Some("primary unreachable after network partition".into()),
        ..Default::default()
    };
    mem.expert_review(
        ReviewOp::Edit {
            kca_id: id.clone(),
            patch,
        },
        "bob",
        t0() + Duration::minutes(1),
    )
    .unwrap();
    let after = mem.kca_get(&id).unwrap();
    assert_ne!(after.condition_embedding, before.condition_embedding);
    assert_eq!(after.key_embedding, before.key_embedding);
    assert!(after.updated_at > before.updated_at);
}

#[test]
fn each_mutation_appends_one_audit_record() {
    let gw = gw();
    let mem = Memory::in_memory(MemoryConfig::default(), gw);
    let authored = match mem
        .expert_review(
            ReviewOp::Author {
                stage: Phase::Mitigate,
                service_domain: "db".into(),
                scope: String::new(),
                condition: "primary down".into(),
                action_template: "failover {service}".into(),
                slots: None,
            },
            "carol",
            t0(),
        )
        .unwrap()
    {
        ReviewResult::Entry(e) => e,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(authored.provenance, Provenance::Expert);
    assert_eq!(mem.audit_log().len(), 1);
    mem.expert_review(
        ReviewOp::Edit {
            kca_id: authored.kca_id.clone(),
            patch: KcaPatch {
                scope: Some("primary region".into()),
                ..Default::default()
            },
        },
        "carol",
        t0(),
    )
    .unwrap();
    assert_eq!(mem.audit_log().len(), 2);
    mem.expert_review(
        ReviewOp::Deactivate {
            kca_id: authored.kca_id.clone(),
        },
        "carol",
        t0(),
    )
    .unwrap();
    let log = mem.audit_log();
    assert_eq!(log.len(), 3);
    assert_eq!(log[2].who, "carol");
    assert_eq!(log[2].op, "deactivate");
    assert!(log[2].before.is_some() && log[2].after.is_some());
    assert!(
        matches!(mem.expert_review(ReviewOp::List, "carol", t0()).unwrap(), ReviewResult::Listed(v) if v.len() == 1)
    );
    assert!(matches!(
        mem.expert_review(
            ReviewOp::Deactivate {
                kca_id: "kca-999999".into()
            },
            "carol",
            t0()
        ),
        Err(MemoryError::NotFound(_))
    ));
}

const RUNBOOK: &str = "# Thermal recovery runbook\nDomain: storage\n\n## Mitigate\nWhen temperatures exceed safe limits and cooling units fail, engage facilities to restore cooling.\n\n## Resolve\nWhen cooling is restored and temperatures are stabilizing after thermal shutdowns, initiate controlled power-up and recovery sequence for {service}.\n";

#[test]
fn playbook_distillation_is_idempotent() {
    let gw = gw();
    let mem = Memory::in_memory(MemoryConfig::default(), gw);
    let doc = PlaybookDoc {
        id: "thermal-recovery".into(),
        body: RUNBOOK.into(),
    };
    let first = mem.distill_playbook(&doc, t0()).unwrap();
    assert_eq!(first.created.len(), 2);
    let resolve = mem.kca_get(&first.created[1]).unwrap();
    assert_eq!(resolve.key.stage, Phase::Resolve);
    assert!(resolve.action_template.contains("recovery sequence"));
    assert_eq!(resolve.slots, vec!["service".to_string()]);
    assert_eq!(resolve.provenance, Provenance::Playbook);
    assert_eq!(resolve.source_ref, "thermal-recovery");

    let again = mem.distill_playbook(&doc, t0()).unwrap();
    assert!(again.created.is_empty());
    assert_eq!(again.merged.len(), 2);
    assert_eq!(mem.kca_active_count(), 2);

    let empty = PlaybookDoc {
        id: "blank".into(),
        body: "  \n".into(),
    };
    assert!(matches!(
        mem.distill_playbook(&empty, t0()),
        Err(MemoryError::EmptyDocument(_))
    ));
}

fn event(incident: &str, n: u64, phase: Phase, summary: &str) -> CriticalEvent {
    CriticalEvent {
        event_id: format!("{incident}-ev-{n:04}"),
        incident_id: incident.into(),
        ts: t0() + Duration::minutes(5 * n as i64),
        window_index: n,
        kind: EventKind::PhaseTransition,
        summary: summary.into(),
        delta: String::new(),
        evidence: Vec::new(),
        phase,
        significance: 0.5,
    }
}

fn meta(service: &str) -> IncidentMeta {
    IncidentMeta {
        service: service.into(),
        severity: Severity::Sev1,
        title: "thermal event in west datacenter".into(),
        opened_at: t0(),
    }
}

fn action(text: &str, minutes: i64, outcome: Outcome) -> WorkingItem {
    WorkingItem::Action {
        action_text: text.into(),
        ts: t0() + Duration::minutes(minutes),
        result: outcome.as_str().into(),
        outcome,
        dismissed: false,
        rec_id: None,
    }
}

fn feedback(incident: &str, text: &str, minutes: i64, result: Outcome) -> FeedbackRecord {
    FeedbackRecord {
        rec_id: None,
        incident_id: incident.into(),
        ts: t0() + Duration::minutes(minutes),
        human_action_text: text.into(),
        disposition: Disposition::ExecutedOther,
        result,
        match_score: 0.0,
    }
}

#[test]
fn working_memory_caps_and_closure() {
    let mem = Memory::in_memory(
        MemoryConfig {
            event_cap: 50,
            ..Default::default()
        },
        gw(),
    );
    mem.open_incident("inc-1", meta("DirectDrive"));
    for n in 0..51 {
        mem.record_working(
            "inc-1",
            WorkingItem::Event(event("inc-1", n, Phase::Detect, "x")),
        )
        .unwrap();
    }
    let wm = mem
        .record_working(
            "inc-1",
            action("restart the storage nodes", 1, Outcome::Unknown),
        )
        .unwrap();
    assert_eq!(wm.recent_events.len(), 50);
    assert_eq!(
        wm.recent_events.front().unwrap().event.event_id,
        "inc-1-ev-0001"
    );
    assert_eq!(wm.attempted_actions.len(), 1);
    assert_eq!(wm.event_log.len(), 51);

    mem.close_incident("inc-1", t0() + Duration::hours(1))
        .unwrap();
    assert!(matches!(
        mem.record_working(
            "inc-1",
            WorkingItem::Note {
                ts: t0(),
                text: "late".into()
            }
        ),
        Err(MemoryError::IncidentClosed(_))
    ));
    assert!(matches!(
        mem.record_working(
            "nope",
            WorkingItem::Note {
                ts: t0(),
                text: "x".into()
            }
        ),
        Err(MemoryError::UnknownIncident(_))
    ));
}

#[test]
fn promotion_rules() {
    let mem = Memory::in_memory(MemoryConfig::default(), gw());
    mem.open_incident("inc-2", meta("DirectDrive"));
    for n in 0..4 {
        mem.record_working(
            "inc-2",
            WorkingItem::Event(event("inc-2", n, Phase::Mitigate, "cooling failure")),
        )
        .unwrap();
    }
    mem.record_working(
        "inc-2",
        action("Engage facilities to restore cooling", 10, Outcome::Unknown),
    )
    .unwrap();
    mem.record_working(
        "inc-2",
        action("Initiate staged recovery sequence", 30, Outcome::Unknown),
    )
    .unwrap();
    mem.record_working(
        "inc-2",
        WorkingItem::Action {
            action_text: "Reboot everything at once".into(),
            ts: t0() + Duration::minutes(31),
            result: "declined".into(),
            outcome: Outcome::Unknown,
            dismissed: true,
            rec_id: Some("rec-1".into()),
        },
    )
    .unwrap();
    assert!(matches!(
        mem.promote_to_episodic("inc-2", &[]),
        Err(MemoryError::IncidentStillOpen(_))
    ));
    mem.close_incident("inc-2", t0() + Duration::minutes(60))
        .unwrap();
    let fb = vec![
        feedback(
            "inc-2",
            "Engage facilities to restore cooling",
            10,
            Outcome::Success,
        ),
        feedback(
            "inc-2",
            "Initiate staged recovery sequence",
            30,
            Outcome::Failure,
        ),
    ];
    let case = mem.promote_to_episodic("inc-2", &fb).unwrap();
    assert_eq!(case.case_id, "case-inc-2");
    assert_eq!(case.event_sequence.len(), 4);
    assert_eq!(case.actions.len(), 2);
    assert_eq!(case.actions[0].outcome, Outcome::Success);
    assert_eq!(case.actions[1].outcome, Outcome::Failure);
    assert_eq!(case.incident_meta.duration_s, 3600);
    assert!(matches!(
        mem.promote_to_episodic("inc-2", &fb),
        Err(MemoryError::AlreadyPromoted(_))
    ));

    mem.open_incident("inc-3", meta("DirectDrive"));
    mem.record_working(
        "inc-3",
        WorkingItem::Note {
            ts: t0(),
            text: "false alarm".into(),
        },
    )
    .unwrap();
    mem.close_incident("inc-3", t0()).unwrap();
    assert!(matches!(
        mem.promote_to_episodic("inc-3", &[]),
        Err(MemoryError::NothingToPromote(_))
    ));
}

fn closed_case(
    mem: &Memory,
    id: &str,
    service: &str,
    history: &[&str],
    actions: &[(&str, Outcome)],
) -> EpisodicCase {
    mem.open_incident(id, meta(service));
    mem.record_working(
        id,
        WorkingItem::Event(event(id, 0, Phase::Mitigate, history[0])),
    )
    .unwrap();
    for (i, h) in history.iter().enumerate() {
        mem.record_working(
            id,
            WorkingItem::Precondition(PreconditionNote {
                ts: t0() + Duration::minutes(i as i64),
                stage: if i == 0 {
                    Phase::Mitigate
                } else {
                    Phase::Resolve
                },
                text: h.to_string(),
            }),
        )
        .unwrap();
    }
    for (i, (a, o)) in actions.iter().enumerate() {
        mem.record_working(id, action(a, 20 + i as i64, *o))
            .unwrap();
    }
    mem.close_incident(id, t0() + Duration::hours(2)).unwrap();
    mem.promote_to_episodic(id, &[]).unwrap()
}

#[test]
fn episodic_retrieval_ranks_db_cases_first() {
    let mem = Memory::in_memory(MemoryConfig::default(), gw());
    assert!(mem
        .retrieve_episodic("anything", 3, &CaseFilter::default())
        .unwrap()
        .is_empty());
    let fixtures: [(&str, &str, &str); 6] = [
        (
            "db-a",
            "OrdersDB",
            "primary database unreachable and automatic failover not triggered",
        ),
        (
            "db-b",
            "BillingDB",
            "database primary unreachable, replicas healthy, failover pending",
        ),
        ("net-a", "Edge", "packet loss on backbone link"),
        ("dep-a", "Portal", "error spike after new deployment"),
        (
            "therm-a",
            "DirectDrive",
            "thermal shutdown after cooling failure",
        ),
        (
            "dns-a",
            "Resolver",
            "name resolution failures for internal zones",
        ),
    ];
    for (id, svc, h) in fixtures {
        closed_case(&mem, id, svc, &[h], &[("do something", Outcome::Success)]);
    }
    let query = "primary database unreachable, failover not triggered";
    let hits = mem
        .retrieve_episodic(query, 3, &CaseFilter::default())
        .unwrap();
    let top2: BTreeSetIds = hits
        .iter()
        .take(2)
        .map(|(c, _)| c.incident_id.clone())
        .collect();
    assert_eq!(
        top2,
        ["db-a", "db-b"].iter().map(|s| s.to_string()).collect()
    );

    // Oracle: brute-force cosine over all six.
    let gw = mem.gateway().clone();
    let q = gw.embed_one(query).unwrap();
    let mut oracle: Vec<(String, f64)> = fixtures
        .iter()
        .map(|(id, _, h)| {
            (
                format!("case-{id}"),
                cosine(&q.values, &gw.embed_one(h).unwrap().values),
            )
        })
        .collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let got: Vec<String> = hits.iter().map(|(c, _)| c.case_id.clone()).collect();
    let want: Vec<String> = oracle.iter().take(3).map(|(id, _)| id.clone()).collect();
    assert_eq!(got, want);

    // Self-similarity and hard filter.
    let own = mem
        .retrieve_episodic(
            "thermal shutdown after cooling failure",
            1,
            &CaseFilter::default(),
        )
        .unwrap();
    assert_eq!(own[0].0.incident_id, "therm-a");
    let filtered = mem
        .retrieve_episodic(
            query,
            3,
            &CaseFilter {
                service: Some("Edge".into()),
                severity: None,
            },
        )
        .unwrap();
    assert_eq!(filtered.len(), 1);
    assert_eq!(filtered[0].0.incident_id, "net-a");
}

#[test]
fn consolidation_excludes_failures_and_is_idempotent() {
    let mem = Memory::in_memory(MemoryConfig::default(), gw());
    let failed = closed_case(
        &mem,
        "f-1",
        "DirectDrive",
        &["cooling failure"],
        &[("Power cycle every rack at once", Outcome::Failure)],
    );
    let report = mem.consolidate_long_term(&[failed], t0()).unwrap();
    assert!(report.created.is_empty());

    let thermal = closed_case(
        &mem,
        "t-1",
        "DirectDrive",
        &[
            "thermal shutdowns after cooling failure",
            "cooling restored and temperatures stabilizing after thermal shutdowns",
        ],
        &[(
            "Initiate staged power-up and recovery sequence for DirectDrive",
            Outcome::Success,
        )],
    );
    let before = mem.kca_active_count();
    let first = mem
        .consolidate_long_term(std::slice::from_ref(&thermal), t0())
        .unwrap();
    assert_eq!(first.created.len(), 1);
    let e = mem.kca_get(&first.created[0]).unwrap();
    assert_eq!(e.key.stage, Phase::Resolve);
    assert!(e.action_template.contains("recovery sequence"));
    assert!(e.action_template.contains("{service}"));
    assert_eq!(e.provenance, Provenance::Distilled);
    assert_eq!(e.source_ref, "case-t-1");
    assert!(mem.kca_active_count() >= before);

    let second = mem.consolidate_long_term(&[thermal], t0()).unwrap();
    assert!(second.created.is_empty());
    assert_eq!(second.merged, first.created);
    assert_eq!(mem.kca_get(&first.created[0]).unwrap(), e);
}

#[test]
fn store_roundtrips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gw();
    let id;
    {
        let mem = Memory::open(dir.path(), MemoryConfig::default(), gw.clone()).unwrap();
        id = mem
            .upsert_kca(
                draft(Phase::Mitigate, "db", "primary down", "failover {service}"),
                t0(),
            )
            .unwrap();
        mem.expert_review(ReviewOp::Deactivate { kca_id: id.clone() }, "dave", t0())
            .unwrap();
        mem.note_retrieved(std::slice::from_ref(&id)).unwrap();
    }
    let header = std::fs::read_to_string(dir.path().join("kca.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["format"], 1);
    assert_eq!(first["embedding_dim"], 256);
    assert_eq!(first["provider_id"], "mock");

    let mem = Memory::open(dir.path(), MemoryConfig::default(), gw).unwrap();
    let e = mem.kca_get(&id).unwrap();
    assert!(!e.active);
    assert_eq!(e.stats.times_retrieved, 1);
    assert_eq!(mem.audit_log().len(), 1);
    let next = mem
        .upsert_kca(
            draft(Phase::Resolve, "db", "writes back", "rebuild replica"),
            t0(),
        )
        .unwrap();
    assert_eq!(next, "kca-000002");
}
