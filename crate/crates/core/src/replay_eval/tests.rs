use super::*;
use crate::config::{EvalConfig, MatchMode, SystemConfig};
use crate::llm_gateway::Gateway;
use crate::memory::Memory;
use crate::perception::{Modality, Topology};
use chrono::{Duration, TimeZone};
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

fn gw() -> Arc<Gateway> {
    Arc::new(Gateway::mock(7))
}

fn seeded_memory(corpus: &Corpus, at: DateTime<Utc>) -> Arc<Memory> {
    let memory = Arc::new(Memory::in_memory(SystemConfig::default().memory, gw()));
    for doc in &corpus.playbooks {
        memory.distill_playbook(doc, at).unwrap();
    }
    memory
}

fn run_profile(profile: &str, seed: u64, n: usize) -> Vec<(ReplayLog, GroundTruth)> {
    let corpus = generate_corpus(seed, n, profile).unwrap();
    let cfg = SystemConfig::default();
    let topo = Arc::new(Topology::from_file(corpus.topology.clone()));
    corpus
        .traces
        .iter()
        .map(|t| {
            let memory = seeded_memory(&corpus, t.trace.meta.started_at);
            let books = playbook_actions(memory.kca_snapshot().entries());
            let gt = build_ground_truth(&t.trace, &t.labels, &books, &gw(), cfg.eval.g2_threshold)
                .unwrap();
            let log = replay(&t.trace, &cfg, memory, topo.clone()).unwrap();
            (log, gt)
        })
        .collect()
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn item(id: &str, min: i64, text: &str, stage: Phase) -> EvalItem {
    EvalItem {
        id: id.into(),
        ts: t0() + Duration::minutes(min),
        text: text.into(),
        stage,
    }
}

fn signal(incident: &str, min: i64, payload: &str) -> RawSignal {
    RawSignal {
        incident_id: incident.into(),
        ts: t0() + Duration::minutes(min),
        modality: Modality::Communication,
        source: "bridge_transcript".into(),
        payload: payload.into(),
        attrs: BTreeMap::new(),
    }
}

fn small_trace(signals: Vec<RawSignal>) -> Trace {
    Trace {
        meta: TraceMeta {
            trace_id: "t".into(),
            incident_id: "inc".into(),
            title: "Elevated errors".into(),
            service: "orders-api".into(),
            severity: Severity::Sev2,
            started_at: t0(),
            profile: String::new(),
            scenario: String::new(),
        },
        signals,
        label_file: None,
    }
}

// Corpus

#[test]
fn same_seed_same_corpus() {
    let a = generate_corpus(42, 3, "mixed").unwrap();
    let b = generate_corpus(42, 3, "mixed").unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(43, 3, "mixed").unwrap();
    assert_ne!(a.traces, c.traces);
}

#[test]
fn corpus_rejects_bad_requests() {
    assert!(matches!(
        generate_corpus(1, 2, "nope"),
        Err(EvalError::UnknownProfile(_))
    ));
    assert!(matches!(
        generate_corpus(1, 0, "thermal"),
        Err(EvalError::InvalidTrace(_))
    ));
}

#[test]
fn every_profile_yields_valid_traces() {
    for profile in PROFILES {
        let corpus = generate_corpus(5, 2, profile).unwrap();
        assert_eq!(corpus.traces.len(), 2);
        for t in &corpus.traces {
            t.trace.validate().unwrap();
            assert!(t.trace.meta.trace_id.starts_with(profile));
            assert!(!t.labels.is_empty());
        }
    }
}

#[test]
fn thermal_trace_tells_the_outage() {
    let corpus = generate_corpus(42, 1, "thermal").unwrap();
    let text: Vec<String> = corpus.traces[0]
        .trace
        .signals
        .iter()
        .map(|s| s.payload.to_lowercase())
        .collect();
    assert!(text.iter().any(|p| p.contains("thermal protection")));
    assert!(text.iter().any(|p| p.contains("cooling restored")));
    assert!(text.iter().any(|p| p.contains("staged recovery initiated")));
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(9, 2, "db_failover").unwrap();
    corpus.write(dir.path()).unwrap();
    for t in &corpus.traces {
        let path = dir
            .path()
            .join(format!("{}.trace.jsonl", t.trace.meta.trace_id));
        let loaded = Trace::load(&path).unwrap();
        assert_eq!(loaded.signals, t.trace.signals);
        assert_eq!(loaded.meta, t.trace.meta);
        let labels: Vec<LabelLine> = read_jsonl(loaded.label_file.as_ref().unwrap()).unwrap();
        assert_eq!(labels, t.labels);
    }
    assert!(dir.path().join("topology.toml").is_file());
    Topology::load(&dir.path().join("topology.toml")).unwrap();
}

#[test]
fn trace_validation_catches_disorder_and_foreign_signals() {
    let t = small_trace(vec![signal("inc", 2, "a"), signal("inc", 1, "b")]);
    assert!(matches!(t.validate(), Err(EvalError::InvalidTrace(_))));
    let t = small_trace(vec![signal("inc", 1, "a"), signal("other", 2, "b")]);
    assert!(matches!(t.validate(), Err(EvalError::InvalidTrace(_))));
}

// Ground truth

#[test]
fn ground_truth_is_grounded_in_the_trace() {
    for profile in [
        "thermal",
        "db_failover",
        "capacity",
        "cascade",
        "sparse_early",
    ] {
        for (_, gt) in run_profile(profile, 11, 1) {
            let corpus = generate_corpus(11, 1, profile).unwrap();
            let trace = &corpus.traces[0].trace;
            let ids: HashSet<&str> = gt.g1.iter().map(|g| g.gt_id.as_str()).collect();
            assert_eq!(ids.len(), gt.g1.len());
            assert!(gt.g1.windows(2).all(|w| w[0].ts <= w[1].ts));
            for g in &gt.g1 {
                assert!(
                    trace
                        .signals
                        .iter()
                        .any(|s| s.ts == g.ts && s.payload == g.source_quote),
                    "{}",
                    g.action_text
                );
            }
            for g in &gt.g2 {
                assert!(gt.g1.contains(g));
                assert!(g.playbook_ref.is_some());
            }
        }
    }
}

#[test]
fn thermal_recovery_is_playbook_backed() {
    let (_, gt) = run_profile("thermal", 42, 1).remove(0);
    let g = gt
        .g1
        .iter()
        .find(|g| g.action_text.contains("staged recovery initiated"))
        .expect("recovery action in G1");
    assert_eq!(g.stage, Phase::Resolve);
    assert_eq!(g.playbook_ref.as_deref(), Some("thermal-runbook"));
    assert!(gt.g2.iter().any(|x| x.gt_id == g.gt_id));
    // The bridge opening is process, not an action on the system.
    assert!(!gt
        .g1
        .iter()
        .any(|g| g.action_text.to_lowercase().contains("bridge opened")));
}

#[test]
fn quiet_trace_has_no_ground_truth() {
    let trace = small_trace(vec![
        signal("inc", 1, "p50 latency 120 ms"),
        signal("inc", 2, "anyone seeing this too?"),
    ]);
    let gt = build_ground_truth(&trace, &[], &[], &gw(), 0.8).unwrap();
    assert!(gt.g1.is_empty() && gt.g2.is_empty());
}

#[test]
fn labels_override_extraction() {
    let trace = small_trace(vec![
        signal("inc", 1, "Restarted the frontend pool"),
        signal("inc", 2, "Cache flushed on all nodes by hand"),
        signal("inc", 3, "Traffic rerouted to the secondary region"),
    ]);
    let extracted = build_ground_truth(&trace, &[], &[], &gw(), 0.8).unwrap();
    let texts: Vec<&str> = extracted
        .g1
        .iter()
        .map(|g| g.action_text.as_str())
        .collect();
    assert!(texts.contains(&"Restarted the frontend pool"));
    assert!(!texts.iter().any(|t| t.contains("Cache flushed")));

    let label = |min: i64, text: &str, confirmed: bool, book: Option<&str>| LabelLine {
        ts: t0() + Duration::minutes(min),
        action_text: text.into(),
        confirmed,
        playbook_ref: book.map(String::from),
    };
    let labels = vec![
        label(1, "Restarted the frontend pool", false, None),
        label(2, "Cache flushed on all nodes", true, Some("cache-runbook")),
        label(3, "Traffic rerouted to the secondary region", true, None),
        label(4, "Something that never happened", true, None),
    ];
    let gt = build_ground_truth(&trace, &labels, &[], &gw(), 0.8).unwrap();
    let texts: Vec<&str> = gt.g1.iter().map(|g| g.action_text.as_str()).collect();
    assert_eq!(
        texts,
        [
            "Cache flushed on all nodes",
            "Traffic rerouted to the secondary region"
        ]
    );
    assert!(gt.g1.iter().all(|g| g.confirmed));
    assert_eq!(gt.g2.len(), 1);
    assert_eq!(gt.g2[0].playbook_ref.as_deref(), Some("cache-runbook"));
    assert_eq!(gt.g1[0].gt_id, "t-gt-001");
}

#[test]
fn playbook_text_fills_the_service() {
    let p = PlaybookAction {
        kca_id: "k".into(),
        doc_id: "d".into(),
        stage: Phase::Mitigate,
        template: "Fail over {service} to {region}".into(),
    };
    assert_eq!(p.text_for("orders-db"), "Fail over orders-db to");
    assert_eq!(p.text_for(""), "Fail over to");
}

// Replay

#[test]
fn replay_is_deterministic() {
    let a = run_profile("thermal", 42, 1);
    let b = run_profile("thermal", 42, 1);
    assert_eq!(a, b);
    let (log, _) = &a[0];
    assert!(log.case_id.is_some());
    assert!(log.n_duplicates > 0);
    assert!(log.n_events > 0 && log.n_events * 10 < log.n_observations);
    let seqs: Vec<u64> = log.stream.iter().map(|r| r.seq).collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn thermal_replay_recommends_the_recovery_sequence() {
    let (log, gt) = run_profile("thermal", 42, 1).remove(0);
    let rec = log
        .recommendations
        .iter()
        .find(|r| r.action_text.contains("recovery sequence"))
        .expect("recovery recommendation");
    assert_eq!(rec.stage, Phase::Resolve);
    let recs: Vec<EvalItem> = log.recommendations.iter().map(EvalItem::from).collect();
    let g2: Vec<EvalItem> = gt.g2.iter().map(EvalItem::from).collect();
    let m = match_actions(&recs, &g2, &EvalConfig::default(), &gw()).unwrap();
    assert!(m.pairs.iter().any(|p| p.rec_id == rec.rec_id));
}

#[test]
fn replay_without_knowledge_cites_nothing() {
    let corpus = generate_corpus(42, 1, "thermal").unwrap();
    let memory = Arc::new(Memory::in_memory(SystemConfig::default().memory, gw()));
    let topo = Arc::new(Topology::from_file(corpus.topology.clone()));
    let log = replay(
        &corpus.traces[0].trace,
        &SystemConfig::default(),
        memory,
        topo,
    )
    .unwrap();
    assert!(log
        .recommendations
        .iter()
        .all(|r| r.supports.kca_ids.is_empty()));
}

#[test]
fn self_evolution_loop() {
    let cfg = SystemConfig::default();
    let thermal = generate_corpus(42, 1, "thermal").unwrap();
    let para = generate_corpus(42, 1, "thermal_paraphrase").unwrap();
    let topo = Arc::new(Topology::from_file(thermal.topology.clone()));
    let start = thermal.traces[0].trace.meta.started_at;
    let memory = seeded_memory(&thermal, start);
    let log = replay(&thermal.traces[0].trace, &cfg, memory.clone(), topo.clone()).unwrap();
    assert!(log.case_id.is_some());

    let cases = memory.episodic_snapshot().cases().to_vec();
    let now = start + Duration::hours(2);
    let first = memory.consolidate_long_term(&cases, now).unwrap();
    assert!(!first.created.is_empty());
    let distilled: Vec<String> = memory
        .kca_snapshot()
        .entries()
        .iter()
        .filter(|e| e.provenance == crate::memory::Provenance::Distilled)
        .map(|e| e.kca_id.clone())
        .collect();
    assert!(!distilled.is_empty());

    let log2 = replay(&para.traces[0].trace, &cfg, memory.clone(), topo).unwrap();
    assert!(log2.recommendations.iter().any(|r| r
        .supports
        .kca_ids
        .iter()
        .any(|id| distilled.contains(id))));

    let before = memory.kca_snapshot().entries().to_vec();
    let again = memory
        .consolidate_long_term(&cases, now + Duration::hours(1))
        .unwrap();
    assert!(again.created.is_empty());
    assert_eq!(memory.kca_snapshot().entries(), before.as_slice());
}

// Matching

fn cfg_with(window_s: i64, threshold: f64) -> EvalConfig {
    EvalConfig {
        window_s,
        threshold,
        ..EvalConfig::default()
    }
}

#[test]
fn identical_items_match_perfectly() {
    let recs = vec![
        item(
            "r1",
            0,
            "Fail over orders-db to the healthy replica",
            Phase::Mitigate,
        ),
        item(
            "r2",
            5,
            "Engage facilities to restore cooling",
            Phase::Mitigate,
        ),
    ];
    let gts = vec![
        item(
            "g1",
            1,
            "Fail over orders-db to the healthy replica",
            Phase::Mitigate,
        ),
        item(
            "g2",
            6,
            "Engage facilities to restore cooling",
            Phase::Mitigate,
        ),
    ];
    let m = match_actions(&recs, &gts, &EvalConfig::default(), &gw()).unwrap();
    let r = compute_metrics(&m, &recs, &gts).unwrap();
    assert_eq!((r.precision, r.recall), (Some(1.0), Some(1.0)));
    assert_eq!(m.pairs[0].delta_t_s, 60);
}

#[test]
fn unrelated_topics_do_not_match() {
    let recs = vec![item(
        "r1",
        0,
        "Rotate the expiring TLS certificate",
        Phase::Mitigate,
    )];
    let gts = vec![item(
        "g1",
        1,
        "Drain traffic back to the primary region",
        Phase::Resolve,
    )];
    let m = match_actions(&recs, &gts, &EvalConfig::default(), &gw()).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched_recs, ["r1"]);
    assert_eq!(m.unmatched_gts, ["g1"]);
}

#[test]
fn window_direction_matters() {
    let text = "Scale out checkout-api by adding capacity";
    let recs = vec![item("r1", 10, text, Phase::Mitigate)];
    let gts = vec![item("g1", 5, text, Phase::Mitigate)];
    let m = match_actions(&recs, &gts, &EvalConfig::default(), &gw()).unwrap();
    assert!(
        m.pairs.is_empty(),
        "a recommendation after the action is hindsight"
    );
    let sym = EvalConfig {
        symmetric_window: true,
        ..EvalConfig::default()
    };
    assert_eq!(
        match_actions(&recs, &gts, &sym, &gw()).unwrap().pairs.len(),
        1
    );
    let late = vec![item("g1", 10 + 31, text, Phase::Mitigate)];
    assert!(match_actions(&recs, &late, &EvalConfig::default(), &gw())
        .unwrap()
        .pairs
        .is_empty());
    assert!(
        in_window(0, 1800, false) && in_window(1800, 1800, false) && !in_window(1801, 1800, false)
    );
}

#[test]
fn matching_rejects_bad_config_and_duplicates() {
    let recs = vec![
        item("r", 0, "a", Phase::Detect),
        item("r", 1, "b", Phase::Detect),
    ];
    assert!(matches!(
        match_actions(&recs, &[], &EvalConfig::default(), &gw()),
        Err(EvalError::InconsistentInput(_))
    ));
    for cfg in [cfg_with(0, 0.75), cfg_with(60, 0.0), cfg_with(60, 1.0)] {
        assert!(match_with_scores(&[], &[], &[], &cfg).is_err());
    }
    let one = vec![item("r", 0, "a", Phase::Detect)];
    assert!(match_with_scores(&one, &[], &[], &EvalConfig::default()).is_err());
}

#[test]
fn greedy_ties_prefer_earlier_items() {
    let recs = vec![
        item("rb", 0, "x", Phase::Detect),
        item("ra", 1, "x", Phase::Detect),
    ];
    let gts = vec![item("g", 2, "x", Phase::Detect)];
    let m =
        match_with_scores(&recs, &gts, &[vec![0.9], vec![0.9]], &EvalConfig::default()).unwrap();
    assert_eq!(m.pairs[0].rec_id, "rb");
}

#[test]
fn many_to_one_lets_recommendations_share_an_action() {
    let recs = vec![
        item("r1", 0, "x", Phase::Detect),
        item("r2", 1, "x", Phase::Detect),
    ];
    let gts = vec![
        item("g1", 2, "x", Phase::Detect),
        item("g2", 3, "x", Phase::Detect),
    ];
    let scores = vec![vec![0.9, 0.8], vec![0.95, 0.0]];
    let one = match_with_scores(&recs, &gts, &scores, &EvalConfig::default()).unwrap();
    let got: Vec<(&str, &str)> = one
        .pairs
        .iter()
        .map(|p| (p.rec_id.as_str(), p.gt_id.as_str()))
        .collect();
    assert_eq!(got, [("r1", "g2"), ("r2", "g1")]);
    let many = EvalConfig {
        mode: MatchMode::ManyToOne,
        ..EvalConfig::default()
    };
    let m = match_with_scores(&recs, &gts, &scores, &many).unwrap();
    let got: Vec<(&str, &str)> = m
        .pairs
        .iter()
        .map(|p| (p.rec_id.as_str(), p.gt_id.as_str()))
        .collect();
    assert_eq!(got, [("r1", "g1"), ("r2", "g1")]);
    let r = compute_metrics(&m, &recs, &gts).unwrap();
    assert_eq!((r.precision, r.recall), (Some(1.0), Some(0.5)));
    let optimal = EvalConfig {
        optimal: true,
        ..EvalConfig::default()
    };
    assert_eq!(
        match_with_scores(&recs, &gts, &scores, &optimal)
            .unwrap()
            .pairs
            .len(),
        2
    );
}

/// Best one-to-one total over candidate pairs, by exhaustive search.
fn brute_force_best(cands: &[Vec<Option<f64>>]) -> f64 {
    fn go(i: usize, used: &mut Vec<bool>, cands: &[Vec<Option<f64>>]) -> f64 {
        if i == cands.len() {
            return 0.0;
        }
        let mut best = go(i + 1, used, cands);
        for j in 0..used.len() {
            if let (false, Some(s)) = (used[j], cands[i][j]) {
                used[j] = true;
                best = best.max(s + go(i + 1, used, cands));
                used[j] = false;
            }
        }
        best
    }
    let n_gts = cands.first().map_or(0, Vec::len);
    go(0, &mut vec![false; n_gts], cands)
}

fn instance() -> impl Strategy<Value = (Vec<i64>, Vec<i64>, Vec<Vec<f64>>)> {
    (0usize..7, 0usize..7).prop_flat_map(|(nr, ng)| {
        (
            prop::collection::vec(0i64..90, nr),
            prop::collection::vec(0i64..90, ng),
            prop::collection::vec(
                prop::collection::vec(prop_oneof![Just(0.8), 0.0f64..1.0], ng),
                nr,
            ),
        )
    })
}

fn items(prefix: &str, mins: &[i64]) -> Vec<EvalItem> {
    mins.iter()
        .enumerate()
        .map(|(i, &m)| {
            item(
                &format!("{prefix}{i}"),
                m,
                "x",
                Phase::ALL[i % Phase::ALL.len()],
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn optimal_equals_exhaustive_search((rm, gm, scores) in instance()) {
        let (recs, gts) = (items("r", &rm), items("g", &gm));
        let cfg = EvalConfig { optimal: true, ..cfg_with(1800, 0.5) };
        let cands: Vec<Vec<Option<f64>>> = recs.iter().enumerate().map(|(i, r)| {
            gts.iter().enumerate().map(|(j, g)| {
                let ok = scores[i][j] >= 0.5 && in_window((g.ts - r.ts).num_seconds(), 1800, false);
                ok.then_some(scores[i][j])
            }).collect()
        }).collect();
        let best = brute_force_best(&cands);
        let opt = match_with_scores(&recs, &gts, &scores, &cfg).unwrap();
        prop_assert!((total_score(&opt) - best).abs() < 1e-6);
        let greedy = match_with_scores(&recs, &gts, &scores, &cfg_with(1800, 0.5)).unwrap();
        prop_assert!(total_score(&greedy) <= total_score(&opt) + 1e-9);
    }

    #[test]
    fn pairs_respect_window_threshold_and_cardinality((rm, gm, scores) in instance(), sym in any::<bool>(), many in any::<bool>()) {
        let (recs, gts) = (items("r", &rm), items("g", &gm));
        let cfg = EvalConfig {
            symmetric_window: sym,
            mode: if many { MatchMode::ManyToOne } else { MatchMode::OneToOne },
            ..cfg_with(1200, 0.6)
        };
        let m = match_with_scores(&recs, &gts, &scores, &cfg).unwrap();
        let mut seen_r = HashSet::new();
        let mut seen_g = HashSet::new();
        for p in &m.pairs {
            prop_assert!(p.score >= 0.6);
            prop_assert!(in_window(p.delta_t_s, 1200, sym));
            prop_assert!(seen_r.insert(p.rec_id.clone()));
            prop_assert!(seen_g.insert(p.gt_id.clone()) || many);
        }
        let r = compute_metrics(&m, &recs, &gts).unwrap();
        let stage_recs: usize = r.per_stage.iter().map(|s| s.matched_recs).sum();
        let stage_gts: usize = r.per_stage.iter().map(|s| s.matched_gts).sum();
        prop_assert_eq!(stage_recs, r.matched_recs);
        prop_assert_eq!(stage_gts, r.matched_gts);
        for v in [r.precision, r.recall].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn matching_ignores_input_order((rm, gm, scores) in instance(), optimal in any::<bool>()) {
        let (recs, gts) = (items("r", &rm), items("g", &gm));
        let cfg = EvalConfig { optimal, ..cfg_with(1800, 0.5) };
        let a = match_with_scores(&recs, &gts, &scores, &cfg).unwrap();
        let rev_recs: Vec<EvalItem> = recs.iter().rev().cloned().collect();
        let rev_gts: Vec<EvalItem> = gts.iter().rev().cloned().collect();
        let rev_scores: Vec<Vec<f64>> = scores.iter().rev().map(|row| row.iter().rev().copied().collect()).collect();
        let b = match_with_scores(&rev_recs, &rev_gts, &rev_scores, &cfg).unwrap();
        if optimal {
            prop_assert!((total_score(&a) - total_score(&b)).abs() < 1e-6);
        } else {
            prop_assert_eq!(a, b);
        }
    }
}

// Metrics

fn result(
    pairs: &[(&str, &str)],
    recs: &[EvalItem],
    gts: &[EvalItem],
    mode: MatchMode,
) -> MatchResult {
    let hit_r: HashSet<&str> = pairs.iter().map(|p| p.0).collect();
    let hit_g: HashSet<&str> = pairs.iter().map(|p| p.1).collect();
    MatchResult {
        pairs: pairs
            .iter()
            .map(|(r, g)| MatchPair {
                rec_id: r.to_string(),
                gt_id: g.to_string(),
                score: 0.9,
                delta_t_s: 0,
            })
            .collect(),
        unmatched_recs: recs
            .iter()
            .filter(|r| !hit_r.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect(),
        unmatched_gts: gts
            .iter()
            .filter(|g| !hit_g.contains(g.id.as_str()))
            .map(|g| g.id.clone())
            .collect(),
        window_s: 1800,
        threshold: 0.75,
        symmetric_window: false,
        mode,
    }
}

#[test]
fn published_ratio_counts() {
    let recs = items("r", &vec![0; 361]);
    let gts = items("g", &vec![0; 447]);
    let ids: Vec<(String, String)> = (0..258)
        .map(|i| (format!("r{i}"), format!("g{}", i % 236)))
        .collect();
    let pairs: Vec<(&str, &str)> = ids.iter().map(|(r, g)| (r.as_str(), g.as_str())).collect();
    let m = result(&pairs, &recs, &gts, MatchMode::ManyToOne);
    let r = compute_metrics(&m, &recs, &gts).unwrap();
    assert_eq!(r.precision, Some(258.0 / 361.0));
    assert_eq!(r.recall, Some(236.0 / 447.0));
    assert!((r.precision.unwrap() * 100.0 - 71.4).abs() < 0.2);
    assert!((r.recall.unwrap() * 100.0 - 52.8).abs() < 0.2);
    // The same pairs are not a one-to-one result.
    let m = result(&pairs, &recs, &gts, MatchMode::OneToOne);
    assert!(matches!(
        compute_metrics(&m, &recs, &gts),
        Err(EvalError::InconsistentInput(_))
    ));
}

#[test]
fn empty_sides_give_undefined_ratios() {
    let gts = vec![item("g", 0, "x", Phase::Detect)];
    let r = compute_metrics(&result(&[], &[], &gts, MatchMode::OneToOne), &[], &gts).unwrap();
    assert_eq!((r.precision, r.recall), (None, Some(0.0)));
    let recs = vec![item("r", 0, "x", Phase::Detect)];
    let r = compute_metrics(&result(&[], &recs, &[], MatchMode::OneToOne), &recs, &[]).unwrap();
    assert_eq!((r.precision, r.recall), (Some(0.0), None));
}

#[test]
fn inconsistent_results_are_rejected() {
    let recs = vec![item("r", 0, "x", Phase::Detect)];
    let gts = vec![item("g", 0, "x", Phase::Detect)];
    let unknown = result(&[("r", "zz")], &recs, &gts, MatchMode::OneToOne);
    assert!(compute_metrics(&unknown, &recs, &gts).is_err());
    let mut overlap = result(&[("r", "g")], &recs, &gts, MatchMode::OneToOne);
    overlap.unmatched_recs.push("r".into());
    assert!(compute_metrics(&overlap, &recs, &gts).is_err());
    let mut missing = result(&[], &recs, &gts, MatchMode::OneToOne);
    missing.unmatched_gts.clear();
    assert!(compute_metrics(&missing, &recs, &gts).is_err());
}

#[test]
fn stage_rows_attribute_each_side_to_its_own_stage() {
    let recs = vec![
        item("r1", 0, "x", Phase::Investigate),
        item("r2", 0, "x", Phase::Mitigate),
    ];
    let gts = vec![
        item("g1", 0, "x", Phase::Mitigate),
        item("g2", 0, "x", Phase::Resolve),
    ];
    let m = result(&[("r1", "g1")], &recs, &gts, MatchMode::OneToOne);
    let r = compute_metrics(&m, &recs, &gts).unwrap();
    let row = |p: Phase| r.per_stage.iter().find(|s| s.stage == p).unwrap().clone();
    assert_eq!(row(Phase::Investigate).precision, Some(1.0));
    assert_eq!(row(Phase::Investigate).recall, None);
    assert_eq!(row(Phase::Mitigate).precision, Some(0.0));
    assert_eq!(row(Phase::Mitigate).recall, Some(1.0));
    assert_eq!(row(Phase::Resolve).recall, Some(0.0));
    assert_eq!(r.per_stage.len(), Phase::ALL.len());
}

#[test]
fn evaluate_micro_averages_in_trace_order() {
    let text = "Fail over orders-db to the healthy replica";
    let a = TraceEval {
        trace_id: "b".into(),
        recs: vec![
            item("b-r1", 0, text, Phase::Mitigate),
            item("b-r2", 0, "Rotate the certificate", Phase::Mitigate),
        ],
        g1: vec![item("b-g1", 1, text, Phase::Mitigate)],
        g2: vec![],
        n_observations: 10,
        n_events: 2,
    };
    let b = TraceEval {
        trace_id: "a".into(),
        recs: vec![item("a-r1", 0, text, Phase::Mitigate)],
        g1: vec![
            item("a-g1", 1, text, Phase::Mitigate),
            item("a-g2", 2, "Page the database team", Phase::Investigate),
        ],
        g2: vec![item("a-g1", 1, text, Phase::Mitigate)],
        n_observations: 5,
        n_events: 1,
    };
    let cfg = EvalConfig::default();
    let e1 = evaluate(&[a.clone(), b.clone()], &cfg, &gw()).unwrap();
    let e2 = evaluate(&[b, a], &cfg, &gw()).unwrap();
    assert_eq!(e1, e2);
    let r = &e1.report;
    assert_eq!(r.traces, ["a", "b"]);
    assert_eq!(r.counts.n_observations, 15);
    assert_eq!(r.g1.precision, Some(2.0 / 3.0));
    assert_eq!(r.g1.recall, Some(2.0 / 3.0));
    assert_eq!(r.g2.precision, Some(1.0 / 3.0));
    assert_eq!(r.g2.recall, Some(1.0));
}

// Coverage export

#[test]
fn pca_matches_covariance_eigenvectors_up_to_sign() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (xy, var) = pca_2d(&rows);
    let n = rows.len();
    let mut x = DMatrix::from_fn(n, 6, |i, j| rows[i][j]);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &k) in order.iter().take(2).enumerate() {
        assert!((var[c] - eig.eigenvalues[k]).abs() < 1e-6);
        let proj = &x * eig.eigenvectors.column(k);
        let sign = if proj[0] * xy[0][c] >= 0.0 { 1.0 } else { -1.0 };
        for i in 0..n {
            assert!((xy[i][c] - sign * proj[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_degenerate_inputs() {
    assert!(pca_2d(&[]).0.is_empty());
    assert_eq!(pca_2d(&[vec![1.0, 2.0]]).0, vec![[0.0, 0.0]]);
}

#[test]
fn coverage_export_layout() {
    let dir = tempfile::tempdir().unwrap();
    let empty = export_embeddings(&[], &[], &[], &gw()).unwrap();
    let path = dir.path().join("empty.jsonl");
    empty.write(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    let header: CoverageHeader = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header.n_rows, 0);
    assert_eq!(header.dim, gw().embedding_dim());

    let same = "Engage facilities to restore cooling";
    let recs = vec![
        item("r1", 0, same, Phase::Mitigate),
        item("r2", 0, "  ", Phase::Mitigate),
    ];
    let gts = vec![item("g1", 0, same, Phase::Mitigate)];
    let books = vec![PlaybookAction {
        kca_id: "k1".into(),
        doc_id: "d".into(),
        stage: Phase::Resolve,
        template: "Drain traffic back to the primary region for {service}".into(),
    }];
    let export = export_embeddings(&recs, &gts, &books, &gw()).unwrap();
    let kinds: Vec<CoverageKind> = export.rows.iter().map(|r| r.kind).collect();
    assert_eq!(
        kinds,
        [
            CoverageKind::Predicted,
            CoverageKind::G1,
            CoverageKind::Playbook
        ]
    );
    assert_eq!(
        export.rows[2].text,
        "Drain traffic back to the primary region for"
    );
    let d = (export.rows[0].xy[0] - export.rows[1].xy[0])
        .hypot(export.rows[0].xy[1] - export.rows[1].xy[1]);
    assert!(d < 1e-9, "{:?} {:?}", export.rows[0].xy, export.rows[1].xy);
    let path = dir.path().join("cov.jsonl");
    export.write(&path).unwrap();
    let lines: Vec<String> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 4);
    let row: CoverageRow = serde_json::from_str(&lines[1]).unwrap();
    assert_eq!(row, export.rows[0]);
}
