//! Seeded synthetic outage corpus.
//!
//! Each trace is a scripted scenario (the signals that move the incident
//! forward and the actions responders take) interleaved with noise: metric
//! samples, bridge chatter and exact repeats. Noise never names an entity,
//! a severity, a phase cue or an action cue, so it inflates the observation
//! count without changing incident state. The generator knows which scripted
//! utterances are actions and writes them to a label file.

use super::{write_jsonl, write_text, EvalError, GeneratedTraceFiles, LabelLine, Trace, TraceMeta};
use crate::domain::Severity;
use crate::memory::PlaybookDoc;
use crate::perception::{
    EntityKind, Modality, RawSignal, TopologyEdge, TopologyEntity, TopologyFile,
};
use crate::text::fnv1a64;
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

pub const PROFILES: &[&str] = &[
    "thermal",
    "db_failover",
    "capacity",
    "cascade",
    "mixed",
    "sparse_early",
    "thermal_paraphrase",
];

const THERMAL_RUNBOOK: &str = "# Thermal recovery runbook
Domain: storage

## Mitigate
When temperatures exceed safe limits and cooling units fail, engage facilities to restore cooling.

## Resolve
When cooling is restored and temperatures are stabilizing after thermal shutdowns, initiate controlled power-up and recovery sequence for {service}.
";

const DB_RUNBOOK: &str = "# Database failover runbook
Domain: database

## Investigate
When replication lag grows and the primary stops accepting writes, check primary health and replica lag for {service}.

## Mitigate
When the primary database is unreachable and replicas are healthy, fail over {service} to the healthy replica.

## Resolve
When writes succeed on the promoted replica, rebuild the old primary of {service} as a new replica.
";

const CAPACITY_RUNBOOK: &str = "# Capacity exhaustion runbook
Domain: compute

## Mitigate
When request queues saturate and cpu is pinned across the pool, scale out {service} by adding capacity.
When one tenant dominates traffic during saturation, throttle the noisy tenant on {service}.

## Resolve
When latency returns to baseline after scaling, disable the temporary tenant throttles on {service}.
";

const CASCADE_RUNBOOK: &str = "# Dependency cascade runbook
Domain: network

## Investigate
When several services fail together, check the shared token cache dependency of {service}.

## Mitigate
When a shared dependency is degraded, reroute {service} traffic to the secondary region.

## Resolve
When the shared dependency recovers, drain traffic back to the primary region for {service}.
";

/// Runbook library shipped with every corpus, as (id, body).
const RUNBOOKS: &[(&str, &str)] = &[
    ("capacity-runbook", CAPACITY_RUNBOOK),
    ("cascade-runbook", CASCADE_RUNBOOK),
    ("db-failover-runbook", DB_RUNBOOK),
    ("thermal-runbook", THERMAL_RUNBOOK),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Say,
    Metric,
    /// A responder action; `Some(result)` also reports its outcome, which
    /// the replay driver turns into feedback.
    Act(Option<&'static str>),
}

#[derive(Debug, Clone, Copy)]
struct Step {
    at_s: i64,
    kind: Kind,
    text: &'static str,
    attrs: &'static [(&'static str, &'static str)],
    /// Label verdict for action cues the extractor will also pick up.
    confirmed: bool,
}

const fn say(at_s: i64, text: &'static str) -> Step {
    Step {
        at_s,
        kind: Kind::Say,
        text,
        attrs: &[],
        confirmed: true,
    }
}

const fn metric(
    at_s: i64,
    text: &'static str,
    attrs: &'static [(&'static str, &'static str)],
) -> Step {
    Step {
        at_s,
        kind: Kind::Metric,
        text,
        attrs,
        confirmed: true,
    }
}

const fn act(at_s: i64, text: &'static str, result: Option<&'static str>) -> Step {
    Step {
        at_s,
        kind: Kind::Act(result),
        text,
        attrs: &[],
        confirmed: true,
    }
}

/// An utterance with an action cue that labelers reject.
const fn not_action(at_s: i64, text: &'static str) -> Step {
    Step {
        at_s,
        kind: Kind::Act(None),
        text,
        attrs: &[],
        confirmed: false,
    }
}

const fn with_attrs(mut s: Step, attrs: &'static [(&'static str, &'static str)]) -> Step {
    s.attrs = attrs;
    s
}

const M: i64 = 60;

struct Scenario {
    key: &'static str,
    title: &'static str,
    services: &'static [&'static str],
    severity: Severity,
    steps: &'static [Step],
    end_s: i64,
}

const THERMAL_STEPS: &[Step] = &[
    not_action(30, "Incident bridge opened for the hall temperature event"),
    metric(
        M,
        "Alert: DirectDrive hall temperature threshold exceeded",
        &[],
    ),
    act(
        6 * M,
        "Facilities team engaged to restore cooling in the DirectDrive hall",
        None,
    ),
    with_attrs(
        say(
            31 * M + 30,
            "thermal protection triggered shutdowns of storage and direct drive",
        ),
        &[("severity", "SEV-1")],
    ),
    say(
        32 * M,
        "Facilities confirms cooling restored; temperatures are stabilizing",
    ),
    say(36 * M, "waiting on the recovery plan"),
    act(
        37 * M,
        "Controlled, staged recovery initiated",
        Some("success"),
    ),
    say(
        41 * M,
        "storage nodes coming back online one rack at a time",
    ),
    say(47 * M, "All DirectDrive volumes healthy again"),
];

const THERMAL_PARAPHRASE_STEPS: &[Step] = &[
    not_action(40, "Bridge call opened for the overheating hall"),
    metric(
        M + 20,
        "Alert: temperature threshold exceeded in the DirectDrive hall",
        &[],
    ),
    act(
        5 * M,
        "Facilities crew engaged to bring cooling back in the DirectDrive hall",
        None,
    ),
    with_attrs(
        say(
            29 * M + 10,
            "thermal protection triggered shutdowns across direct drive and storage racks",
        ),
        &[("severity", "SEV-1")],
    ),
    say(
        30 * M + 30,
        "Cooling restored per facilities, hall temperatures are stabilizing",
    ),
    say(34 * M, "holding until we agree on the power-up order"),
    act(
        36 * M,
        "Staged, controlled recovery initiated",
        Some("success"),
    ),
    say(40 * M, "racks returning one at a time"),
    say(46 * M, "DirectDrive volumes healthy again"),
];

const DB_STEPS: &[Step] = &[
    not_action(20, "Incident bridge opened"),
    metric(
        M,
        "Alert: {service} write error rate above threshold",
        &[("severity", "SEV2")],
    ),
    say(
        4 * M,
        "{service} primary is not accepting writes and replication lag is growing",
    ),
    say(
        9 * M,
        "Investigating: logs show the {service} primary is unreachable while replicas are healthy",
    ),
    act(
        14 * M,
        "Primary health and replica lag check completed for {service}",
        None,
    ),
    act(
        21 * M,
        "Failed over {service} to the healthy replica",
        Some("success"),
    ),
    say(
        26 * M,
        "Writes succeeding on the new primary, error rate back to normal",
    ),
    act(
        33 * M,
        "Rebuild of the old {service} primary as a new replica started",
        Some("success"),
    ),
];

const CAPACITY_STEPS: &[Step] = &[
    not_action(25, "Incident bridge opened"),
    metric(
        M,
        "Alert: {service} p99 latency threshold exceeded",
        &[("severity", "SEV3")],
    ),
    say(
        5 * M,
        "Assessing impact: request queues saturated and cpu pinned across the {service} pool",
    ),
    say(
        11 * M,
        "Investigating: one tenant is generating most of the {service} traffic",
    ),
    act(
        17 * M,
        "Scaled out {service} by adding capacity to the pool",
        Some("success"),
    ),
    act(
        22 * M,
        "Throttled the noisy tenant on {service}",
        Some("success"),
    ),
    say(29 * M, "{service} latency back to normal after scaling"),
    act(
        36 * M,
        "Disabled the temporary tenant throttles on {service}",
        Some("success"),
    ),
];

const CASCADE_STEPS: &[Step] = &[
    not_action(15, "Incident bridge opened"),
    metric(
        M,
        "Alert: {service} login failures above threshold",
        &[("severity", "SEV2")],
    ),
    say(
        4 * M,
        "token-cache also impacted, several services failing together",
    ),
    say(
        8 * M,
        "Investigating: suspect the shared token-cache dependency of {service}",
    ),
    act(
        15 * M,
        "Rerouted {service} traffic to the secondary region",
        Some("success"),
    ),
    say(23 * M, "token-cache dependency recovered"),
    act(
        30 * M,
        "Drained traffic back to the primary region for {service}",
        Some("success"),
    ),
];

/// Sparse opening: early actions without the context to recommend them.
const SPARSE_PREFIX: &[Step] = &[
    act(2 * M, "Paged the on-call engineer for {service}", None),
    say(6 * M, "Assessing impact on customers"),
    act(
        7 * M,
        "Status page update posted for {service} customers",
        None,
    ),
];

const SCENARIOS: &[Scenario] = &[
    Scenario {
        key: "thermal",
        title: "DirectDrive thermal shutdown",
        services: &["DirectDrive"],
        severity: Severity::Sev1,
        steps: THERMAL_STEPS,
        end_s: 52 * M,
    },
    Scenario {
        key: "db_failover",
        title: "{service} primary database unavailable",
        services: &["orders-db", "billing-db", "catalog-db"],
        severity: Severity::Sev2,
        steps: DB_STEPS,
        end_s: 38 * M,
    },
    Scenario {
        key: "capacity",
        title: "{service} capacity exhaustion",
        services: &["checkout-api", "search-api", "ingest-gateway"],
        severity: Severity::Sev3,
        steps: CAPACITY_STEPS,
        end_s: 40 * M,
    },
    Scenario {
        key: "cascade",
        title: "{service} dependency cascade",
        services: &["auth-service", "identity-gateway"],
        severity: Severity::Sev2,
        steps: CASCADE_STEPS,
        end_s: 35 * M,
    },
    Scenario {
        key: "thermal_paraphrase",
        title: "DirectDrive hall overheating",
        services: &["DirectDrive"],
        severity: Severity::Sev1,
        steps: THERMAL_PARAPHRASE_STEPS,
        end_s: 50 * M,
    },
];

const METRICS: &[(&str, &str, u32, u32)] = &[
    ("p50 latency", " ms", 20, 180),
    ("cpu utilization", "%", 20, 95),
    ("queue depth", "", 100, 5000),
    ("request rate", " rps", 1000, 9000),
    ("disk iops", "", 2000, 20000),
    ("gc pause", " ms", 5, 200),
    ("open connections", "", 200, 4000),
];

const CHATTER: &[&str] = &[
    "joining the bridge now",
    "muting my line",
    "can you repeat that",
    "can someone share the dashboard link",
    "taking notes in the incident doc",
    "who is scribing today",
    "thanks all",
    "ack",
    "copy that",
    "noted",
    "still watching the graphs",
    "reminder to keep this channel focused",
    "customer support is asking for an eta",
    "need a volunteer for comms",
    "graphs are loading slowly for me",
    "back in two minutes",
    "anyone else seeing gaps in the charts",
    "dialing in from my phone",
];

/// One generated trace with its label file.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrace {
    pub trace: Trace,
    pub labels: Vec<LabelLine>,
}

/// A generated corpus: traces plus the runbooks and topology they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub traces: Vec<GeneratedTrace>,
    pub playbooks: Vec<PlaybookDoc>,
    pub topology: TopologyFile,
}

impl Corpus {
    /// Writes `<id>.trace.jsonl`, `<id>.meta.json` and `<id>.labels.jsonl`
    /// per trace, `playbooks/<id>.md` and `topology.toml`.
    pub fn write(&self, dir: &Path) -> Result<Vec<GeneratedTraceFiles>, EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        let books = dir.join("playbooks");
        std::fs::create_dir_all(&books).map_err(io(&books))?;
        let mut files = Vec::new();
        for t in &self.traces {
            t.trace.save(dir)?;
            let id = &t.trace.meta.trace_id;
            let labels = dir.join(format!("{id}.labels.jsonl"));
            write_jsonl(&labels, &t.labels)?;
            files.push(GeneratedTraceFiles {
                trace: dir.join(format!("{id}.trace.jsonl")),
                labels,
            });
        }
        for doc in &self.playbooks {
            write_text(&books.join(format!("{}.md", doc.id)), &doc.body)?;
        }
        let topo = toml::to_string(&self.topology)
            .map_err(|e| EvalError::InvalidTrace(format!("topology: {e}")))?;
        write_text(&dir.join("topology.toml"), &topo)?;
        Ok(files)
    }
}

/// Deterministic corpus of `n` traces for `profile`.
pub fn generate_corpus(seed: u64, n: usize, profile: &str) -> Result<Corpus, EvalError> {
    if !PROFILES.contains(&profile) {
        return Err(EvalError::UnknownProfile(profile.to_string()));
    }
    if n == 0 {
        return Err(EvalError::InvalidTrace(
            "a corpus needs at least one trace".into(),
        ));
    }
    let traces = (0..n)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(format!("{profile}/{i}").as_bytes()));
            let (scenario, sparse) = match profile {
                "mixed" => (&SCENARIOS[i % 4], false),
                "sparse_early" => (&SCENARIOS[1 + (i + seed as usize) % 3], true),
                key => (scenario(key), false),
            };
            instantiate(
                scenario,
                sparse,
                &format!("{profile}-s{seed}-{i:02}"),
                i,
                profile,
                &mut rng,
            )
        })
        .collect();
    Ok(Corpus {
        traces,
        playbooks: RUNBOOKS
            .iter()
            .map(|(id, body)| PlaybookDoc {
                id: id.to_string(),
                body: body.to_string(),
            })
            .collect(),
        topology: topology(),
    })
}

fn scenario(key: &str) -> &'static Scenario {
    SCENARIOS
        .iter()
        .find(|s| s.key == key)
        .expect("profile names a scenario")
}

fn topology() -> TopologyFile {
    let mut entities = Vec::new();
    let mut add = |kind, name: &str, aliases: &[&str]| {
        entities.push(TopologyEntity {
            kind,
            canonical_name: name.to_string(),
            aliases: aliases.iter().map(|a| a.to_string()).collect(),
        })
    };
    add(EntityKind::Service, "DirectDrive", &["direct drive"]);
    add(EntityKind::Component, "storage", &[]);
    for s in SCENARIOS.iter().skip(1).take(3) {
        for svc in s.services {
            add(EntityKind::Service, svc, &[]);
        }
    }
    add(EntityKind::Component, "token-cache", &["token cache"]);
    let edges = ["auth-service", "identity-gateway"]
        .iter()
        .map(|s| TopologyEdge {
            from: s.to_string(),
            to: "token-cache".into(),
        })
        .chain(std::iter::once(TopologyEdge {
            from: "DirectDrive".into(),
            to: "storage".into(),
        }))
        .collect();
    TopologyFile { entities, edges }
}

fn start_time(scenario: &Scenario, index: usize, rng: &mut ChaCha8Rng) -> DateTime<Utc> {
    if scenario.services == ["DirectDrive"] {
        // Pinned so the thermal scenario lines up with its reference timeline.
        Utc.with_ymd_and_hms(2024, 8, 1, 3, 47, 0).unwrap() + Duration::days(index as i64)
    } else {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
            + Duration::days(rng.random_range(0..360))
            + Duration::minutes(rng.random_range(0..1440))
    }
}

fn instantiate(
    scenario: &Scenario,
    sparse: bool,
    trace_id: &str,
    index: usize,
    profile: &str,
    rng: &mut ChaCha8Rng,
) -> GeneratedTrace {
    let service = scenario.services[rng.random_range(0..scenario.services.len())];
    let fill = |t: &str| t.replace("{service}", service);
    let t0 = start_time(scenario, index, rng);
    let signal = |at_s: i64, modality: Modality, source: &str, payload: String| RawSignal {
        incident_id: trace_id.to_string(),
        ts: t0 + Duration::seconds(at_s),
        modality,
        source: source.to_string(),
        payload,
        attrs: BTreeMap::new(),
    };

    // Sparse openings push the scripted steps back so that the early
    // actions sit alone in Detect and Assess.
    let shift = if sparse { 8 * M } else { 0 };
    let mut scripted: Vec<(RawSignal, Option<bool>)> = Vec::new();
    let prefix = if sparse { SPARSE_PREFIX } else { &[] };
    let steps = scenario.steps.iter().map(|s| (s, shift));
    for (step, offset) in prefix.iter().map(|s| (s, 0)).chain(steps) {
        let at = step.at_s + offset;
        let (modality, source) = match step.kind {
            Kind::Metric => (Modality::Telemetry, "monitor"),
            Kind::Say | Kind::Act(_) => (Modality::Communication, "bridge_transcript"),
        };
        let mut sig = signal(at, modality, source, fill(step.text));
        for (k, v) in step.attrs {
            sig.attrs.insert(k.to_string(), v.to_string());
        }
        let label = match step.kind {
            Kind::Act(result) => {
                if let Some(r) = result {
                    sig.attrs.insert("action_result".into(), r.to_string());
                }
                Some(step.confirmed)
            }
            _ => None,
        };
        scripted.push((sig, label));
    }
    // The opening alert fires twice within the same minute.
    if let Some((first_alert, _)) = scripted
        .iter()
        .find(|(s, _)| s.modality == Modality::Telemetry)
    {
        let mut again = first_alert.clone();
        again.ts += Duration::seconds(20);
        scripted.push((again, None));
    }

    let labels = scripted
        .iter()
        .filter_map(|(s, label)| {
            label.map(|confirmed| LabelLine {
                ts: s.ts,
                action_text: s.payload.clone(),
                confirmed,
                playbook_ref: None,
            })
        })
        .collect();

    let end = scenario.end_s + shift;
    let mut signals: Vec<RawSignal> = scripted.into_iter().map(|(s, _)| s).collect();
    // Quiet opening for sparse profiles: no noise before the shifted script.
    let mut at = if sparse {
        shift
    } else {
        rng.random_range(3..15)
    };
    while at < end {
        let sig = if rng.random_bool(0.6) {
            let (name, unit, lo, hi) = METRICS[rng.random_range(0..METRICS.len())];
            let value = rng.random_range(lo..=hi);
            signal(
                at,
                Modality::Telemetry,
                "metrics",
                format!("{name} {value}{unit}"),
            )
        } else {
            let line = CHATTER[rng.random_range(0..CHATTER.len())];
            signal(at, Modality::Communication, "bridge_chat", line.to_string())
        };
        if rng.random_bool(0.08) {
            signals.push(sig.clone());
        }
        signals.push(sig);
        at += rng.random_range(5..25);
    }
    // Stable sort keeps scripted steps ahead of noise at equal timestamps.
    signals.sort_by_key(|s| s.ts);

    GeneratedTrace {
        trace: Trace {
            meta: TraceMeta {
                trace_id: trace_id.to_string(),
                incident_id: trace_id.to_string(),
                title: fill(scenario.title),
                service: service.to_string(),
                severity: scenario.severity,
                started_at: t0,
                profile: profile.to_string(),
                scenario: scenario.key.to_string(),
            },
            signals,
            label_file: None,
        },
        labels,
    }
}
