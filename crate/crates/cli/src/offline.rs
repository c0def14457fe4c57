//! Offline commands: corpus, ground truth, replay, evaluation, memory upkeep.

use crate::Knowledge;
use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use outage_core::replay_eval::{
    build_ground_truth, evaluate as score, export_embeddings, generate_corpus, playbook_actions,
    read_jsonl, replay as replay_trace, write_jsonl, EvalItem, GroundTruth, LabelLine,
    PlaybookAction, ReplayLog, Trace, TraceEval,
};
use outage_core::{Gateway, Memory, PlaybookDoc, Recommendation, SystemConfig, Topology};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tempfile::TempDir;

const RECS_SUFFIX: &str = ".recs.jsonl";
const GT_SUFFIX: &str = ".gt.json";
const SUMMARY_SUFFIX: &str = ".summary.json";

/// Per-trace replay counts written beside the recommendations.
#[derive(Debug, Serialize, Deserialize)]
struct ReplaySummary {
    trace_id: String,
    incident_id: String,
    n_observations: usize,
    n_duplicates: usize,
    n_events: usize,
    n_recommendations: usize,
    n_feedback: usize,
    case_id: Option<String>,
}

fn gateway(cfg: &SystemConfig) -> Result<Arc<Gateway>> {
    Ok(Arc::new(Gateway::from_config(&cfg.provider)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from).with_context(|| format!("reading {}", from.display()))? {
        let path = entry?.path();
        let target = to.join(path.file_name().expect("directory entry has a name"));
        if path.is_dir() {
            copy_dir(&path, &target)?;
        } else {
            std::fs::copy(&path, &target).with_context(|| format!("copying {}", path.display()))?;
        }
    }
    Ok(())
}

fn distill_all(memory: &Memory, docs: &[PlaybookDoc], at: DateTime<Utc>) -> Result<()> {
    for doc in docs {
        memory
            .distill_playbook(doc, at)
            .with_context(|| format!("distilling playbook `{}`", doc.id))?;
    }
    Ok(())
}

/// Memory seeded from `knowledge`. It lives in `dir` when given, in a
/// temporary copy when only a snapshot is given, and in process otherwise.
fn open_memory(
    cfg: &SystemConfig,
    gw: &Arc<Gateway>,
    knowledge: &Knowledge,
    dir: Option<&Path>,
    at: DateTime<Utc>,
) -> Result<(Arc<Memory>, Option<TempDir>)> {
    let mut tmp = None;
    let target = match (dir, &knowledge.memory_snapshot) {
        (Some(d), _) => Some(d.to_path_buf()),
        (None, Some(_)) => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            tmp = Some(t);
            Some(p)
        }
        (None, None) => None,
    };
    let memory = match target {
        Some(path) => {
            if let Some(snapshot) = &knowledge.memory_snapshot {
                copy_dir(snapshot, &path)?;
            }
            Memory::open(&path, cfg.memory.clone(), gw.clone())
                .with_context(|| format!("opening memory at {}", path.display()))?
        }
        None => Memory::in_memory(cfg.memory.clone(), gw.clone()),
    };
    if let Some(dir) = &knowledge.playbooks {
        distill_all(&memory, &PlaybookDoc::load_dir(dir)?, at)?;
    }
    Ok((Arc::new(memory), tmp))
}

fn load_topology(path: Option<&Path>, trace: &Path) -> Result<Topology> {
    let sibling = trace
        .parent()
        .unwrap_or(Path::new("."))
        .join("topology.toml");
    match path {
        Some(p) => Ok(Topology::load(p)?),
        None if sibling.is_file() => Ok(Topology::load(&sibling)?),
        None => Ok(Topology::empty()),
    }
}

fn labels_of(trace: &Trace, explicit: Option<&Path>) -> Result<Vec<LabelLine>> {
    match explicit.or(trace.label_file.as_deref()) {
        Some(p) => Ok(read_jsonl(p)?),
        None => Ok(Vec::new()),
    }
}

fn write_replay(out: &Path, log: &ReplayLog) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let id = &log.trace_id;
    write_jsonl(
        &out.join(format!("{id}{RECS_SUFFIX}")),
        &log.recommendations,
    )?;
    write_jsonl(&out.join(format!("{id}.feedback.jsonl")), &log.feedback)?;
    write_jsonl(&out.join(format!("{id}.stream.jsonl")), &log.stream)?;
    write_json(
        &out.join(format!("{id}{SUMMARY_SUFFIX}")),
        &ReplaySummary {
            trace_id: id.clone(),
            incident_id: log.incident_id.clone(),
            n_observations: log.n_observations,
            n_duplicates: log.n_duplicates,
            n_events: log.n_events,
            n_recommendations: log.recommendations.len(),
            n_feedback: log.feedback.len(),
            case_id: log.case_id.clone(),
        },
    )
}

pub fn gen_corpus(seed: u64, n: usize, profile: &str, out: &Path) -> Result<()> {
    let corpus = generate_corpus(seed, n, profile)?;
    corpus.write(out)?;
    println!("wrote {} traces to {}", corpus.traces.len(), out.display());
    Ok(())
}

pub fn build_gt(
    cfg: &SystemConfig,
    trace_path: &Path,
    labels: Option<&Path>,
    knowledge: &Knowledge,
    out: &Path,
) -> Result<()> {
    let gw = gateway(cfg)?;
    let trace = Trace::load(trace_path)?;
    let labels = labels_of(&trace, labels)?;
    let (memory, _tmp) = open_memory(cfg, &gw, knowledge, None, trace.meta.started_at)?;
    let books = playbook_actions(memory.kca_snapshot().entries());
    let gt = build_ground_truth(&trace, &labels, &books, &gw, cfg.eval.g2_threshold)?;
    write_json(out, &gt)?;
    println!(
        "{}: G1 {} actions, G2 {}",
        gt.trace_id,
        gt.g1.len(),
        gt.g2.len()
    );
    Ok(())
}

pub fn replay(
    cfg: &SystemConfig,
    trace_path: &Path,
    knowledge: &Knowledge,
    topology: Option<&Path>,
    memory_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let gw = gateway(cfg)?;
    let trace = Trace::load(trace_path)?;
    let topo = Arc::new(load_topology(topology, trace_path)?);
    let (memory, _tmp) = open_memory(cfg, &gw, knowledge, memory_out, trace.meta.started_at)?;
    let log = replay_trace(&trace, cfg, memory, topo)?;
    write_replay(out, &log)?;
    println!(
        "{}: {} observations, {} critical events, {} recommendations",
        log.trace_id,
        log.n_observations,
        log.n_events,
        log.recommendations.len()
    );
    Ok(())
}

/// Files ending in `suffix`, keyed by the name before it. Directories are
/// searched one level deep.
fn collect(paths: &[PathBuf], suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let files: Vec<PathBuf> = if p.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            v.sort();
            v
        } else {
            vec![p.clone()]
        };
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(stem) = name.strip_suffix(suffix) {
                if out.insert(stem.to_string(), f.clone()).is_some() {
                    bail!("two files for trace `{stem}`");
                }
            } else if !p.is_dir() {
                bail!("{}: expected a *{suffix} file", f.display());
            }
        }
    }
    Ok(out)
}

/// Pairs ground truth with recommendations by trace id.
fn load_eval_inputs(rec_paths: &[PathBuf], gt_paths: &[PathBuf]) -> Result<Vec<TraceEval>> {
    let recs = collect(rec_paths, RECS_SUFFIX)?;
    let gts = collect(gt_paths, GT_SUFFIX)?;
    if let Some(orphan) = recs.keys().find(|k| !gts.contains_key(*k)) {
        bail!("recommendations for trace `{orphan}` have no ground truth");
    }
    let mut out = Vec::new();
    for (id, gt_path) in &gts {
        let gt: GroundTruth = read_json(gt_path)?;
        if &gt.trace_id != id {
            bail!(
                "{} holds ground truth for `{}`",
                gt_path.display(),
                gt.trace_id
            );
        }
        let (rec_list, summary) = match recs.get(id) {
            Some(p) => {
                let list: Vec<Recommendation> = read_jsonl(p)?;
                let summary_path = p.with_file_name(format!("{id}{SUMMARY_SUFFIX}"));
                let summary: Option<ReplaySummary> = summary_path
                    .is_file()
                    .then(|| read_json(&summary_path))
                    .transpose()?;
                (list, summary)
            }
            None => {
                tracing::warn!(trace = %id, "no recommendations; scoring as empty");
                (Vec::new(), None)
            }
        };
        out.push(TraceEval {
            trace_id: id.clone(),
            recs: rec_list.iter().map(EvalItem::from).collect(),
            g1: gt.g1.iter().map(EvalItem::from).collect(),
            g2: gt.g2.iter().map(EvalItem::from).collect(),
            n_observations: summary.as_ref().map_or(0, |s| s.n_observations),
            n_events: summary.as_ref().map_or(0, |s| s.n_events),
        });
    }
    Ok(out)
}

fn playbook_actions_from(
    cfg: &SystemConfig,
    gw: &Arc<Gateway>,
    dir: Option<&Path>,
) -> Result<Vec<PlaybookAction>> {
    let Some(dir) = dir else {
        return Ok(Vec::new());
    };
    let memory = Memory::in_memory(cfg.memory.clone(), gw.clone());
    distill_all(&memory, &PlaybookDoc::load_dir(dir)?, DateTime::UNIX_EPOCH)?;
    Ok(playbook_actions(memory.kca_snapshot().entries()))
}

fn write_coverage(
    gw: &Gateway,
    traces: &[TraceEval],
    books: &[PlaybookAction],
    out: &Path,
) -> Result<()> {
    let recs: Vec<EvalItem> = traces.iter().flat_map(|t| t.recs.iter().cloned()).collect();
    let g1: Vec<EvalItem> = traces.iter().flat_map(|t| t.g1.iter().cloned()).collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    export_embeddings(&recs, &g1, books, gw)?.write(out)?;
    Ok(())
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.1}%", x * 100.0))
}

fn print_report(r: &outage_core::replay_eval::EvalReport) {
    println!(
        "{} traces, {} recommendations | G1 ({}) precision {} recall {} | G2 ({}) precision {} recall {}",
        r.counts.n_traces,
        r.counts.n_recs,
        r.counts.n_g1,
        fmt_ratio(r.g1.precision),
        fmt_ratio(r.g1.recall),
        r.counts.n_g2,
        fmt_ratio(r.g2.precision),
        fmt_ratio(r.g2.recall),
    );
}

pub fn evaluate(
    cfg: &SystemConfig,
    recs: &[PathBuf],
    gts: &[PathBuf],
    coverage: Option<&Path>,
    playbooks: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let gw = gateway(cfg)?;
    let traces = load_eval_inputs(recs, gts)?;
    let mut evaluation = score(&traces, &cfg.eval, &gw)?;
    if let Some(path) = coverage {
        let books = playbook_actions_from(cfg, &gw, playbooks)?;
        write_coverage(&gw, &traces, &books, path)?;
        evaluation.report.embedding_export_ref = Some(path.display().to_string());
    }
    write_json(out, &evaluation.report)?;
    print_report(&evaluation.report);
    Ok(())
}

pub fn export_coverage(
    cfg: &SystemConfig,
    recs: &[PathBuf],
    gts: &[PathBuf],
    playbooks: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let gw = gateway(cfg)?;
    let traces = load_eval_inputs(recs, gts)?;
    let books = playbook_actions_from(cfg, &gw, playbooks)?;
    write_coverage(&gw, &traces, &books, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Traces of a corpus directory in trace-id order, with their labels.
fn load_corpus(dir: &Path) -> Result<Vec<(Trace, Vec<LabelLine>)>> {
    let mut metas: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".meta.json")))
        .collect();
    metas.sort();
    let mut out = Vec::new();
    for m in metas {
        let trace = Trace::load(&m)?;
        let labels = labels_of(&trace, None)?;
        out.push((trace, labels));
    }
    if out.is_empty() {
        bail!("{} holds no traces", dir.display());
    }
    out.sort_by(|a, b| a.0.meta.trace_id.cmp(&b.0.meta.trace_id));
    Ok(out)
}

pub fn run(cfg: &SystemConfig, corpus: &Path, evolve: bool, out: &Path) -> Result<()> {
    let gw = gateway(cfg)?;
    let traces = load_corpus(corpus)?;
    let book_dir = corpus.join("playbooks");
    let docs = if book_dir.is_dir() {
        PlaybookDoc::load_dir(&book_dir)?
    } else {
        Vec::new()
    };
    let topo_path = corpus.join("topology.toml");
    let topo = Arc::new(if topo_path.is_file() {
        Topology::load(&topo_path)?
    } else {
        Topology::empty()
    });
    std::fs::create_dir_all(out)?;

    let fresh = |at: DateTime<Utc>| -> Result<Arc<Memory>> {
        let memory = Memory::in_memory(cfg.memory.clone(), gw.clone());
        distill_all(&memory, &docs, at)?;
        Ok(Arc::new(memory))
    };
    let shared = if evolve {
        Some(fresh(traces[0].0.meta.started_at)?)
    } else {
        None
    };
    let mut evals = Vec::new();
    for (trace, labels) in &traces {
        let memory = match &shared {
            Some(m) => m.clone(),
            None => fresh(trace.meta.started_at)?,
        };
        let books = playbook_actions(memory.kca_snapshot().entries());
        let gt = build_ground_truth(trace, labels, &books, &gw, cfg.eval.g2_threshold)?;
        write_json(&out.join(format!("{}{GT_SUFFIX}", gt.trace_id)), &gt)?;
        let log = replay_trace(trace, cfg, memory.clone(), topo.clone())?;
        write_replay(out, &log)?;
        if evolve {
            let end = trace.signals.last().map_or(trace.meta.started_at, |s| s.ts)
                + Duration::seconds(cfg.perception.window_length_s as i64);
            let cases = memory.episodic_snapshot().cases().to_vec();
            let report = memory.consolidate_long_term(&cases, end)?;
            tracing::info!(trace = %log.trace_id, created = report.created.len(), "consolidated");
        }
        evals.push(TraceEval {
            trace_id: log.trace_id.clone(),
            recs: log.recommendations.iter().map(EvalItem::from).collect(),
            g1: gt.g1.iter().map(EvalItem::from).collect(),
            g2: gt.g2.iter().map(EvalItem::from).collect(),
            n_observations: log.n_observations,
            n_events: log.n_events,
        });
    }
    let mut evaluation = score(&evals, &cfg.eval, &gw)?;
    let books = playbook_actions(fresh(DateTime::UNIX_EPOCH)?.kca_snapshot().entries());
    write_coverage(&gw, &evals, &books, &out.join("coverage.jsonl"))?;
    evaluation.report.embedding_export_ref = Some("coverage.jsonl".into());
    write_json(&out.join("report.json"), &evaluation.report)?;
    write_json(
        &out.join("matches.json"),
        &serde_json::json!({ "g1": evaluation.g1_matches, "g2": evaluation.g2_matches }),
    )?;
    print_report(&evaluation.report);
    Ok(())
}

pub fn distill(cfg: &SystemConfig, playbooks: &Path, memory: &Path) -> Result<()> {
    let gw = gateway(cfg)?;
    let mem = Memory::open(memory, cfg.memory.clone(), gw)?;
    let mut created = 0;
    let mut merged = 0;
    for doc in PlaybookDoc::load_dir(playbooks)? {
        let r = mem.distill_playbook(&doc, Utc::now())?;
        created += r.created.len();
        merged += r.merged.len();
    }
    println!("{created} entries created, {merged} merged");
    Ok(())
}

pub fn consolidate(cfg: &SystemConfig, memory: &Path) -> Result<()> {
    let gw = gateway(cfg)?;
    let mem = Memory::open(memory, cfg.memory.clone(), gw)?;
    let cases = mem.episodic_snapshot().cases().to_vec();
    let r = mem.consolidate_long_term(&cases, Utc::now())?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
