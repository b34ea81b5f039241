//! Episode lifecycle, per-tick recording, episode logs and the benchmark
//! metrics: success rate, completion time, sim/real rank correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::input::Modality;
use crate::kinematics::JointCommand;
use crate::taskenv::{EnvEvent, WorldState, STUDY_TASKS};

/// A DoF must leave home by more than this for the operator to have started.
pub const FIRST_MOTION_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MIN_SUCCESS_PCT: f64 = 20.0;
/// Column order of the result tables.
pub const TABLE_MODALITIES: [Modality; 4] = [Modality::Vision, Modality::Vr, Modality::Exo, Modality::Mocap];

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("episode is closed")]
    EpisodeClosed,
    #[error("no episodes to aggregate")]
    EmptyInput,
    #[error("reports share no (task, modality) rows")]
    NoOverlap,
    #[error("corrupt episode log: {0}")]
    CorruptLog(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub id: String,
    pub task: String,
    pub modality: Modality,
    pub operator: String,
    pub seed: u64,
    pub robot: String,
    pub config_hash: String,
    pub timeout: f64,
    pub home: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickRecord {
    pub k: usize,
    pub t: f64,
    pub frame: String,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub world: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeResult {
    pub success: bool,
    pub completion_time: Option<f64>,
    pub reason: Option<String>,
    pub start_t: f64,
    pub end_t: f64,
    pub first_motion_t: Option<f64>,
    pub satisfied_at: Option<f64>,
    pub coalesced: u64,
    pub warnings: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub ticks: Vec<TickRecord>,
    pub result: Option<EpisodeResult>,
    pub coalesced: u64,
    pub warnings: u64,
}

/// How an episode ended, as seen by the driver loop.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvResult {
    pub satisfied_at: Option<f64>,
    pub end_t: f64,
    /// Non-success termination cause (stream end, driver loss, ...).
    pub stop_reason: Option<String>,
}

impl Episode {
    pub fn new(meta: EpisodeMeta) -> Self {
        Episode { meta, ticks: Vec::new(), result: None, coalesced: 0, warnings: 0 }
    }

    pub fn is_open(&self) -> bool {
        self.result.is_none()
    }

    /// Append one tick; velocity is the finite difference to the previous
    /// tick's command.
    pub fn record_step(
        &mut self,
        frame_digest: &str,
        cmd: &JointCommand,
        world: &WorldState,
        events: &[EnvEvent],
    ) -> Result<(), SessionError> {
        if !self.is_open() {
            return Err(SessionError::EpisodeClosed);
        }
        let q: Vec<f64> = cmd.q.iter().copied().collect();
        let qd = match self.ticks.last() {
            Some(prev) if world.t > prev.t => q.iter().zip(&prev.q).map(|(a, b)| (a - b) / (world.t - prev.t)).collect(),
            _ => vec![0.0; q.len()],
        };
        let events: Vec<String> = events
            .iter()
            .map(|e| match e.hand {
                Some(h) => format!("{}:{}:{}", e.kind, h.name(), e.detail),
                None => format!("{}:{}", e.kind, e.detail),
            })
            .collect();
        self.warnings += events.iter().filter(|e| e.starts_with("warning")).count() as u64;
        self.ticks.push(TickRecord {
            k: self.ticks.len(),
            t: world.t,
            frame: frame_digest.to_string(),
            q,
            qd,
            world: digest(&world.canonical()),
            events,
        });
        Ok(())
    }

    /// First tick whose command leaves home by more than the threshold.
    pub fn first_motion_t(&self) -> Option<f64> {
        self.ticks
            .iter()
            .find(|tk| tk.q.iter().zip(&self.meta.home).any(|(q, h)| (q - h).abs() > FIRST_MOTION_THRESHOLD))
            .map(|tk| tk.t)
    }

    /// Close the episode: completion time runs from first motion to the
    /// first satisfying tick.
    pub fn finalize(&mut self, env: &EnvResult) -> Result<&EpisodeResult, SessionError> {
        if !self.is_open() {
            return Err(SessionError::EpisodeClosed);
        }
        let first_motion_t = self.first_motion_t();
        let start_t = self.ticks.first().map(|t| t.t).unwrap_or(0.0);
        let (success, completion_time, reason) = match (env.satisfied_at, first_motion_t) {
            (None, _) if env.stop_reason.is_some() => (false, None, env.stop_reason.clone()),
            (_, None) => (false, None, Some("no_motion".to_string())),
            (Some(sat), Some(fm)) if sat >= fm => {
                let ct = sat - fm;
                if ct <= self.meta.timeout {
                    (true, Some(ct), None)
                } else {
                    (false, None, Some("timeout".to_string()))
                }
            }
            (Some(_), Some(_)) => (false, None, Some("no_motion".to_string())),
            (None, Some(_)) => (false, None, Some("timeout".to_string())),
        };
        self.result = Some(EpisodeResult {
            success,
            completion_time,
            reason,
            start_t,
            end_t: env.end_t,
            first_motion_t,
            satisfied_at: env.satisfied_at,
            coalesced: self.coalesced,
            warnings: self.warnings,
        });
        Ok(self.result.as_ref().expect("just set"))
    }

    /// JSONL: header, one line per tick, result line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            r#type: &'static str,
            v: u32,
            #[serde(flatten)]
            meta: &'a EpisodeMeta,
        }
        #[derive(Serialize)]
        struct Line<'a, T: Serialize> {
            r#type: &'static str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut out = serde_json::to_string(&Header { r#type: "episode", v: 1, meta: &self.meta }).expect("serializable");
        out.push('\n');
        for t in &self.ticks {
            out.push_str(&serde_json::to_string(&Line { r#type: "tick", body: t }).expect("serializable"));
            out.push('\n');
        }
        if let Some(r) = &self.result {
            out.push_str(&serde_json::to_string(&Line { r#type: "result", body: r }).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SessionError> {
        let corrupt = |line: usize, e: String| SessionError::CorruptLog(format!("line {line}: {e}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| SessionError::CorruptLog("empty log".into()))?;
        let mut header: serde_json::Value = serde_json::from_str(first).map_err(|e| corrupt(1, e.to_string()))?;
        let obj = header.as_object_mut().ok_or_else(|| corrupt(1, "header is not an object".into()))?;
        if obj.remove("type").and_then(|v| v.as_str().map(String::from)).as_deref() != Some("episode") {
            return Err(corrupt(1, "missing episode header".into()));
        }
        if obj.remove("v").and_then(|v| v.as_u64()) != Some(1) {
            return Err(corrupt(1, "unsupported log version".into()));
        }
        let meta: EpisodeMeta = serde_json::from_value(header).map_err(|e| corrupt(1, e.to_string()))?;
        let mut ep = Episode::new(meta);
        for (i, line) in lines {
            let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            let kind = v
                .as_object_mut()
                .and_then(|o| o.remove("type"))
                .and_then(|t| t.as_str().map(String::from))
                .ok_or_else(|| corrupt(i + 1, "missing type".into()))?;
            if ep.result.is_some() {
                return Err(corrupt(i + 1, "line after result".into()));
            }
            match kind.as_str() {
                "tick" => ep.ticks.push(serde_json::from_value(v).map_err(|e| corrupt(i + 1, e.to_string()))?),
                "result" => {
                    let r: EpisodeResult = serde_json::from_value(v).map_err(|e| corrupt(i + 1, e.to_string()))?;
                    ep.coalesced = r.coalesced;
                    ep.warnings = r.warnings;
                    ep.result = Some(r);
                }
                other => return Err(corrupt(i + 1, format!("unknown line type `{other}`"))),
            }
        }
        Ok(ep)
    }
}

/// Free-function forms of the episode operations.
pub fn record_step(
    ep: &mut Episode,
    frame_digest: &str,
    cmd: &JointCommand,
    world: &WorldState,
) -> Result<(), SessionError> {
    ep.record_step(frame_digest, cmd, world, &[])
}

pub fn finalize_episode(ep: &mut Episode, env: &EnvResult) -> Result<EpisodeResult, SessionError> {
    ep.finalize(env).cloned()
}

/// Read every `*.jsonl` episode log under `dir`, sorted by file name.
pub fn load_episodes(dir: &std::path::Path) -> Result<Vec<Episode>, SessionError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            Episode::from_jsonl(&text)
                .map_err(|e| SessionError::CorruptLog(format!("{}: {e}", p.display())))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub task: String,
    pub modality: Modality,
    pub trials: usize,
    pub successes: usize,
    pub success_pct: f64,
    /// Mean over successful trials; absent with zero successes.
    pub mean_time_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn task_rank(task: &str) -> (usize, String) {
    (STUDY_TASKS.iter().position(|t| *t == task).unwrap_or(usize::MAX), task.to_string())
}

fn modality_rank(m: Modality) -> usize {
    TABLE_MODALITIES.iter().position(|x| *x == m).expect("all modalities are tabled")
}

impl MetricsReport {
    pub fn get(&self, task: &str, modality: Modality) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.task == task && r.modality == modality)
    }

    /// Tasks in table order.
    pub fn tasks(&self) -> Vec<String> {
        let mut t: Vec<String> = self.rows.iter().map(|r| r.task.clone()).collect();
        t.sort_by_key(|t| task_rank(t));
        t.dedup();
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Group finalized episodes by (task, modality).
pub fn aggregate_report(episodes: &[Episode]) -> Result<MetricsReport, SessionError> {
    if episodes.is_empty() {
        return Err(SessionError::EmptyInput);
    }
    let mut groups: BTreeMap<((usize, String), usize), (String, Modality, Vec<Option<f64>>)> = BTreeMap::new();
    for ep in episodes {
        let r = ep
            .result
            .as_ref()
            .ok_or_else(|| SessionError::CorruptLog(format!("episode {} is not finalized", ep.meta.id)))?;
        let entry = groups
            .entry((task_rank(&ep.meta.task), modality_rank(ep.meta.modality)))
            .or_insert_with(|| (ep.meta.task.clone(), ep.meta.modality, Vec::new()));
        entry.2.push(if r.success { r.completion_time } else { None });
    }
    let rows = groups
        .into_values()
        .map(|(task, modality, outcomes)| {
            let mut times: Vec<f64> = outcomes.iter().flatten().copied().collect();
            // Sorted summation keeps the mean independent of episode order.
            times.sort_by(f64::total_cmp);
            let trials = outcomes.len();
            let successes = times.len();
            MetricsRow {
                task,
                modality,
                trials,
                successes,
                success_pct: 100.0 * successes as f64 / trials as f64,
                mean_time_s: (successes > 0).then(|| times.iter().sum::<f64>() / successes as f64),
            }
        })
        .collect();
    Ok(MetricsReport { rows })
}

/// Finalized episodes reproducing a given outcome: `successes` of
/// `trials` succeed with times spread symmetrically around `mean_time`.
pub fn synthetic_outcomes(
    task: &str,
    modality: Modality,
    operator: &str,
    trials: usize,
    successes: usize,
    mean_time: f64,
) -> Vec<Episode> {
    (0..trials)
        .map(|i| {
            let meta = EpisodeMeta {
                id: format!("{task}-{}-{operator}-{i}", modality.as_str()),
                task: task.to_string(),
                modality,
                operator: operator.to_string(),
                seed: i as u64,
                robot: "fixture".to_string(),
                config_hash: String::new(),
                timeout: 120.0,
                home: Vec::new(),
            };
            let mut ep = Episode::new(meta);
            let ok = i < successes;
            let ct = ok.then(|| mean_time + 0.25 * (i as f64 - (successes as f64 - 1.0) / 2.0));
            ep.result = Some(EpisodeResult {
                success: ok,
                completion_time: ct,
                reason: (!ok).then(|| "timeout".to_string()),
                start_t: 0.0,
                end_t: ct.unwrap_or(120.0),
                first_motion_t: Some(0.0),
                satisfied_at: ct,
                coalesced: 0,
                warnings: 0,
            });
            ep
        })
        .collect()
}

fn fmt_pct(p: f64) -> String {
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p:.1}")
    }
}

fn fmt_time(t: Option<f64>) -> String {
    t.map(|t| format!("{t:.2}")).unwrap_or_else(|| "--".to_string())
}

pub fn modality_label(m: Modality) -> &'static str {
    match m {
        Modality::Vision => "Vision",
        Modality::Vr => "VR",
        Modality::Exo => "Exoskeleton",
        Modality::Mocap => "MoCap",
    }
}

/// Aligned plain-text table: one row per task, success % and mean time
/// per modality.
pub fn render_text(report: &MetricsReport, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<4}{:<18}", "#", "Task");
    for m in TABLE_MODALITIES {
        let _ = write!(out, "{:>18}", modality_label(m));
    }
    out.push('\n');
    let _ = write!(out, "{:<22}", "");
    for _ in TABLE_MODALITIES {
        let _ = write!(out, "{:>8}{:>10}", "Succ%", "Time(s)");
    }
    out.push('\n');
    for (i, task) in report.tasks().iter().enumerate() {
        let _ = write!(out, "{:<4}{:<18}", i + 1, task);
        for m in TABLE_MODALITIES {
            match report.get(task, m) {
                Some(r) => {
                    let _ = write!(out, "{:>8}{:>10}", fmt_pct(r.success_pct), fmt_time(r.mean_time_s));
                }
                None => {
                    let _ = write!(out, "{:>8}{:>10}", "", "");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Parse a table produced by [`render_text`] back into
/// `(task, modality) -> (succ text, time text)` cells.
pub fn parse_text_table(text: &str) -> BTreeMap<(String, Modality), (String, String)> {
    let mut cells = BTreeMap::new();
    for line in text.lines().skip(3) {
        let Some(task) = line.get(4..22).map(str::trim).filter(|t| !t.is_empty()) else { continue };
        for (j, m) in TABLE_MODALITIES.iter().enumerate() {
            let col = |a: usize, b: usize| line.get(22 + 18 * j + a..(22 + 18 * j + b).min(line.len())).unwrap_or("").trim();
            let (succ, time) = (col(0, 8), col(8, 18));
            if !succ.is_empty() {
                cells.insert((task.to_string(), *m), (succ.to_string(), time.to_string()));
            }
        }
    }
    cells
}

// ---------------------------------------------------------------------------
// Sim/real correlation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub task: String,
    pub modality: Modality,
    pub sim_time: f64,
    pub real_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCorrelation {
    pub task: String,
    /// Spearman correlation of the modality times across domains.
    pub rho: f64,
    pub sim_slowest: Modality,
    pub sim_fastest: Modality,
    pub real_slowest: Modality,
    pub real_fastest: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub task: String,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub min_success_pct: f64,
    pub rows: Vec<PairedRow>,
    pub per_task: Vec<TaskCorrelation>,
    pub excluded: Vec<Exclusion>,
    /// Spearman correlation over all paired rows.
    pub overall_rho: f64,
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Zero when either side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn extreme(times: &[(Modality, f64)], slowest: bool) -> Modality {
    let mut best = times[0];
    for &(m, t) in &times[1..] {
        if (slowest && t > best.1) || (!slowest && t < best.1) {
            best = (m, t);
        }
    }
    best.0
}

/// Pair sim and real completion times per (task, modality), excluding any
/// task where some modality's success rate falls below `min_success_pct`
/// in either domain.
pub fn correlation_summary(
    sim: &MetricsReport,
    real: &MetricsReport,
    min_success_pct: f64,
) -> Result<CorrelationSummary, SessionError> {
    let mut rows = Vec::new();
    let mut per_task = Vec::new();
    let mut excluded = Vec::new();
    let mut overlap = false;
    for task in sim.tasks() {
        let pairs: Vec<(Modality, &MetricsRow, &MetricsRow)> = TABLE_MODALITIES
            .iter()
            .filter_map(|&m| Some((m, sim.get(&task, m)?, real.get(&task, m)?)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        overlap = true;
        let mut reasons = Vec::new();
        for (m, s, r) in &pairs {
            for (domain, row) in [("sim", s), ("real", r)] {
                if row.success_pct < min_success_pct || row.mean_time_s.is_none() {
                    reasons.push(format!("{} {domain} success {}% < {}%", m.as_str(), fmt_pct(row.success_pct), fmt_pct(min_success_pct)));
                }
            }
        }
        if !reasons.is_empty() {
            excluded.push(Exclusion { task, reasons });
            continue;
        }
        let st: Vec<(Modality, f64)> = pairs.iter().map(|(m, s, _)| (*m, s.mean_time_s.expect("checked"))).collect();
        let rt: Vec<(Modality, f64)> = pairs.iter().map(|(m, _, r)| (*m, r.mean_time_s.expect("checked"))).collect();
        for (a, b) in st.iter().zip(&rt) {
            rows.push(PairedRow { task: task.clone(), modality: a.0, sim_time: a.1, real_time: b.1 });
        }
        let sv: Vec<f64> = st.iter().map(|x| x.1).collect();
        let rv: Vec<f64> = rt.iter().map(|x| x.1).collect();
        per_task.push(TaskCorrelation {
            task,
            rho: spearman(&sv, &rv),
            sim_slowest: extreme(&st, true),
            sim_fastest: extreme(&st, false),
            real_slowest: extreme(&rt, true),
            real_fastest: extreme(&rt, false),
        });
    }
    if !overlap {
        return Err(SessionError::NoOverlap);
    }
    let overall_rho = if rows.len() >= 2 {
        let a: Vec<f64> = rows.iter().map(|r| r.sim_time).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.real_time).collect();
        spearman(&a, &b)
    } else {
        0.0
    };
    Ok(CorrelationSummary { min_success_pct, rows, per_task, excluded, overall_rho })
}

/// Mean completion time per modality over the included tasks.
pub fn modality_means(summary: &CorrelationSummary) -> Vec<(Modality, f64, f64)> {
    TABLE_MODALITIES
        .iter()
        .filter_map(|&m| {
            let rows: Vec<&PairedRow> = summary.rows.iter().filter(|r| r.modality == m).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            Some((m, rows.iter().map(|r| r.sim_time).sum::<f64>() / n, rows.iter().map(|r| r.real_time).sum::<f64>() / n))
        })
        .collect()
}

pub fn render_correlation_text(summary: &CorrelationSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Sim/real correlation (tasks with any success rate < {}% excluded)", fmt_pct(summary.min_success_pct));
    let _ = writeln!(
        out,
        "{:<18}{:>8}  {:<12}{:<12}{:<12}{:<12}",
        "Task", "rho", "sim slow", "real slow", "sim fast", "real fast"
    );
    for t in &summary.per_task {
        let _ = writeln!(
            out,
            "{:<18}{:>8.3}  {:<12}{:<12}{:<12}{:<12}",
            t.task,
            t.rho,
            t.sim_slowest.as_str(),
            t.real_slowest.as_str(),
            t.sim_fastest.as_str(),
            t.real_fastest.as_str()
        );
    }
    let _ = writeln!(out, "overall rho {:.3} over {} paired rows", summary.overall_rho, summary.rows.len());
    for (m, s, r) in modality_means(summary) {
        let _ = writeln!(out, "mean time {:<12} sim {:>7.2}  real {:>7.2}", modality_label(m), s, r);
    }
    for e in &summary.excluded {
        let _ = writeln!(out, "excluded {}: {}", e.task, e.reasons.join("; "));
    }
    out
}

/// Completion time against task index per domain; circle area follows the
/// success rate.
pub fn render_svg(sim: &MetricsReport, real: Option<&MetricsReport>) -> String {
    const W: f64 = 360.0;
    const H: f64 = 260.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#2ca02c", "#ff7f0e", "#d62728"];
    let panels: Vec<(&str, &MetricsReport)> =
        std::iter::once(("simulation", sim)).chain(real.map(|r| ("real world", r))).collect();
    let tasks = sim.tasks();
    let max_t = panels
        .iter()
        .flat_map(|(_, r)| r.rows.iter().filter_map(|x| x.mean_time_s))
        .fold(1.0f64, f64::max)
        * 1.1;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
        W * panels.len() as f64,
        H + 30.0
    );
    for (pi, (name, report)) in panels.iter().enumerate() {
        let x0 = pi as f64 * W + 40.0;
        let (pw, ph) = (W - 60.0, H - 50.0);
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"14\">{name}</text>", x0);
        let _ = writeln!(
            out,
            "<rect x=\"{x0:.1}\" y=\"20\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"#888\"/>"
        );
        for (mi, m) in TABLE_MODALITIES.iter().enumerate() {
            let mut pts = Vec::new();
            for (ti, task) in tasks.iter().enumerate() {
                let Some(r) = report.get(task, *m) else { continue };
                let Some(t) = r.mean_time_s else { continue };
                let x = x0 + pw * (ti as f64 + 0.5) / tasks.len().max(1) as f64;
                let y = 20.0 + ph * (1.0 - t / max_t);
                let rad = 2.0 + 6.0 * (r.success_pct / 100.0).sqrt();
                pts.push(format!("{x:.1},{y:.1}"));
                let _ = writeln!(
                    out,
                    "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"{rad:.1}\" fill=\"{}\" fill-opacity=\"0.6\"/>",
                    COLORS[mi]
                );
            }
            if pts.len() > 1 {
                let _ = writeln!(
                    out,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\"/>",
                    pts.join(" "),
                    COLORS[mi]
                );
            }
        }
        for (ti, _) in tasks.iter().enumerate() {
            let x = x0 + pw * (ti as f64 + 0.5) / tasks.len().max(1) as f64;
            let _ = writeln!(out, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", 32.0 + ph, ti + 1);
        }
    }
    for (mi, m) in TABLE_MODALITIES.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{}\">{}</text>",
            40.0 + 90.0 * mi as f64,
            H + 20.0,
            COLORS[mi],
            modality_label(*m)
        );
    }
    out.push_str("</svg>\n");
    out
}
