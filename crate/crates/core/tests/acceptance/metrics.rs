use std::path::Path;

use teleop_core::input::Modality;
use teleop_core::session::{
    aggregate_report, correlation_summary, load_episodes, modality_means, parse_text_table, render_text,
    synthetic_outcomes, CorrelationSummary, MetricsReport, DEFAULT_MIN_SUCCESS_PCT, TABLE_MODALITIES,
};
use teleop_core::taskenv::STUDY_TASKS;

use crate::tables::{Cell, REAL, SIM};
use crate::Check;

const TRIALS: usize = 10;

/// Writes one episode log per trial reproducing `table`, then aggregates
/// the logs read back from disk.
fn fixture_report(table: &[[Cell; 4]; 10], dir: &Path) -> MetricsReport {
    for (t, row) in table.iter().enumerate() {
        for (j, (pct, time)) in row.iter().enumerate() {
            let successes = (pct / 100.0 * TRIALS as f64).round() as usize;
            let eps = synthetic_outcomes(STUDY_TASKS[t], TABLE_MODALITIES[j], "fixture", TRIALS, successes, time.unwrap_or(0.0));
            for ep in eps {
                std::fs::write(dir.join(format!("{}.jsonl", ep.meta.id)), ep.to_jsonl()).unwrap();
            }
        }
    }
    aggregate_report(&load_episodes(dir).unwrap()).unwrap()
}

fn expected_cell((pct, time): Cell) -> (String, String) {
    (format!("{}", pct as i64), time.map(|t| format!("{t:.2}")).unwrap_or_else(|| "--".into()))
}

fn table_mismatches(report: &MetricsReport, table: &[[Cell; 4]; 10]) -> Vec<String> {
    let cells = parse_text_table(&render_text(report, "table"));
    let mut bad = Vec::new();
    for (t, row) in table.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let want = expected_cell(*cell);
            let got = cells.get(&(STUDY_TASKS[t].to_string(), TABLE_MODALITIES[j]));
            if got != Some(&want) {
                bad.push(format!("{} {}: {got:?} != {want:?}", STUDY_TASKS[t], TABLE_MODALITIES[j]));
            }
        }
    }
    bad
}

fn rendered(report: &MetricsReport, task: usize, m: Modality) -> String {
    let cells = parse_text_table(&render_text(report, "table"));
    let (s, t) = &cells[&(STUDY_TASKS[task].to_string(), m)];
    format!("{s} / {t}")
}

fn rank_disagreements(summary: &CorrelationSummary) -> Vec<String> {
    summary
        .per_task
        .iter()
        .filter_map(|t| {
            let mut why = Vec::new();
            for (domain, slow, fast) in [("sim", t.sim_slowest, t.sim_fastest), ("real", t.real_slowest, t.real_fastest)] {
                if slow != Modality::Vision {
                    why.push(format!("{domain} slowest {slow}"));
                }
                if fast != Modality::Mocap {
                    why.push(format!("{domain} fastest {fast}"));
                }
            }
            (!why.is_empty()).then(|| format!("{} ({})", t.task, why.join(", ")))
        })
        .collect()
}

pub fn run() -> Check {
    let (sim_dir, real_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sim = fixture_report(&SIM, sim_dir.path());
    let real = fixture_report(&REAL, real_dir.path());
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    for (name, report, table) in [("sim", &sim, &SIM), ("real", &real, &REAL)] {
        let bad = table_mismatches(report, table);
        if bad.is_empty() {
            notes.push(format!("{name} table: all 40 cells match"));
        } else {
            failures.push(format!("{name} table mismatches: {}", bad.join("; ")));
        }
    }
    let examples = [(0, Modality::Vision, "80 / 13.64"), (6, Modality::Vision, "0 / --")];
    for (task, m, want) in examples {
        let got = rendered(&sim, task, m);
        if got != want {
            failures.push(format!("task {} {m}: \"{got}\" != \"{want}\"", task + 1));
        }
    }

    let summary = correlation_summary(&sim, &real, DEFAULT_MIN_SUCCESS_PCT).unwrap();
    let excluded: Vec<&str> = summary.excluded.iter().map(|e| e.task.as_str()).collect();
    for task in ["ball_bimanual", "pen_brushpot"] {
        let hit = summary.excluded.iter().find(|e| e.task == task);
        match hit {
            Some(e) if e.reasons.iter().any(|r| r.starts_with("vision") || r.starts_with("vr")) => {}
            _ => failures.push(format!("{task} not excluded for vision/vr")),
        }
    }
    notes.push(format!("excluded {excluded:?}"));

    let disagree = rank_disagreements(&summary);
    if disagree.is_empty() {
        notes.push(format!("vision slowest / mocap fastest on all {} included tasks", summary.per_task.len()));
    } else {
        failures.push(format!(
            "vision-slowest/mocap-fastest fails on {} of {} included tasks: {}",
            disagree.len(),
            summary.per_task.len(),
            disagree.join("; ")
        ));
    }
    let means = modality_means(&summary);
    let slowest = |f: fn(&(Modality, f64, f64)) -> f64| {
        means.iter().max_by(|a, b| f(a).total_cmp(&f(b))).map(|m| m.0)
    };
    let fastest = |f: fn(&(Modality, f64, f64)) -> f64| {
        means.iter().min_by(|a, b| f(a).total_cmp(&f(b))).map(|m| m.0)
    };
    notes.push(format!(
        "modality means: sim slowest {:?} fastest {:?}, real slowest {:?} fastest {:?}; overall rho {:.3}",
        slowest(|m| m.1),
        fastest(|m| m.1),
        slowest(|m| m.2),
        fastest(|m| m.2),
        summary.overall_rho
    ));

    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} | {}", failures.join(" | "), notes.join("; ")))
    }
}
