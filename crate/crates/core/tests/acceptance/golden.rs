use std::path::{Path, PathBuf};

use teleop_core::service::{replay_text, run_replay, SessionConfig};
use teleop_core::taskenv::STUDY_TASKS;

use crate::Check;

pub fn streams_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/streams")
}

fn load(task: &str) -> (SessionConfig, PathBuf, String) {
    let dir = streams_dir();
    let cfg = SessionConfig::load(&dir.join(format!("{task}.config.json"))).unwrap();
    let stream = dir.join(format!("{task}.jsonl"));
    let text = std::fs::read_to_string(&stream).unwrap();
    (cfg, stream, text)
}

pub fn run() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for task in STUDY_TASKS {
        let (cfg, _, text) = load(task);
        let a = replay_text(&cfg, &streams_dir(), &text, None).unwrap();
        let b = replay_text(&cfg, &streams_dir(), &text, None).unwrap();
        let ra = a.episode.result.clone().unwrap();
        let rb = b.episode.result.clone().unwrap();
        let identical = a.episode.to_jsonl() == b.episode.to_jsonl();
        let pass = ra.success && a.exit_code == 0 && identical && ra.completion_time == rb.completion_time;
        ok &= pass;
        lines.push(match ra.completion_time {
            Some(ct) if pass => format!("{task} {ct:.2}s"),
            ct => format!("{task} FAILED (success {}, time {ct:?}, reason {:?}, identical {identical})", ra.success, ra.reason),
        });
    }
    let detail = format!("{} golden streams: {}", STUDY_TASKS.len(), lines.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Replays every golden stream twice through the file-based entry point and
/// compares the written episode logs byte for byte.
pub fn replay_determinism() -> Check {
    let runs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = 0;
    let mut differing = Vec::new();
    for task in STUDY_TASKS {
        let (cfg, stream, _) = load(task);
        let logs: Vec<Vec<u8>> = runs
            .iter()
            .map(|d| {
                let out = run_replay(&cfg, &streams_dir(), &stream, Some(d.path())).unwrap();
                std::fs::read(out.log_path.unwrap()).unwrap()
            })
            .collect();
        bytes += logs[0].len();
        if logs[0] != logs[1] {
            differing.push(task);
        }
    }
    if differing.is_empty() {
        Ok(format!("{} streams, {bytes} log bytes per run, byte-identical", STUDY_TASKS.len()))
    } else {
        Err(format!("logs differ for {differing:?}"))
    }
}
