//! Acceptance criteria. Each check prints one PASS/FAIL line; the process
//! exits non-zero when any check fails.

mod calibration;
mod filter;
mod golden;
mod hands;
mod ik;
mod kinematics;
mod metrics;
mod tables;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// Outcome detail: `Ok` passes, `Err` fails.
pub type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "kinematics oracle suite", budget: Some(Duration::from_secs(10)), run: kinematics::run },
    Criterion { name: "ik suite", budget: Some(Duration::from_secs(30)), run: ik::run },
    Criterion { name: "calibration suite", budget: None, run: calibration::run },
    Criterion { name: "hand-retarget suite", budget: None, run: hands::run },
    Criterion { name: "filter suite", budget: None, run: filter::run },
    Criterion { name: "filter step example: monotone approach after step 2", budget: None, run: filter::monotone_example },
    Criterion { name: "task golden logs", budget: Some(Duration::from_secs(60)), run: golden::run },
    Criterion { name: "metrics reproduction", budget: None, run: metrics::run },
    Criterion { name: "replay determinism", budget: None, run: golden::replay_determinism },
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; runtime {:.1}s exceeds {}s", elapsed.as_secs_f64(), b.as_secs())),
            (o, _) => o,
        };
        match outcome {
            Ok(d) => println!("PASS  {} ({:.2}s): {d}", c.name, elapsed.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL  {} ({:.2}s): {d}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
