use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use teleop_core::calibration::{calibrate_operator, FingerLengths, FitConfig, LandmarkSet, SkeletonModel};
use teleop_core::service::{run_replay, ServiceError, SessionConfig};
use teleop_core::session::{
    aggregate_report, correlation_summary, load_episodes, render_correlation_text, render_svg, render_text,
    SessionError, DEFAULT_MIN_SUCCESS_PCT,
};
use teleop_core::synth::{golden_config, synthesize};
use teleop_core::taskenv::{builtin_scene, STUDY_TASKS};
use teleop_core::wire::{serve, ServeOptions};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Humanoid teleoperation retargeting and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a recorded human stream through the full pipeline.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a live session endpoint.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Directory for finalized episode logs.
        #[arg(long)]
        logs: Option<PathBuf>,
    },
    /// Aggregate episode logs into success-rate / completion-time tables.
    Report {
        #[arg(long)]
        logs: PathBuf,
        /// Logs from the physical-robot domain, for the sim-to-real section.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Output directory (defaults to the sim log directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MIN_SUCCESS_PCT)]
        min_success: f64,
    },
    /// Fit the skeleton to target landmarks and write an operator profile.
    Calibrate {
        #[arg(long)]
        operator: String,
        #[arg(long)]
        robot: String,
        /// Landmark positions (pelvis frame) to fit against.
        #[arg(long)]
        landmarks: PathBuf,
        /// Measured distal phalanx lengths, `{"left":[..5],"right":[..5]}`.
        #[arg(long)]
        phalanges: Option<PathBuf>,
        #[arg(long, default_value = "profiles")]
        out: PathBuf,
    },
    /// List the built-in study tasks.
    ListTasks,
    /// Regenerate the scripted golden streams and their configs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "h1_2_like")]
        robot: String,
        /// Only this task (default: all study tasks).
        #[arg(long)]
        task: Option<String>,
    },
}

/// An error paired with the process exit code it maps to.
struct Failure(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(1, e.into())
    }
}

fn service(e: ServiceError) -> Failure {
    Failure(e.exit_code() as u8, e.into())
}

fn session_io(e: SessionError) -> Failure {
    Failure(2, e.into())
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(path: &Path) -> Result<SessionConfig, Failure> {
    SessionConfig::load(path).map_err(service)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Replay { config, stream, out } => {
            let cfg = load_config(&config)?;
            let outcome = run_replay(&cfg, &base_of(&config), &stream, Some(&out)).map_err(service)?;
            let result = outcome.episode.result.as_ref().expect("replay finalizes");
            println!("{}", serde_json::to_string(result)?);
            if let Some(p) = &outcome.log_path {
                eprintln!("episode log: {}", p.display());
            }
            Ok(outcome.exit_code as u8)
        }
        Cmd::Serve { config, bind, logs } => {
            let cfg = load_config(&config)?;
            let handle =
                serve(cfg, &bind, ServeOptions { log_dir: logs, base: base_of(&config) }).map_err(service)?;
            eprintln!("listening on {}", handle.addr);
            let episodes = handle.wait().map_err(service)?;
            eprintln!("{} episode(s) finalized", episodes.len());
            Ok(0)
        }
        Cmd::Report { logs, real, out, min_success } => {
            let sim = aggregate_report(&load_episodes(&logs).map_err(session_io)?).map_err(session_io)?;
            let out = out.unwrap_or_else(|| logs.clone());
            std::fs::create_dir_all(&out)?;
            let mut text = render_text(&sim, "Simulation");
            std::fs::write(out.join("report.json"), sim.to_json())?;
            let real_report = match &real {
                Some(dir) => {
                    let r = aggregate_report(&load_episodes(dir).map_err(session_io)?).map_err(session_io)?;
                    text.push('\n');
                    text.push_str(&render_text(&r, "Real"));
                    std::fs::write(out.join("report_real.json"), r.to_json())?;
                    let summary = correlation_summary(&sim, &r, min_success).map_err(session_io)?;
                    text.push('\n');
                    text.push_str(&render_correlation_text(&summary));
                    std::fs::write(out.join("correlation.json"), serde_json::to_string_pretty(&summary)?)?;
                    Some(r)
                }
                None => None,
            };
            std::fs::write(out.join("report.txt"), &text)?;
            std::fs::write(out.join("fig_sim2real.svg"), render_svg(&sim, real_report.as_ref()))?;
            print!("{text}");
            Ok(0)
        }
        Cmd::Calibrate { operator, robot, landmarks, phalanges, out } => {
            let cfg = SessionConfig::new(&robot, STUDY_TASKS[0], teleop_core::input::Modality::Vr, &operator);
            let model = cfg.load_robot(Path::new(".")).map_err(service)?;
            let target_text = std::fs::read_to_string(&landmarks)
                .with_context(|| format!("cannot read {}", landmarks.display()))
                .map_err(|e| Failure(3, e))?;
            let target = serde_json::from_str::<LandmarkSet>(&target_text)
                .with_context(|| format!("invalid landmark file {}", landmarks.display()))
                .map_err(|e| Failure(3, e))?;
            let fingers = match &phalanges {
                Some(p) => {
                    let t = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                    Some(serde_json::from_str::<FingerLengths>(&t).map_err(|e| Failure(3, e.into()))?)
                }
                None => None,
            };
            let (profile, fit) = calibrate_operator(
                &operator,
                &model,
                &SkeletonModel::standard(),
                Some(&target),
                fingers.as_ref(),
                &FitConfig::default(),
            )?;
            let path = profile.save(&out)?;
            println!("residual {:.3e} m^2 after {} iterations; profile {}", fit.residual, fit.iterations, path.display());
            Ok(0)
        }
        Cmd::ListTasks => {
            for name in STUDY_TASKS {
                let scene = builtin_scene(name)?;
                println!("{:<18} timeout {:>5.1}s  {}", scene.name, scene.timeout, scene.criteria);
            }
            Ok(0)
        }
        Cmd::Synth { out, robot, task } => {
            std::fs::create_dir_all(&out)?;
            let tasks: Vec<String> = match task {
                Some(t) => vec![t],
                None => STUDY_TASKS.iter().map(|s| s.to_string()).collect(),
            };
            for t in tasks {
                let cfg = golden_config(&robot, &t).ok_or_else(|| anyhow::anyhow!("no script for task `{t}`"))?;
                let run = synthesize(&cfg, Path::new("."))?;
                std::fs::write(out.join(format!("{t}.jsonl")), &run.text)?;
                std::fs::write(out.join(format!("{t}.config.json")), cfg.to_json())?;
                let r = run.episode.result.as_ref().expect("synth finalizes");
                println!("{t:<18} {} frames, completion {:?}s", run.frames.len(), r.completion_time);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code.max(1))
        }
    }
}
