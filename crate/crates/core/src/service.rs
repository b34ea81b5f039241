//! Session configuration, the per-tick retargeting pipeline and headless
//! replay of recorded streams.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{CalibrationProfile, ScaleParams, SkeletonModel};
use crate::filtering::{smooth_command, FilterBank, FilterConfig};
use crate::hand_retarget::{retarget_euler, retarget_glove, retarget_vector, GloveSource, HandModel, VectorRetargetConfig};
use crate::ik::{clik_step, solve_ik, IkConfig};
use crate::input::{
    mocap_link_scales, normalize, parse_stream, serialize_frame, HandPayload, HumanFrame, Modality, NormalizeContext,
    ParseMode, Pose,
};
use crate::kinematics::{builtin_robot, FrameCalibration, FrameId, JointCommand, JointState, RobotModel, Side};
use crate::session::{digest, EnvResult, Episode, EpisodeMeta, EpisodeResult};
use crate::taskenv::{builtin_scene, EnvEvent, SceneSpec, TaskEnv, WorldState};

pub const TICK_HZ_RANGE: (f64, f64) = (10.0, 240.0);
/// Seconds the last frame of a replayed stream is held before the episode
/// stops with `stream_end`.
pub const STREAM_END_HOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed stream: {0}")]
    Stream(String),
    #[error("modality mismatch: config expects {expected}, frame at t={t} is {found}")]
    ModalityMismatch { expected: Modality, found: Modality, t: f64 },
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Process exit code for a failed replay.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Stream(_) => 2,
            ServiceError::Config(_) | ServiceError::ModalityMismatch { .. } => 3,
            ServiceError::Pipeline(_) | ServiceError::Io(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    #[default]
    Replay,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPoses {
    pub device_to_pelvis: Option<Pose>,
    pub head_to_pelvis: Option<Pose>,
}

fn default_tick_hz() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    /// Built-in model name or path to a model file.
    pub robot: String,
    /// Built-in task name or path to a scene file.
    pub task: String,
    pub modality: Modality,
    pub operator: String,
    #[serde(default)]
    pub seed: u64,
    /// Defaults per modality when absent: wrist position only for vision
    /// and VR, full pose for MoCap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ik: Option<IkConfig>,
    /// Defaults per modality when absent: smoothing for vision and VR,
    /// bypass for MoCap and exoskeleton.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterConfig>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_tick_hz")]
    pub tick_hz: f64,
    /// Operator calibration profile (finger scales).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationPoses>,
}

impl SessionConfig {
    pub fn new(robot: &str, task: &str, modality: Modality, operator: &str) -> Self {
        SessionConfig {
            robot: robot.into(),
            task: task.into(),
            modality,
            operator: operator.into(),
            seed: 0,
            ik: None,
            filter: None,
            mode: Mode::Replay,
            tick_hz: default_tick_hz(),
            profile: None,
            calibration: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ServiceError> {
        let cfg: SessionConfig = serde_json::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Full SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("serializable").as_bytes()))
    }

    fn validate_fields(&self) -> Result<(), ServiceError> {
        let (lo, hi) = TICK_HZ_RANGE;
        if !(self.tick_hz >= lo && self.tick_hz <= hi) {
            return Err(ServiceError::Config(format!("tick_hz {} outside [{lo}, {hi}]", self.tick_hz)));
        }
        if let Some(ik) = &self.ik {
            ik.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        }
        if let Some(f) = &self.filter {
            f.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        }
        if self.operator.is_empty() {
            return Err(ServiceError::Config("operator must be non-empty".into()));
        }
        Ok(())
    }

    pub fn ik_config(&self) -> IkConfig {
        let mut ik = self.ik.clone().unwrap_or_else(|| match self.modality {
            Modality::Vision | Modality::Vr => IkConfig::position_only(),
            Modality::Mocap | Modality::Exo => IkConfig::default(),
        });
        ik.dt = 1.0 / self.tick_hz;
        ik
    }

    pub fn filter_config(&self) -> FilterConfig {
        self.filter.clone().unwrap_or_else(|| match self.modality {
            Modality::Vision => FilterConfig::vision(),
            Modality::Vr => FilterConfig::default(),
            Modality::Mocap | Modality::Exo => FilterConfig::bypass(),
        })
    }

    pub fn episode_id(&self) -> String {
        format!("{}-{}-{}-{}", self.task_name(), self.modality, self.operator, self.seed)
    }

    fn task_name(&self) -> String {
        Path::new(&self.task).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    fn resolve(base: &Path, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    }

    pub fn load_robot(&self, base: &Path) -> Result<RobotModel, ServiceError> {
        if let Ok(r) = builtin_robot(&self.robot) {
            return Ok(r);
        }
        let path = Self::resolve(base, &self.robot);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| ServiceError::Config(format!("robot model `{}` not found", self.robot)))?;
        RobotModel::from_json(&text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load_scene(&self, base: &Path) -> Result<SceneSpec, ServiceError> {
        if let Ok(s) = builtin_scene(&self.task) {
            return Ok(s);
        }
        let path = Self::resolve(base, &self.task);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| ServiceError::Config(format!("task `{}` not found", self.task)))?;
        SceneSpec::from_json(&text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn frame_calibration(&self) -> FrameCalibration {
        let mut c = FrameCalibration::identity();
        if let Some(p) = &self.calibration {
            if let Some(d) = &p.device_to_pelvis {
                c.device_to_pelvis = Some(d.to_transform(FrameId::pelvis()));
            }
            if let Some(h) = &p.head_to_pelvis {
                c.head_to_pelvis = Some(h.to_transform(FrameId::pelvis()));
            }
        }
        c
    }
}

/// Output of one control tick.
#[derive(Clone, Debug)]
pub struct TickOutput {
    pub command: JointCommand,
    pub events: Vec<EnvEvent>,
    pub success: bool,
}

/// One session's mutable state: parse → normalize → IK/retarget → filter →
/// step_env → record.
pub struct Pipeline {
    pub cfg: SessionConfig,
    pub env: TaskEnv,
    pub world: WorldState,
    pub episode: Episode,
    skeleton: SkeletonModel,
    calib: FrameCalibration,
    profile_scales: ScaleParams,
    mocap_scales: Option<ScaleParams>,
    ik: IkConfig,
    bank: FilterBank,
    hands: [HandModel; 2],
    hand_cfg: VectorRetargetConfig,
    dt: f64,
    /// Unfiltered retargeted command.
    q: DVector<f64>,
    latest: Option<HumanFrame>,
    frame_digest: String,
    last_cmd: DVector<f64>,
}

impl Pipeline {
    /// `base` resolves relative model, task and profile paths.
    pub fn new(cfg: SessionConfig, base: &Path) -> Result<Self, ServiceError> {
        cfg.validate_fields()?;
        let robot = cfg.load_robot(base)?;
        let scene = cfg.load_scene(base)?;
        let env = TaskEnv::new(scene, robot).map_err(|e| ServiceError::Config(e.to_string()))?;
        let skeleton = SkeletonModel::standard();
        let profile_scales = match &cfg.profile {
            Some(p) => {
                let path = SessionConfig::resolve(base, &p.to_string_lossy());
                let prof = CalibrationProfile::load(&path).map_err(|e| ServiceError::Config(e.to_string()))?;
                if prof.robot != env.robot.name() {
                    return Err(ServiceError::Config(format!(
                        "profile is for robot {}, session uses {}",
                        prof.robot,
                        env.robot.name()
                    )));
                }
                prof.scales()
            }
            None => ScaleParams::identity(&skeleton),
        };
        let hands = [Side::Left, Side::Right]
            .map(|s| HandModel::from_robot(&env.robot, s).map_err(|e| ServiceError::Config(e.to_string())));
        let [hl, hr] = hands;
        let hands = [hl?, hr?];
        let dt = 1.0 / cfg.tick_hz;
        let bank = FilterBank::new(env.robot.dof_count(), cfg.filter_config(), dt)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let world = env.reset(cfg.seed);
        let q = env.robot.home().q;
        let episode = Episode::new(Self::meta(&cfg, &env));
        Ok(Pipeline {
            ik: cfg.ik_config(),
            calib: cfg.frame_calibration(),
            cfg,
            env,
            world,
            episode,
            skeleton,
            profile_scales,
            mocap_scales: None,
            bank,
            hands,
            hand_cfg: VectorRetargetConfig::default(),
            dt,
            last_cmd: q.clone(),
            q,
            latest: None,
            frame_digest: "none".into(),
        })
    }

    fn meta(cfg: &SessionConfig, env: &TaskEnv) -> EpisodeMeta {
        EpisodeMeta {
            id: cfg.episode_id(),
            task: env.spec.name.clone(),
            modality: cfg.modality,
            operator: cfg.operator.clone(),
            seed: cfg.seed,
            robot: env.robot.name().to_string(),
            config_hash: cfg.hash(),
            timeout: env.spec.timeout,
            home: env.robot.home().q.iter().copied().collect(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn robot(&self) -> &RobotModel {
        &self.env.robot
    }

    /// Most recent filtered command sent to the world (home before the
    /// first tick).
    pub fn last_command(&self) -> &DVector<f64> {
        &self.last_cmd
    }

    pub fn ticks(&self) -> usize {
        self.episode.ticks.len()
    }

    /// Start a fresh episode, optionally with a new scene seed.
    pub fn reset(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.cfg.seed = s;
        }
        self.world = self.env.reset(self.cfg.seed);
        self.episode = Episode::new(Self::meta(&self.cfg, &self.env));
        self.q = self.env.robot.home().q;
        self.last_cmd = self.q.clone();
        self.bank.reset();
        self.mocap_scales = None;
        self.latest = None;
        self.frame_digest = "none".into();
    }

    /// Latch a newer frame for the next tick (sample-and-hold).
    pub fn ingest(&mut self, frame: HumanFrame) -> Result<(), ServiceError> {
        if frame.modality != self.cfg.modality {
            return Err(ServiceError::ModalityMismatch { expected: self.cfg.modality, found: frame.modality, t: frame.t });
        }
        frame.validate().map_err(ServiceError::Stream)?;
        if frame.modality == Modality::Mocap && self.mocap_scales.is_none() {
            let body = frame.body.as_ref().expect("validated mocap frame has a body");
            self.mocap_scales = Some(
                mocap_link_scales(body, &self.skeleton, &self.env.robot)
                    .map_err(|e| ServiceError::Pipeline(e.to_string()))?,
            );
        }
        self.frame_digest = digest(&serialize_frame(&frame));
        self.latest = Some(frame);
        Ok(())
    }

    fn retarget(&mut self, events: &mut Vec<EnvEvent>) -> Result<(), ServiceError> {
        let Some(frame) = &self.latest else { return Ok(()) };
        let scales = self.mocap_scales.as_ref().unwrap_or(&self.profile_scales);
        let ctx = NormalizeContext { calib: &self.calib, skeleton: &self.skeleton, scales };
        let req = normalize(frame, &ctx).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        let robot = &self.env.robot;
        let t = self.world.t;
        let mut warn = |detail: String| events.push(EnvEvent { t, hand: None, kind: "warning".into(), detail });

        for (side, target, arm_q) in [(Side::Left, &req.wrist_l, &req.arm_q_l), (Side::Right, &req.wrist_r, &req.arm_q_r)] {
            let range = robot.group_range(side.arm_group()).expect("validated model has arm groups");
            if let Some(aq) = arm_q {
                for (i, v) in aq.iter().enumerate().take(range.len()) {
                    self.q[range.start + i] = *v;
                }
                continue;
            }
            let Some(target) = target else { continue };
            let link = format!("{}wrist", side.prefix());
            let state = JointState::new(self.q.clone(), t);
            let solved = match self.cfg.mode {
                Mode::Replay => solve_ik(robot, &state, &link, target, &self.ik).map(|r| r.q),
                Mode::Live => clik_step(robot, &state, &link, target, &self.ik),
            };
            match solved {
                Ok(s) => self.q.rows_mut(range.start, range.len()).copy_from(&s.q.rows(range.start, range.len())),
                Err(e) => warn(format!("ik {}: {e}", side.name())),
            }
        }

        for (h, payload) in [&req.hand_l, &req.hand_r].into_iter().enumerate() {
            let Some(payload) = payload else { continue };
            let hand = &self.hands[h];
            let off = hand.dof_offset;
            let n = hand.dof_count();
            let prev = self.q.rows(off, n).into_owned();
            let finger_scales =
                if h == 0 { &self.profile_scales.finger_scales.left } else { &self.profile_scales.finger_scales.right };
            let out = match payload {
                HandPayload::Keypoints(kp) => retarget_vector(kp, hand, finger_scales, &prev, &self.hand_cfg).map(|r| r.q),
                HandPayload::Glove(g) => retarget_glove(GloveSource::Glove(g), hand),
                HandPayload::ExoGlove(g) => retarget_glove(GloveSource::Exo(g), hand),
                HandPayload::Euler(_) => {
                    let rots = payload.euler_rotations().expect("euler payload");
                    retarget_euler(&rots, hand).map(|r| {
                        if r.gimbal_degenerate {
                            warn(format!("hand {}: gimbal-degenerate rotation", ["left", "right"][h]));
                        }
                        r.q
                    })
                }
            };
            match out {
                Ok(q) => self.q.rows_mut(off, n).copy_from(&q),
                Err(e) => warn(format!("hand {}: {e}", ["left", "right"][h])),
            }
        }
        Ok(())
    }

    /// One control tick: retarget the held frame, smooth, step the world and
    /// record.
    pub fn tick(&mut self) -> Result<TickOutput, ServiceError> {
        if !self.episode.is_open() {
            return Err(ServiceError::Pipeline("episode is closed".into()));
        }
        let mut events = Vec::new();
        self.retarget(&mut events)?;
        let raw = JointCommand::new(self.q.clone(), self.world.t + self.dt);
        let mut cmd = smooth_command(&mut self.bank, &raw).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        self.env.robot.clamp_to_limits(&mut cmd.q);
        let (mut world, env_events) = self.env.step(&self.world, &cmd, self.dt);
        events.extend(env_events);
        let status = self.env.check_success(&mut world);
        self.world = world;
        self.last_cmd = cmd.q.clone();
        self.episode
            .record_step(&self.frame_digest, &cmd, &self.world, &events)
            .map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        Ok(TickOutput { command: cmd, events, success: status.success })
    }

    /// Whether the episode has exceeded its time budget.
    pub fn timed_out(&self) -> bool {
        let start = self.episode.first_motion_t().unwrap_or(0.0);
        self.world.t - start > self.env.spec.timeout
    }

    pub fn finalize(&mut self, stop_reason: Option<&str>) -> Result<EpisodeResult, ServiceError> {
        let env = EnvResult {
            satisfied_at: self.world.satisfied_at,
            end_t: self.world.t,
            stop_reason: stop_reason.map(String::from),
        };
        self.episode.finalize(&env).cloned().map_err(|e| ServiceError::Pipeline(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub episode: Episode,
    pub log_path: Option<PathBuf>,
    pub exit_code: i32,
}

/// Replay a recorded stream through the full pipeline.  Each frame is
/// applied at the tick nearest its timestamp (relative to the first frame);
/// the episode ends at success, timeout or end of stream.
pub fn run_replay(
    cfg: &SessionConfig,
    base: &Path,
    stream_path: &Path,
    out_dir: Option<&Path>,
) -> Result<ReplayOutcome, ServiceError> {
    let text = std::fs::read_to_string(stream_path)
        .map_err(|e| ServiceError::Stream(format!("cannot read {}: {e}", stream_path.display())))?;
    replay_text(cfg, base, &text, out_dir)
}

pub fn replay_text(
    cfg: &SessionConfig,
    base: &Path,
    text: &str,
    out_dir: Option<&Path>,
) -> Result<ReplayOutcome, ServiceError> {
    let frames = parse_stream(text, ParseMode::Strict).map_err(|e| ServiceError::Stream(e.to_string()))?.frames;
    if let Some(f) = frames.iter().find(|f| f.modality != cfg.modality) {
        return Err(ServiceError::ModalityMismatch { expected: cfg.modality, found: f.modality, t: f.t });
    }
    let mut pipe = Pipeline::new(cfg.clone(), base)?;
    let t0 = frames.first().map(|f| f.t).unwrap_or(0.0);
    let end = frames.last().map(|f| f.t - t0).unwrap_or(0.0);
    let mut next = 0;
    let stop = loop {
        let horizon = (pipe.ticks() as f64 + 0.5) * pipe.dt();
        let mut consumed = 0u64;
        while next < frames.len() && frames[next].t - t0 < horizon {
            pipe.ingest(frames[next].clone())?;
            next += 1;
            consumed += 1;
        }
        pipe.episode.coalesced += consumed.saturating_sub(1);
        let out = pipe.tick()?;
        if out.success {
            break None;
        }
        if pipe.timed_out() {
            break Some("timeout");
        }
        if next == frames.len() && pipe.ticks() as f64 * pipe.dt() >= end + STREAM_END_HOLD {
            break Some("stream_end");
        }
    };
    let result = pipe.finalize(stop)?;
    let log_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}.jsonl", pipe.episode.meta.id));
            std::fs::write(&path, pipe.episode.to_jsonl())?;
            Some(path)
        }
        None => None,
    };
    Ok(ReplayOutcome { exit_code: if result.success { 0 } else { 1 }, episode: pipe.episode, log_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SessionConfig {
        SessionConfig::new("h1_2_like", "push_cube", Modality::Vr, "op")
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(SessionConfig::from_json(&c.to_json()).is_ok());
        c.tick_hz = 5.0;
        assert_eq!(SessionConfig::from_json(&c.to_json()).unwrap_err().exit_code(), 3);
        let mut c = cfg();
        c.robot = "no_such_robot".into();
        assert!(matches!(Pipeline::new(c, Path::new(".")), Err(ServiceError::Config(_))));
        let mut c = cfg();
        c.task = "no_such_task".into();
        assert!(matches!(Pipeline::new(c, Path::new(".")), Err(ServiceError::Config(_))));
        let parsed = SessionConfig::from_json(
            r#"{"robot":"h1_2_like","task":"push_cube","modality":"vr","operator":"a"}"#,
        )
        .unwrap();
        assert_eq!(parsed.tick_hz, 60.0);
        assert_eq!(parsed.mode, Mode::Replay);
        assert!(SessionConfig::from_json(r#"{"robot":"x","task":"y","modality":"vr","operator":"a","z":1}"#).is_err());
    }

    #[test]
    fn empty_hold_keeps_home_and_does_not_move() {
        let mut p = Pipeline::new(cfg(), Path::new(".")).unwrap();
        for _ in 0..5 {
            p.tick().unwrap();
        }
        assert_eq!(p.episode.ticks.len(), 5);
        assert!(p.episode.first_motion_t().is_none());
        let r = p.finalize(None).unwrap();
        assert_eq!(r.reason.as_deref(), Some("no_motion"));
        assert!(p.tick().is_err());
    }

    #[test]
    fn modality_mismatch_is_a_config_error() {
        let c = cfg();
        let mut f = HumanFrame::empty(0.0, Modality::Exo);
        f.arm_q_l = Some([0.0; 7]);
        f.arm_q_r = Some([0.0; 7]);
        let line = serialize_frame(&f);
        let e = replay_text(&c, Path::new("."), &line, None).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("vr") && e.to_string().contains("exo"));
        let e = replay_text(&c, Path::new("."), "{not json", None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
