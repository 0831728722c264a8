//! One operator, N robots: scheduling on a shared logical clock, paused-frame
//! accounting and the efficiency metrics.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{config_digest, EpisodeEnd, Header, LogRecord, StepBoundary};
use crate::domain::{derive_seed, Frame, Mode, RobotId, Score, TaskSpec};
use crate::error::{Error, Result};
use crate::operator::{plan_correction, sample_latency, HumanGatedMonitor, InterventionRequest, OperatorConfig};
use crate::policies::PolicyModel;
use crate::sentinel::SentinelConfig;
use crate::session::{Command, Session, SessionConfig, SessionEvent};

/// Default per-episode frame cap before a forced reset.
pub const EPISODE_TICK_CAP: u64 = 600;

/// N × (collected − paused) / collected.
pub fn collection_efficiency(n_robots: u32, collected: u64, paused: u64) -> Result<f64> {
    if collected == 0 {
        return Err(Error::InvalidArgument("no collected frames".into()));
    }
    if paused > collected {
        return Err(Error::InvalidArgument(format!(
            "paused frames {paused} exceed collected {collected}"
        )));
    }
    Ok(n_robots as f64 * (collected - paused) as f64 / collected as f64)
}

/// Share of frames spent under operator control (Intervention or Rewind).
pub fn intervention_rate(frames: &[Frame]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    let n = frames
        .iter()
        .filter(|f| matches!(f.mode, Mode::Intervention | Mode::Rewind))
        .count();
    Ok(n as f64 / frames.len() as f64)
}

/// Log record for a session event; requests are not logged.
pub fn event_record(robot_id: RobotId, event: SessionEvent) -> Option<LogRecord> {
    match event {
        SessionEvent::InterventionRequested { .. } => None,
        SessionEvent::StepCompleted {
            episode_id,
            step_index,
            end_tick,
        } => Some(LogRecord::StepBoundary(StepBoundary {
            robot_id,
            episode_id,
            step_index,
            end_tick,
        })),
        SessionEvent::EpisodeEnded { episode_id, score } => Some(LogRecord::EpisodeEnd(EpisodeEnd {
            robot_id,
            episode_id,
            score,
        })),
    }
}

#[derive(Debug, Clone)]
pub struct FleetConfig {
    pub n_robots: u32,
    pub task: TaskSpec,
    pub policy: Arc<PolicyModel>,
    pub sentinel: SentinelConfig,
    /// `None` leaves requests to an external (human) operator.
    pub operator: Option<OperatorConfig>,
    /// Hard stop for the shared clock.
    pub max_ticks: u64,
    /// Frames after which an unattended episode is reset.
    pub episode_tick_cap: u64,
    /// Stop starting new episodes once this many have begun.
    pub episode_budget: Option<usize>,
    /// Human-gated monitoring with this lookahead, on top of the sentinel.
    pub human_gated: Option<u32>,
    /// Episode ids are `{prefix}-r{robot}-{n}`.
    pub episode_prefix: String,
    pub seed: u64,
}

impl FleetConfig {
    pub fn new(n_robots: u32, task: TaskSpec, policy: Arc<PolicyModel>, seed: u64) -> Self {
        FleetConfig {
            n_robots,
            task,
            policy,
            sentinel: SentinelConfig::default(),
            operator: Some(OperatorConfig::default()),
            max_ticks: 10_000,
            episode_tick_cap: EPISODE_TICK_CAP,
            episode_budget: None,
            human_gated: None,
            episode_prefix: "f".into(),
            seed,
        }
    }

    fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            n_robots: u32,
            task: &'a TaskSpec,
            policy: String,
            sentinel: String,
            t_max: u32,
            operator: Option<OperatorConfig>,
            max_ticks: u64,
            episode_tick_cap: u64,
            episode_budget: Option<usize>,
            human_gated: Option<u32>,
            seed: u64,
        }
        config_digest(&Canonical {
            n_robots: self.n_robots,
            task: &self.task,
            policy: self.policy.describe(),
            sentinel: self.sentinel.spec.to_string(),
            t_max: self.sentinel.t_max,
            operator: self.operator,
            max_ticks: self.max_ticks,
            episode_tick_cap: self.episode_tick_cap,
            episode_budget: self.episode_budget,
            human_gated: self.human_gated,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedRequest {
    pub request: InterventionRequest,
    pub pickup_tick: u64,
    pub first_command_tick: Option<u64>,
    pub handback_tick: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FleetCounters {
    pub collected_frames: u64,
    pub paused_frames: u64,
    pub inference_frames: u64,
    pub intervention_frames: u64,
    pub rewind_frames: u64,
}

impl FleetCounters {
    fn count(&mut self, f: &Frame) {
        self.collected_frames += 1;
        match f.mode {
            Mode::Inference => self.inference_frames += 1,
            Mode::AwaitingIntervention => self.paused_frames += 1,
            Mode::Intervention => self.intervention_frames += 1,
            Mode::Rewind => self.rewind_frames += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleetLog {
    pub n_robots: u32,
    pub ticks: u64,
    pub records: Vec<LogRecord>,
    pub requests: Vec<ServedRequest>,
    pub counters: FleetCounters,
    pub episode_scores: Vec<Score>,
    /// Largest number of robots under operator control at any tick.
    pub max_concurrent_control: usize,
}

impl FleetLog {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Frame(f) => Some(f),
            _ => None,
        })
    }

    pub fn metrics(&self) -> Result<FleetMetrics> {
        let c = &self.counters;
        let controlled = c.intervention_frames + c.rewind_frames;
        Ok(FleetMetrics {
            n_robots: self.n_robots,
            collected_frames: c.collected_frames,
            paused_frames: c.paused_frames,
            intervention_frames: c.intervention_frames,
            rewind_frames: c.rewind_frames,
            intervention_rate: if c.collected_frames == 0 {
                return Err(Error::EmptyInput("frames"));
            } else {
                controlled as f64 / c.collected_frames as f64
            },
            collection_efficiency: collection_efficiency(
                self.n_robots,
                c.collected_frames,
                c.paused_frames,
            )?,
        })
    }
}

/// Summary report written next to fleet logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMetrics {
    pub n_robots: u32,
    pub collected_frames: u64,
    pub paused_frames: u64,
    pub intervention_frames: u64,
    pub rewind_frames: u64,
    pub intervention_rate: f64,
    pub collection_efficiency: f64,
}

/// Computes the metrics report from any frame stream.
pub fn metrics_from_frames<'a>(
    n_robots: u32,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<FleetMetrics> {
    let mut c = FleetCounters::default();
    for f in frames {
        c.count(f);
    }
    FleetLog {
        n_robots,
        ticks: 0,
        records: vec![],
        requests: vec![],
        counters: c,
        episode_scores: vec![],
        max_concurrent_control: 0,
    }
    .metrics()
}

#[derive(Debug, Clone)]
struct Active {
    robot: usize,
    episode_id: String,
    due: u64,
    plan: Option<VecDeque<Command>>,
    served: usize,
}

/// What happened during one fleet tick.
#[derive(Debug, Clone, Default)]
pub struct TickOutcome {
    pub frames: Vec<Frame>,
    pub requests: Vec<InterventionRequest>,
}

pub struct Fleet {
    config: FleetConfig,
    sessions: Vec<Session>,
    monitors: Vec<HumanGatedMonitor>,
    idle: Vec<bool>,
    queue: VecDeque<(InterventionRequest, String)>,
    active: Option<Active>,
    rng: ChaCha8Rng,
    episodes_started: usize,
    log: FleetLog,
}

impl Fleet {
    pub fn new(config: FleetConfig) -> Result<Self> {
        if config.n_robots == 0 {
            return Err(Error::InvalidArgument("fleet needs at least one robot".into()));
        }
        let mut sessions = Vec::new();
        for r in 0..config.n_robots {
            let mut sc = SessionConfig::new(
                r,
                config.task.clone(),
                config.policy.clone(),
                derive_seed(config.seed, r as u64),
            );
            sc.sentinel = config.sentinel.clone();
            sc.episode_prefix = format!("{}-r{r}", config.episode_prefix);
            sessions.push(Session::new(sc)?);
        }
        let header = Header::new(
            &config.task.name,
            (0..config.n_robots).collect(),
            config.digest(),
        );
        let n = config.n_robots as usize;
        let budget = config.episode_budget.unwrap_or(usize::MAX);
        Ok(Fleet {
            monitors: vec![HumanGatedMonitor::new(config.human_gated); n],
            idle: (0..n).map(|i| i >= budget).collect(),
            episodes_started: n.min(budget),
            queue: VecDeque::new(),
            active: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX)),
            log: FleetLog {
                n_robots: config.n_robots,
                ticks: 0,
                records: vec![LogRecord::Header(header)],
                requests: vec![],
                counters: FleetCounters::default(),
                episode_scores: vec![],
                max_concurrent_control: 0,
            },
            sessions,
            config,
        })
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn tick(&self) -> u64 {
        self.log.ticks
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn session(&self, robot: RobotId) -> Option<&Session> {
        self.sessions.get(robot as usize)
    }

    pub fn log(&self) -> &FleetLog {
        &self.log
    }

    /// True once every robot has used up the episode budget.
    pub fn finished(&self) -> bool {
        self.idle.iter().all(|i| *i)
    }

    /// Robots whose request is queued or being served.
    fn attended(&self, robot: usize) -> bool {
        self.active.as_ref().is_some_and(|a| a.robot == robot)
            || self.queue.iter().any(|(r, _)| r.robot_id as usize == robot)
    }

    fn record_frames(&mut self, frames: &[Frame], out: &mut TickOutcome) {
        for f in frames {
            self.log.counters.count(f);
            self.log.records.push(LogRecord::Frame(f.clone()));
        }
        out.frames.extend_from_slice(frames);
    }

    fn drain(&mut self, robot: usize, out: &mut TickOutcome) {
        let tick = self.log.ticks;
        for e in self.sessions[robot].drain_events() {
            match e {
                SessionEvent::InterventionRequested { step_index, .. } => {
                    let req = InterventionRequest {
                        robot_id: robot as RobotId,
                        request_tick: tick,
                        step_index,
                    };
                    if !self.attended(robot) {
                        let episode = self.sessions[robot].episode_id().to_string();
                        self.queue.push_back((req, episode));
                        out.requests.push(req);
                    }
                }
                other => {
                    if let SessionEvent::EpisodeEnded { score, .. } = &other {
                        self.log.episode_scores.push(*score);
                    }
                    self.log.records.extend(event_record(robot as RobotId, other));
                }
            }
        }
    }

    /// Applies an externally issued command (the human operator path).
    pub fn apply(&mut self, robot: RobotId, cmd: Command) -> Result<Vec<Frame>> {
        let r = robot as usize;
        let session = self
            .sessions
            .get_mut(r)
            .ok_or_else(|| Error::InvalidArgument(format!("no robot {robot}")))?;
        let frames = session.apply(cmd)?;
        if matches!(session.mode(), Mode::Intervention | Mode::Rewind) {
            self.queue.retain(|(q, _)| q.robot_id != robot);
        }
        let mut out = TickOutcome::default();
        self.record_frames(&frames, &mut out);
        self.drain(r, &mut out);
        Ok(frames)
    }

    fn operator_phase(&mut self, out: &mut TickOutcome) -> Result<()> {
        let Some(op) = self.config.operator else {
            return Ok(());
        };
        let now = self.log.ticks;
        if self.active.is_none() {
            if let Some((req, episode_id)) = self.queue.pop_front() {
                let latency = sample_latency(&op, &mut self.rng) as u64;
                self.log.requests.push(ServedRequest {
                    request: req,
                    pickup_tick: now,
                    first_command_tick: None,
                    handback_tick: None,
                });
                self.active = Some(Active {
                    robot: req.robot_id as usize,
                    episode_id,
                    due: now + latency,
                    plan: None,
                    served: self.log.requests.len() - 1,
                });
            }
        }
        let Some(active) = self.active.as_mut() else {
            return Ok(());
        };
        if active.due > now {
            return Ok(());
        }
        let robot = active.robot;
        let session = &self.sessions[robot];
        if active.plan.is_none() {
            if session.episode_id() != active.episode_id {
                // the episode this request belonged to is gone
                self.active = None;
                return Ok(());
            }
            active.plan = Some(plan_correction(session, op.strategy)?.into());
            self.log.requests[active.served].first_command_tick = Some(now);
        }
        let plan = active.plan.as_mut().expect("planned");
        if let Some(cmd) = plan.pop_front() {
            let frames = self.sessions[robot].apply(cmd)?;
            self.record_frames(&frames, out);
            self.drain(robot, out);
        }
        let active = self.active.as_mut().expect("active");
        active.due = now + 1;
        if active.plan.as_ref().is_some_and(|p| p.is_empty()) {
            self.log.requests[active.served].handback_tick = Some(now);
            self.monitors[robot].clear();
            self.active = None;
        }
        Ok(())
    }

    fn start_episode(&mut self, robot: usize) {
        let budget = self.config.episode_budget.unwrap_or(usize::MAX);
        if self.episodes_started >= budget {
            // closes the finished episode without opening a new one
            self.sessions[robot].reset();
            let mut sink = TickOutcome::default();
            self.drain(robot, &mut sink);
            self.idle[robot] = true;
            return;
        }
        self.episodes_started += 1;
        self.sessions[robot].reset();
        self.monitors[robot].clear();
    }

    /// Advances the shared clock by one tick.
    pub fn step(&mut self) -> Result<TickOutcome> {
        let mut out = TickOutcome::default();
        for r in 0..self.sessions.len() {
            if self.idle[r] {
                continue;
            }
            let unattended = !self.attended(r);
            let s = &self.sessions[r];
            if unattended
                && (s.is_complete() || s.episode_frames() >= self.config.episode_tick_cap)
                && !matches!(s.mode(), Mode::Intervention | Mode::Rewind)
            {
                self.start_episode(r);
                self.drain(r, &mut out);
                if self.idle[r] {
                    continue;
                }
            }
            if let Some(f) = self.sessions[r].tick() {
                self.record_frames(std::slice::from_ref(&f), &mut out);
            }
            self.drain(r, &mut out);
            if !self.attended(r) {
                let now = self.log.ticks;
                if let Some(req) = self.monitors[r].observe(&self.sessions[r], now) {
                    let episode = self.sessions[r].episode_id().to_string();
                    self.queue.push_back((req, episode));
                    out.requests.push(req);
                }
            }
        }
        self.operator_phase(&mut out)?;
        let controlled = self
            .sessions
            .iter()
            .filter(|s| matches!(s.mode(), Mode::Intervention | Mode::Rewind))
            .count();
        self.log.max_concurrent_control = self.log.max_concurrent_control.max(controlled);
        self.log.ticks += 1;
        Ok(out)
    }

    /// Runs until `max_ticks` or until the episode budget is exhausted.
    pub fn run(mut self) -> Result<FleetLog> {
        while self.log.ticks < self.config.max_ticks && !self.finished() {
            self.step()?;
        }
        Ok(self.into_log())
    }

    /// Closes open episodes (reporting partial scores) and returns the log.
    pub fn into_log(mut self) -> FleetLog {
        for r in 0..self.sessions.len() {
            if !self.idle[r] && self.sessions[r].episode_frames() > 0 {
                self.sessions[r].reset();
                let mut sink = TickOutcome::default();
                self.drain(r, &mut sink);
            }
        }
        self.log
    }
}

pub fn run_fleet(config: FleetConfig) -> Result<FleetLog> {
    Fleet::new(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{validate, ValidateOptions};
    use crate::domain::TaskTemplate;
    use crate::gridworld::task_spec;
    use crate::operator::{RewindDepth, Strategy};
    use proptest::prelude::*;

    #[test]
    fn efficiency_matches_published_rows() {
        for ((c, p), want) in [((52197, 3746), 1.86), ((61639, 2931), 1.90), ((48523, 1831), 1.92)] {
            let e = collection_efficiency(2, c, p).unwrap();
            assert!((e - want).abs() <= 0.005, "{e} vs {want}");
        }
        assert_eq!(collection_efficiency(1, 1000, 0).unwrap(), 1.0);
        assert!(collection_efficiency(2, 0, 0).is_err());
        assert!(collection_efficiency(2, 5, 6).is_err());
    }

    fn frames_with(modes: &[(Mode, usize)]) -> Vec<Frame> {
        let mut out = vec![];
        for (m, n) in modes {
            for _ in 0..*n {
                out.push(Frame {
                    tick: out.len() as u64,
                    episode_id: "e".into(),
                    robot_id: 0,
                    step_index: 0,
                    observation: vec![],
                    action: crate::domain::Action::NoOp,
                    actor: m.expected_actor(),
                    mode: *m,
                    sentinel_verdict: None,
                });
            }
        }
        out
    }

    #[test]
    fn intervention_rate_examples() {
        let r = intervention_rate(&frames_with(&[(Mode::Intervention, 27), (Mode::Inference, 73)])).unwrap();
        assert!((r - 0.27).abs() < 1e-12);
        assert_eq!(intervention_rate(&frames_with(&[(Mode::Inference, 9)])).unwrap(), 0.0);
        let r = intervention_rate(&frames_with(&[
            (Mode::Intervention, 10),
            (Mode::Rewind, 5),
            (Mode::Inference, 35),
        ]))
        .unwrap();
        assert!((r - 0.30).abs() < 1e-12);
        assert!(intervention_rate(&[]).is_err());
    }

    #[test]
    fn expert_fleet_never_pauses() {
        let mut cfg = FleetConfig::new(1, task_spec(TaskTemplate::Stacking), Arc::new(PolicyModel::ScriptedExpert), 0);
        cfg.max_ticks = 2000;
        let log = run_fleet(cfg).unwrap();
        assert_eq!(log.counters.paused_frames, 0);
        assert!(log.episode_scores.iter().filter(|s| s.is_success()).count() >= 5);
        assert!(validate(&log.records, ValidateOptions::default()).is_clean());
    }

    #[test]
    fn simultaneous_requests_are_served_in_turn() {
        let mut cfg = FleetConfig::new(2, task_spec(TaskTemplate::Stacking), Arc::new(PolicyModel::Uniform), 1);
        cfg.sentinel = SentinelConfig::oracle(10);
        cfg.operator = Some(OperatorConfig::new(5, 5, Strategy::DirectIntervention).unwrap());
        cfg.max_ticks = 200;
        let log = run_fleet(cfg).unwrap();
        let (a, b) = (&log.requests[0], &log.requests[1]);
        assert_eq!(a.request.request_tick, b.request.request_tick);
        assert_eq!(a.first_command_tick, Some(a.request.request_tick + 5));
        assert!(b.pickup_tick > a.handback_tick.unwrap());
        assert!(log.counters.paused_frames > 0);
        assert_eq!(log.max_concurrent_control, 1);
    }

    #[test]
    fn fleet_runs_are_deterministic() {
        let mk = || {
            let mut cfg = FleetConfig::new(3, task_spec(TaskTemplate::Appliance), Arc::new(PolicyModel::StepFailure { fail_prob: 0.3 }), 7);
            cfg.sentinel = SentinelConfig::oracle(40);
            cfg.max_ticks = 1500;
            serde_json::to_string(&run_fleet(cfg).unwrap()).unwrap()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn budget_stops_new_episodes() {
        let mut cfg = FleetConfig::new(2, task_spec(TaskTemplate::Typing), Arc::new(PolicyModel::ScriptedExpert), 3);
        cfg.episode_budget = Some(5);
        cfg.max_ticks = 100_000;
        let log = run_fleet(cfg).unwrap();
        assert_eq!(log.episode_scores.len(), 5);
        assert!(log.ticks < 100_000);
    }

    #[test]
    fn human_gated_monitor_preempts() {
        let mut cfg = FleetConfig::new(1, task_spec(TaskTemplate::Stacking), Arc::new(PolicyModel::StepFailure { fail_prob: 0.5 }), 4);
        cfg.human_gated = Some(8);
        cfg.max_ticks = 3000;
        let log = run_fleet(cfg).unwrap();
        assert!(!log.requests.is_empty());
        assert!(validate(&log.records, ValidateOptions::default()).is_clean());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_fleets_keep_exclusivity_and_clean_logs(
            n in 1u32..=8,
            seed in 0u64..1000,
            t_max in 5u32..60,
            template in 0usize..4,
            fail in 0.0f64..1.0,
            rewind in any::<bool>(),
            gated in proptest::option::of(3u32..12),
        ) {
            let mut cfg = FleetConfig::new(n, task_spec(TaskTemplate::ALL[template]), Arc::new(PolicyModel::StepFailure { fail_prob: fail }), seed);
            cfg.sentinel = SentinelConfig::oracle(t_max);
            let strategy = if rewind { Strategy::Rewind(RewindDepth::FullBuffer) } else { Strategy::DirectIntervention };
            cfg.operator = Some(OperatorConfig::new(5, 20, strategy).unwrap());
            cfg.human_gated = gated;
            cfg.max_ticks = 800;
            let log = run_fleet(cfg).unwrap();
            prop_assert!(log.max_concurrent_control <= 1);
            let c = &log.counters;
            prop_assert_eq!(c.collected_frames, c.inference_frames + c.paused_frames + c.intervention_frames + c.rewind_frames);
            prop_assert_eq!(c.collected_frames as usize, log.frames().count());
            let report = validate(&log.records, ValidateOptions::default());
            prop_assert!(report.is_clean(), "{:?}", &report.violations[..report.violations.len().min(3)]);
            let ticks: Vec<u64> = log.requests.iter().map(|r| r.request.request_tick).collect();
            let picks: Vec<u64> = log.requests.iter().map(|r| r.pickup_tick).collect();
            prop_assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(picks.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
