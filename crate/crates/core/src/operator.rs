//! Scripted operators: response latency, correction strategy and the
//! corrective demonstration itself.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Mode, RobotId};
use crate::error::{Error, Result};
use crate::policies::{expert_action_for, expert_distance};
use crate::session::{Command, Session, REWIND_CAPACITY};

/// Safety cap on a single corrective demonstration.
pub const MAX_CORRECTION_ACTIONS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewindDepth {
    FullBuffer,
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DirectIntervention,
    Rewind(RewindDepth),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::DirectIntervention => f.write_str("direct"),
            Strategy::Rewind(RewindDepth::FullBuffer) => f.write_str("rewind:k=full"),
            Strategy::Rewind(RewindDepth::Fixed(k)) => write!(f, "rewind:k={k}"),
        }
    }
}

/// Which strategy a scripted operator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    Fixed(Strategy),
    /// Direct intervention while measured policy success is below one half,
    /// full-buffer rewind afterwards.
    StageDependent,
}

impl StrategyChoice {
    pub fn resolve(self, measured_success: f64) -> Strategy {
        match self {
            StrategyChoice::Fixed(s) => s,
            StrategyChoice::StageDependent if measured_success < 0.5 => {
                Strategy::DirectIntervention
            }
            StrategyChoice::StageDependent => Strategy::Rewind(RewindDepth::FullBuffer),
        }
    }
}

/// Operator selection string: `scripted:direct`, `scripted:rewind:k=full`,
/// `scripted:rewind:k=12`, `scripted:auto` or `human`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSpec {
    Scripted(StrategyChoice),
    Human,
}

impl FromStr for OperatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown operator `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let choice = match parts.as_slice() {
            ["human"] => return Ok(OperatorSpec::Human),
            ["scripted", "direct"] => StrategyChoice::Fixed(Strategy::DirectIntervention),
            ["scripted", "auto"] => StrategyChoice::StageDependent,
            ["scripted", "rewind"] | ["scripted", "rewind", "k=full"] => {
                StrategyChoice::Fixed(Strategy::Rewind(RewindDepth::FullBuffer))
            }
            ["scripted", "rewind", k] => {
                let k: u32 = k
                    .strip_prefix("k=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(bad)?;
                if !(1..=REWIND_CAPACITY as u32).contains(&k) {
                    return Err(Error::Parse(format!(
                        "rewind depth must lie in 1..={REWIND_CAPACITY}"
                    )));
                }
                StrategyChoice::Fixed(Strategy::Rewind(RewindDepth::Fixed(k)))
            }
            _ => return Err(bad()),
        };
        Ok(OperatorSpec::Scripted(choice))
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorSpec::Human => f.write_str("human"),
            OperatorSpec::Scripted(StrategyChoice::StageDependent) => f.write_str("scripted:auto"),
            OperatorSpec::Scripted(StrategyChoice::Fixed(s)) => write!(f, "scripted:{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub latency_min: u32,
    pub latency_max: u32,
    pub strategy: Strategy,
}

impl OperatorConfig {
    pub fn new(latency_min: u32, latency_max: u32, strategy: Strategy) -> Result<Self> {
        if latency_min > latency_max {
            return Err(Error::InvalidArgument(format!(
                "latency range [{latency_min}, {latency_max}] is empty"
            )));
        }
        if let Strategy::Rewind(RewindDepth::Fixed(k)) = strategy {
            if !(1..=REWIND_CAPACITY as u32).contains(&k) {
                return Err(Error::InvalidArgument(format!("rewind depth {k}")));
            }
        }
        Ok(OperatorConfig {
            latency_min,
            latency_max,
            strategy,
        })
    }
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            latency_min: 5,
            latency_max: 20,
            strategy: Strategy::DirectIntervention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub robot_id: RobotId,
    pub request_tick: u64,
    pub step_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    /// Ticks between pickup and the first command.
    pub latency: u32,
    pub commands: Vec<Command>,
}

pub fn sample_latency(config: &OperatorConfig, rng: &mut impl Rng) -> u32 {
    rng.gen_range(config.latency_min..=config.latency_max)
}

/// Commands that take control (optionally rewinding), demonstrate the
/// expert until the current step completes, and hand back to inference.
///
/// Planned on a copy of the session, so the session itself is untouched.
pub fn plan_correction(session: &Session, strategy: Strategy) -> Result<Vec<Command>> {
    let mut sim = session.clone();
    let mut commands = Vec::new();
    fn issue(sim: &mut Session, cmd: Command, commands: &mut Vec<Command>) -> Result<()> {
        sim.apply(cmd)?;
        commands.push(cmd);
        Ok(())
    }
    let depth = match strategy {
        Strategy::Rewind(RewindDepth::FullBuffer) => sim.buffer().len() as u32,
        Strategy::Rewind(RewindDepth::Fixed(k)) => k.min(sim.buffer().len() as u32),
        Strategy::DirectIntervention => 0,
    };
    match sim.mode() {
        Mode::Inference | Mode::AwaitingIntervention if depth == 0 => {
            issue(&mut sim, Command::Takeover, &mut commands)?
        }
        Mode::Inference | Mode::AwaitingIntervention | Mode::Intervention => {
            if depth > 0 {
                issue(&mut sim, Command::BeginRewind, &mut commands)?;
                issue(&mut sim, Command::RewindTo { k: depth }, &mut commands)?;
            }
        }
        Mode::Rewind => {
            let k = depth.max(1);
            issue(&mut sim, Command::RewindTo { k }, &mut commands)?;
        }
    }
    let target = sim.step_index();
    let mut n = 0;
    while !sim.is_complete() && sim.step_index() == target {
        if n == MAX_CORRECTION_ACTIONS {
            return Err(Error::InvalidArgument(
                "expert failed to complete the step".into(),
            ));
        }
        let action = expert_action_for(sim.world(), &sim.predicates()[target as usize]);
        issue(&mut sim, Command::HumanAction { action }, &mut commands)?;
        n += 1;
    }
    issue(&mut sim, Command::StartInference, &mut commands)?;
    Ok(commands)
}

/// Latency draw plus the correction for a robot awaiting intervention (or
/// still in inference when a human-gated monitor preempts).
pub fn respond(
    request: &InterventionRequest,
    session: &Session,
    config: &OperatorConfig,
    rng: &mut impl Rng,
) -> Result<Response> {
    if session.robot_id() != request.robot_id
        || !matches!(session.mode(), Mode::AwaitingIntervention | Mode::Inference)
    {
        return Err(Error::NotAwaiting(request.robot_id));
    }
    Ok(Response {
        latency: sample_latency(config, rng),
        commands: plan_correction(session, config.strategy)?,
    })
}

/// Scripted stand-in for an operator who watches continuously and steps in
/// when the policy stops making progress: fires when, over the last
/// `lookahead` policy actions, the expert plan length to the current subgoal
/// has not decreased.
#[derive(Debug, Clone)]
pub struct HumanGatedMonitor {
    lookahead: Option<u32>,
    history: VecDeque<u32>,
    key: Option<(String, u32)>,
}

/// Plan lengths are not computed past this many expert actions.
const DISTANCE_CAP: u32 = 200;

impl HumanGatedMonitor {
    /// `None` never fires.
    pub fn new(lookahead: Option<u32>) -> Self {
        HumanGatedMonitor {
            lookahead,
            history: VecDeque::new(),
            key: None,
        }
    }

    pub fn clear(&mut self) {
        self.history.clear();
        self.key = None;
    }

    /// Call after every tick; only Inference ticks are tracked.
    pub fn observe(&mut self, session: &Session, tick: u64) -> Option<InterventionRequest> {
        let lookahead = self.lookahead? as usize;
        if session.mode() != Mode::Inference || session.is_complete() {
            self.clear();
            return None;
        }
        let key = (session.episode_id().to_string(), session.step_index());
        if self.key.as_ref() != Some(&key) {
            self.clear();
            self.key = Some(key);
        }
        let predicate = &session.predicates()[session.step_index() as usize];
        if predicate.holds(session.world()) {
            self.history.clear();
            return None;
        }
        self.history
            .push_back(expert_distance(session.world(), predicate, DISTANCE_CAP));
        if self.history.len() > lookahead + 1 {
            self.history.pop_front();
        }
        if self.history.len() == lookahead + 1 && self.history.back() >= self.history.front() {
            self.clear();
            return Some(InterventionRequest {
                robot_id: session.robot_id(),
                request_tick: tick,
                step_index: session.step_index(),
            });
        }
        None
    }
}
