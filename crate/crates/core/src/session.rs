//! Per-robot mode state machine with a rewind buffer; the frame producer.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    derive_seed, score_episode, Action, Actor, EpisodeId, Frame, Mode, RobotId, Score, TaskSpec,
};
use crate::error::{Error, Result};
use crate::gridworld::{self, FeatureLayout, Predicate, WorldState};
use crate::policies::{PolicyModel, PolicyRunner};
use crate::sentinel::{should_request_intervention, Sentinel, SentinelConfig};

/// Snapshots kept for rewinding: three seconds of ticks.
pub const REWIND_CAPACITY: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    StartInference,
    BeginRewind,
    RewindTo { k: u32 },
    Takeover,
    HumanAction { action: Action },
    Reset,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::StartInference => "start_inference",
            Command::BeginRewind => "begin_rewind",
            Command::RewindTo { .. } => "rewind_to",
            Command::Takeover => "takeover",
            Command::HumanAction { .. } => "human_action",
            Command::Reset => "reset",
        }
    }
}

/// Mode reached by applying `cmd` in `mode`, or `None` if the table forbids it.
pub fn transition(mode: Mode, cmd: &Command) -> Option<Mode> {
    use Mode::*;
    match (mode, cmd) {
        (_, Command::Reset) => Some(Inference),
        (Inference | AwaitingIntervention, Command::Takeover) => Some(Intervention),
        (Inference | AwaitingIntervention | Intervention, Command::BeginRewind) => Some(Rewind),
        (Intervention, Command::StartInference) => Some(Inference),
        (Intervention, Command::HumanAction { .. }) => Some(Intervention),
        (Rewind, Command::RewindTo { .. }) => Some(Intervention),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub world: WorldState,
    pub step_index: u32,
}

/// Bounded history of pre-action snapshots, oldest evicted first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewindBuffer {
    snapshots: VecDeque<Snapshot>,
}

impl RewindBuffer {
    pub fn push(&mut self, snapshot: Snapshot) {
        debug_assert!(self.snapshots.back().is_none_or(|s| s.tick < snapshot.tick));
        if self.snapshots.len() == REWIND_CAPACITY {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Snapshot> {
        self.snapshots.iter()
    }

    /// Removes the `k` most recent snapshots, newest first.
    pub fn pop_recent(&mut self, k: u32) -> Result<Vec<Snapshot>> {
        if k < 1 || k as usize > self.snapshots.len() {
            return Err(Error::RewindOutOfRange {
                k,
                len: self.snapshots.len(),
            });
        }
        Ok((0..k)
            .map(|_| self.snapshots.pop_back().expect("checked length"))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    InterventionRequested {
        step_index: u32,
        tick: u64,
    },
    StepCompleted {
        episode_id: EpisodeId,
        step_index: u32,
        end_tick: u64,
    },
    EpisodeEnded {
        episode_id: EpisodeId,
        score: Score,
    },
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub robot_id: RobotId,
    pub task: TaskSpec,
    pub policy: Arc<PolicyModel>,
    pub sentinel: SentinelConfig,
    pub seed: u64,
    /// Episode ids are `{prefix}-{n}`.
    pub episode_prefix: String,
}

impl SessionConfig {
    pub fn new(robot_id: RobotId, task: TaskSpec, policy: Arc<PolicyModel>, seed: u64) -> Self {
        SessionConfig {
            robot_id,
            episode_prefix: format!("r{robot_id}"),
            task,
            policy,
            sentinel: SentinelConfig::default(),
            seed,
        }
    }
}

/// Read-only summary for monitors and the wire protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub robot_id: RobotId,
    pub episode_id: EpisodeId,
    pub tick: u64,
    pub mode: Mode,
    pub step_index: u32,
    pub buffer_len: usize,
    pub sentinel_z: Option<bool>,
    pub score_so_far: f64,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct Session {
    robot_id: RobotId,
    task: TaskSpec,
    predicates: Arc<Vec<Predicate>>,
    layout: Arc<FeatureLayout>,
    world: WorldState,
    mode: Mode,
    step_index: u32,
    ticks_in_step: u64,
    buffer: RewindBuffer,
    clock: u64,
    episode_id: EpisodeId,
    episode_index: u64,
    episode_seed: u64,
    episode_frames: u64,
    episode_ended: bool,
    frames_emitted: u64,
    seed: u64,
    prefix: String,
    runner: PolicyRunner,
    sentinel: Sentinel,
    last_verdict: Option<bool>,
    perturb_rng: ChaCha8Rng,
    events: Vec<SessionEvent>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        let predicates = Arc::new(gridworld::compile_task(&config.task)?);
        let layout = Arc::new(gridworld::feature_layout(config.task.template));
        let episode_seed = derive_seed(config.seed, 0);
        let mut s = Session {
            robot_id: config.robot_id,
            world: gridworld::init_world(&config.task, episode_seed),
            task: config.task,
            predicates,
            layout,
            mode: Mode::Inference,
            step_index: 0,
            ticks_in_step: 0,
            buffer: RewindBuffer::default(),
            clock: 0,
            episode_id: String::new(),
            episode_index: 0,
            episode_seed,
            episode_frames: 0,
            episode_ended: false,
            frames_emitted: 0,
            seed: config.seed,
            prefix: config.episode_prefix,
            runner: PolicyRunner::new(config.policy, episode_seed),
            sentinel: Sentinel::new(config.sentinel, derive_seed(config.seed, u64::MAX)),
            last_verdict: None,
            perturb_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX - 1)),
            events: Vec::new(),
        };
        s.episode_id = format!("{}-{}", s.prefix, 0);
        Ok(s)
    }

    pub fn robot_id(&self) -> RobotId {
        self.robot_id
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    pub fn ticks_in_step(&self) -> u64 {
        self.ticks_in_step
    }

    pub fn buffer(&self) -> &RewindBuffer {
        &self.buffer
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    /// Frames emitted during the current episode.
    pub fn episode_frames(&self) -> u64 {
        self.episode_frames
    }

    pub fn frames_emitted(&self) -> u64 {
        self.frames_emitted
    }

    pub fn is_complete(&self) -> bool {
        self.step_index >= self.task.step_count()
    }

    pub fn score(&self) -> Score {
        score_episode(self.step_index.min(self.task.step_count()), self.task.step_count())
            .expect("tasks have at least one step")
    }

    pub fn policy(&self) -> &Arc<PolicyModel> {
        self.runner.model()
    }

    pub fn sentinel_config(&self) -> &SentinelConfig {
        self.sentinel.config()
    }

    /// Swaps the policy; takes effect from the next episode's random streams.
    pub fn set_policy(&mut self, policy: Arc<PolicyModel>) {
        self.runner = PolicyRunner::new(policy, self.episode_seed);
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            robot_id: self.robot_id,
            episode_id: self.episode_id.clone(),
            tick: self.clock,
            mode: self.mode,
            step_index: self.step_index,
            buffer_len: self.buffer.len(),
            sentinel_z: self.last_verdict,
            score_so_far: self.score().value(),
            complete: self.is_complete(),
        }
    }

    pub fn drain_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.events)
    }

    fn observe(&self, world: &WorldState) -> Vec<f32> {
        gridworld::observe_with(&self.layout, world).features
    }

    fn frame(&mut self, observation: Vec<f32>, action: Action, mode: Mode, z: Option<bool>) -> Frame {
        let f = Frame {
            tick: self.clock,
            episode_id: self.episode_id.clone(),
            robot_id: self.robot_id,
            step_index: self.step_index,
            observation,
            action,
            actor: mode.expected_actor(),
            mode,
            sentinel_verdict: z,
        };
        self.clock += 1;
        self.frames_emitted += 1;
        self.episode_frames += 1;
        f
    }

    fn complete_step(&mut self, end_tick: u64) {
        self.events.push(SessionEvent::StepCompleted {
            episode_id: self.episode_id.clone(),
            step_index: self.step_index,
            end_tick,
        });
        self.step_index += 1;
        self.ticks_in_step = 0;
        if self.is_complete() {
            self.end_episode();
        }
    }

    fn end_episode(&mut self) {
        if !self.episode_ended {
            self.episode_ended = true;
            self.events.push(SessionEvent::EpisodeEnded {
                episode_id: self.episode_id.clone(),
                score: self.score(),
            });
        }
    }

    fn push_snapshot(&mut self) {
        self.buffer.push(Snapshot {
            tick: self.clock,
            world: self.world.clone(),
            step_index: self.step_index,
        });
    }

    /// Advances the logical clock by one tick in the current mode.
    pub fn tick(&mut self) -> Option<Frame> {
        if self.is_complete() {
            return None;
        }
        match self.mode {
            Mode::Inference => {
                self.push_snapshot();
                let obs = gridworld::observe_with(&self.layout, &self.world);
                let action = self
                    .runner
                    .act(&self.world, &self.predicates, self.step_index, &obs);
                self.world = gridworld::step(&self.world, action);
                let z = self.sentinel.verdict(
                    &self.world,
                    &self.task,
                    &self.predicates[self.step_index as usize],
                    self.step_index,
                );
                self.last_verdict = Some(z);
                let frame = self.frame(obs.features, action, Mode::Inference, Some(z));
                if z {
                    self.complete_step(frame.tick);
                } else {
                    self.ticks_in_step += 1;
                    if should_request_intervention(
                        z,
                        self.ticks_in_step,
                        self.sentinel.t_max() as u64,
                    ) {
                        self.mode = Mode::AwaitingIntervention;
                        self.events.push(SessionEvent::InterventionRequested {
                            step_index: self.step_index,
                            tick: frame.tick,
                        });
                    }
                }
                Some(frame)
            }
            Mode::AwaitingIntervention => {
                let obs = self.observe(&self.world);
                Some(self.frame(obs, Action::NoOp, Mode::AwaitingIntervention, None))
            }
            Mode::Intervention | Mode::Rewind => None,
        }
    }

    /// Applies one operator command. Illegal commands leave the session
    /// untouched.
    pub fn apply(&mut self, cmd: Command) -> Result<Vec<Frame>> {
        let next = transition(self.mode, &cmd).ok_or_else(|| Error::IllegalTransition {
            mode: self.mode,
            command: cmd.name().to_string(),
        })?;
        match cmd {
            Command::Reset => {
                self.reset();
                Ok(vec![])
            }
            Command::StartInference => {
                self.mode = next;
                self.ticks_in_step = 0;
                Ok(vec![])
            }
            Command::Takeover | Command::BeginRewind => {
                self.mode = next;
                Ok(vec![])
            }
            Command::RewindTo { k } => {
                let popped = self.buffer.pop_recent(k)?;
                let frames = popped
                    .iter()
                    .map(|snap| {
                        let f = Frame {
                            tick: snap.tick,
                            episode_id: self.episode_id.clone(),
                            robot_id: self.robot_id,
                            step_index: snap.step_index,
                            observation: self.observe(&snap.world),
                            action: Action::NoOp,
                            actor: Actor::Human,
                            mode: Mode::Rewind,
                            sentinel_verdict: None,
                        };
                        self.frames_emitted += 1;
                        self.episode_frames += 1;
                        f
                    })
                    .collect();
                let target = popped.into_iter().last().expect("k >= 1");
                self.world = target.world;
                self.step_index = target.step_index;
                self.ticks_in_step = 0;
                self.mode = next;
                if !self.is_complete() && self.episode_ended {
                    // rewinding out of a finished episode reopens it
                    self.episode_ended = false;
                }
                Ok(frames)
            }
            Command::HumanAction { action } => {
                if self.is_complete() {
                    return Err(Error::EpisodeComplete);
                }
                self.push_snapshot();
                let obs = self.observe(&self.world);
                self.world = gridworld::step(&self.world, action);
                let frame = self.frame(obs, action, Mode::Intervention, None);
                self.mode = next;
                while !self.is_complete()
                    && self.predicates[self.step_index as usize].holds(&self.world)
                {
                    self.complete_step(frame.tick);
                }
                Ok(vec![frame])
            }
        }
    }

    /// Displaces one object; only available while the operator has control.
    pub fn perturb(&mut self, magnitude: u32) -> Result<()> {
        if self.mode != Mode::Intervention {
            return Err(Error::IllegalTransition {
                mode: self.mode,
                command: "perturb".into(),
            });
        }
        self.world = gridworld::perturb(&self.world, magnitude, &mut self.perturb_rng)?;
        Ok(())
    }

    /// Ends the current episode (reporting its partial score if unfinished)
    /// and starts a fresh one in Inference.
    pub fn reset(&mut self) {
        self.reset_with_seed(derive_seed(self.seed, self.episode_index + 1));
    }

    /// Like `reset`, but with an explicit world seed.
    pub fn reset_with_seed(&mut self, world_seed: u64) {
        if self.episode_frames > 0 {
            self.end_episode();
        }
        self.episode_index += 1;
        self.episode_id = format!("{}-{}", self.prefix, self.episode_index);
        self.episode_seed = world_seed;
        self.world = gridworld::init_world(&self.task, world_seed);
        self.mode = Mode::Inference;
        self.step_index = 0;
        self.ticks_in_step = 0;
        self.buffer.clear();
        self.episode_frames = 0;
        self.episode_ended = false;
        self.last_verdict = None;
        self.runner.begin_episode(world_seed);
    }
}
