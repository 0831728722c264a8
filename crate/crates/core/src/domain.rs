//! Shared vocabulary: modes, actions, frames, task definitions and scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical ticks per simulated second.
pub const TICK_RATE: u32 = 10;

pub type RobotId = u32;
pub type EpisodeId = String;
pub type FeatureVector = Vec<f32>;

/// Episode ids carrying this prefix are seed demonstrations.
pub const WARMUP_TAG: &str = "warmup";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Inference,
    Intervention,
    Rewind,
    AwaitingIntervention,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Inference,
        Mode::Intervention,
        Mode::Rewind,
        Mode::AwaitingIntervention,
    ];

    /// The actor every frame logged in this mode must carry.
    pub fn expected_actor(self) -> Actor {
        match self {
            Mode::Inference | Mode::AwaitingIntervention => Actor::Policy,
            Mode::Intervention | Mode::Rewind => Actor::Human,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Inference => "inference",
            Mode::Intervention => "intervention",
            Mode::Rewind => "rewind",
            Mode::AwaitingIntervention => "awaiting_intervention",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Grasp = 4,
    Release = 5,
    Press = 6,
    NoOp = 7,
}

impl Action {
    pub const COUNT: usize = 8;
    pub const ALL: [Action; 8] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Grasp,
        Action::Release,
        Action::Press,
        Action::NoOp,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Action> {
        Action::ALL.get(ordinal as usize).copied()
    }

    /// Row/column displacement for movement actions.
    pub fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            _ => None,
        }
    }

    pub fn is_move(self) -> bool {
        self.delta().is_some()
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "up" => Action::Up,
            "down" => Action::Down,
            "left" => Action::Left,
            "right" => Action::Right,
            "grasp" => Action::Grasp,
            "release" => Action::Release,
            "press" => Action::Press,
            "noop" | "no_op" => Action::NoOp,
            other => return Err(Error::Parse(format!("unknown action `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Policy,
    Human,
}

/// One tick of logged experience.
///
/// Field order is the on-disk order of a frame record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    pub episode_id: EpisodeId,
    pub robot_id: RobotId,
    pub step_index: u32,
    pub observation: FeatureVector,
    pub action: Action,
    pub actor: Actor,
    pub mode: Mode,
    pub sentinel_verdict: Option<bool>,
}

impl Frame {
    pub fn is_warmup(&self) -> bool {
        self.episode_id.starts_with(WARMUP_TAG)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    Stacking,
    Insertion,
    Appliance,
    Typing,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 4] = [
        TaskTemplate::Stacking,
        TaskTemplate::Insertion,
        TaskTemplate::Appliance,
        TaskTemplate::Typing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTemplate::Stacking => "stacking",
            TaskTemplate::Insertion => "insertion",
            TaskTemplate::Appliance => "appliance",
            TaskTemplate::Typing => "typing",
        }
    }
}

impl fmt::Display for TaskTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTemplate::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub step_index: u32,
    pub instruction: String,
    pub predicate_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub template: TaskTemplate,
    pub name: String,
    pub steps: Vec<StepSpec>,
}

impl TaskSpec {
    pub fn step_count(&self) -> u32 {
        self.steps.len() as u32
    }
}

/// Derives an independent seed from a base seed and a stream index
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fraction of an episode's steps that were completed, held as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub completed: u32,
    pub total: u32,
}

impl Score {
    pub fn value(self) -> f64 {
        self.completed as f64 / self.total as f64
    }

    pub fn is_success(self) -> bool {
        self.completed == self.total
    }
}

pub fn score_episode(completed_steps: u32, total_steps: u32) -> Result<Score> {
    if total_steps == 0 || completed_steps > total_steps {
        return Err(Error::InvalidScore {
            completed: completed_steps,
            total: total_steps,
        });
    }
    Ok(Score {
        completed: completed_steps,
        total: total_steps,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn mean_score(scores: &[Score]) -> Result<(f64, f64)> {
    let values: Vec<f64> = scores.iter().map(|s| s.value()).collect();
    mean_std(&values)
}
