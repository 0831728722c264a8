//! Scripted experts and the nearest-neighbour behaviour cloner.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Action, TaskSpec};
use crate::error::{Error, Result};
use crate::gridworld::{self, Atom, Heading, ObjectId, Observation, Pos, Predicate, WorldState};

/// Greedy Manhattan step toward `to`, rows before columns. `None` when there.
pub fn move_toward(from: Pos, to: Pos) -> Option<Action> {
    if from.row < to.row {
        Some(Action::Down)
    } else if from.row > to.row {
        Some(Action::Up)
    } else if from.col < to.col {
        Some(Action::Right)
    } else if from.col > to.col {
        Some(Action::Left)
    } else {
        None
    }
}

fn go_then(world: &WorldState, to: Pos, then: Action) -> Action {
    move_toward(world.gripper, to).unwrap_or(then)
}

/// Any in-bounds neighbour, used to carry a blocking object off a cell.
fn step_aside(world: &WorldState) -> Action {
    [Action::Up, Action::Down, Action::Left, Action::Right]
        .into_iter()
        .find(|a| {
            let (dr, dc) = a.delta().expect("move");
            world.in_bounds(Pos::new(world.gripper.row + dr, world.gripper.col + dc))
        })
        .unwrap_or(Action::NoOp)
}

fn open_gate_at(world: &WorldState, cell: Pos) -> Option<Action> {
    if world.cell_open(cell) {
        return None;
    }
    let gate = world
        .targets
        .iter()
        .find(|t| t.pos == cell && t.gate.is_some_and(|g| !world.is_pressed(g)))?
        .gate?;
    let button = world.buttons.get(gate as usize)?;
    Some(go_then(world, button.pos, Action::Press))
}

fn acquire(world: &WorldState, object: ObjectId) -> Action {
    match world.held {
        Some(h) if h == object => Action::NoOp,
        Some(_) => {
            let target = world.objects[object as usize].pos;
            if world.gripper == target || !world.cell_open(world.gripper) {
                step_aside(world)
            } else {
                Action::Release
            }
        }
        None => {
            let at = world.objects[object as usize].pos;
            if world.gripper != at {
                go_then(world, at, Action::Grasp)
            } else if let Some(a) = open_gate_at(world, at) {
                a
            } else {
                Action::Grasp
            }
        }
    }
}

fn atom_action(world: &WorldState, atom: Atom) -> Action {
    match atom {
        Atom::Hold { object, target } => {
            if world.held != Some(object) {
                return acquire(world, object);
            }
            match target.and_then(|t| world.targets.get(t)) {
                Some(t) => go_then(world, t.pos, Action::NoOp),
                None => Action::NoOp,
            }
        }
        Atom::Rest { object, target } => {
            let t = world.targets[target];
            if world.held != Some(object) {
                return acquire(world, object);
            }
            if let Some(a) = open_gate_at(world, t.pos) {
                return a;
            }
            go_then(world, t.pos, Action::Release)
        }
        Atom::Insert {
            object,
            target,
            from,
        } => {
            let t = world.targets[target].pos;
            let (dr, dc) = match from {
                Heading::North => (-1, 0),
                Heading::South => (1, 0),
                Heading::East => (0, 1),
                Heading::West => (0, -1),
            };
            let align = Pos::new(t.row + dr, t.col + dc);
            if world.held != Some(object) {
                return acquire(world, object);
            }
            if world.gripper == t {
                if world.objects[object as usize].approach == Some(from) {
                    Action::Release
                } else {
                    go_then(world, align, Action::NoOp)
                }
            } else if world.gripper == align {
                move_toward(align, t).unwrap_or(Action::NoOp)
            } else {
                go_then(world, align, Action::NoOp)
            }
        }
        Atom::On(b) | Atom::Off(b) => {
            let pos = world.buttons[b as usize].pos;
            go_then(world, pos, Action::Press)
        }
        Atom::Typed(n) => {
            let want: String = gridworld::TYPING_TEXT.chars().take(n).collect();
            let key = if want.starts_with(world.typed.as_str()) && world.typed.len() < want.len() {
                let c = want[world.typed.len()..].chars().next().expect("char");
                gridworld::ButtonKind::Key(c)
            } else {
                gridworld::ButtonKind::Delete
            };
            match world.buttons.iter().find(|b| b.kind == key) {
                Some(b) => go_then(world, b.pos, Action::Press),
                None => Action::NoOp,
            }
        }
    }
}

/// Expert action for a pre-parsed step predicate. `NoOp` once satisfied.
pub fn expert_action_for(world: &WorldState, predicate: &Predicate) -> Action {
    predicate
        .atoms
        .iter()
        .find(|a| !gridworld::atom_holds(**a, world))
        .map(|a| atom_action(world, *a))
        .unwrap_or(Action::NoOp)
}

pub fn expert_action(world: &WorldState, task: &TaskSpec, step_index: u32) -> Result<Action> {
    let spec = task
        .steps
        .get(step_index as usize)
        .ok_or_else(|| Error::InvalidArgument(format!("step {step_index} out of range")))?;
    Ok(expert_action_for(world, &Predicate::parse(&spec.predicate_id)?))
}

/// Number of expert actions needed to satisfy `predicate` from `world`,
/// capped at `cap`.
pub fn expert_distance(world: &WorldState, predicate: &Predicate, cap: u32) -> u32 {
    let mut w = world.clone();
    for n in 0..cap {
        if predicate.holds(&w) {
            return n;
        }
        w = gridworld::step(&w, expert_action_for(&w, predicate));
    }
    cap
}

pub fn noisy_expert_action(
    world: &WorldState,
    predicate: &Predicate,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Action {
    if epsilon > 0.0 && rng.gen_bool(epsilon.min(1.0)) {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    } else {
        expert_action_for(world, predicate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub features: Vec<f32>,
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClonerRecord {
    format: u32,
    version: u32,
    k: usize,
    pairs: Vec<TrainingPair>,
}

/// k-nearest-neighbour behaviour cloner over stored (features, action) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "ClonerRecord", into = "ClonerRecord")]
pub struct ClonerModel {
    k: usize,
    version: u32,
    pairs: Vec<TrainingPair>,
    support: Vec<Vec<u32>>,
}

impl PartialEq for ClonerModel {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.version == other.version && self.pairs == other.pairs
    }
}

impl From<ClonerRecord> for ClonerModel {
    fn from(r: ClonerRecord) -> Self {
        ClonerModel::build(r.pairs, r.k, r.version)
    }
}

impl From<ClonerModel> for ClonerRecord {
    fn from(m: ClonerModel) -> Self {
        ClonerRecord {
            format: 1,
            version: m.version,
            k: m.k,
            pairs: m.pairs,
        }
    }
}

fn support_of(features: &[f32]) -> Vec<u32> {
    features
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Squared Euclidean distance summed in index order over the union of the
/// two supports. Indices outside both supports contribute exact zeros, so
/// the result is bitwise equal to the dense index-order sum.
fn sparse_sq_distance(a: &[f32], a_nz: &[u32], b: &[f32], b_nz: &[u32]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut sum = 0.0f64;
    while i < a_nz.len() || j < b_nz.len() {
        let ia = a_nz.get(i).copied().unwrap_or(u32::MAX);
        let ib = b_nz.get(j).copied().unwrap_or(u32::MAX);
        let idx = ia.min(ib) as usize;
        if ia == idx as u32 {
            i += 1;
        }
        if ib == idx as u32 {
            j += 1;
        }
        let d = a[idx] as f64 - b[idx] as f64;
        sum += d * d;
    }
    sum
}

impl ClonerModel {
    fn build(pairs: Vec<TrainingPair>, k: usize, version: u32) -> Self {
        let support = pairs.iter().map(|p| support_of(&p.features)).collect();
        ClonerModel {
            k,
            version,
            pairs,
            support,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Next model version trained on `pairs` with the same k.
    pub fn retrain(&self, pairs: Vec<TrainingPair>) -> Result<ClonerModel> {
        let mut next = train_cloner(pairs, self.k)?;
        next.version = self.version + 1;
        Ok(next)
    }

    /// Majority vote over the k nearest stored pairs. Distance ties keep
    /// the earlier-inserted pair; vote ties go to the lowest action ordinal.
    pub fn predict(&self, features: &[f32]) -> Action {
        let q_nz = support_of(features);
        let k = self.k.min(self.pairs.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, (pair, nz)) in self.pairs.iter().zip(&self.support).enumerate() {
            debug_assert_eq!(pair.features.len(), features.len());
            let d = sparse_sq_distance(&pair.features, nz, features, &q_nz);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let at = best.partition_point(|(bd, _)| *bd <= d);
            best.insert(at, (d, i));
            best.truncate(k);
        }
        let mut votes = [0usize; Action::COUNT];
        for (_, i) in &best {
            votes[self.pairs[*i].action.ordinal() as usize] += 1;
        }
        let mut winner = 0;
        for (o, v) in votes.iter().enumerate() {
            if *v > votes[winner] {
                winner = o;
            }
        }
        Action::ALL[winner]
    }
}

pub fn train_cloner(pairs: Vec<TrainingPair>, k: usize) -> Result<ClonerModel> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    Ok(ClonerModel::build(pairs, k, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum PolicyModel {
    ScriptedExpert,
    NoisyExpert { epsilon: f64 },
    /// Expert that, with probability `fail_prob` per step attempt, acts
    /// uniformly at random for that whole step.
    StepFailure { fail_prob: f64 },
    Uniform,
    Cloner(ClonerModel),
}

impl PolicyModel {
    pub fn version(&self) -> u32 {
        match self {
            PolicyModel::Cloner(m) => m.version(),
            _ => 0,
        }
    }

    /// Short description used in config digests and reports.
    pub fn describe(&self) -> String {
        match self {
            PolicyModel::ScriptedExpert => "expert".into(),
            PolicyModel::NoisyExpert { epsilon } => format!("noisy:{epsilon}"),
            PolicyModel::StepFailure { fail_prob } => format!("step_failure:{fail_prob}"),
            PolicyModel::Uniform => "uniform".into(),
            PolicyModel::Cloner(m) => format!("cloner:v{}:k{}:n{}", m.version, m.k, m.len()),
        }
    }
}

/// A policy bound to one robot, holding its random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRunner {
    model: Arc<PolicyModel>,
    rng: ChaCha8Rng,
    gate_rng: ChaCha8Rng,
    current_step: Option<u32>,
    failing: bool,
}

impl PolicyRunner {
    pub fn new(model: Arc<PolicyModel>, seed: u64) -> Self {
        PolicyRunner {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gate_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            current_step: None,
            failing: false,
        }
    }

    pub fn model(&self) -> &Arc<PolicyModel> {
        &self.model
    }

    /// Reseeds the random streams for a new episode.
    pub fn begin_episode(&mut self, seed: u64) {
        *self = PolicyRunner::new(self.model.clone(), seed);
    }

    pub fn act(
        &mut self,
        world: &WorldState,
        predicates: &[Predicate],
        step_index: u32,
        obs: &Observation,
    ) -> Action {
        let predicate = &predicates[(step_index as usize).min(predicates.len() - 1)];
        match &*self.model {
            PolicyModel::ScriptedExpert => expert_action_for(world, predicate),
            PolicyModel::NoisyExpert { epsilon } => {
                noisy_expert_action(world, predicate, *epsilon, &mut self.rng)
            }
            PolicyModel::StepFailure { fail_prob } => {
                if self.current_step != Some(step_index) {
                    self.current_step = Some(step_index);
                    self.failing = self.gate_rng.gen::<f64>() < *fail_prob;
                }
                if self.failing && !predicate.holds(world) {
                    Action::ALL[self.rng.gen_range(0..Action::COUNT)]
                } else {
                    expert_action_for(world, predicate)
                }
            }
            PolicyModel::Uniform => Action::ALL[self.rng.gen_range(0..Action::COUNT)],
            PolicyModel::Cloner(m) => m.predict(&obs.features),
        }
    }
}
