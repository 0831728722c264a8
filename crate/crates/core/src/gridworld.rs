//! Deterministic 12x12 manipulation gridworld with four task templates.
//!
//! A [`WorldState`] is a plain value: cloning it and replaying the same
//! actions reproduces the same future exactly. Template layouts are drawn
//! from a seeded generator in [`init_world`]; every transition after that is
//! deterministic.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Action, StepSpec, TaskSpec, TaskTemplate};
use crate::error::{Error, Result};

pub const GRID_WIDTH: i32 = 12;
pub const GRID_HEIGHT: i32 = 12;

/// Text the typing template asks for, one step per character.
pub const TYPING_TEXT: &str = "AGIBOT ";

pub type ObjectId = u32;
pub type ButtonId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: i32,
    pub col: i32,
}

impl Pos {
    pub const fn new(row: i32, col: i32) -> Self {
        Pos { row, col }
    }

    pub fn manhattan(self, other: Pos) -> u32 {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn offset(self, heading: Heading) -> Pos {
        let (dr, dc) = heading.toward();
        Pos::new(self.row + dr, self.col + dc)
    }
}

/// Side of a cell an object last entered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    /// Displacement from a cell to its neighbour on this side.
    fn toward(self) -> (i32, i32) {
        match self {
            Heading::North => (-1, 0),
            Heading::South => (1, 0),
            Heading::East => (0, 1),
            Heading::West => (0, -1),
        }
    }

    /// The side a mover arrives from when taking `action`.
    fn arriving_by(action: Action) -> Option<Heading> {
        match action {
            Action::Down => Some(Heading::North),
            Action::Up => Some(Heading::South),
            Action::Left => Some(Heading::East),
            Action::Right => Some(Heading::West),
            _ => None,
        }
    }

    fn parse(s: &str) -> Option<Heading> {
        match s {
            "north" => Some(Heading::North),
            "south" => Some(Heading::South),
            "east" => Some(Heading::East),
            "west" => Some(Heading::West),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Bread,
    Bacon,
    Lettuce,
    Peg,
    Food,
}

impl ObjectKind {
    fn glyph(self) -> char {
        match self {
            ObjectKind::Bread => 'b',
            ObjectKind::Bacon => 'c',
            ObjectKind::Lettuce => 'l',
            ObjectKind::Peg => 'p',
            ObjectKind::Food => 'o',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectState {
    pub pos: Pos,
    pub kind: ObjectKind,
    pub approach: Option<Heading>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum ButtonKind {
    /// Appends its character to the typed buffer.
    Key(char),
    /// Removes the last typed character.
    Delete,
    /// Toggles between pressed and released.
    Door,
    /// Latches pressed.
    Start,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Button {
    pub pos: Pos,
    pub kind: ButtonKind,
}

/// A landmark cell. A gated target only accepts grasps and releases while
/// its gate button is pressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub pos: Pos,
    pub gate: Option<ButtonId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub width: i32,
    pub height: i32,
    pub gripper: Pos,
    pub held: Option<ObjectId>,
    pub objects: Vec<ObjectState>,
    pub buttons: Vec<Button>,
    pub targets: Vec<Target>,
    pub pressed: BTreeSet<ButtonId>,
    pub typed: String,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn in_bounds(&self, p: Pos) -> bool {
        p.row >= 0 && p.row < self.height && p.col >= 0 && p.col < self.width
    }

    fn clip(&self, p: Pos) -> Pos {
        Pos::new(p.row.clamp(0, self.height - 1), p.col.clamp(0, self.width - 1))
    }

    pub fn is_pressed(&self, button: ButtonId) -> bool {
        self.pressed.contains(&button)
    }

    pub fn button_at(&self, p: Pos) -> Option<(ButtonId, &Button)> {
        self.buttons
            .iter()
            .enumerate()
            .find(|(_, b)| b.pos == p)
            .map(|(i, b)| (i as ButtonId, b))
    }

    /// Whether grasp/release are allowed at `p` (a closed gate blocks them).
    pub fn cell_open(&self, p: Pos) -> bool {
        self.targets
            .iter()
            .filter(|t| t.pos == p)
            .all(|t| t.gate.is_none_or(|g| self.is_pressed(g)))
    }

    /// Topmost (highest id) free object in a cell.
    pub fn top_object_at(&self, p: Pos) -> Option<ObjectId> {
        self.objects
            .iter()
            .enumerate()
            .rev()
            .find(|(i, o)| o.pos == p && self.held != Some(*i as ObjectId))
            .map(|(i, _)| i as ObjectId)
    }

    pub fn resting_at(&self, object: ObjectId, p: Pos) -> bool {
        self.held != Some(object)
            && self
                .objects
                .get(object as usize)
                .is_some_and(|o| o.pos == p)
    }

    /// Every invariant a reachable world satisfies.
    pub fn is_valid(&self) -> bool {
        self.in_bounds(self.gripper)
            && self.objects.iter().all(|o| self.in_bounds(o.pos))
            && self.buttons.iter().all(|b| self.in_bounds(b.pos))
            && self.held.is_none_or(|h| {
                self.objects
                    .get(h as usize)
                    .is_some_and(|o| o.pos == self.gripper)
            })
    }
}

/// Template definition for a task.
pub fn task_spec(template: TaskTemplate) -> TaskSpec {
    let steps: Vec<(String, String)> = match template {
        TaskTemplate::Stacking => ["the bottom slice of bread", "the bacon", "the lettuce", "the top slice of bread"]
            .iter()
            .enumerate()
            .map(|(k, what)| (format!("place {what} on the stack"), format!("rest:{k}@0")))
            .collect(),
        TaskTemplate::Insertion => vec![
            ("grasp the connector".into(), "hold:0".into()),
            ("align the connector above the socket".into(), "hold:0@1".into()),
            ("insert the connector from above".into(), "insert:0@0:north".into()),
        ],
        TaskTemplate::Appliance => vec![
            ("open the door".into(), "on:0".into()),
            ("pick up the food".into(), "hold:0".into()),
            ("place the food inside".into(), "on:0&rest:0@0".into()),
            ("close the door".into(), "rest:0@0&off:0".into()),
            ("press start".into(), "rest:0@0&off:0&on:1".into()),
        ],
        TaskTemplate::Typing => TYPING_TEXT
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let key = if c == ' ' { "space".to_string() } else { c.to_string() };
                (format!("type {key}"), format!("typed:{}", i + 1))
            })
            .collect(),
    };
    TaskSpec {
        template,
        name: template.as_str().to_string(),
        steps: steps
            .into_iter()
            .enumerate()
            .map(|(i, (instruction, predicate_id))| StepSpec {
                step_index: i as u32,
                instruction,
                predicate_id,
            })
            .collect(),
    }
}

pub const STACK_CELL: Pos = Pos::new(6, 5);
pub const SOCKET_CELL: Pos = Pos::new(3, 8);
pub const OVEN_CELL: Pos = Pos::new(2, 10);
pub const DOOR_CELL: Pos = Pos::new(2, 9);
pub const START_CELL: Pos = Pos::new(3, 10);

fn gripper_start(template: TaskTemplate) -> Pos {
    match template {
        TaskTemplate::Stacking => STACK_CELL,
        TaskTemplate::Insertion => Pos::new(6, 6),
        TaskTemplate::Appliance => Pos::new(6, 5),
        TaskTemplate::Typing => Pos::new(1, 6),
    }
}

fn jitter(rng: &mut ChaCha8Rng, p: Pos, amount: i32) -> Pos {
    Pos::new(
        p.row + rng.gen_range(-amount..=amount),
        p.col + rng.gen_range(-amount..=amount),
    )
}

pub fn init_world(task: &TaskSpec, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = WorldState {
        width: GRID_WIDTH,
        height: GRID_HEIGHT,
        gripper: gripper_start(task.template),
        held: None,
        objects: Vec::new(),
        buttons: Vec::new(),
        targets: Vec::new(),
        pressed: BTreeSet::new(),
        typed: String::new(),
        rng_seed: seed,
    };
    let object = |pos, kind| ObjectState {
        pos,
        kind,
        approach: None,
    };
    match task.template {
        TaskTemplate::Stacking => {
            world.targets.push(Target {
                pos: STACK_CELL,
                gate: None,
            });
            let placements = [
                (Pos::new(1, 1), ObjectKind::Bread),
                (Pos::new(1, 10), ObjectKind::Bacon),
                (Pos::new(10, 10), ObjectKind::Lettuce),
                (Pos::new(10, 1), ObjectKind::Bread),
            ];
            for (p, kind) in placements {
                let q = Pos::new(p.row, p.col + rng.gen_range(-1..=1));
                world.objects.push(object(q, kind));
            }
        }
        TaskTemplate::Insertion => {
            world.targets.push(Target {
                pos: SOCKET_CELL,
                gate: None,
            });
            world.targets.push(Target {
                pos: SOCKET_CELL.offset(Heading::North),
                gate: None,
            });
            let peg = Pos::new(rng.gen_range(7..=11), rng.gen_range(0..=4));
            world.objects.push(object(peg, ObjectKind::Peg));
        }
        TaskTemplate::Appliance => {
            world.buttons.push(Button {
                pos: DOOR_CELL,
                kind: ButtonKind::Door,
            });
            world.buttons.push(Button {
                pos: START_CELL,
                kind: ButtonKind::Start,
            });
            world.targets.push(Target {
                pos: OVEN_CELL,
                gate: Some(0),
            });
            let food = jitter(&mut rng, Pos::new(9, 3), 1);
            world.objects.push(object(food, ObjectKind::Food));
        }
        TaskTemplate::Typing => {
            let origin = jitter(&mut rng, Pos::new(7, 2), 1);
            let kinds = typing_keys();
            for (i, kind) in kinds.into_iter().enumerate() {
                let (r, c) = ((i / 4) as i32 * 2, (i % 4) as i32 * 2);
                world.buttons.push(Button {
                    pos: Pos::new(origin.row + r, origin.col + c),
                    kind,
                });
            }
        }
    }
    debug_assert!(world.is_valid());
    world
}

/// Keyboard order: A G I B on the upper row, O T space delete below.
pub fn typing_keys() -> [ButtonKind; 8] {
    [
        ButtonKind::Key('A'),
        ButtonKind::Key('G'),
        ButtonKind::Key('I'),
        ButtonKind::Key('B'),
        ButtonKind::Key('O'),
        ButtonKind::Key('T'),
        ButtonKind::Key(' '),
        ButtonKind::Delete,
    ]
}

/// Applies one action. Illegal actions leave the world unchanged.
pub fn step(world: &WorldState, action: Action) -> WorldState {
    let mut next = world.clone();
    match action {
        Action::Up | Action::Down | Action::Left | Action::Right => {
            let (dr, dc) = action.delta().expect("move action");
            let to = world.clip(Pos::new(world.gripper.row + dr, world.gripper.col + dc));
            if to != world.gripper {
                next.gripper = to;
                if let Some(h) = world.held {
                    let o = &mut next.objects[h as usize];
                    o.pos = to;
                    o.approach = Heading::arriving_by(action);
                }
            }
        }
        Action::Grasp => {
            if world.held.is_none() && world.cell_open(world.gripper) {
                next.held = world.top_object_at(world.gripper);
            }
        }
        Action::Release => {
            if world.held.is_some() && world.cell_open(world.gripper) {
                next.held = None;
            }
        }
        Action::Press => {
            if let Some((id, button)) = world.button_at(world.gripper) {
                match button.kind {
                    ButtonKind::Key(c) => next.typed.push(c),
                    ButtonKind::Delete => {
                        next.typed.pop();
                    }
                    ButtonKind::Door => {
                        if !next.pressed.remove(&id) {
                            next.pressed.insert(id);
                        }
                    }
                    ButtonKind::Start => {
                        next.pressed.insert(id);
                    }
                }
            }
        }
        Action::NoOp => {}
    }
    next
}

/// Displaces one uniformly chosen free object by up to `magnitude` cells per
/// axis, clipped to the grid.
pub fn perturb(world: &WorldState, magnitude: u32, rng: &mut impl Rng) -> Result<WorldState> {
    if magnitude == 0 {
        return Err(Error::InvalidArgument("perturbation magnitude must be >= 1".into()));
    }
    let free: Vec<usize> = (0..world.objects.len())
        .filter(|&i| world.held != Some(i as ObjectId))
        .collect();
    let mut next = world.clone();
    if free.is_empty() {
        return Ok(next);
    }
    let m = magnitude as i32;
    let pick = free[rng.gen_range(0..free.len())];
    let o = &mut next.objects[pick];
    let moved = Pos::new(
        o.pos.row + rng.gen_range(-m..=m),
        o.pos.col + rng.gen_range(-m..=m),
    );
    let clipped = world.clip(moved);
    if clipped != o.pos {
        o.pos = clipped;
        o.approach = None;
    }
    Ok(next)
}

/// One conjunct of a step predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Atom {
    /// Object resting (not held) on a target cell.
    Rest { object: ObjectId, target: usize },
    /// Gripper holds the object, optionally positioned on a target cell.
    Hold {
        object: ObjectId,
        target: Option<usize>,
    },
    /// Object resting on a target after entering it from a given side.
    Insert {
        object: ObjectId,
        target: usize,
        from: Heading,
    },
    On(ButtonId),
    Off(ButtonId),
    /// The typed buffer equals the first `n` characters of the typing text.
    Typed(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

impl Predicate {
    pub fn parse(id: &str) -> Result<Predicate> {
        let unknown = || Error::UnknownPredicate(id.to_string());
        let num = |s: &str| s.parse::<u32>().map_err(|_| unknown());
        let mut atoms = Vec::new();
        for part in id.split('&') {
            let (head, rest) = part.split_once(':').ok_or_else(unknown)?;
            let atom = match head {
                "rest" => {
                    let (o, t) = rest.split_once('@').ok_or_else(unknown)?;
                    Atom::Rest {
                        object: num(o)?,
                        target: num(t)? as usize,
                    }
                }
                "hold" => match rest.split_once('@') {
                    Some((o, t)) => Atom::Hold {
                        object: num(o)?,
                        target: Some(num(t)? as usize),
                    },
                    None => Atom::Hold {
                        object: num(rest)?,
                        target: None,
                    },
                },
                "insert" => {
                    let (o, rest) = rest.split_once('@').ok_or_else(unknown)?;
                    let (t, h) = rest.split_once(':').ok_or_else(unknown)?;
                    Atom::Insert {
                        object: num(o)?,
                        target: num(t)? as usize,
                        from: Heading::parse(h).ok_or_else(unknown)?,
                    }
                }
                "on" => Atom::On(num(rest)?),
                "off" => Atom::Off(num(rest)?),
                "typed" => Atom::Typed(num(rest)? as usize),
                _ => return Err(unknown()),
            };
            atoms.push(atom);
        }
        Ok(Predicate { atoms })
    }

    pub fn holds(&self, world: &WorldState) -> bool {
        self.atoms.iter().all(|a| atom_holds(*a, world))
    }
}

pub fn atom_holds(atom: Atom, world: &WorldState) -> bool {
    let target_pos = |t: usize| world.targets.get(t).map(|t| t.pos);
    match atom {
        Atom::Rest { object, target } => {
            target_pos(target).is_some_and(|p| world.resting_at(object, p))
        }
        Atom::Hold { object, target } => {
            world.held == Some(object)
                && target.is_none_or(|t| target_pos(t) == Some(world.gripper))
        }
        Atom::Insert {
            object,
            target,
            from,
        } => {
            target_pos(target).is_some_and(|p| world.resting_at(object, p))
                && world.objects[object as usize].approach == Some(from)
        }
        Atom::On(b) => world.is_pressed(b),
        Atom::Off(b) => !world.is_pressed(b),
        Atom::Typed(n) => {
            let want: String = TYPING_TEXT.chars().take(n).collect();
            world.typed == want
        }
    }
}

/// Parsed predicates for every step of a task.
pub fn compile_task(task: &TaskSpec) -> Result<Vec<Predicate>> {
    task.steps
        .iter()
        .map(|s| Predicate::parse(&s.predicate_id))
        .collect()
}

pub fn step_complete(world: &WorldState, task: &TaskSpec, step_index: u32) -> Result<bool> {
    let spec = task.steps.get(step_index as usize).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "step {step_index} out of range for {} ({} steps)",
            task.name,
            task.steps.len()
        ))
    })?;
    Ok(Predicate::parse(&spec.predicate_id)?.holds(world))
}

/// Feature block layout for a template.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub kinds: Vec<ObjectKind>,
    pub button_grid: bool,
    pub buttons: usize,
    pub typed_slots: usize,
}

pub fn feature_layout(template: TaskTemplate) -> FeatureLayout {
    match template {
        TaskTemplate::Stacking => FeatureLayout {
            kinds: vec![ObjectKind::Bread, ObjectKind::Bacon, ObjectKind::Lettuce],
            button_grid: false,
            buttons: 0,
            typed_slots: 0,
        },
        TaskTemplate::Insertion => FeatureLayout {
            kinds: vec![ObjectKind::Peg],
            button_grid: false,
            buttons: 0,
            typed_slots: 0,
        },
        TaskTemplate::Appliance => FeatureLayout {
            kinds: vec![ObjectKind::Food],
            button_grid: true,
            buttons: 2,
            typed_slots: 0,
        },
        TaskTemplate::Typing => FeatureLayout {
            kinds: vec![],
            button_grid: true,
            buttons: 8,
            typed_slots: TYPING_TEXT.len() + 1,
        },
    }
}

impl FeatureLayout {
    const CELLS: usize = (GRID_WIDTH * GRID_HEIGHT) as usize;

    pub fn len(&self) -> usize {
        let grids = self.kinds.len() + usize::from(self.button_grid);
        grids * Self::CELLS + 3 + self.buttons + self.typed_slots * typing_keys().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of the gripper row feature; object grids precede it.
    pub fn gripper_offset(&self) -> usize {
        (self.kinds.len() + usize::from(self.button_grid)) * Self::CELLS
    }

    /// Range holding the object occupancy grids.
    pub fn object_grid_range(&self) -> std::ops::Range<usize> {
        0..self.kinds.len() * Self::CELLS
    }

    pub fn held_offset(&self) -> usize {
        self.gripper_offset() + 2
    }
}

/// Gripper coordinates are scaled so one cell of gripper motion outweighs a
/// single displaced object in feature distance.
pub const GRIPPER_SCALE: f32 = 2.0;
/// Holding or not dominates everything but gross gripper displacement.
pub const HELD_SCALE: f32 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
}

fn cell_index(p: Pos) -> usize {
    (p.row * GRID_WIDTH + p.col) as usize
}

/// Featurizes a world: one occupancy grid per object kind, a button grid
/// where the template has buttons, gripper row/column, held flag, pressed
/// flags and (typing only) a one-hot encoding of the typed buffer.
pub fn observe_with(layout: &FeatureLayout, world: &WorldState) -> Observation {
    let cells = FeatureLayout::CELLS;
    let mut f = vec![0.0f32; layout.len()];
    for o in &world.objects {
        if let Some(k) = layout.kinds.iter().position(|k| *k == o.kind) {
            f[k * cells + cell_index(o.pos)] = 1.0;
        }
    }
    if layout.button_grid {
        let base = layout.kinds.len() * cells;
        for b in &world.buttons {
            f[base + cell_index(b.pos)] = 1.0;
        }
    }
    let g = layout.gripper_offset();
    f[g] = world.gripper.row as f32 * GRIPPER_SCALE;
    f[g + 1] = world.gripper.col as f32 * GRIPPER_SCALE;
    f[g + 2] = if world.held.is_some() { HELD_SCALE } else { 0.0 };
    for b in 0..layout.buttons {
        if world.is_pressed(b as ButtonId) {
            f[g + 3 + b] = 1.0;
        }
    }
    if layout.typed_slots > 0 {
        let keys = typing_keys();
        let base = g + 3 + layout.buttons;
        for (slot, c) in world.typed.chars().take(layout.typed_slots).enumerate() {
            if let Some(k) = keys.iter().position(|k| *k == ButtonKind::Key(c)) {
                f[base + slot * keys.len() + k] = 1.0;
            }
        }
    }
    Observation { features: f }
}

pub fn observe(world: &WorldState, task: &TaskSpec) -> Observation {
    observe_with(&feature_layout(task.template), world)
}

/// One character per cell: gripper `@` (`&` when holding), objects by kind,
/// buttons, then targets.
pub fn render_ascii(world: &WorldState) -> String {
    let mut out = String::new();
    for r in 0..world.height {
        for c in 0..world.width {
            let p = Pos::new(r, c);
            let ch = if p == world.gripper {
                if world.held.is_some() {
                    '&'
                } else {
                    '@'
                }
            } else if let Some(o) = world.objects.iter().rev().find(|o| o.pos == p) {
                o.kind.glyph()
            } else if let Some((id, b)) = world.button_at(p) {
                match b.kind {
                    ButtonKind::Key(' ') => '_',
                    ButtonKind::Key(k) => k,
                    ButtonKind::Delete => '<',
                    ButtonKind::Door if world.is_pressed(id) => 'd',
                    ButtonKind::Door => 'D',
                    ButtonKind::Start => 'S',
                }
            } else if world.targets.iter().any(|t| t.pos == p) {
                '+'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    if !world.typed.is_empty() {
        let _ = writeln!(out, "typed: {:?}", world.typed);
    }
    out
}

/// JSON scene description consumed by the operator console.
pub fn scene_json(world: &WorldState) -> serde_json::Value {
    serde_json::to_value(world).expect("world serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn spec(t: TaskTemplate) -> TaskSpec {
        task_spec(t)
    }

    #[test]
    fn templates_mirror_step_counts() {
        assert_eq!(spec(TaskTemplate::Stacking).steps.len(), 4);
        assert_eq!(spec(TaskTemplate::Appliance).steps.len(), 5);
        for t in TaskTemplate::ALL {
            let s = spec(t);
            assert!(!s.steps.is_empty());
            compile_task(&s).unwrap();
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let s = spec(TaskTemplate::Stacking);
        assert_eq!(init_world(&s, 0), init_world(&s, 0));
        for seed in 0..100u64 {
            let a = init_world(&s, seed);
            let b = init_world(&s, seed + 1);
            assert_ne!(a.objects, b.objects, "seeds {seed} and {}", seed + 1);
        }
    }

    #[test]
    fn placements_avoid_gripper_and_each_other() {
        for t in TaskTemplate::ALL {
            let s = spec(t);
            for seed in 0..200 {
                let w = init_world(&s, seed);
                assert!(w.is_valid());
                assert!(w.objects.iter().all(|o| o.pos != w.gripper));
                assert!(w.buttons.iter().all(|b| b.pos != w.gripper));
                let cells: BTreeSet<Pos> = w.objects.iter().map(|o| o.pos).collect();
                assert_eq!(cells.len(), w.objects.len());
                assert!(w
                    .objects
                    .iter()
                    .all(|o| w.targets.iter().all(|t| t.pos != o.pos)));
            }
        }
    }

    #[test]
    fn typing_world_has_all_keys() {
        let w = init_world(&spec(TaskTemplate::Typing), 7);
        let kinds: Vec<ButtonKind> = w.buttons.iter().map(|b| b.kind).collect();
        for c in ['A', 'G', 'I', 'B', 'O', 'T', ' '] {
            assert!(kinds.contains(&ButtonKind::Key(c)));
        }
        assert!(kinds.contains(&ButtonKind::Delete));
    }

    #[test]
    fn moves_clip_at_boundary() {
        let mut w = init_world(&spec(TaskTemplate::Stacking), 0);
        w.gripper = Pos::new(0, 0);
        let next = step(&w, Action::Up);
        assert_eq!(next.gripper, Pos::new(0, 0));
        assert_eq!(next, w);
        assert_eq!(step(&w, Action::Left), w);
    }

    #[test]
    fn noop_is_identity() {
        let w = init_world(&spec(TaskTemplate::Appliance), 3);
        assert_eq!(step(&w, Action::NoOp), w);
    }

    #[test]
    fn grasp_on_empty_then_release_is_unchanged() {
        let w = init_world(&spec(TaskTemplate::Stacking), 4);
        assert!(w.top_object_at(w.gripper).is_none());
        let after = step(&step(&w, Action::Grasp), Action::Release);
        assert_eq!(after, w);
    }

    #[test]
    fn held_object_follows_gripper() {
        let mut w = init_world(&spec(TaskTemplate::Stacking), 4);
        w.gripper = w.objects[2].pos;
        let w = step(&w, Action::Grasp);
        assert_eq!(w.held, Some(2));
        let w = step(&w, Action::Down);
        assert_eq!(w.objects[2].pos, w.gripper);
        assert!(w.is_valid());
    }

    #[test]
    fn observe_is_pure_and_flags_held() {
        let s = spec(TaskTemplate::Stacking);
        let layout = feature_layout(s.template);
        let w = init_world(&s, 5);
        let a = observe(&w, &s);
        assert_eq!(a, observe(&w, &s));
        assert_eq!(a.features.len(), layout.len());
        assert_eq!(a.features[layout.held_offset()], 0.0);
        let mut held = w.clone();
        held.gripper = held.objects[1].pos;
        let held = step(&held, Action::Grasp);
        assert_eq!(observe(&held, &s).features[layout.held_offset()], HELD_SCALE);
    }

    #[test]
    fn moving_one_object_flips_two_entries() {
        let s = spec(TaskTemplate::Stacking);
        let w = init_world(&s, 9);
        let mut moved = w.clone();
        moved.objects[1].pos = Pos::new(5, 0);
        let a = observe(&w, &s).features;
        let b = observe(&moved, &s).features;
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diffs.len(), 2);
        let bacon = 144; // second kind grid
        assert!(diffs.contains(&(bacon + cell_index(w.objects[1].pos))));
        assert!(diffs.contains(&(bacon + cell_index(Pos::new(5, 0)))));
    }

    #[test]
    fn stacking_first_step_predicate() {
        let s = spec(TaskTemplate::Stacking);
        let mut w = init_world(&s, 0);
        assert!(!step_complete(&w, &s, 0).unwrap());
        w.gripper = w.objects[0].pos;
        let held = step(&w, Action::Grasp);
        assert!(!step_complete(&held, &s, 0).unwrap());
        w.objects[0].pos = STACK_CELL;
        assert!(step_complete(&w, &s, 0).unwrap());
    }

    #[test]
    fn insertion_requires_approach_from_north() {
        let s = spec(TaskTemplate::Insertion);
        let mut w = init_world(&s, 0);
        // carry the peg into the socket from the east
        w.gripper = Pos::new(SOCKET_CELL.row, SOCKET_CELL.col + 1);
        w.objects[0].pos = w.gripper;
        w.held = Some(0);
        let w = step(&step(&w, Action::Left), Action::Release);
        assert_eq!(w.objects[0].pos, SOCKET_CELL);
        assert!(!step_complete(&w, &s, 2).unwrap());

        let mut v = init_world(&s, 0);
        v.gripper = Pos::new(SOCKET_CELL.row - 1, SOCKET_CELL.col);
        v.objects[0].pos = v.gripper;
        v.held = Some(0);
        let v = step(&step(&v, Action::Down), Action::Release);
        assert!(step_complete(&v, &s, 2).unwrap());
    }

    #[test]
    fn typing_wrong_key_needs_delete() {
        let s = spec(TaskTemplate::Typing);
        let w = init_world(&s, 7);
        let key = |c: char| {
            w.buttons
                .iter()
                .find(|b| b.kind == ButtonKind::Key(c))
                .unwrap()
                .pos
        };
        let delete = w.buttons.iter().find(|b| b.kind == ButtonKind::Delete).unwrap().pos;
        let press_at = |w: &WorldState, p: Pos| {
            let mut w = w.clone();
            w.gripper = p;
            step(&w, Action::Press)
        };
        let w1 = press_at(&w, key('A'));
        assert!(step_complete(&w1, &s, 0).unwrap());
        let wrong = press_at(&w1, key('O'));
        assert!(!step_complete(&wrong, &s, 1).unwrap());
        // pressing G now does not help: the buffer is "AOG"
        let still_wrong = press_at(&wrong, key('G'));
        assert!(!step_complete(&still_wrong, &s, 1).unwrap());
        let fixed = press_at(&press_at(&wrong, delete), key('G'));
        assert!(step_complete(&fixed, &s, 1).unwrap());
    }

    #[test]
    fn appliance_gate_blocks_release() {
        let s = spec(TaskTemplate::Appliance);
        let mut w = init_world(&s, 1);
        w.gripper = OVEN_CELL;
        w.objects[0].pos = OVEN_CELL;
        w.held = Some(0);
        assert_eq!(step(&w, Action::Release).held, Some(0));
        w.pressed.insert(0);
        assert_eq!(step(&w, Action::Release).held, None);
    }

    #[test]
    fn unknown_predicate_is_an_error() {
        let mut s = spec(TaskTemplate::Stacking);
        s.steps[0].predicate_id = "levitate:0".into();
        let w = init_world(&s, 0);
        assert!(matches!(
            step_complete(&w, &s, 0),
            Err(Error::UnknownPredicate(_))
        ));
    }

    #[test]
    fn perturb_rules() {
        let s = spec(TaskTemplate::Stacking);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = init_world(&s, 2);
        assert!(perturb(&w, 0, &mut rng).is_err());
        for _ in 0..100 {
            let p = perturb(&w, 2, &mut rng).unwrap();
            let changed = (0..w.objects.len())
                .filter(|&i| w.objects[i].pos != p.objects[i].pos)
                .count();
            assert!(changed <= 1);
            assert!(p.is_valid());
        }
        let mut held = w.clone();
        held.gripper = held.objects[2].pos;
        let held = step(&held, Action::Grasp);
        for _ in 0..200 {
            let p = perturb(&held, 3, &mut rng).unwrap();
            assert_eq!(p.objects[2].pos, held.objects[2].pos);
        }
    }

    #[test]
    fn ascii_render_dimensions() {
        let w = init_world(&spec(TaskTemplate::Typing), 0);
        let art = render_ascii(&w);
        let rows: Vec<&str> = art.lines().collect();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.chars().count() == 12));
        assert!(art.contains('@'));
    }
}
