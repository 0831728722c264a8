//! Step-completion detection, intervention triggering and final-second labels.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Frame, Mode, TaskSpec, TICK_RATE};
use crate::error::{Error, Result};
use crate::gridworld::{self, Observation, Predicate, WorldState};

/// Default completion timeout in ticks.
pub const DEFAULT_T_MAX: u32 = 150;

/// Frames per completed step labelled positive: one second of ticks.
pub const FINAL_SECOND: usize = TICK_RATE as usize;

/// Intervention trigger: no completion and strictly more than `t_max` ticks spent.
pub fn should_request_intervention(z: bool, ticks_in_step: u64, t_max: u64) -> bool {
    !z && ticks_in_step > t_max
}

/// Ground truth with injected confusion. Draws exactly one uniform per call.
pub fn oracle_verdict_for(
    world: &WorldState,
    predicate: &Predicate,
    fpr: f64,
    fnr: f64,
    rng: &mut impl Rng,
) -> bool {
    let u: f64 = rng.gen();
    if predicate.holds(world) {
        u >= fnr
    } else {
        u < fpr
    }
}

pub fn oracle_verdict(
    world: &WorldState,
    task: &TaskSpec,
    step_index: u32,
    fpr: f64,
    fnr: f64,
    rng: &mut impl Rng,
) -> Result<bool> {
    let spec = task
        .steps
        .get(step_index as usize)
        .ok_or_else(|| Error::InvalidArgument(format!("step {step_index} out of range")))?;
    let predicate = Predicate::parse(&spec.predicate_id)?;
    Ok(oracle_verdict_for(world, &predicate, fpr, fnr, rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub features: Vec<f32>,
    pub step_index: u32,
    pub label: bool,
}

/// Labels the final second of every completed step positive and every other
/// frame negative.
///
/// A boundary `(step_index, end_tick)` names the non-rewind frame at
/// `end_tick`; the step's frames are the contiguous run of frames with that
/// step index ending there. A step already satisfied when the previous one
/// completed ends on a frame of an earlier step and has no frames.
pub fn label_frames<F: Borrow<Frame>>(
    episode: &[F],
    boundaries: &[(u32, u64)],
) -> Result<Vec<LabeledFrame>> {
    let episode: Vec<&Frame> = episode.iter().map(|f| f.borrow()).collect();
    let mut positive = vec![false; episode.len()];
    for &(step_index, end_tick) in boundaries {
        let end = episode
            .iter()
            .rposition(|f| f.tick == end_tick && f.mode != Mode::Rewind)
            .filter(|&i| episode[i].step_index <= step_index)
            .ok_or(Error::BoundaryOutOfRange { tick: end_tick })?;
        if episode[end].step_index != step_index {
            continue;
        }
        let mut start = end;
        while start > 0 && episode[start - 1].step_index == step_index {
            start -= 1;
        }
        let run = end + 1 - start;
        for p in &mut positive[end + 1 - run.min(FINAL_SECOND)..=end] {
            *p = true;
        }
    }
    Ok(episode
        .iter()
        .zip(positive)
        .map(|(f, label)| LabeledFrame {
            features: f.observation.clone(),
            step_index: f.step_index,
            label,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepClassifier {
    pub positives: usize,
    pub negatives: usize,
    pub positive_centroid: Option<Vec<f64>>,
    pub negative_centroid: Option<Vec<f64>>,
    /// Per-feature weights: inverse pooled within-class variance plus a floor.
    pub weights: Option<Vec<f64>>,
}

impl StepClassifier {
    pub fn is_trained(&self) -> bool {
        self.positive_centroid.is_some() && self.negative_centroid.is_some()
    }
}

/// Nearest-centroid completion classifier, one per step index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SentinelModel {
    pub version: u32,
    pub steps: BTreeMap<u32, StepClassifier>,
}

fn centroid(sum: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

/// Added to every pooled variance before inversion.
const VARIANCE_FLOOR: f64 = 0.2;

fn sq_distance(c: &[f64], w: &[f64], features: &[f32]) -> f64 {
    c.iter()
        .zip(w)
        .zip(features)
        .map(|((a, w), b)| w * (a - *b as f64).powi(2))
        .sum()
}

impl SentinelModel {
    pub fn untrained() -> Self {
        SentinelModel::default()
    }

    pub fn retrain(&self, labeled: &[LabeledFrame]) -> Result<SentinelModel> {
        let mut next = train_sentinel(labeled)?;
        next.version = self.version + 1;
        Ok(next)
    }

    /// Signed margin `d(neg) - d(pos)`, or `None` for an untrained step.
    pub fn margin(&self, features: &[f32], step_index: u32) -> Option<f64> {
        let c = self.steps.get(&step_index)?;
        let (pos, neg) = (c.positive_centroid.as_ref()?, c.negative_centroid.as_ref()?);
        let w = c.weights.as_ref()?;
        Some(sq_distance(neg, w, features).sqrt() - sq_distance(pos, w, features).sqrt())
    }
}

pub fn train_sentinel(labeled: &[LabeledFrame]) -> Result<SentinelModel> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput("labeled frames"));
    }
    let dim = labeled[0].features.len();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize, Vec<f64>, usize)> = BTreeMap::new();
    for lf in labeled {
        if lf.features.len() != dim {
            return Err(Error::InvalidArgument("feature dimensions differ".into()));
        }
        let e = sums
            .entry(lf.step_index)
            .or_insert_with(|| (vec![0.0; dim], 0, vec![0.0; dim], 0));
        let (sum, n) = if lf.label {
            (&mut e.0, &mut e.1)
        } else {
            (&mut e.2, &mut e.3)
        };
        for (s, v) in sum.iter_mut().zip(&lf.features) {
            *s += *v as f64;
        }
        *n += 1;
    }
    let mut steps: BTreeMap<u32, StepClassifier> = sums
        .into_iter()
        .map(|(step, (ps, np, ns, nn))| {
            let (pc, nc) = (centroid(ps, np), centroid(ns, nn));
            let trained = pc.is_some() && nc.is_some();
            (
                step,
                StepClassifier {
                    positives: np,
                    negatives: nn,
                    positive_centroid: pc.filter(|_| trained),
                    negative_centroid: nc.filter(|_| trained),
                    weights: trained.then(|| vec![0.0; dim]),
                },
            )
        })
        .collect();
    for lf in labeled {
        let c = steps.get_mut(&lf.step_index).expect("step seen");
        let centre = if lf.label {
            &c.positive_centroid
        } else {
            &c.negative_centroid
        };
        if let (Some(centre), Some(w)) = (centre, c.weights.as_mut()) {
            for ((acc, m), v) in w.iter_mut().zip(centre).zip(&lf.features) {
                *acc += (*v as f64 - m).powi(2);
            }
        }
    }
    for c in steps.values_mut() {
        let n = (c.positives + c.negatives) as f64;
        if let Some(w) = c.weights.as_mut() {
            for acc in w.iter_mut() {
                *acc = 1.0 / (*acc / n + VARIANCE_FLOOR);
            }
        }
    }
    Ok(SentinelModel { version: 0, steps })
}

/// 1 iff the step is trained and the query is strictly closer to the
/// positive centroid; ties and untrained steps give 0.
pub fn learned_verdict(model: &SentinelModel, obs: &Observation, step_index: u32) -> bool {
    learned_verdict_with(model, obs, step_index, 0.0)
}

pub fn learned_verdict_with(
    model: &SentinelModel,
    obs: &Observation,
    step_index: u32,
    threshold: f64,
) -> bool {
    model
        .margin(&obs.features, step_index)
        .is_some_and(|m| m > threshold)
}

/// Parsed form of a sentinel selection string.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum SentinelSpec {
    Oracle { fpr: f64, fnr: f64 },
    Learned { threshold: f64 },
}

impl Default for SentinelSpec {
    fn default() -> Self {
        SentinelSpec::Oracle { fpr: 0.0, fnr: 0.0 }
    }
}

impl fmt::Display for SentinelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SentinelSpec::Oracle { fpr, fnr } => write!(f, "oracle:fpr={fpr},fnr={fnr}"),
            SentinelSpec::Learned { threshold } => write!(f, "learned:threshold={threshold}"),
        }
    }
}

fn parse_prob(key: &str, v: &str) -> Result<f64> {
    let p: f64 = v
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: not a number: `{v}`")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parse(format!("{key} must lie in [0, 1]")));
    }
    Ok(p)
}

impl FromStr for SentinelSpec {
    type Err = Error;

    /// `oracle:fpr=0.05,fnr=0.05` or `learned:threshold=0`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = BTreeMap::new();
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got `{kv}`")))?;
            params.insert(k.trim(), v.trim());
        }
        let spec = match kind {
            "oracle" => SentinelSpec::Oracle {
                fpr: params.remove("fpr").map_or(Ok(0.0), |v| parse_prob("fpr", v))?,
                fnr: params.remove("fnr").map_or(Ok(0.0), |v| parse_prob("fnr", v))?,
            },
            "learned" => SentinelSpec::Learned {
                threshold: params
                    .remove("threshold")
                    .map_or(Ok(0.0), |v| {
                        v.parse()
                            .map_err(|_| Error::Parse(format!("threshold: `{v}`")))
                    })?,
            },
            other => return Err(Error::Parse(format!("unknown sentinel `{other}`"))),
        };
        if let Some(k) = params.keys().next() {
            return Err(Error::Parse(format!("unknown sentinel parameter `{k}`")));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentinelConfig {
    pub t_max: u32,
    pub spec: SentinelSpec,
    /// Used by the learned variant; an untrained model always answers 0.
    pub model: Arc<SentinelModel>,
}

impl SentinelConfig {
    pub fn new(t_max: u32, spec: SentinelSpec) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("T_max must be >= 1".into()));
        }
        Ok(SentinelConfig {
            t_max,
            spec,
            model: Arc::new(SentinelModel::untrained()),
        })
    }

    pub fn oracle(t_max: u32) -> Self {
        SentinelConfig::new(t_max, SentinelSpec::default()).expect("t_max >= 1")
    }

    pub fn with_model(mut self, model: Arc<SentinelModel>) -> Self {
        self.model = model;
        self
    }
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig::oracle(DEFAULT_T_MAX)
    }
}

/// A sentinel bound to one session, owning its confusion stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentinel {
    config: SentinelConfig,
    rng: ChaCha8Rng,
}

impl Sentinel {
    pub fn new(config: SentinelConfig, seed: u64) -> Self {
        Sentinel {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &SentinelConfig {
        &self.config
    }

    pub fn t_max(&self) -> u32 {
        self.config.t_max
    }

    pub fn verdict(
        &mut self,
        world: &WorldState,
        task: &TaskSpec,
        predicate: &Predicate,
        step_index: u32,
    ) -> bool {
        match self.config.spec {
            SentinelSpec::Oracle { fpr, fnr } => {
                oracle_verdict_for(world, predicate, fpr, fnr, &mut self.rng)
            }
            SentinelSpec::Learned { threshold } => learned_verdict_with(
                &self.config.model,
                &gridworld::observe(world, task),
                step_index,
                threshold,
            ),
        }
    }
}
