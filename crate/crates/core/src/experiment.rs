//! Batched data-aggregation rounds for GCENT and the Passive/Adversarial
//! baselines, policy evaluation and calibrated-success policies.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{config_digest, validate, Header, LogRecord, TrajectoryStore, ValidateOptions};
use crate::domain::{derive_seed, Mode, TaskSpec};
use crate::error::{Error, Result};
use crate::fleet::{event_record, run_fleet, FleetConfig, FleetLog, FleetMetrics, EPISODE_TICK_CAP};
use crate::gridworld::{self, WorldState};
use crate::operator::{OperatorConfig, RewindDepth, Strategy, StrategyChoice};
use crate::policies::{noisy_expert_action, train_cloner, ClonerModel, PolicyModel, PolicyRunner};
use crate::sentinel::{train_sentinel, SentinelConfig, SentinelModel, SentinelSpec, DEFAULT_T_MAX};
use crate::session::{Command, Session, SessionConfig};

pub const WARMUP_TRAJECTORIES: usize = 20;
pub const ROUND_TRAJECTORIES: usize = 20;
pub const EVAL_TRIALS: u32 = 10;
pub const STOP_SCORE: f64 = 0.9;
pub const EPSILON_PASSIVE: f64 = 0.1;
pub const PERTURB_PROB: f64 = 0.15;
pub const PERTURB_MAGNITUDE: u32 = 2;
pub const CALIBRATION_TRIALS: u32 = 200;
pub const CALIBRATION_TOLERANCE: f64 = 0.02;
/// Start-policy success targets for the rewind-strategy arms.
pub const WEAK_START: f64 = 0.2;
pub const STRONG_START: f64 = 0.8;
/// Longest warmup prefix searched when fitting a start policy.
pub const MAX_START_DEMOS: usize = 30;
/// Monitor lookahead for the strategy arms when the config sets none.
pub const ARM_LOOKAHEAD: u32 = 5;

// Seed namespaces, so collection and evaluation never share worlds.
const WARMUP_STREAM: u64 = 1;
const ROUND_STREAM: u64 = 100;
const EVAL_STREAM: u64 = 999;
const CALIBRATION_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Passive,
    Adversarial,
    Gcent,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Passive, Method::Adversarial, Method::Gcent];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Passive => "passive",
            Method::Adversarial => "adversarial",
            Method::Gcent => "gcent",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub method: Method,
    pub warmup_trajectories: usize,
    pub trajectories_per_round: usize,
    pub max_rounds: u32,
    pub eval_trials: u32,
    pub stop_score: f64,
    pub seed: u64,
    pub epsilon_passive: f64,
    pub cloner_k: usize,
    /// Robots in each GCENT collection fleet.
    pub n_robots: u32,
    pub sentinel: SentinelSpec,
    pub t_max: u32,
    pub strategy: StrategyChoice,
    pub latency_min: u32,
    pub latency_max: u32,
    /// Lookahead of the human-gated monitor during GCENT collection.
    pub human_gated: Option<u32>,
    pub perturb_prob: f64,
    pub perturb_magnitude: u32,
    pub episode_tick_cap: u64,
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, method: Method, seed: u64) -> Self {
        ExperimentConfig {
            task,
            method,
            warmup_trajectories: WARMUP_TRAJECTORIES,
            trajectories_per_round: ROUND_TRAJECTORIES,
            max_rounds: 5,
            eval_trials: EVAL_TRIALS,
            stop_score: STOP_SCORE,
            seed,
            epsilon_passive: EPSILON_PASSIVE,
            cloner_k: 5,
            n_robots: 1,
            sentinel: SentinelSpec::default(),
            t_max: DEFAULT_T_MAX,
            strategy: StrategyChoice::StageDependent,
            latency_min: 5,
            latency_max: 20,
            human_gated: None,
            perturb_prob: PERTURB_PROB,
            perturb_magnitude: PERTURB_MAGNITUDE,
            episode_tick_cap: EPISODE_TICK_CAP,
        }
    }

    fn check(&self) -> Result<()> {
        if self.warmup_trajectories == 0 || self.trajectories_per_round == 0 {
            return Err(Error::InvalidArgument("trajectory counts must be >= 1".into()));
        }
        if self.eval_trials == 0 {
            return Err(Error::InvalidArgument("eval_trials must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_passive) || !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        SentinelConfig::new(self.t_max, self.sentinel)?;
        OperatorConfig::new(self.latency_min, self.latency_max, Strategy::DirectIntervention)?;
        Ok(())
    }

    fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, EVAL_STREAM)
    }
}

/// Score statistics over evaluation trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub success_rate: f64,
    pub scores: Vec<f64>,
}

impl Evaluation {
    fn from_scores(scores: Vec<f64>, successes: usize) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Evaluation {
            mean,
            std: var.sqrt(),
            success_rate: successes as f64 / n,
            scores,
        }
    }
}

fn deterministic(policy: &PolicyModel) -> bool {
    matches!(policy, PolicyModel::ScriptedExpert | PolicyModel::Cloner(_))
}

/// Autonomous rollouts with ground-truth step advancement, up to
/// `tick_cap` ticks per trial. Trial `i` uses world seed
/// `derive_seed(seed_base, i)`.
pub fn evaluate_with_cap(
    policy: &Arc<PolicyModel>,
    task: &TaskSpec,
    trials: u32,
    seed_base: u64,
    tick_cap: u64,
) -> Result<Evaluation> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let preds = gridworld::compile_task(task)?;
    let layout = gridworld::feature_layout(task.template);
    let total = preds.len() as u32;
    let mut scores = Vec::with_capacity(trials as usize);
    let mut successes = 0;
    let mut seen: HashSet<(WorldState, u32)> = HashSet::new();
    for i in 0..trials {
        let world_seed = derive_seed(seed_base, i as u64);
        let mut world = gridworld::init_world(task, world_seed);
        let mut runner = PolicyRunner::new(policy.clone(), world_seed);
        let mut step = 0u32;
        seen.clear();
        for _ in 0..tick_cap {
            if step == total {
                break;
            }
            // a deterministic policy revisiting a state is stuck in a cycle
            if deterministic(policy) && !seen.insert((world.clone(), step)) {
                break;
            }
            let obs = gridworld::observe_with(&layout, &world);
            let action = runner.act(&world, &preds, step, &obs);
            world = gridworld::step(&world, action);
            while step < total && preds[step as usize].holds(&world) {
                step += 1;
            }
        }
        if step == total {
            successes += 1;
        }
        scores.push(step as f64 / total as f64);
    }
    Ok(Evaluation::from_scores(scores, successes))
}

pub fn evaluate(policy: &Arc<PolicyModel>, task: &TaskSpec, trials: u32, seed_base: u64) -> Result<Evaluation> {
    evaluate_with_cap(policy, task, trials, seed_base, EPISODE_TICK_CAP)
}

/// How scripted teleoperated demonstrations are generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoStyle {
    /// Per-action chance of a uniformly random action.
    pub epsilon: f64,
    /// Per-step-start chance of displacing an object.
    pub perturb_prob: f64,
    pub perturb_magnitude: u32,
}

/// Fully teleoperated episodes (every frame Intervention, actor Human),
/// returned as log records starting with a header.
pub fn collect_demonstrations(
    task: &TaskSpec,
    episodes: usize,
    style: DemoStyle,
    seed: u64,
    prefix: &str,
    tick_cap: u64,
) -> Result<Vec<LogRecord>> {
    let mut cfg = SessionConfig::new(0, task.clone(), Arc::new(PolicyModel::ScriptedExpert), seed);
    cfg.episode_prefix = prefix.to_string();
    let mut session = Session::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX - 2));
    let header = Header::new(
        &task.name,
        vec![0],
        config_digest(&(prefix, seed, style.epsilon, style.perturb_prob, style.perturb_magnitude)),
    );
    let mut records = vec![LogRecord::Header(header)];
    for n in 0..episodes {
        if n > 0 {
            session.reset();
        }
        session.apply(Command::Takeover)?;
        let mut last_step = None;
        while !session.is_complete() && session.episode_frames() < tick_cap {
            let step = session.step_index();
            if last_step != Some(step) {
                last_step = Some(step);
                if style.perturb_prob > 0.0 && rng.gen_bool(style.perturb_prob) {
                    session.perturb(style.perturb_magnitude)?;
                }
            }
            let pred = &session.predicates()[step as usize];
            let action = noisy_expert_action(session.world(), pred, style.epsilon, &mut rng);
            for f in session.apply(Command::HumanAction { action })? {
                records.push(LogRecord::Frame(f));
            }
            records.extend(session.drain_events().into_iter().filter_map(|e| event_record(0, e)));
        }
    }
    session.reset();
    records.extend(session.drain_events().into_iter().filter_map(|e| event_record(0, e)));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub method: Method,
    /// Cumulative trajectories collected, warmup included.
    pub trajectories: usize,
    /// Cumulative policy training frames (human-controlled frames).
    pub frames: usize,
    /// Cumulative logged frames in every mode.
    pub collected_frames: usize,
    pub mean_score: f64,
    pub std: f64,
    pub success_rate: f64,
    pub scores: Vec<f64>,
    /// Intervention rate of this round's collection.
    pub intervention_rate: f64,
    pub strategy: Option<String>,
    pub policy_version: u32,
    pub sentinel_version: u32,
    /// Validator violations in this round's log.
    pub log_violations: usize,
    /// Trainset frames whose actor is not Human.
    pub non_human_train_frames: usize,
    pub fleet: Option<FleetMetrics>,
}

/// Dataset and models between rounds.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub store: TrajectoryStore,
    pub cloner: ClonerModel,
    pub sentinel: Arc<SentinelModel>,
    pub reports: Vec<RoundReport>,
}

impl ExperimentState {
    pub fn policy(&self) -> Arc<PolicyModel> {
        Arc::new(PolicyModel::Cloner(self.cloner.clone()))
    }

    pub fn last(&self) -> &RoundReport {
        self.reports.last().expect("warmup report")
    }
}

fn non_human_train_frames(store: &TrajectoryStore) -> usize {
    store
        .frames()
        .filter(|f| f.mode == Mode::Intervention && f.actor != crate::domain::Actor::Human)
        .count()
}

fn train_frames(store: &TrajectoryStore) -> usize {
    store
        .frames()
        .filter(|f| f.mode == Mode::Intervention && f.actor == crate::domain::Actor::Human)
        .count()
}

fn evaluate_state(config: &ExperimentConfig, cloner: &ClonerModel) -> Result<Evaluation> {
    evaluate_with_cap(
        &Arc::new(PolicyModel::Cloner(cloner.clone())),
        &config.task,
        config.eval_trials,
        config.eval_seed(),
        config.episode_tick_cap,
    )
}

struct RoundInput {
    method: Method,
    records: Vec<LogRecord>,
    trajectories: usize,
    strategy: Option<Strategy>,
    fleet: Option<FleetMetrics>,
}

fn finish_round(config: &ExperimentConfig, state: ExperimentState, input: RoundInput) -> Result<ExperimentState> {
    let log_violations = validate(&input.records, ValidateOptions::default()).violations.len();
    let intervention_rate = match &input.fleet {
        Some(m) => m.intervention_rate,
        None => {
            let frames: Vec<_> = input
                .records
                .iter()
                .filter_map(|r| match r {
                    LogRecord::Frame(f) => Some(f.mode),
                    _ => None,
                })
                .collect();
            let human = frames.iter().filter(|m| matches!(m, Mode::Intervention | Mode::Rewind)).count();
            human as f64 / frames.len().max(1) as f64
        }
    };
    let round = state.reports.len() as u32;
    let store = state.store.aggregate(input.records)?;
    let cloner = state.cloner.retrain(store.extract_policy_trainset())?;
    let sentinel = Arc::new(state.sentinel.retrain(&store.extract_sentinel_trainset()?)?);
    let eval = evaluate_state(config, &cloner)?;
    let mut reports = state.reports;
    let prev = reports.last().map_or(0, |r| r.trajectories);
    reports.push(RoundReport {
        round,
        method: input.method,
        trajectories: prev + input.trajectories,
        frames: train_frames(&store),
        collected_frames: store.frame_count(),
        mean_score: eval.mean,
        std: eval.std,
        success_rate: eval.success_rate,
        scores: eval.scores,
        intervention_rate,
        strategy: input.strategy.map(|s| s.to_string()),
        policy_version: cloner.version(),
        sentinel_version: sentinel.version,
        log_violations,
        non_human_train_frames: non_human_train_frames(&store),
        fleet: input.fleet,
    });
    Ok(ExperimentState {
        store,
        cloner,
        sentinel,
        reports,
    })
}

/// D_0: noisy-expert teleoperation, the initial cloner and sentinel, and the
/// round-0 evaluation.
pub fn run_warmup(config: &ExperimentConfig) -> Result<ExperimentState> {
    config.check()?;
    let records = collect_demonstrations(
        &config.task,
        config.warmup_trajectories,
        DemoStyle {
            epsilon: config.epsilon_passive,
            perturb_prob: 0.0,
            perturb_magnitude: 1,
        },
        derive_seed(config.seed, WARMUP_STREAM),
        "warmup",
        config.episode_tick_cap,
    )?;
    let log_violations = validate(&records, ValidateOptions::default()).violations.len();
    let mut store = TrajectoryStore::new();
    for r in records {
        store.append(r)?;
    }
    let cloner = train_cloner(store.extract_policy_trainset(), config.cloner_k)?;
    let sentinel = Arc::new(train_sentinel(&store.extract_sentinel_trainset()?)?);
    let eval = evaluate_state(config, &cloner)?;
    let report = RoundReport {
        round: 0,
        method: config.method,
        trajectories: config.warmup_trajectories,
        frames: train_frames(&store),
        collected_frames: store.frame_count(),
        mean_score: eval.mean,
        std: eval.std,
        success_rate: eval.success_rate,
        scores: eval.scores,
        intervention_rate: 1.0,
        strategy: None,
        policy_version: cloner.version(),
        sentinel_version: sentinel.version,
        log_violations,
        non_human_train_frames: non_human_train_frames(&store),
        fleet: None,
    };
    Ok(ExperimentState {
        store,
        cloner,
        sentinel,
        reports: vec![report],
    })
}

/// Deploys the current cloner in a fleet with the sentinel and a scripted
/// operator until the round's episodes are done, then retrains.
pub fn run_round_gcent(state: ExperimentState, config: &ExperimentConfig) -> Result<ExperimentState> {
    let strategy = config.strategy.resolve(state.last().success_rate);
    run_round_gcent_with(state, config, None, strategy)
}

/// GCENT round deploying `deployed` (the current cloner when `None`) under
/// a fixed correction strategy.
pub fn run_round_gcent_with(
    state: ExperimentState,
    config: &ExperimentConfig,
    deployed: Option<Arc<PolicyModel>>,
    strategy: Strategy,
) -> Result<ExperimentState> {
    let round = state.reports.len() as u64;
    let policy = deployed.unwrap_or_else(|| state.policy());
    let mut fc = FleetConfig::new(config.n_robots, config.task.clone(), policy, derive_seed(config.seed, ROUND_STREAM + round));
    fc.sentinel = SentinelConfig::new(config.t_max, config.sentinel)?.with_model(state.sentinel.clone());
    fc.operator = Some(OperatorConfig::new(config.latency_min, config.latency_max, strategy)?);
    fc.episode_budget = Some(config.trajectories_per_round);
    fc.episode_tick_cap = config.episode_tick_cap;
    fc.max_ticks = (config.trajectories_per_round as u64 + 1) * config.episode_tick_cap * 4;
    fc.human_gated = config.human_gated;
    fc.episode_prefix = format!("gcent{round}");
    let log = run_fleet(fc)?;
    let metrics = log.metrics()?;
    finish_round(
        config,
        state,
        RoundInput {
            method: Method::Gcent,
            records: log.records,
            trajectories: config.trajectories_per_round,
            strategy: Some(strategy),
            fleet: Some(metrics),
        },
    )
}

fn run_round_demos(state: ExperimentState, config: &ExperimentConfig, method: Method, style: DemoStyle) -> Result<ExperimentState> {
    let round = state.reports.len() as u64;
    let records = collect_demonstrations(
        &config.task,
        config.trajectories_per_round,
        style,
        derive_seed(config.seed, ROUND_STREAM + round),
        &format!("{method}{round}"),
        config.episode_tick_cap,
    )?;
    finish_round(
        config,
        state,
        RoundInput {
            method,
            records,
            trajectories: config.trajectories_per_round,
            strategy: None,
            fleet: None,
        },
    )
}

/// Another batch of noisy-expert demonstrations; every frame is trained on.
pub fn run_round_passive(state: ExperimentState, config: &ExperimentConfig) -> Result<ExperimentState> {
    let style = DemoStyle {
        epsilon: config.epsilon_passive,
        perturb_prob: 0.0,
        perturb_magnitude: 1,
    };
    run_round_demos(state, config, Method::Passive, style)
}

/// Expert demonstrations with objects displaced at step starts.
pub fn run_round_adversarial(state: ExperimentState, config: &ExperimentConfig) -> Result<ExperimentState> {
    let style = DemoStyle {
        epsilon: 0.0,
        perturb_prob: config.perturb_prob,
        perturb_magnitude: config.perturb_magnitude,
    };
    run_round_demos(state, config, Method::Adversarial, style)
}

pub fn run_round(state: ExperimentState, config: &ExperimentConfig) -> Result<ExperimentState> {
    match config.method {
        Method::Passive => run_round_passive(state, config),
        Method::Adversarial => run_round_adversarial(state, config),
        Method::Gcent => run_round_gcent(state, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub trajectories: usize,
    pub frames: usize,
    pub mean_score: f64,
    pub std: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub rounds: Vec<RoundSummary>,
    /// Training frames when the mean score first reached the stop score.
    pub frames_to_threshold: Option<usize>,
}

impl MethodReport {
    pub fn from_rounds(method: Method, reports: &[RoundReport], stop_score: f64) -> Self {
        MethodReport {
            method,
            rounds: reports
                .iter()
                .map(|r| RoundSummary {
                    round: r.round,
                    trajectories: r.trajectories,
                    frames: r.frames,
                    mean_score: r.mean_score,
                    std: r.std,
                    intervention_rate: r.intervention_rate,
                })
                .collect(),
            frames_to_threshold: reports.iter().find(|r| r.mean_score >= stop_score).map(|r| r.frames),
        }
    }

    /// Frames at the first round attaining this method's best score.
    pub fn frames_to_best(&self) -> Option<(f64, usize)> {
        let best = self.rounds.iter().map(|r| r.mean_score).fold(f64::NEG_INFINITY, f64::max);
        self.rounds.iter().find(|r| r.mean_score >= best).map(|r| (best, r.frames))
    }
}

/// Warmup plus `max_rounds` rounds of `config.method`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentState> {
    let state = run_warmup(config)?;
    continue_experiment(state, config)
}

fn continue_experiment(mut state: ExperimentState, config: &ExperimentConfig) -> Result<ExperimentState> {
    for _ in 0..config.max_rounds {
        state = run_round(state, config)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub task: String,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

impl ComparisonReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Runs all three methods from one shared warmup under equal budgets.
/// `config.method` is ignored.
pub fn compare_methods(config: &ExperimentConfig) -> Result<ComparisonReport> {
    compare_methods_with(config, |_, _| {})
}

/// Like `compare_methods`, handing each finished method's full round
/// reports to `inspect` before its dataset is dropped.
pub fn compare_methods_with(
    config: &ExperimentConfig,
    mut inspect: impl FnMut(Method, &[RoundReport]),
) -> Result<ComparisonReport> {
    let warm = run_warmup(config)?;
    let mut methods = Vec::new();
    for method in Method::ALL {
        let cfg = ExperimentConfig {
            method,
            ..config.clone()
        };
        let mut state = warm.clone();
        for r in &mut state.reports {
            r.method = method;
        }
        let state = continue_experiment(state, &cfg)?;
        inspect(method, &state.reports);
        methods.push(MethodReport::from_rounds(method, &state.reports, config.stop_score));
    }
    Ok(ComparisonReport {
        task: config.task.name.clone(),
        seed: config.seed,
        methods,
    })
}

/// A start policy for a strategy arm: the cloner trained on the first
/// `demos` warmup trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub target: f64,
    pub demos: usize,
    pub success_rate: f64,
    pub mean_score: f64,
}

/// Picks the warmup prefix whose cloner's success rate is closest to
/// `target` (shortest prefix on ties).
pub fn start_from_success(
    config: &ExperimentConfig,
    target: f64,
    max_demos: usize,
) -> Result<(StartPoint, ExperimentState)> {
    if max_demos == 0 {
        return Err(Error::InvalidArgument("max_demos must be positive".into()));
    }
    let mut best: Option<(StartPoint, ExperimentState)> = None;
    for demos in 1..=max_demos {
        let cfg = ExperimentConfig {
            warmup_trajectories: demos,
            ..config.clone()
        };
        let state = run_warmup(&cfg)?;
        let r = state.last();
        let point = StartPoint {
            target,
            demos,
            success_rate: r.success_rate,
            mean_score: r.mean_score,
        };
        let closer = best
            .as_ref()
            .is_none_or(|(b, _)| (point.success_rate - target).abs() < (b.success_rate - target).abs());
        if closer {
            best = Some((point, state));
        }
    }
    Ok(best.expect("at least one prefix"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyArm {
    pub start: StartPoint,
    pub strategy: Strategy,
    pub report: RoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub seed: u64,
    pub arms: Vec<StrategyArm>,
}

impl StrategyComparison {
    pub fn arm(&self, target: f64, strategy: Strategy) -> Option<&StrategyArm> {
        self.arms
            .iter()
            .find(|a| a.start.target == target && a.strategy == strategy)
    }
}

/// Weak and strong start policies, each deployed for one GCENT round under
/// direct intervention and under full-buffer rewind.
pub fn compare_strategies(config: &ExperimentConfig) -> Result<StrategyComparison> {
    let cfg = ExperimentConfig {
        method: Method::Gcent,
        human_gated: config.human_gated.or(Some(ARM_LOOKAHEAD)),
        ..config.clone()
    };
    let mut arms = Vec::new();
    for target in [WEAK_START, STRONG_START] {
        let (start, state) = start_from_success(&cfg, target, MAX_START_DEMOS)?;
        for strategy in [Strategy::DirectIntervention, Strategy::Rewind(RewindDepth::FullBuffer)] {
            let after = run_round_gcent_with(state.clone(), &cfg, None, strategy)?;
            arms.push(StrategyArm {
                start: start.clone(),
                strategy,
                report: after.last().clone(),
            });
        }
    }
    Ok(StrategyComparison {
        seed: config.seed,
        arms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    pub fail_prob: f64,
    pub measured: f64,
}

/// Bisects the step-failure probability until the measured episode success
/// rate over `trials` evaluation episodes is within `tolerance` of `target`.
pub fn calibrate_step_failure(
    task: &TaskSpec,
    target: f64,
    trials: u32,
    tolerance: f64,
    seed: u64,
) -> Result<Calibration> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target success {target}")));
    }
    let measure = |p: f64| -> Result<f64> {
        let policy = Arc::new(PolicyModel::StepFailure { fail_prob: p });
        Ok(evaluate(&policy, task, trials, seed)?.success_rate)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = Calibration {
        target,
        fail_prob: 0.0,
        measured: measure(0.0)?,
    };
    for _ in 0..40 {
        if (best.measured - target).abs() <= tolerance {
            return Ok(best);
        }
        let mid = 0.5 * (lo + hi);
        let m = measure(mid)?;
        if (m - target).abs() < (best.measured - target).abs() {
            best = Calibration {
                target,
                fail_prob: mid,
                measured: m,
            };
        }
        // success falls as the failure probability rises
        if m > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.measured - target).abs() <= tolerance {
        Ok(best)
    } else {
        Err(Error::InvalidArgument(format!(
            "could not calibrate to success {target}: closest {:.3} at p={:.4}",
            best.measured, best.fail_prob
        )))
    }
}

/// A fleet run driven by a policy calibrated to a target success rate.
#[derive(Debug, Clone)]
pub struct CalibratedRun {
    pub calibration: Calibration,
    pub log: FleetLog,
    pub metrics: FleetMetrics,
}

/// Calibrates a step-failure policy to `target` success, then runs an
/// `n_robots` fleet with the oracle sentinel and a direct-intervention
/// operator for `ticks` ticks.
pub fn run_calibrated_fleet(
    task: &TaskSpec,
    n_robots: u32,
    target: f64,
    ticks: u64,
    seed: u64,
) -> Result<CalibratedRun> {
    let calibration = calibrate_step_failure(
        task,
        target,
        CALIBRATION_TRIALS,
        CALIBRATION_TOLERANCE,
        derive_seed(seed, CALIBRATION_STREAM),
    )?;
    let policy = Arc::new(PolicyModel::StepFailure {
        fail_prob: calibration.fail_prob,
    });
    let mut fc = FleetConfig::new(n_robots, task.clone(), policy, seed);
    fc.max_ticks = ticks;
    fc.episode_prefix = format!("s{}", (target * 100.0).round() as u32);
    let log = run_fleet(fc)?;
    let metrics = log.metrics()?;
    Ok(CalibratedRun {
        calibration,
        log,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Actor, TaskTemplate};
    use crate::gridworld::{observe, task_spec};

    fn stacking() -> TaskSpec {
        task_spec(TaskTemplate::Stacking)
    }

    fn small(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(stacking(), method, 3);
        c.warmup_trajectories = 4;
        c.trajectories_per_round = 3;
        c.max_rounds = 2;
        c.eval_trials = 4;
        c
    }

    #[test]
    fn expert_evaluates_perfectly() {
        for t in TaskTemplate::ALL {
            let e = evaluate(&Arc::new(PolicyModel::ScriptedExpert), &task_spec(t), 10, 5).unwrap();
            assert_eq!((e.mean, e.std, e.success_rate), (1.0, 0.0, 1.0));
        }
    }

    #[test]
    fn uniform_policy_scores_low() {
        let e = evaluate(&Arc::new(PolicyModel::Uniform), &stacking(), 10, 0).unwrap();
        assert!(e.mean < 0.2, "{}", e.mean);
    }

    #[test]
    fn evaluation_is_seeded() {
        let p = Arc::new(PolicyModel::StepFailure { fail_prob: 0.5 });
        let a = evaluate(&p, &stacking(), 10, 11).unwrap();
        assert_eq!(a, evaluate(&p, &stacking(), 10, 11).unwrap());
        assert!(evaluate(&p, &stacking(), 0, 11).is_err());
    }

    #[test]
    fn cycle_cutoff_matches_full_rollout() {
        let state = run_warmup(&small(Method::Passive)).unwrap();
        let p = state.policy();
        for seed in 0..5 {
            let fast = evaluate_with_cap(&p, &stacking(), 6, seed, 600).unwrap();
            let preds = gridworld::compile_task(&stacking()).unwrap();
            let mut slow = vec![];
            for i in 0..6u64 {
                let ws = derive_seed(seed, i);
                let mut w = gridworld::init_world(&stacking(), ws);
                let mut step = 0;
                for _ in 0..600 {
                    if step == preds.len() {
                        break;
                    }
                    let PolicyModel::Cloner(m) = &*p else { unreachable!() };
                    w = gridworld::step(&w, m.predict(&observe(&w, &stacking()).features));
                    while step < preds.len() && preds[step].holds(&w) {
                        step += 1;
                    }
                }
                slow.push(step as f64 / preds.len() as f64);
            }
            assert_eq!(fast.scores, slow);
        }
    }

    #[test]
    fn warmup_stores_human_episodes() {
        let mut c = small(Method::Passive);
        c.epsilon_passive = 0.0;
        c.cloner_k = 1;
        let state = run_warmup(&c).unwrap();
        assert_eq!(state.store.episode_ends().count(), 4);
        assert!(state.store.frames().all(|f| f.actor == Actor::Human && f.mode == Mode::Intervention));
        assert!(state.store.frames().all(|f| f.episode_id.starts_with("warmup-")));
        // k = 1 on noiseless demonstrations reproduces every stored action
        for f in state.store.frames() {
            assert_eq!(state.cloner.predict(&f.observation), f.action);
        }
        assert_eq!(state.last().log_violations, 0);
    }

    #[test]
    fn passive_rounds_grow_trainset_by_new_frames() {
        let c = small(Method::Passive);
        let s0 = run_warmup(&c).unwrap();
        let before = s0.store.extract_policy_trainset().len();
        let frames_before = s0.store.frame_count();
        let s1 = run_round_passive(s0, &c).unwrap();
        let delta = s1.store.frame_count() - frames_before;
        assert_eq!(s1.store.extract_policy_trainset().len(), before + delta);
        assert!(s1.store.frames().all(|f| f.mode == Mode::Intervention));
        assert_eq!(s1.last().trajectories, 7);
        assert_eq!(s1.last().intervention_rate, 1.0);
    }

    #[test]
    fn noiseless_passive_mostly_solves_stacking_after_one_round() {
        let mut c = ExperimentConfig::new(stacking(), Method::Passive, 0);
        c.epsilon_passive = 0.0;
        c.cloner_k = 1;
        let s = run_round_passive(run_warmup(&c).unwrap(), &c).unwrap();
        assert!(s.last().success_rate >= 0.7, "{:?}", s.last().scores);
    }

    #[test]
    fn adversarial_without_perturbation_equals_noiseless_passive() {
        let mut c = small(Method::Adversarial);
        c.perturb_prob = 0.0;
        let s = run_warmup(&c).unwrap();
        let a = run_round_adversarial(s.clone(), &c).unwrap();
        c.epsilon_passive = 0.0;
        let p = run_round_passive(s, &c).unwrap();
        let strip = |st: &ExperimentState| -> Vec<_> {
            st.store.frames().map(|f| (f.observation.clone(), f.action)).collect()
        };
        assert_eq!(strip(&a), strip(&p));
    }

    #[test]
    fn adversarial_demos_recover_and_show_discontinuities() {
        let task = stacking();
        let style = DemoStyle {
            epsilon: 0.0,
            perturb_prob: 1.0,
            perturb_magnitude: 2,
        };
        let records = collect_demonstrations(&task, 20, style, 9, "adv", 600).unwrap();
        let ends: Vec<_> = records
            .iter()
            .filter_map(|r| match r {
                LogRecord::EpisodeEnd(e) => Some(e.score),
                _ => None,
            })
            .collect();
        assert_eq!(ends.len(), 20);
        assert!(ends.iter().all(|s| s.is_success()));
        assert!(validate(&records, ValidateOptions::default()).is_clean());
        let strict = validate(&records, ValidateOptions { continuity: true });
        assert!(strict.count(crate::datastore::ViolationKind::Discontinuity) > 0);
        let calm = collect_demonstrations(&task, 20, DemoStyle { perturb_prob: 0.0, ..style }, 9, "adv", 600).unwrap();
        assert!(validate(&calm, ValidateOptions { continuity: true }).is_clean());
    }

    #[test]
    fn gcent_round_accounting() {
        let c = small(Method::Gcent);
        let s0 = run_warmup(&c).unwrap();
        let (pv, sv, frames0) = (s0.cloner.version(), s0.sentinel.version, s0.store.frame_count());
        let s1 = run_round_gcent(s0, &c).unwrap();
        let r = s1.last();
        assert_eq!(s1.cloner.version(), pv + 1);
        assert_eq!(s1.sentinel.version, sv + 1);
        assert_eq!(r.policy_version, pv + 1);
        let fleet = r.fleet.as_ref().unwrap();
        assert_eq!(s1.store.frame_count() - frames0, fleet.collected_frames as usize);
        assert_eq!(r.collected_frames, s1.store.frame_count());
        assert_eq!(r.log_violations, 0);
        assert_eq!(r.non_human_train_frames, 0);
        assert_eq!(s1.store.episode_ends().count(), 4 + 3);
    }

    #[test]
    fn perfect_policy_needs_no_intervention() {
        let c = small(Method::Gcent);
        let s0 = run_warmup(&c).unwrap();
        let s1 = run_round_gcent_with(s0, &c, Some(Arc::new(PolicyModel::ScriptedExpert)), Strategy::DirectIntervention).unwrap();
        assert_eq!(s1.last().intervention_rate, 0.0);
    }

    #[test]
    fn comparison_has_equal_budgets_and_serializes() {
        let report = compare_methods(&small(Method::Gcent)).unwrap();
        assert_eq!(report.methods.len(), 3);
        for m in &report.methods {
            let t: Vec<usize> = m.rounds.iter().map(|r| r.trajectories).collect();
            assert_eq!(t, vec![4, 7, 10]);
            assert!(m.rounds.windows(2).all(|w| w[0].frames <= w[1].frames));
        }
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        let m = &v["methods"][0];
        assert_eq!(m["method"], "passive");
        for key in ["round", "trajectories", "frames", "mean_score", "std", "intervention_rate"] {
            assert!(m["rounds"][0].get(key).is_some(), "{key}");
        }
        assert!(m.get("frames_to_threshold").is_some());
    }

    #[test]
    fn calibration_hits_target() {
        let c = calibrate_step_failure(&stacking(), 0.6, 200, 0.02, 1).unwrap();
        assert!((c.measured - 0.6).abs() <= 0.02);
        let again = evaluate(&Arc::new(PolicyModel::StepFailure { fail_prob: c.fail_prob }), &stacking(), 200, 1).unwrap();
        assert_eq!(again.success_rate, c.measured);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("dagger".parse::<Method>().is_err());
    }

    #[test]
    fn start_point_is_the_closest_prefix() {
        let c = small(Method::Gcent);
        assert!(start_from_success(&c, 0.5, 0).is_err());
        let (p, state) = start_from_success(&c, 0.0, 6).unwrap();
        assert!(p.demos >= 1 && p.demos <= 6);
        assert_eq!(state.store.episode_ends().count(), p.demos);
        assert_eq!(state.last().success_rate, p.success_rate);
        for demos in 1..p.demos {
            let cfg = ExperimentConfig {
                warmup_trajectories: demos,
                ..c.clone()
            };
            // an earlier prefix would have been picked on a tie
            assert!(run_warmup(&cfg).unwrap().last().success_rate > p.success_rate);
        }
    }

    #[test]
    fn calibrated_fleet_is_calibrated_and_clean() {
        let run = run_calibrated_fleet(&stacking(), 2, 0.6, 2_000, 3).unwrap();
        assert!((run.calibration.measured - 0.6).abs() <= CALIBRATION_TOLERANCE);
        assert_eq!(run.log.ticks, 2_000);
        assert!(validate(&run.log.records, ValidateOptions::default()).is_clean());
        assert!(run.log.max_concurrent_control <= 1);
    }
}
