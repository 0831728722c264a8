use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use gcent_core::datastore::{read_log, validate_file, write_log, LogRecord, ValidateOptions};
use gcent_core::domain::TaskTemplate;
use gcent_core::experiment::{
    calibrate_step_failure, compare_methods, evaluate, run_experiment, ComparisonReport, ExperimentConfig, Method,
    MethodReport, CALIBRATION_TOLERANCE, CALIBRATION_TRIALS, EVAL_TRIALS,
};
use gcent_core::fleet::{metrics_from_frames, run_fleet, FleetConfig, FleetMetrics};
use gcent_core::gridworld::task_spec;
use gcent_core::operator::{OperatorConfig, OperatorSpec, StrategyChoice};
use gcent_core::policies::PolicyModel;
use gcent_core::sentinel::{SentinelConfig, SentinelSpec, DEFAULT_T_MAX};
use gcent_gateway::{serve, GatewayConfig};

mod policy;

use policy::parse_policy;

#[derive(Parser)]
#[command(name = "gcent", version, about = "Rewind-and-refine data collection on a simulated gridworld fleet")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a learning experiment and print per-round scores.
    Run(RunArgs),
    /// Run a fleet with a scripted operator and write its log.
    Fleet(FleetArgs),
    /// Recompute fleet metrics from a log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
    },
    /// Check a log for ordering, transition and actor violations.
    Validate {
        #[arg(long)]
        log: PathBuf,
        /// Also flag object moves the previous action cannot explain.
        #[arg(long)]
        continuity: bool,
    },
    /// Print a log's frames, paced at `speed` ticks per second.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// 0 prints without delay.
        #[arg(long, default_value_t = 10.0)]
        speed: f64,
        #[arg(long)]
        robot: Option<u32>,
    },
    /// Serve a live fleet to operator clients.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "stacking")]
    task: TaskTemplate,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `oracle[:fpr=F,fnr=F]` or `learned[:threshold=T]`.
    #[arg(long, default_value = "oracle")]
    sentinel: SentinelSpec,
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    t_max: u32,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// passive, adversarial, gcent, or all (shared warmup, equal budgets).
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value_t = 5)]
    rounds: u32,
    /// Robots per GCENT collection fleet.
    #[arg(long, default_value_t = 1)]
    robots: u32,
    /// `scripted:direct`, `scripted:rewind[:k=N|k=full]` or `scripted:auto`.
    #[arg(long, default_value = "scripted:auto")]
    operator: OperatorSpec,
    /// Lookahead for the human-gated monitor; off when absent.
    #[arg(long)]
    human_gated: Option<u32>,
    #[arg(long, default_value_t = 5)]
    cloner_k: usize,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the final cloner (single method only).
    #[arg(long)]
    save_policy: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["policy", "policy_success"])))]
struct FleetArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    robots: u32,
    #[arg(long, default_value_t = 10_000)]
    ticks: u64,
    /// expert, noisy:EPS, step_failure:P, uniform or cloner:PATH.
    #[arg(long)]
    policy: Option<String>,
    /// Calibrate a step-failure policy to this episode success rate.
    #[arg(long)]
    policy_success: Option<f64>,
    #[arg(long, default_value = "scripted:direct")]
    operator: OperatorSpec,
    #[arg(long)]
    human_gated: Option<u32>,
    #[arg(long)]
    log: PathBuf,
    /// Write the metrics report here as well as to stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// WebSocket port for `/ws`; 0 disables it.
    #[arg(long, default_value_t = 7879)]
    ws_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 4)]
    robots: u32,
    #[arg(long, default_value = "noisy:0.3")]
    policy: String,
    /// Initial ticks per second; 0 starts in lockstep.
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    /// Write the session log here on shutdown.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Fleet(args) => cmd_fleet(args),
        Cmd::Metrics { log } => {
            let m = log_metrics(&log)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Cmd::Validate { log, continuity } => cmd_validate(&log, continuity),
        Cmd::Replay { log, speed, robot } => cmd_replay(&log, speed, robot),
        Cmd::Serve(args) => cmd_serve(args),
    }
}

fn scripted(spec: OperatorSpec) -> Result<StrategyChoice> {
    match spec {
        OperatorSpec::Scripted(choice) => Ok(choice),
        OperatorSpec::Human => bail!("the human operator is only available through `gcent serve`"),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let c = &args.common;
    let mut cfg = ExperimentConfig::new(task_spec(c.task), Method::Gcent, c.seed);
    cfg.max_rounds = args.rounds;
    cfg.n_robots = args.robots;
    cfg.sentinel = c.sentinel;
    cfg.t_max = c.t_max;
    cfg.strategy = scripted(args.operator)?;
    cfg.human_gated = args.human_gated;
    cfg.cloner_k = args.cloner_k;

    let report = if args.method == "all" {
        if args.save_policy.is_some() {
            bail!("--save-policy needs a single --method");
        }
        compare_methods(&cfg)?
    } else {
        cfg.method = args.method.parse()?;
        let state = run_experiment(&cfg)?;
        if let Some(path) = &args.save_policy {
            std::fs::write(path, serde_json::to_string(&state.cloner)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        ComparisonReport {
            task: cfg.task.name.clone(),
            seed: cfg.seed,
            methods: vec![MethodReport::from_rounds(cfg.method, &state.reports, cfg.stop_score)],
        }
    };

    println!("{:<12} {:>5} {:>6} {:>7} {:>6} {:>6} {:>6}", "method", "round", "trajs", "frames", "mean", "std", "ir");
    for m in &report.methods {
        for r in &m.rounds {
            println!(
                "{:<12} {:>5} {:>6} {:>7} {:>6.3} {:>6.3} {:>6.3}",
                m.method.as_str(), r.round, r.trajectories, r.frames, r.mean_score, r.std, r.intervention_rate
            );
        }
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_fleet(args: FleetArgs) -> Result<()> {
    let c = &args.common;
    let task = task_spec(c.task);
    let (policy, measured, prefix) = match (&args.policy, args.policy_success) {
        (_, Some(target)) => {
            let cal = calibrate_step_failure(&task, target, CALIBRATION_TRIALS, CALIBRATION_TOLERANCE, c.seed)?;
            eprintln!(
                "calibrated fail_prob {:.4} for success {:.2} (measured {:.3})",
                cal.fail_prob, target, cal.measured
            );
            let policy = PolicyModel::StepFailure { fail_prob: cal.fail_prob };
            (policy, cal.measured, format!("s{}", (target * 100.0).round() as u32))
        }
        (Some(spec), None) => {
            let policy = Arc::new(parse_policy(spec)?);
            let measured = evaluate(&policy, &task, EVAL_TRIALS, c.seed)?.success_rate;
            (Arc::unwrap_or_clone(policy), measured, "f".to_string())
        }
        (None, None) => unreachable!("clap requires a policy source"),
    };
    let strategy = scripted(args.operator)?.resolve(measured);

    let mut fc = FleetConfig::new(args.robots, task, Arc::new(policy), c.seed);
    fc.sentinel = SentinelConfig::new(c.t_max, c.sentinel)?;
    fc.operator = Some(OperatorConfig {
        strategy,
        ..OperatorConfig::default()
    });
    fc.max_ticks = args.ticks;
    fc.human_gated = args.human_gated;
    fc.episode_prefix = prefix;
    let log = run_fleet(fc)?;
    let metrics = log.metrics()?;
    write_log(&args.log, &log.records).with_context(|| format!("writing {}", args.log.display()))?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(path) = &args.metrics {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn log_metrics(path: &Path) -> Result<FleetMetrics> {
    let records = read_log(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(LogRecord::Header(h)) = records.first() else {
        bail!("{}: missing header", path.display());
    };
    let frames = records.iter().filter_map(|r| match r {
        LogRecord::Frame(f) => Some(f),
        _ => None,
    });
    Ok(metrics_from_frames(h.robot_ids.len() as u32, frames)?)
}

fn cmd_validate(path: &Path, continuity: bool) -> Result<()> {
    let report = validate_file(path, ValidateOptions { continuity })
        .with_context(|| format!("reading {}", path.display()))?;
    println!(
        "{} records, {} frames, {} violations",
        report.records,
        report.frames,
        report.violations.len()
    );
    for v in report.violations.iter().take(20) {
        println!("  record {}: {:?}: {}", v.record, v.kind, v.detail);
    }
    if !report.is_clean() {
        bail!("log has violations");
    }
    Ok(())
}

fn cmd_replay(path: &Path, speed: f64, robot: Option<u32>) -> Result<()> {
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("speed must be a non-negative number");
    }
    let records = read_log(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::io::stdout().lock();
    let mut last_tick = None;
    for r in &records {
        let f = match r {
            LogRecord::Frame(f) if robot.is_none_or(|id| id == f.robot_id) => f,
            _ => continue,
        };
        if speed > 0.0 && last_tick.is_some_and(|t| t != f.tick) {
            std::thread::sleep(Duration::from_secs_f64(1.0 / speed));
        }
        last_tick = Some(f.tick);
        let line = writeln!(
            out,
            "{:>6} r{} {:<14} step {} {:?} {:?} {:?}",
            f.tick, f.robot_id, f.episode_id, f.step_index, f.mode, f.actor, f.action
        );
        if line.is_err() {
            // reader went away
            break;
        }
        if speed > 0.0 {
            out.flush()?;
        }
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let c = &args.common;
    let mut fc = FleetConfig::new(args.robots, task_spec(c.task), Arc::new(parse_policy(&args.policy)?), c.seed);
    fc.sentinel = SentinelConfig::new(c.t_max, c.sentinel)?;
    fc.operator = None;
    fc.episode_prefix = "live".into();
    let fleet = gcent_core::fleet::Fleet::new(fc)?;
    let config = GatewayConfig {
        tcp_addr: SocketAddr::new(args.host, args.port),
        ws_addr: (args.ws_port != 0).then(|| SocketAddr::new(args.host, args.ws_port)),
        ticks_per_second: args.speed,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let gw = serve(fleet, config).await?;
        println!("tcp {}", gw.tcp_addr);
        if let Some(ws) = gw.ws_addr {
            println!("ws  ws://{ws}/ws");
        }
        tokio::signal::ctrl_c().await?;
        let fleet = gw.shutdown().await?;
        if let Some(path) = &args.log {
            let log = fleet.into_log();
            write_log(path, &log.records).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} records to {}", log.records.len(), path.display());
        }
        Ok(())
    })
}
