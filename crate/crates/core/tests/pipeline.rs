use std::sync::Arc;

use gcent_core::datastore::{read_log, validate, write_log, LogRecord, ValidateOptions};
use gcent_core::domain::{Actor, Mode, TaskTemplate};
use gcent_core::fleet::{metrics_from_frames, run_fleet, FleetConfig};
use gcent_core::gridworld::task_spec;
use gcent_core::operator::{OperatorConfig, RewindDepth, Strategy};
use gcent_core::policies::{expert_action, PolicyModel};
use gcent_core::sentinel::SentinelConfig;
use gcent_core::session::{Command, Session, SessionConfig};

#[test]
fn fleet_log_survives_disk_and_validates() {
    for strategy in [Strategy::DirectIntervention, Strategy::Rewind(RewindDepth::FullBuffer)] {
        let mut cfg = FleetConfig::new(
            3,
            task_spec(TaskTemplate::Stacking),
            Arc::new(PolicyModel::StepFailure { fail_prob: 0.3 }),
            5,
        );
        cfg.max_ticks = 1500;
        cfg.sentinel = SentinelConfig::oracle(40);
        cfg.operator = Some(OperatorConfig {
            strategy,
            ..OperatorConfig::default()
        });
        let log = run_fleet(cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fleet.gcent.jsonl");
        write_log(&path, &log.records).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back, log.records);

        let report = validate(&back, ValidateOptions { continuity: true });
        assert!(report.is_clean(), "{strategy:?}: {:?}", &report.violations[..report.violations.len().min(3)]);
        let frames = back.iter().filter_map(|r| match r {
            LogRecord::Frame(f) => Some(f),
            _ => None,
        });
        assert_eq!(metrics_from_frames(3, frames).unwrap(), log.metrics().unwrap());
        assert!(log.counters.intervention_frames > 0);
        if matches!(strategy, Strategy::Rewind(_)) {
            assert!(log.counters.rewind_frames > 0);
        } else {
            assert_eq!(log.counters.rewind_frames, 0);
        }
    }
}

#[test]
fn operator_rewinds_then_finishes_the_episode_by_hand() {
    let task = task_spec(TaskTemplate::Stacking);
    let mut s = Session::new(SessionConfig::new(0, task.clone(), Arc::new(PolicyModel::Uniform), 9)).unwrap();
    for _ in 0..12 {
        s.tick();
    }
    s.apply(Command::BeginRewind).unwrap();
    let rewound = s.apply(Command::RewindTo { k: 12 }).unwrap();
    assert_eq!(rewound.len(), 12);
    assert!(rewound.iter().all(|f| f.mode == Mode::Rewind && f.actor == Actor::Human));
    assert_eq!(rewound.last().unwrap().tick, 0);
    assert_eq!(s.mode(), Mode::Intervention);

    let mut human = 0;
    while !s.is_complete() {
        let action = expert_action(s.world(), &task, s.step_index()).unwrap();
        let frames = s.apply(Command::HumanAction { action }).unwrap();
        assert_eq!(frames[0].actor, Actor::Human);
        human += 1;
        assert!(human < 600, "expert failed to finish");
    }
    assert!(s.score().is_success());
    assert!(s.apply(Command::HumanAction { action: gcent_core::domain::Action::Up }).is_err());
    s.apply(Command::Reset).unwrap();
    assert_eq!((s.mode(), s.step_index()), (Mode::Inference, 0));
}
