use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use gcent_core::domain::{Mode, TaskTemplate};
use gcent_core::fleet::{Fleet, FleetConfig};
use gcent_core::gridworld::{task_spec, WorldState};
use gcent_core::policies::{expert_action, PolicyModel};
use gcent_core::sentinel::SentinelConfig;
use gcent_core::session::Command;
use gcent_gateway::{run_script, serve, ClientMessage, Gateway, GatewayConfig, ScriptedClient, ServerMessage, TimedCommand};
use tokio_tungstenite::tungstenite::Message;

fn fleet(n: u32, policy: PolicyModel, t_max: u32) -> Fleet {
    let mut cfg = FleetConfig::new(n, task_spec(TaskTemplate::Stacking), Arc::new(policy), 11);
    cfg.operator = None;
    cfg.sentinel = SentinelConfig::oracle(t_max);
    Fleet::new(cfg).unwrap()
}

async fn start(n: u32, policy: PolicyModel, t_max: u32) -> Gateway {
    serve(fleet(n, policy, t_max), GatewayConfig::local()).await.unwrap()
}

fn state_of(msg: &ServerMessage) -> (Mode, u32, &WorldState) {
    match msg {
        ServerMessage::State {
            mode, step_index, scene, ..
        } => (*mode, *step_index, scene),
        other => panic!("not a state: {other:?}"),
    }
}

#[tokio::test]
async fn takeover_is_acked_and_the_next_state_is_intervention() {
    let gw = start(2, PolicyModel::ScriptedExpert, 150).await;
    let mut c = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    assert_eq!(c.robots(), 2);
    c.lockstep().await.unwrap();
    c.subscribe(vec![1]).await.unwrap();
    c.step(3).await.unwrap();
    assert_eq!(c.command(1, Command::Takeover).await.unwrap(), ServerMessage::Ack { cmd_id: 1 });
    c.step(1).await.unwrap();
    assert_eq!(state_of(c.latest_state(1).unwrap()).0, Mode::Intervention);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn start_inference_while_in_inference_is_an_error() {
    let gw = start(1, PolicyModel::ScriptedExpert, 150).await;
    let mut c = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    match c.command(0, Command::StartInference).await.unwrap() {
        ServerMessage::Error { cmd_id, reason } => {
            assert_eq!(cmd_id, Some(1));
            assert!(reason.contains("illegal transition"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn unparseable_lines_get_parse_errors() {
    let gw = start(1, PolicyModel::ScriptedExpert, 150).await;
    let mut c = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    c.send_raw("{\"type\":\"cmd\",\"cmd_id\":4}").await.unwrap();
    assert_eq!(
        c.recv().await.unwrap(),
        ServerMessage::Error {
            cmd_id: Some(4),
            reason: "parse".into()
        }
    );
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn two_subscribers_receive_identical_streams() {
    let gw = start(3, PolicyModel::NoisyExpert { epsilon: 0.3 }, 20).await;
    let mut a = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    let mut b = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    a.lockstep().await.unwrap();
    a.subscribe_all().await.unwrap();
    b.subscribe_all().await.unwrap();
    let (mark_a, mark_b) = (a.transcript().len(), b.transcript().len());
    a.step(60).await.unwrap();
    // b never asked for ticks; it reads the same 60 ticks' worth of states
    for _ in 0..60 * 3 {
        while !matches!(b.recv().await.unwrap(), ServerMessage::State { .. }) {}
    }
    let tail = |t: &[ServerMessage], from: usize| -> Vec<ServerMessage> {
        t[from..].iter().filter(|m| !m.is_reply()).cloned().collect()
    };
    let (ta, tb) = (tail(a.transcript(), mark_a), tail(b.transcript(), mark_b));
    assert!(ta.len() >= 180);
    assert_eq!(ta[..tb.len()], tb[..]);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn empty_script_yields_hello_and_states_only() {
    let gw = start(2, PolicyModel::ScriptedExpert, 150).await;
    let t = run_script(gw.tcp_addr, &[], 10).await.unwrap();
    assert!(matches!(t[0], ServerMessage::Hello { .. }));
    assert_eq!(t.len(), 1 + 2 + 20);
    assert!(t[1..].iter().all(|m| matches!(m, ServerMessage::State { .. })));
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn transcripts_replay_identically() {
    let script = vec![
        TimedCommand {
            tick: 5,
            robot_id: 0,
            command: Command::Takeover,
        },
        TimedCommand {
            tick: 6,
            robot_id: 0,
            command: Command::BeginRewind,
        },
        TimedCommand {
            tick: 6,
            robot_id: 0,
            command: Command::RewindTo { k: 3 },
        },
        TimedCommand {
            tick: 8,
            robot_id: 0,
            command: Command::StartInference,
        },
        TimedCommand {
            tick: 9,
            robot_id: 1,
            command: Command::StartInference,
        },
    ];
    let mut runs = vec![];
    for _ in 0..2 {
        let gw = start(2, PolicyModel::NoisyExpert { epsilon: 0.5 }, 30).await;
        runs.push(run_script(gw.tcp_addr, &script, 40).await.unwrap());
        gw.shutdown().await.unwrap();
    }
    assert_eq!(runs[0], runs[1]);
    let replies: Vec<&ServerMessage> = runs[0].iter().filter(|m| m.is_reply()).collect();
    assert_eq!(replies.len(), script.len());
    assert!(matches!(replies[4], ServerMessage::Error { cmd_id: Some(5), .. }));
}

/// A failing robot raises a request; the operator takes over, rewinds ten
/// frames, corrects the current step by hand and hands control back.
#[tokio::test]
async fn rewind_and_correct_after_a_request() {
    let task = task_spec(TaskTemplate::Stacking);
    let gw = start(1, PolicyModel::StepFailure { fail_prob: 1.0 }, 20).await;
    let mut c = ScriptedClient::connect(gw.tcp_addr).await.unwrap();
    c.lockstep().await.unwrap();
    c.subscribe(vec![0]).await.unwrap();

    let mut requested = false;
    for _ in 0..200 {
        c.step(1).await.unwrap();
        if c.transcript().iter().any(|m| matches!(m, ServerMessage::Request { robot_id: 0, .. })) {
            requested = true;
            break;
        }
    }
    assert!(requested, "no intervention request");
    assert_eq!(state_of(c.latest_state(0).unwrap()).0, Mode::AwaitingIntervention);

    for cmd in [Command::Takeover, Command::BeginRewind, Command::RewindTo { k: 10 }] {
        assert!(matches!(c.command(0, cmd).await.unwrap(), ServerMessage::Ack { .. }));
    }
    c.step(1).await.unwrap();
    let (mode, step, _) = state_of(c.latest_state(0).unwrap());
    assert_eq!((mode, step), (Mode::Intervention, 0));

    for _ in 0..100 {
        let (_, step, scene) = state_of(c.latest_state(0).unwrap());
        if step >= 1 {
            break;
        }
        let action = expert_action(scene, &task, step).unwrap();
        assert!(matches!(
            c.command(0, Command::HumanAction { action }).await.unwrap(),
            ServerMessage::Ack { .. }
        ));
        c.step(1).await.unwrap();
    }
    assert!(matches!(c.command(0, Command::StartInference).await.unwrap(), ServerMessage::Ack { .. }));
    c.step(1).await.unwrap();
    let (mode, step, _) = state_of(c.latest_state(0).unwrap());
    assert_eq!(mode, Mode::Inference);
    assert!(step >= 1);

    let sent = c.transcript().iter().filter(|m| m.is_reply()).count() as u64;
    let mut ids: Vec<u64> = c
        .transcript()
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Ack { cmd_id } | ServerMessage::Error { cmd_id: Some(cmd_id), .. } => Some(*cmd_id),
            _ => None,
        })
        .collect();
    ids.dedup();
    assert_eq!(ids, (1..=sent).collect::<Vec<_>>(), "one reply per command");

    let fleet = gw.shutdown().await.unwrap();
    let log = fleet.into_log();
    assert!(log.counters.rewind_frames > 0);
    assert!(log.counters.intervention_frames > 0);
}

#[tokio::test]
async fn websocket_speaks_the_same_protocol() {
    let gw = start(1, PolicyModel::ScriptedExpert, 150).await;
    let url = format!("ws://{}/ws", gw.ws_addr.unwrap());
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();

    let mut next = async || -> ServerMessage {
        loop {
            match ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
                _ => continue,
            }
        }
    };
    assert!(matches!(next().await, ServerMessage::Hello { robots: 1, .. }));

    // several messages in one frame
    let frame = [
        ClientMessage::Speed { ticks_per_second: 0.0 }.to_line(),
        ClientMessage::Subscribe { robot_ids: vec![0] }.to_line(),
        ClientMessage::Step { ticks: 2 }.to_line(),
        ClientMessage::Cmd {
            cmd_id: 1,
            robot_id: 0,
            command: Command::Takeover,
        }
        .to_line(),
    ]
    .join("\n");
    ws.send(Message::Text(frame.into())).await.unwrap();

    let mut got = vec![];
    while got.len() < 4 {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            got.push(serde_json::from_str::<ServerMessage>(t.as_str()).unwrap());
        }
    }
    let ticks: Vec<u64> = got[..3]
        .iter()
        .map(|m| match m {
            ServerMessage::State { tick, .. } => *tick,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(ticks, [0, 1, 2]);
    assert_eq!(got[3], ServerMessage::Ack { cmd_id: 1 });
    gw.shutdown().await.unwrap();
}

#[test]
fn protocol_doc_examples_are_byte_exact() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol.md")).unwrap();
    let mut in_block = false;
    let mut checked = 0;
    for line in doc.lines() {
        if line.starts_with("```") {
            in_block = line == "```json";
            continue;
        }
        if !in_block {
            continue;
        }
        let again = match serde_json::from_str::<ClientMessage>(line) {
            Ok(m) => m.to_line(),
            Err(_) => serde_json::from_str::<ServerMessage>(line)
                .unwrap_or_else(|e| panic!("{line}: {e}"))
                .to_line(),
        };
        assert_eq!(again, line);
        checked += 1;
    }
    assert!(checked >= 15, "{checked}");
}
