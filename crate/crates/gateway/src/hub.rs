//! The fleet loop. Owns the fleet and every connection's outbound queue;
//! connections only ever hand it lines.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::time::Duration;

use gcent_core::domain::RobotId;
use gcent_core::fleet::Fleet;
use gcent_core::session::Command;
use tokio::sync::mpsc;
use tokio::time::{Instant, MissedTickBehavior};

use crate::protocol::{parse_client_line, parse_error, ClientMessage, ServerMessage, PROTOCOL_VERSION};

pub type ConnId = u64;

/// Outbound lines buffered per connection before it is dropped as too slow.
pub const OUTBOUND_CAPACITY: usize = 4096;

/// Fastest free-run rate honoured; larger requests are clamped.
pub const MAX_TICKS_PER_SECOND: f64 = 1000.0;

struct Conn {
    tx: mpsc::Sender<String>,
    subscribed: BTreeSet<RobotId>,
    seen: HashSet<u64>,
}

struct Queued {
    conn: ConnId,
    cmd_id: u64,
    command: Command,
}

pub enum Inbound {
    Connect { conn: ConnId, tx: mpsc::Sender<String> },
    Line { conn: ConnId, line: String },
    Disconnect { conn: ConnId },
}

pub struct Hub {
    fleet: Fleet,
    conns: BTreeMap<ConnId, Conn>,
    queues: Vec<VecDeque<Queued>>,
    ticks_per_second: f64,
}

impl Hub {
    pub fn new(fleet: Fleet, ticks_per_second: f64) -> Self {
        let n = fleet.sessions().len();
        Hub {
            fleet,
            conns: BTreeMap::new(),
            queues: (0..n).map(|_| VecDeque::new()).collect(),
            ticks_per_second: ticks_per_second.clamp(0.0, MAX_TICKS_PER_SECOND),
        }
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn into_fleet(self) -> Fleet {
        self.fleet
    }

    pub fn ticks_per_second(&self) -> f64 {
        self.ticks_per_second
    }

    /// Tick period in free-run mode; `None` in lockstep.
    pub fn period(&self) -> Option<Duration> {
        (self.ticks_per_second > 0.0).then(|| Duration::from_secs_f64(1.0 / self.ticks_per_second))
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    pub fn connect(&mut self, conn: ConnId, tx: mpsc::Sender<String>) {
        self.conns.insert(
            conn,
            Conn {
                tx,
                subscribed: BTreeSet::new(),
                seen: HashSet::new(),
            },
        );
        let hello = ServerMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            robots: self.fleet.sessions().len() as u32,
            task: self.fleet.config().task.name.clone(),
        };
        self.send(conn, &hello.to_line());
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        for q in &mut self.queues {
            q.retain(|c| c.conn != conn);
        }
    }

    pub fn dispatch(&mut self, inbound: Inbound) {
        match inbound {
            Inbound::Connect { conn, tx } => self.connect(conn, tx),
            Inbound::Line { conn, line } => {
                self.handle_line(conn, &line);
                self.drain_commands();
            }
            Inbound::Disconnect { conn } => self.disconnect(conn),
        }
    }

    pub fn handle_line(&mut self, conn: ConnId, line: &str) {
        match parse_client_line(line) {
            Ok(msg) => self.handle(conn, msg),
            Err(cmd_id) => self.send(conn, &parse_error(cmd_id).to_line()),
        }
    }

    pub fn handle(&mut self, conn: ConnId, msg: ClientMessage) {
        if !self.conns.contains_key(&conn) {
            return;
        }
        match msg {
            ClientMessage::Cmd {
                cmd_id,
                robot_id,
                command,
            } => {
                let c = self.conns.get_mut(&conn).expect("checked");
                let reason = if !c.seen.insert(cmd_id) {
                    Some(format!("duplicate cmd_id {cmd_id}"))
                } else if robot_id as usize >= self.queues.len() {
                    Some(format!("unknown robot {robot_id}"))
                } else {
                    None
                };
                match reason {
                    Some(reason) => self.reply_error(conn, Some(cmd_id), reason),
                    None => self.queues[robot_id as usize].push_back(Queued { conn, cmd_id, command }),
                }
            }
            ClientMessage::Subscribe { robot_ids } => {
                let n = self.queues.len();
                let (known, unknown): (Vec<RobotId>, Vec<RobotId>) =
                    robot_ids.into_iter().partition(|r| (*r as usize) < n);
                for r in unknown {
                    self.reply_error(conn, None, format!("unknown robot {r}"));
                }
                let subscribed: BTreeSet<RobotId> = known.into_iter().collect();
                let lines: Vec<String> = subscribed.iter().map(|r| self.state_message(*r).to_line()).collect();
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.subscribed = subscribed;
                }
                for line in lines {
                    self.send(conn, &line);
                }
            }
            ClientMessage::Speed { ticks_per_second } => {
                if ticks_per_second.is_finite() && ticks_per_second >= 0.0 {
                    self.ticks_per_second = ticks_per_second.min(MAX_TICKS_PER_SECOND);
                } else {
                    self.reply_error(conn, None, format!("invalid speed {ticks_per_second}"));
                }
            }
            ClientMessage::Step { ticks } => {
                for _ in 0..ticks {
                    self.tick();
                }
            }
        }
    }

    /// Applies every queued command, oldest first within each robot.
    pub fn drain_commands(&mut self) {
        for r in 0..self.queues.len() {
            while let Some(q) = self.queues[r].pop_front() {
                let reply = match self.fleet.apply(r as RobotId, q.command) {
                    Ok(_) => ServerMessage::Ack { cmd_id: q.cmd_id },
                    Err(e) => ServerMessage::Error {
                        cmd_id: Some(q.cmd_id),
                        reason: e.to_string(),
                    },
                };
                self.send(q.conn, &reply.to_line());
            }
        }
    }

    /// One fleet tick: requests raised this tick, then one state per robot
    /// to its subscribers.
    pub fn tick(&mut self) {
        let outcome = match self.fleet.step() {
            Ok(o) => o,
            Err(e) => {
                tracing::warn!("fleet tick failed: {e}");
                return;
            }
        };
        for req in outcome.requests {
            let line = ServerMessage::Request {
                robot_id: req.robot_id,
                request_tick: req.request_tick,
            }
            .to_line();
            self.broadcast(req.robot_id, &line);
        }
        for r in 0..self.queues.len() as RobotId {
            if self.conns.values().any(|c| c.subscribed.contains(&r)) {
                let line = self.state_message(r).to_line();
                self.broadcast(r, &line);
            }
        }
    }

    pub fn state_message(&self, robot: RobotId) -> ServerMessage {
        let s = self.fleet.session(robot).expect("known robot");
        let v = s.view();
        ServerMessage::State {
            robot_id: robot,
            tick: self.fleet.tick(),
            mode: v.mode,
            step_index: v.step_index,
            scene: s.world().clone(),
            buffer_len: v.buffer_len,
            sentinel_z: v.sentinel_z,
            score_so_far: v.score_so_far,
        }
    }

    fn reply_error(&mut self, conn: ConnId, cmd_id: Option<u64>, reason: String) {
        self.send(conn, &ServerMessage::Error { cmd_id, reason }.to_line());
    }

    fn broadcast(&mut self, robot: RobotId, line: &str) {
        let targets: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| c.subscribed.contains(&robot))
            .map(|(id, _)| *id)
            .collect();
        for id in targets {
            self.send(id, line);
        }
    }

    fn send(&mut self, conn: ConnId, line: &str) {
        let Some(c) = self.conns.get(&conn) else {
            return;
        };
        if let Err(e) = c.tx.try_send(line.to_string()) {
            // a full queue means the client stopped reading
            tracing::warn!("dropping connection {conn}: {e}");
            self.disconnect(conn);
        }
    }
}

/// Runs the hub until every inbound sender is gone or `stop` fires, then
/// hands the fleet back.
pub async fn run(
    mut hub: Hub,
    mut inbound: mpsc::Receiver<Inbound>,
    mut stop: tokio::sync::oneshot::Receiver<()>,
) -> Fleet {
    let mut period = hub.period();
    let mut ticker = make_ticker(period);
    loop {
        tokio::select! {
            biased;
            _ = &mut stop => break,
            msg = inbound.recv() => {
                let Some(msg) = msg else { break };
                hub.dispatch(msg);
                if hub.period() != period {
                    period = hub.period();
                    ticker = make_ticker(period);
                }
            }
            _ = tick_of(&mut ticker) => hub.tick(),
        }
    }
    hub.into_fleet()
}

fn make_ticker(period: Option<Duration>) -> Option<tokio::time::Interval> {
    period.map(|p| {
        let mut t = tokio::time::interval_at(Instant::now() + p, p);
        t.set_missed_tick_behavior(MissedTickBehavior::Delay);
        t
    })
}

async fn tick_of(ticker: &mut Option<tokio::time::Interval>) {
    match ticker {
        Some(t) => {
            t.tick().await;
        }
        None => std::future::pending().await,
    }
}
