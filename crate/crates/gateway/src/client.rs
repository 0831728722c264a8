//! A scripted operator client over TCP, used by tests and `gcent serve`
//! smoke checks. Drives the gateway in lockstep and records every message
//! it receives.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use gcent_core::domain::RobotId;
use gcent_core::session::Command;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use crate::protocol::{ClientMessage, ServerMessage};
use crate::{Error, Result};

pub const RECV_TIMEOUT: Duration = Duration::from_secs(10);

pub struct ScriptedClient {
    reader: Lines<BufReader<OwnedReadHalf>>,
    writer: OwnedWriteHalf,
    transcript: Vec<ServerMessage>,
    robots: u32,
    subscribed: usize,
    next_cmd_id: u64,
    latest: BTreeMap<RobotId, ServerMessage>,
}

impl ScriptedClient {
    /// Connects and waits for `hello`.
    pub async fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (read, writer) = stream.into_split();
        let mut c = ScriptedClient {
            reader: BufReader::new(read).lines(),
            writer,
            transcript: vec![],
            robots: 0,
            subscribed: 0,
            next_cmd_id: 1,
            latest: BTreeMap::new(),
        };
        match c.recv().await? {
            ServerMessage::Hello { robots, .. } => c.robots = robots,
            other => return Err(Error::Unexpected(other.to_line())),
        }
        Ok(c)
    }

    pub fn robots(&self) -> u32 {
        self.robots
    }

    pub fn transcript(&self) -> &[ServerMessage] {
        &self.transcript
    }

    pub fn into_transcript(self) -> Vec<ServerMessage> {
        self.transcript
    }

    /// Most recent `state` seen for a robot.
    pub fn latest_state(&self, robot: RobotId) -> Option<&ServerMessage> {
        self.latest.get(&robot)
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        self.send_raw(&msg.to_line()).await
    }

    pub async fn send_raw(&mut self, line: &str) -> Result<()> {
        self.writer.write_all(line.as_bytes()).await?;
        self.writer.write_all(b"\n").await?;
        Ok(())
    }

    /// Next server message, recorded in the transcript.
    pub async fn recv(&mut self) -> Result<ServerMessage> {
        let line = tokio::time::timeout(RECV_TIMEOUT, self.reader.next_line())
            .await
            .map_err(|_| Error::Timeout)??
            .ok_or(Error::Closed)?;
        let msg: ServerMessage = serde_json::from_str(&line)?;
        if let ServerMessage::State { robot_id, .. } = &msg {
            self.latest.insert(*robot_id, msg.clone());
        }
        self.transcript.push(msg.clone());
        Ok(msg)
    }

    pub async fn lockstep(&mut self) -> Result<()> {
        self.send(&ClientMessage::Speed { ticks_per_second: 0.0 }).await
    }

    /// Subscribes and consumes the immediate snapshot, one state per robot.
    pub async fn subscribe(&mut self, robot_ids: Vec<RobotId>) -> Result<()> {
        let known = robot_ids.iter().filter(|r| **r < self.robots).count();
        self.send(&ClientMessage::Subscribe { robot_ids }).await?;
        self.subscribed = known;
        self.recv_states(known).await
    }

    pub async fn subscribe_all(&mut self) -> Result<()> {
        self.subscribe((0..self.robots).collect()).await
    }

    /// Sends one command and waits for its `ack` or `error`.
    pub async fn command(&mut self, robot_id: RobotId, command: Command) -> Result<ServerMessage> {
        let cmd_id = self.next_cmd_id;
        self.next_cmd_id += 1;
        self.send(&ClientMessage::Cmd {
            cmd_id,
            robot_id,
            command,
        })
        .await?;
        loop {
            let msg = self.recv().await?;
            match &msg {
                ServerMessage::Ack { cmd_id: id } | ServerMessage::Error { cmd_id: Some(id), .. } if *id == cmd_id => {
                    return Ok(msg)
                }
                _ => {}
            }
        }
    }

    /// Grants `ticks` lockstep ticks and waits for their states.
    pub async fn step(&mut self, ticks: u32) -> Result<()> {
        self.send(&ClientMessage::Step { ticks }).await?;
        self.recv_states(ticks as usize * self.subscribed).await
    }

    async fn recv_states(&mut self, mut n: usize) -> Result<()> {
        while n > 0 {
            if let ServerMessage::State { .. } = self.recv().await? {
                n -= 1;
            }
        }
        Ok(())
    }
}

/// A command issued once the client's lockstep clock reaches `tick`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCommand {
    pub tick: u64,
    pub robot_id: RobotId,
    pub command: Command,
}

/// Connects, switches to lockstep, subscribes to every robot and runs
/// `ticks` ticks, issuing each command at its tick. Returns the transcript.
pub async fn run_script(addr: SocketAddr, script: &[TimedCommand], ticks: u64) -> Result<Vec<ServerMessage>> {
    let mut c = ScriptedClient::connect(addr).await?;
    c.lockstep().await?;
    c.subscribe_all().await?;
    for t in 0..ticks {
        for cmd in script.iter().filter(|c| c.tick == t) {
            c.command(cmd.robot_id, cmd.command).await?;
        }
        c.step(1).await?;
    }
    Ok(c.into_transcript())
}
