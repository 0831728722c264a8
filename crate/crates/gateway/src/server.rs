//! Listeners. Each connection gets a conn id and a bounded outbound queue;
//! everything else happens in the hub task.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use gcent_core::fleet::Fleet;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::hub::{self, ConnId, Hub, Inbound, OUTBOUND_CAPACITY};
use crate::{Error, Result};

const INBOUND_CAPACITY: usize = 1024;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub tcp_addr: SocketAddr,
    /// WebSocket listener; `None` disables it.
    pub ws_addr: Option<SocketAddr>,
    /// Initial rate; 0 starts in lockstep.
    pub ticks_per_second: f64,
}

impl GatewayConfig {
    /// Both listeners on ephemeral localhost ports, lockstep.
    pub fn local() -> Self {
        let any: SocketAddr = ([127, 0, 0, 1], 0).into();
        GatewayConfig {
            tcp_addr: any,
            ws_addr: Some(any),
            ticks_per_second: 0.0,
        }
    }
}

#[derive(Clone)]
struct Shared {
    inbound: mpsc::Sender<Inbound>,
    next_conn: Arc<AtomicU64>,
}

impl Shared {
    fn conn_id(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }
}

pub struct Gateway {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    stop: oneshot::Sender<()>,
    hub: JoinHandle<Fleet>,
    listeners: Vec<JoinHandle<()>>,
}

impl Gateway {
    /// Stops accepting, halts the fleet loop and returns the fleet.
    pub async fn shutdown(self) -> Result<Fleet> {
        for l in &self.listeners {
            l.abort();
        }
        let _ = self.stop.send(());
        self.hub.await.map_err(|e| Error::Unexpected(e.to_string()))
    }
}

pub async fn serve(fleet: Fleet, config: GatewayConfig) -> Result<Gateway> {
    let (tx, rx) = mpsc::channel(INBOUND_CAPACITY);
    let (stop, stop_rx) = oneshot::channel();
    let shared = Shared {
        inbound: tx,
        next_conn: Arc::new(AtomicU64::new(1)),
    };

    let tcp = TcpListener::bind(config.tcp_addr).await?;
    let tcp_addr = tcp.local_addr()?;
    let mut listeners = vec![tokio::spawn(accept_tcp(tcp, shared.clone()))];

    let mut ws_addr = None;
    if let Some(addr) = config.ws_addr {
        let ws = TcpListener::bind(addr).await?;
        ws_addr = Some(ws.local_addr()?);
        let app = Router::new().route("/ws", get(upgrade)).with_state(shared.clone());
        listeners.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(ws, app).await {
                tracing::error!("websocket listener: {e}");
            }
        }));
    }
    drop(shared);

    let hub = tokio::spawn(hub::run(Hub::new(fleet, config.ticks_per_second), rx, stop_rx));
    tracing::info!("gateway on tcp {tcp_addr}, ws {ws_addr:?}");
    Ok(Gateway {
        tcp_addr,
        ws_addr,
        stop,
        hub,
        listeners,
    })
}

async fn accept_tcp(listener: TcpListener, shared: Shared) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                tracing::debug!("tcp client {peer}");
                tokio::spawn(tcp_conn(stream, shared.clone()));
            }
            Err(e) => tracing::warn!("accept: {e}"),
        }
    }
}

async fn tcp_conn(stream: TcpStream, shared: Shared) {
    let _ = stream.set_nodelay(true);
    let conn = shared.conn_id();
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<String>(OUTBOUND_CAPACITY);
    if shared.inbound.send(Inbound::Connect { conn, tx }).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(mut line) = rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        if shared.inbound.send(Inbound::Line { conn, line }).await.is_err() {
            break;
        }
    }
    let _ = shared.inbound.send(Inbound::Disconnect { conn }).await;
    let _ = writer.await;
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> Response {
    ws.on_upgrade(move |socket| ws_conn(socket, shared))
}

/// One text frame per server message; client frames may hold several lines.
async fn ws_conn(socket: WebSocket, shared: Shared) {
    let conn = shared.conn_id();
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::channel::<String>(OUTBOUND_CAPACITY);
    if shared.inbound.send(Inbound::Connect { conn, tx }).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if sink.send(Message::Text(line.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    'read: while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    let line = line.to_string();
                    if shared.inbound.send(Inbound::Line { conn, line }).await.is_err() {
                        break 'read;
                    }
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = shared.inbound.send(Inbound::Disconnect { conn }).await;
    let _ = writer.await;
}
