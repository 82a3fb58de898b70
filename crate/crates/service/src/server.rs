//! WebSocket endpoint and static-file serving.
//!
//! Every connection owns an isolated [`SessionController`]. Inbound
//! commands and pacing ticks are handled in order on the connection's task.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use rnnscope_core::trainer::NetworkConfig;
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::controller::SessionController;
use crate::protocol::{parse_command, Envelope, Outbox};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid default config: {0}")]
    Config(#[from] rnnscope_core::TrainError),
}

/// Protocol state of one connection, independent of the transport.
pub struct Connection {
    controller: SessionController,
    outbox: Outbox,
    last_inbound: Option<u64>,
}

impl Connection {
    /// Opens a session and returns the greeting: a hello and a first snapshot.
    pub fn open(defaults: &NetworkConfig) -> Result<(Self, Vec<Envelope>), ServeError> {
        let mut conn = Self {
            controller: SessionController::new(defaults.clone())?,
            outbox: Outbox::default(),
            last_inbound: None,
        };
        let greeting = vec![
            conn.outbox.hello(defaults),
            conn.outbox.snapshot(&conn.controller.snapshot()),
        ];
        Ok((conn, greeting))
    }

    pub fn controller(&self) -> &SessionController {
        &self.controller
    }

    /// Handles one inbound text message. Never fails: problems become error envelopes.
    pub fn on_text(&mut self, text: &str) -> Vec<Envelope> {
        let (seq, cmd) = match parse_command(text) {
            Ok(parsed) => parsed,
            Err((seq, message)) => return vec![self.outbox.error(message, seq)],
        };
        if let Some(last) = self.last_inbound {
            if seq <= last {
                return vec![self.outbox.error(
                    format!("sequence number {seq} does not follow {last}"),
                    Some(seq),
                )];
            }
        }
        self.last_inbound = Some(seq);
        match self.controller.handle(cmd) {
            Ok(snaps) => snaps.iter().map(|s| self.outbox.snapshot(s)).collect(),
            Err(e) => vec![self.outbox.error(e.to_string(), Some(seq))],
        }
    }

    /// Runs the steps that came due while playing.
    pub fn on_tick(&mut self, elapsed: Duration) -> Vec<Envelope> {
        match self.controller.tick(elapsed) {
            Ok(snaps) => snaps.iter().map(|s| self.outbox.snapshot(s)).collect(),
            Err(e) => vec![
                self.outbox.error(e.to_string(), None),
                self.outbox.snapshot(&self.controller.snapshot()),
            ],
        }
    }

    /// Time until the pacer wants the next tick, if playing.
    pub fn next_tick(&self) -> Option<Duration> {
        self.controller.pacer().until_next()
    }
}

pub fn router(defaults: NetworkConfig, static_dir: Option<PathBuf>) -> Router {
    let router = Router::new()
        .route("/ws", get(upgrade))
        .with_state(Arc::new(defaults));
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

pub async fn serve(
    listener: TcpListener,
    defaults: NetworkConfig,
    static_dir: Option<PathBuf>,
) -> Result<(), ServeError> {
    defaults.validate()?;
    axum::serve(listener, router(defaults, static_dir)).await?;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(defaults): State<Arc<NetworkConfig>>) -> Response {
    ws.on_upgrade(move |socket| run_connection(socket, defaults))
}

async fn send_all(socket: &mut WebSocket, envelopes: Vec<Envelope>) -> bool {
    for env in envelopes {
        let text = serde_json::to_string(&env).expect("envelope serializes");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn run_connection(mut socket: WebSocket, defaults: Arc<NetworkConfig>) {
    let (mut conn, greeting) = match Connection::open(&defaults) {
        Ok(opened) => opened,
        Err(e) => {
            tracing::error!("cannot open session: {e}");
            return;
        }
    };
    tracing::info!(session = conn.controller().id(), "connected");
    if !send_all(&mut socket, greeting).await {
        return;
    }
    let mut last_tick = Instant::now();
    loop {
        let wait = conn.next_tick();
        if wait.is_none() {
            last_tick = Instant::now();
        }
        let replies = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => conn.on_text(text.as_str()),
                Some(Ok(Message::Binary(_))) => conn.on_text(""),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            _ = tokio::time::sleep(wait.unwrap_or_default()), if wait.is_some() => {
                let now = Instant::now();
                let replies = conn.on_tick(now - last_tick);
                last_tick = now;
                replies
            }
        };
        if !send_all(&mut socket, replies).await {
            break;
        }
    }
    tracing::info!(session = conn.controller().id(), "disconnected");
}
