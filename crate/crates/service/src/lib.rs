//! Live session service.
//!
//! WebSocket endpoint `/ws` speaks the JSON protocol in [`protocol`]; plain
//! HTTP offers `GET /sessions` and `GET /traces/{id}`. A connection may
//! start and steer one session at a time and observe any number.

pub mod engine;
pub mod protocol;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use arachne_core::trace::read_trace;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;

pub use engine::{Engine, ServiceConfig, StartRequest};
use protocol::{parse_command, Command, CommandFrame, ServerMessage, Snapshot};

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/sessions", get(list_sessions))
        .route("/traces/{id}", get(get_trace))
        .with_state(engine)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, engine: Engine) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).await
}

/// Binds `addr` and serves in the background, returning the bound address.
pub async fn spawn(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let engine = Engine::new(config);
    let handle = tokio::spawn(async move {
        if let Err(e) = serve(listener, engine).await {
            tracing::error!(error = %e, "service stopped");
        }
    });
    Ok((local, handle))
}

async fn list_sessions(State(engine): State<Engine>) -> Json<Vec<protocol::SessionSummary>> {
    Json(engine.list())
}

async fn get_trace(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.trace_dir(&id) {
        None => (StatusCode::NOT_FOUND, format!("unknown session {id}")).into_response(),
        Some(Err(status)) => (
            StatusCode::CONFLICT,
            format!("session {id} is {status:?} and has no trace yet"),
        )
            .into_response(),
        Some(Ok(dir)) => match tokio::task::spawn_blocking(move || read_trace(&dir)).await {
            Ok(Ok(trace)) => Json(trace).into_response(),
            Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        },
    }
}

async fn ws_upgrade(State(engine): State<Engine>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| Connection::new(engine).run(socket))
}

struct Done {
    session: String,
    t: Option<f64>,
    stream: Option<broadcast::Receiver<Arc<Snapshot>>>,
}

impl Done {
    fn at(session: String, t: Option<f64>) -> Self {
        Done { session, t, stream: None }
    }
}

struct Connection {
    engine: Engine,
    out: mpsc::UnboundedSender<ServerMessage>,
    out_rx: Option<mpsc::UnboundedReceiver<ServerMessage>>,
    controlled: Option<String>,
    subscriptions: HashMap<String, JoinHandle<()>>,
}

impl Connection {
    fn new(engine: Engine) -> Self {
        let (out, out_rx) = mpsc::unbounded_channel();
        Connection {
            engine,
            out,
            out_rx: Some(out_rx),
            controlled: None,
            subscriptions: HashMap::new(),
        }
    }

    async fn run(mut self, socket: WebSocket) {
        let (mut sink, mut stream) = socket.split();
        let mut out_rx = self.out_rx.take().expect("fresh connection");
        let writer = tokio::spawn(async move {
            while let Some(msg) = out_rx.recv().await {
                if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                    break;
                }
            }
        });
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                Message::Text(text) => {
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        self.handle(line).await;
                    }
                }
                Message::Close(_) => break,
                Message::Binary(_) => self.send(ServerMessage::error(None, None, "binary frames are not supported")),
                _ => {}
            }
        }
        for (_, task) in self.subscriptions.drain() {
            task.abort();
        }
        drop(self.out);
        let _ = writer.await;
    }

    fn send(&self, msg: ServerMessage) {
        let _ = self.out.send(msg);
    }

    async fn handle(&mut self, text: &str) {
        let frame = match parse_command(text) {
            Ok(f) => f,
            Err((id, message)) => return self.send(ServerMessage::error(id, None, message)),
        };
        let CommandFrame { id, session, command } = frame;
        let name = command.name().to_string();
        match self.dispatch(session.clone(), command).await {
            Ok(done) => {
                self.send(ServerMessage::Ack {
                    id,
                    session: Some(done.session.clone()),
                    command: name,
                    t: done.t,
                });
                // Snapshots of a new session follow its ack.
                if let Some(rx) = done.stream {
                    self.forward(done.session, None, rx);
                }
            }
            Err(message) => self.send(ServerMessage::error(id, session, message)),
        }
    }

    async fn dispatch(&mut self, session: Option<String>, command: Command) -> Result<Done, String> {
        if let Some(steer) = command.steering() {
            let target = session.or_else(|| self.controlled.clone()).ok_or("no session to steer")?;
            if self.controlled.as_deref() != Some(target.as_str()) {
                return Err(format!("this connection does not control session {target}"));
            }
            let t = self.engine.command(&target, steer).await?;
            return Ok(Done::at(target, Some(t)));
        }
        match command {
            Command::StartSession {
                source,
                plan,
                first,
                seed,
                params,
                pace_ms,
                real_time,
            } => {
                if let Some(current) = &self.controlled {
                    if !self.engine.is_finished(current) {
                        return Err(format!("this connection already controls running session {current}"));
                    }
                }
                let (id, rx) = self.engine.start(StartRequest {
                    source,
                    plan,
                    first,
                    seed,
                    params,
                    pace_ms,
                    real_time,
                })?;
                self.controlled = Some(id.clone());
                Ok(Done {
                    session: id,
                    t: Some(0.0),
                    stream: Some(rx),
                })
            }
            Command::Subscribe => {
                let id = session.ok_or("subscribe needs a session")?;
                let (latest, rx) = self.engine.subscribe(&id).ok_or(format!("unknown session {id:?}"))?;
                self.forward(id.clone(), latest, rx);
                Ok(Done::at(id, None))
            }
            Command::Unsubscribe => {
                let id = session.ok_or("unsubscribe needs a session")?;
                match self.subscriptions.remove(&id) {
                    Some(task) => {
                        task.abort();
                        Ok(Done::at(id, None))
                    }
                    None => Err(format!("not subscribed to {id}")),
                }
            }
            _ => unreachable!("steering handled above"),
        }
    }

    fn forward(&mut self, id: String, latest: Option<Arc<Snapshot>>, mut rx: broadcast::Receiver<Arc<Snapshot>>) {
        let out = self.out.clone();
        let task = tokio::spawn(async move {
            let mut last_seq = None;
            if let Some(s) = latest {
                last_seq = Some(s.seq);
                let done = s.terminal;
                if out.send(ServerMessage::Snapshot((*s).clone())).is_err() || done {
                    return;
                }
            }
            loop {
                match rx.recv().await {
                    Ok(s) => {
                        if last_seq.is_some_and(|q| s.seq <= q) {
                            continue;
                        }
                        last_seq = Some(s.seq);
                        let done = s.terminal;
                        if out.send(ServerMessage::Snapshot((*s).clone())).is_err() || done {
                            return;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => return,
                }
            }
        });
        if let Some(old) = self.subscriptions.insert(id, task) {
            old.abort();
        }
    }
}
