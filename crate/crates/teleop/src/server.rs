use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use serde::Deserialize;
use tokio::io::AsyncWriteExt;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;

use iwr_core::datastore::TrajectoryRecord;
use iwr_core::env::TaskConfig;

use crate::session::{Finished, PolicyDir, Session};
use crate::wire::{ClientMsg, ServerMsg};
use crate::TeleopError;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub policy_dir: PathBuf,
    pub dataset_out: PathBuf,
    pub tick_hz: f64,
    /// Browser client assets, served at `/` when set.
    pub static_dir: Option<PathBuf>,
    pub task: TaskConfig,
}

impl ServeConfig {
    pub fn new(bind: SocketAddr, policy_dir: impl Into<PathBuf>, dataset_out: impl Into<PathBuf>) -> Self {
        ServeConfig {
            bind,
            policy_dir: policy_dir.into(),
            dataset_out: dataset_out.into(),
            tick_hz: 20.0,
            static_dir: None,
            task: TaskConfig::default(),
        }
    }
}

struct Shared {
    policies: PolicyDir,
    task: TaskConfig,
    tick: Duration,
    next_id: AtomicU64,
    /// Sessions whose connection dropped, kept for reconnects.
    parked: Mutex<HashMap<u64, Session>>,
    writer: mpsc::UnboundedSender<Finished>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: oneshot::Sender<()>,
    server: tokio::task::JoinHandle<()>,
    writer: tokio::task::JoinHandle<Result<(), TeleopError>>,
}

impl ServerHandle {
    /// Stops accepting connections, then waits for every finished rollout
    /// to reach the dataset file.
    pub async fn shutdown(self) -> Result<(), TeleopError> {
        let _ = self.shutdown.send(());
        let _ = self.server.await;
        self.writer.await.expect("writer task does not panic")
    }

    /// Serves until the process is killed.
    pub async fn wait(self) -> Result<(), TeleopError> {
        let _ = self.server.await;
        self.writer.await.expect("writer task does not panic")
    }
}

pub async fn serve(cfg: ServeConfig) -> Result<ServerHandle, TeleopError> {
    if !cfg.policy_dir.is_dir() {
        return Err(TeleopError::PolicyDir(cfg.policy_dir.clone()));
    }
    if !(cfg.tick_hz > 0.0 && cfg.tick_hz.is_finite()) {
        return Err(TeleopError::TickRate(cfg.tick_hz));
    }
    cfg.task.validate().map_err(TeleopError::Core)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|source| TeleopError::Bind { addr: cfg.bind, source })?;
    let addr = listener.local_addr().map_err(|source| TeleopError::Bind { addr: cfg.bind, source })?;

    let file = tokio::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cfg.dataset_out)
        .await
        .map_err(|e| TeleopError::Io(cfg.dataset_out.clone(), e))?;
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_records(file, rx, cfg.task.name.clone(), cfg.dataset_out.clone()));

    let shared = Arc::new(Shared {
        policies: PolicyDir(cfg.policy_dir.clone()),
        task: cfg.task.clone(),
        tick: Duration::from_secs_f64(1.0 / cfg.tick_hz),
        next_id: AtomicU64::new(1),
        parked: Mutex::new(HashMap::new()),
        writer: tx,
    });
    let mut app = Router::new().route("/ws", get(upgrade)).with_state(shared);
    if let Some(dir) = &cfg.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }

    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
    });
    Ok(ServerHandle {
        addr,
        shutdown: stop_tx,
        server,
        writer,
    })
}

/// The single append-only writer for the dataset file. Ends when every
/// sender is gone.
async fn write_records(
    mut file: tokio::fs::File,
    mut rx: mpsc::UnboundedReceiver<Finished>,
    task: String,
    path: PathBuf,
) -> Result<(), TeleopError> {
    while let Some(f) = rx.recv().await {
        let mut rec = TrajectoryRecord::from_trajectory(&task, &f.trajectory);
        rec.operator = format!("{}:{}", rec.operator, f.policy_id);
        file.write_all(rec.to_json_line().as_bytes())
            .await
            .map_err(|e| TeleopError::Io(path.clone(), e))?;
        file.flush().await.map_err(|e| TeleopError::Io(path.clone(), e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct Reconnect {
    session: Option<u64>,
}

async fn upgrade(ws: WebSocketUpgrade, Query(q): Query<Reconnect>, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| run_connection(socket, shared, q.session))
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

async fn run_connection(mut socket: WebSocket, shared: Arc<Shared>, resume: Option<u64>) {
    let parked = resume.and_then(|id| shared.parked.lock().unwrap().remove(&id));
    let mut session = parked.unwrap_or_else(|| {
        let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
        Session::new(id, shared.task.clone())
    });
    if !send(&mut socket, &ServerMsg::Hello { session: session.id }).await {
        return;
    }
    let mut ticker = tokio::time::interval(shared.tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            biased;
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let result = ClientMsg::parse(&text)
                    .map_err(TeleopError::MalformedMessage)
                    .and_then(|msg| session.handle(msg, &shared.policies));
                if let Err(e) = result {
                    if !send(&mut socket, &ServerMsg::Error { message: e.to_string() }).await {
                        break;
                    }
                }
            }
            _ = ticker.tick() => {
                if let Some(done) = session.tick() {
                    let _ = shared.writer.send(done);
                }
                if let Some(frame) = session.frame() {
                    if !send(&mut socket, &ServerMsg::State(frame)).await {
                        break;
                    }
                }
            }
        }
    }
    // Paused on disconnect so the env does not run unattended.
    session.handle(ClientMsg::Pause, &shared.policies).ok();
    session.handle(ClientMsg::Button { down: false }, &shared.policies).ok();
    shared.parked.lock().unwrap().insert(session.id, session);
}
