use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use ciac_core::gesture::ModelParams;
use ciac_core::session::{ClientInput, Preset, Session};
use ciac_core::sim::Mode;
use ciac_core::world::SurgemeSource;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::sync::mpsc::error::TryRecvError;

use crate::protocol::{ClientBody, ClientMessage, ServerBody, ServerMessage, TickSnapshot, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct ServiceConfig {
    /// Where finished sessions are saved; nothing is written when unset.
    pub log_dir: Option<PathBuf>,
    /// Classifier for the surgeme stream; declared gestures otherwise.
    pub model: Option<Arc<ModelParams>>,
    pub tick_period: Duration,
    /// Outgoing frames allowed to queue before a client counts as slow.
    pub outbox: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            log_dir: None,
            model: None,
            tick_period: Duration::from_millis(50),
            outbox: 40,
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    active: AtomicUsize,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            active: AtomicUsize::new(0),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub protocol: u32,
    pub version: String,
    pub active_sessions: usize,
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    preset: Option<String>,
    mode: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", get(session))
        .with_state(state)
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })
}

pub async fn serve(listener: TcpListener, config: ServiceConfig) -> Result<(), ServiceError> {
    axum::serve(listener, router(AppState::new(config))).await?;
    Ok(())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        protocol: PROTOCOL_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        active_sessions: state.active_sessions(),
    })
}

async fn session(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SessionQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let preset = match q.preset.as_deref().unwrap_or("reach").parse::<Preset>() {
        Ok(p) => p,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let mode = match q.mode.as_deref() {
        None => None,
        Some(m) if m.eq_ignore_ascii_case("ciac") => Some(Mode::Ciac),
        Some(m) if m.eq_ignore_ascii_case("traditional") => Some(Mode::Traditional),
        Some(m) => return (StatusCode::BAD_REQUEST, format!("unknown mode {m:?}")).into_response(),
    };
    let mut world = preset.world();
    if let Some(m) = mode {
        world.pipeline.mode = m;
    }
    let source = match &state.config.model {
        Some(m) => SurgemeSource::model(m.clone(), world.stream),
        None => Ok(SurgemeSource::Oracle),
    };
    let live = source.and_then(|s| Session::new(world, s, preset.default_gesture()));
    let live = match live {
        Ok(s) => s,
        Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    state.active.fetch_add(1, Ordering::SeqCst);
    ws.on_upgrade(move |socket| async move {
        run_session(socket, live, preset, id, &state).await;
        state.active.fetch_sub(1, Ordering::SeqCst);
    })
}

/// One operator connection: a 20 Hz loop that never waits on the socket.
async fn run_session(socket: WebSocket, mut live: Session, preset: Preset, id: u64, state: &AppState) {
    let cfg = &state.config;
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<String>(cfg.outbox.max(1));
    let (in_tx, mut in_rx) = mpsc::unbounded_channel::<String>();

    let writer = tokio::spawn(async move {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                Message::Text(t) => {
                    if in_tx.send(t.to_string()).is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    });

    let hello = ServerMessage::new(
        0,
        ServerBody::Hello {
            session: id,
            preset,
            config: Box::new(*live.config()),
            entries: live.world().pipeline().controller().entries().points().to_vec(),
        },
    );
    let mut alive = out_tx.try_send(hello.to_text()).is_ok();
    let per_second = (1.0 / live.config().sim.tick).round().max(1.0) as u64;
    let mut clock = tokio::time::interval(cfg.tick_period);
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);

    while alive {
        clock.tick().await;
        let tick = live.log().records.len() as u64;
        let mut pending: Option<ClientInput> = None;
        let mut closed = false;
        let mut outgoing = Vec::new();
        loop {
            match in_rx.try_recv() {
                Ok(text) => match ClientMessage::parse(&text) {
                    Ok(ClientMessage {
                        body: ClientBody::Input(i),
                        ..
                    }) => match &mut pending {
                        Some(p) => p.merge(&i),
                        None => pending = Some(i),
                    },
                    Err(e) => outgoing.push(error(tick, e.to_string())),
                },
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }
        if closed && pending.is_none() {
            break;
        }
        let stepped = match live.step(pending.as_ref()) {
            Ok(_) => Ok(()),
            Err(e) => {
                outgoing.push(error(tick, e.to_string()));
                live.step(None).map(|_| ())
            }
        };
        if let Err(e) = stepped {
            tracing::error!(session = id, "simulation failed: {e}");
            break;
        }
        let record = live.log().records.last().expect("stepped").clone();
        let metrics = (tick % per_second == per_second - 1).then(|| live.metrics());
        let snapshot = TickSnapshot {
            record,
            psm2: live.world().psm2().pose,
            metrics,
        };
        outgoing.push(ServerMessage::new(tick, ServerBody::Tick(Box::new(snapshot))).to_text());
        for text in outgoing {
            if out_tx.try_send(text).is_err() {
                tracing::warn!(session = id, "dropping slow client");
                alive = false;
                break;
            }
        }
        alive &= !closed;
    }

    reader.abort();
    drop(out_tx);
    let _ = tokio::time::timeout(Duration::from_secs(1), writer).await;
    if let Some(dir) = &cfg.log_dir {
        if let Err(e) = live.save(dir, &format!("session_{id:04}")) {
            tracing::error!(session = id, "saving session failed: {e}");
        }
    }
}

fn error(tick: u64, message: String) -> String {
    ServerMessage::new(tick, ServerBody::Error { message }).to_text()
}
