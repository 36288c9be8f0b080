//! Live job service: a tick driver owns the simulation and publishes a
//! snapshot per tick; HTTP handlers read the latest publication and queue
//! signed operator overrides for the next tick.

mod view;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use guardian_core::audit::{verify_chain, LedgerBlock, LedgerRecord};
use guardian_core::crypto::KeyRegistry;
use guardian_core::digest::Digest;
use guardian_core::feedback::{OverrideOutcome, OverrideRequest};
use guardian_core::manifest::Manifest;
use guardian_core::simulator::{SimConfig, SimError, Simulation};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;

pub use view::{NodeSnapshot, StateSnapshotView};

pub const DEFAULT_TICK: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub sim: SimConfig,
    pub operators: KeyRegistry,
    pub tick: Duration,
    pub addr: SocketAddr,
}

impl GatewayConfig {
    pub fn new(sim: SimConfig, operators: KeyRegistry, addr: SocketAddr) -> Self {
        Self {
            sim,
            operators,
            tick: DEFAULT_TICK,
            addr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerView {
    pub records: Vec<LedgerRecord>,
    pub blocks: Vec<LedgerBlock>,
    pub last_root: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideResponse {
    #[serde(flatten)]
    pub outcome: OverrideOutcome,
    /// Tick whose Act phase will carry the command.
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<u64>,
}

/// What the driver publishes after every tick.
#[derive(Debug, Clone)]
struct Publication {
    snapshot: StateSnapshotView,
    ledger_bytes: Arc<Vec<u8>>,
    ledger: Arc<LedgerView>,
}

impl Publication {
    fn of(sim: &Simulation) -> Self {
        let ledger = sim.ledger();
        Self {
            snapshot: StateSnapshotView::of(sim),
            ledger_bytes: Arc::new(ledger.to_file_bytes()),
            ledger: Arc::new(LedgerView {
                records: ledger.records().to_vec(),
                blocks: ledger.blocks().to_vec(),
                last_root: ledger.last_root(),
            }),
        }
    }
}

type OverrideMsg = (OverrideRequest, oneshot::Sender<OverrideResponse>);

#[derive(Clone)]
struct AppState {
    manifest: Arc<Manifest>,
    latest: watch::Receiver<Publication>,
    stream: broadcast::Sender<StateSnapshotView>,
    overrides: mpsc::Sender<OverrideMsg>,
}

pub struct RunningGateway {
    pub addr: SocketAddr,
    server: JoinHandle<()>,
    driver: JoinHandle<()>,
}

impl RunningGateway {
    pub fn shutdown(self) {
        self.server.abort();
        self.driver.abort();
    }

    /// Resolves when the server task ends.
    pub async fn wait(self) {
        let _ = self.server.await;
        self.driver.abort();
    }
}

/// Admits the job, binds the listener and starts the tick driver. The first
/// tick runs one interval after this returns.
pub async fn spawn(config: GatewayConfig) -> Result<RunningGateway, GatewayError> {
    let sim = Simulation::new(config.sim)?;
    let listener = TcpListener::bind(config.addr)
        .await
        .map_err(|source| GatewayError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| GatewayError::Bind {
        addr: config.addr,
        source,
    })?;

    let manifest = Arc::new(sim.manifest().clone());
    let (latest_tx, latest) = watch::channel(Publication::of(&sim));
    let (stream, _) = broadcast::channel(256);
    let (overrides, override_rx) = mpsc::channel(64);
    let driver = tokio::spawn(drive(
        sim,
        config.operators,
        config.tick,
        latest_tx,
        stream.clone(),
        override_rx,
    ));

    let app = router(AppState {
        manifest,
        latest,
        stream,
        overrides,
    });
    let server = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("server stopped: {e}");
        }
    });
    tracing::info!(%addr, "gateway listening");
    Ok(RunningGateway {
        addr,
        server,
        driver,
    })
}

async fn drive(
    mut sim: Simulation,
    operators: KeyRegistry,
    period: Duration,
    latest: watch::Sender<Publication>,
    stream: broadcast::Sender<StateSnapshotView>,
    mut overrides: mpsc::Receiver<OverrideMsg>,
) {
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick(), if !sim.is_finished() => {
                sim.step();
                let publication = Publication::of(&sim);
                let _ = stream.send(publication.snapshot.clone());
                latest.send_replace(publication);
            }
            msg = overrides.recv() => {
                let Some((request, reply)) = msg else { return };
                let outcome = sim.submit_override(&request, &operators);
                if outcome == OverrideOutcome::Accepted {
                    latest.send_replace(Publication::of(&sim));
                }
                let _ = reply.send(OverrideResponse { outcome, tick: sim.current_tick() });
            }
        }
    }
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/manifest", get(get_manifest))
        .route("/api/v1/state", get(get_state))
        .route("/api/v1/ledger", get(get_ledger))
        .route("/api/v1/ledger/verify", get(verify_ledger))
        .route("/api/v1/override", post(post_override))
        .route("/api/v1/stream", get(stream))
        .with_state(state)
}

async fn get_manifest(State(state): State<AppState>) -> Json<Manifest> {
    Json(state.manifest.as_ref().clone())
}

async fn get_state(State(state): State<AppState>) -> Json<StateSnapshotView> {
    Json(state.latest.borrow().snapshot.clone())
}

async fn get_ledger(State(state): State<AppState>) -> Json<LedgerView> {
    Json(state.latest.borrow().ledger.as_ref().clone())
}

async fn verify_ledger(State(state): State<AppState>) -> Json<VerifyResponse> {
    let bytes = state.latest.borrow().ledger_bytes.clone();
    Json(match verify_chain(&bytes) {
        Ok(report) => VerifyResponse {
            ok: true,
            error: None,
            blocks: Some(report.blocks),
            records: Some(report.records),
        },
        Err(e) => VerifyResponse {
            ok: false,
            error: Some(e.to_string()),
            blocks: None,
            records: None,
        },
    })
}

async fn post_override(State(state): State<AppState>, body: Bytes) -> Response {
    let request: OverrideRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let body = serde_json::json!({ "status": "rejected", "reason": "malformed-request", "detail": e.to_string() });
            return (StatusCode::BAD_REQUEST, Json(body)).into_response();
        }
    };
    let (reply, response) = oneshot::channel();
    if state.overrides.send((request, reply)).await.is_err() {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    match response.await {
        Ok(r) if r.outcome.is_accepted() => (StatusCode::ACCEPTED, Json(r)).into_response(),
        Ok(r) => (StatusCode::BAD_REQUEST, Json(r)).into_response(),
        Err(_) => StatusCode::SERVICE_UNAVAILABLE.into_response(),
    }
}

async fn stream(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| push_snapshots(socket, state))
}

/// Sends the current snapshot, then one per tick in order.
async fn push_snapshots(mut socket: WebSocket, state: AppState) {
    let mut updates = state.stream.subscribe();
    let current = state.latest.borrow().snapshot.clone();
    let mut last_tick = current.tick;
    if send_json(&mut socket, &current).await.is_err() {
        return;
    }
    loop {
        match updates.recv().await {
            Ok(snapshot) => {
                if snapshot.tick <= last_tick {
                    continue;
                }
                last_tick = snapshot.tick;
                if send_json(&mut socket, &snapshot).await.is_err() {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(n)) => {
                tracing::warn!("stream client lagged by {n} snapshots")
            }
            Err(broadcast::error::RecvError::Closed) => {
                let _ = socket.send(Message::Close(None)).await;
                return;
            }
        }
    }
}

async fn send_json<T: Serialize>(socket: &mut WebSocket, value: &T) -> Result<(), axum::Error> {
    let text = serde_json::to_string(value).expect("snapshots serialize");
    socket.send(Message::Text(text.into())).await
}
