//! Network front ends: the northbound operator API, REST key delivery, the
//! entropy endpoint and the session socket, all over one shared network.

pub mod error;
pub mod etsi;
pub mod northbound;
pub mod session_socket;
pub mod state;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use axum::Router;
use qkdnet_core::harness::entropy::EntropyService;
use qkdnet_core::network::Network;
use qkdnet_core::time::{SimDuration, SimTime};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

pub use state::{AppState, ClockMode};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("audit flush failed: {0}")]
    Flush(std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub http_addr: SocketAddr,
    pub session_addr: SocketAddr,
    pub mode: ClockMode,
    /// Simulated seconds per wall second in live-clock mode.
    pub speed: f64,
    pub sample_interval_s: f64,
    pub entropy_rate_bps: f64,
    pub entropy_max_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            http_addr: ([127, 0, 0, 1], 8080).into(),
            session_addr: ([127, 0, 0, 1], 8081).into(),
            mode: ClockMode::Simulated,
            speed: 1.0,
            sample_interval_s: 5.0,
            entropy_rate_bps: EntropyService::DEFAULT_RATE_BPS,
            entropy_max_bytes: 1 << 20,
        }
    }
}

pub fn router(state: AppState) -> Router {
    northbound::routes().merge(etsi::routes()).with_state(state)
}

pub struct RunningService {
    pub http_addr: SocketAddr,
    pub session_addr: SocketAddr,
    pub state: AppState,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })
}

/// Binds both listeners, then serves until [`RunningService::shutdown`].
/// Nothing is spawned if either address is taken.
pub async fn start(net: Network, cfg: ServiceConfig) -> Result<RunningService, ServiceError> {
    let http = bind(cfg.http_addr).await?;
    let session = bind(cfg.session_addr).await?;
    let seed = net.topology().settings.simulation.seed;
    let entropy = EntropyService::new(seed, cfg.entropy_rate_bps, cfg.entropy_max_bytes);
    let state = AppState::new(net, entropy, cfg.mode, cfg.sample_interval_s);
    let (stop, rx) = watch::channel(false);
    let http_addr = http.local_addr().map_err(|source| ServiceError::Bind { addr: cfg.http_addr, source })?;
    let session_addr = session.local_addr().map_err(|source| ServiceError::Bind { addr: cfg.session_addr, source })?;

    let mut tasks = Vec::new();
    let app = router(state.clone());
    let mut r = rx.clone();
    tasks.push(tokio::spawn(async move {
        let done = async move {
            let _ = r.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(http, app).with_graceful_shutdown(done).await {
            tracing::error!(error = %e, "http server stopped");
        }
    }));
    let (st, mut r) = (state.clone(), rx.clone());
    tasks.push(tokio::spawn(async move {
        tokio::select! {
            _ = session_socket::serve(session, st) => {}
            _ = stopped(&mut r) => {}
        }
    }));
    if cfg.mode == ClockMode::LiveClock {
        let (st, mut r) = (state.clone(), rx);
        let speed = cfg.speed;
        tasks.push(tokio::spawn(async move {
            let origin = (Instant::now(), st.now());
            let mut tick = tokio::time::interval(Duration::from_millis(100));
            loop {
                tokio::select! {
                    _ = tick.tick() => {
                        let elapsed = origin.0.elapsed().as_secs_f64() * speed;
                        let target: SimTime = origin.1 + SimDuration::from_secs_f64(elapsed);
                        let st = st.clone();
                        // Simulation steps are CPU-bound; keep them off the reactor.
                        let _ = tokio::task::spawn_blocking(move || st.advance_to(target)).await;
                    }
                    _ = stopped(&mut r) => break,
                }
            }
        }));
    }
    tracing::info!(%http_addr, %session_addr, mode = ?cfg.mode, "service listening");
    Ok(RunningService { http_addr, session_addr, state, stop, tasks })
}

impl RunningService {
    /// Stops the listeners and the clock, then flushes the audit log.
    pub async fn shutdown(self) -> Result<(), ServiceError> {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        let audit = self.state.inner.lock().net.audit().clone();
        audit.flush().map_err(ServiceError::Flush)
    }
}

async fn stopped(r: &mut watch::Receiver<bool>) {
    let _ = r.wait_for(|s| *s).await;
}
