//! Live session service: one engine session per WebSocket connection, driven
//! by a fixed-cadence clock.
//!
//! Each tick consumes the latest user symbol the client sent since the
//! previous tick (or `<USIL>`), steps the session and replies with a `tick`
//! message. Client input only ever lands in a one-slot mailbox.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use duplex_latent::engine::{ClientMsg, ServerMsg, Session, VocabInfo};
use duplex_latent::model::{Model, ModelMode};
use duplex_latent::schema::AudioToken;
use duplex_latent::Error;
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::{interval_at, Instant, Interval, MissedTickBehavior};
use tokio_tungstenite::tungstenite::Message;

pub const DEFAULT_FRAME_MS: u64 = 250;
pub const MIN_FRAME_MS: u64 = 5;
pub const MAX_FRAME_MS: u64 = 60_000;

#[derive(Clone)]
pub struct ServerState {
    pub model: Arc<Model>,
    pub mode: ModelMode,
    /// Cadence used when `hello` does not name one.
    pub frame_ms: u64,
    sessions: Arc<AtomicU64>,
}

impl ServerState {
    pub fn new(model: Arc<Model>, mode: ModelMode, frame_ms: u64) -> ServerState {
        ServerState {
            model,
            mode,
            frame_ms,
            sessions: Arc::new(AtomicU64::new(0)),
        }
    }
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, state: ServerState) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let st = state.clone();
        log::info!("connection {peer} opened");
        tokio::spawn(async move {
            match handle_connection(stream, st).await {
                Ok(()) => log::info!("connection {peer} closed"),
                Err(e) => log::warn!("connection {peer}: {e}"),
            }
        });
    }
}

/// Binds `addr` and serves on the current runtime.
pub async fn bind_and_serve(addr: SocketAddr, state: ServerState) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, state).await
}

struct Live {
    session: Session,
    clock: Interval,
    mailbox: Option<AudioToken>,
}

fn clock(frame_ms: u64) -> Interval {
    let period = Duration::from_millis(frame_ms);
    let mut iv = interval_at(Instant::now() + period, period);
    iv.set_missed_tick_behavior(MissedTickBehavior::Delay);
    iv
}

async fn next_tick(live: &mut Option<Live>) {
    match live {
        Some(l) => {
            l.clock.tick().await;
        }
        None => std::future::pending().await,
    }
}

type WsError = tokio_tungstenite::tungstenite::Error;

pub async fn handle_connection(stream: TcpStream, state: ServerState) -> Result<(), WsError> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    let mut live: Option<Live> = None;
    loop {
        tokio::select! {
            msg = ws.next() => {
                let Some(msg) = msg else { break };
                let text = match msg? {
                    Message::Text(t) => t,
                    Message::Close(_) => break,
                    Message::Binary(_) => {
                        ws.send(reply(&ServerMsg::error("binary frames are not supported"))).await?;
                        continue;
                    }
                    _ => continue,
                };
                let parsed = match ClientMsg::parse(text.as_str()) {
                    Ok(m) => m,
                    Err(reason) => {
                        ws.send(reply(&ServerMsg::error(reason))).await?;
                        continue;
                    }
                };
                match parsed {
                    ClientMsg::Hello { frame_ms } => {
                        let ms = frame_ms.unwrap_or(state.frame_ms);
                        if !(MIN_FRAME_MS..=MAX_FRAME_MS).contains(&ms) {
                            let reason = format!("frame_ms must lie in [{MIN_FRAME_MS}, {MAX_FRAME_MS}]");
                            ws.send(reply(&ServerMsg::error(reason))).await?;
                            continue;
                        }
                        let id = state.sessions.fetch_add(1, Ordering::Relaxed);
                        live = Some(Live {
                            session: Session::without_trace(state.model.clone(), state.mode),
                            clock: clock(ms),
                            mailbox: None,
                        });
                        log::info!("session-{id} started at {ms} ms per frame");
                        let ready = ServerMsg::Ready {
                            session: format!("session-{id}"),
                            vocab: VocabInfo::standard(),
                        };
                        ws.send(reply(&ready)).await?;
                    }
                    ClientMsg::UserToken { token } => match (live.as_mut(), AudioToken::parse(&token)) {
                        (None, _) => {
                            ws.send(reply(&ServerMsg::error("no session; send hello first"))).await?;
                        }
                        (Some(_), Err(e)) => {
                            ws.send(reply(&ServerMsg::error(e.to_string()))).await?;
                        }
                        (Some(l), Ok(tok)) => l.mailbox = Some(tok),
                    },
                    ClientMsg::Reset => match live.as_mut() {
                        Some(l) => {
                            l.session.reset();
                            l.mailbox = None;
                            l.clock = clock(l.clock.period().as_millis() as u64);
                        }
                        None => ws.send(reply(&ServerMsg::error("no session; send hello first"))).await?,
                    },
                    ClientMsg::Bye => break,
                }
            }
            _ = next_tick(&mut live) => {
                let l = live.as_mut().expect("ticks only run with a session");
                let user = l.mailbox.take().unwrap_or(AudioToken::USIL);
                let t = l.session.t();
                match l.session.step(user) {
                    Ok(out) => {
                        let tick = ServerMsg::Tick {
                            t,
                            user: user.surface().to_string(),
                            agent: out.agent.surface().to_string(),
                            g: out.g,
                            phase: out.phase,
                        };
                        ws.send(reply(&tick)).await?;
                    }
                    Err(e @ Error::FrameBudget(_)) => {
                        l.session.reset();
                        let reason = format!("{e}; session reset");
                        ws.send(reply(&ServerMsg::error(reason))).await?;
                    }
                    Err(e) => {
                        ws.send(reply(&ServerMsg::error(e.to_string()))).await?;
                    }
                }
            }
        }
    }
    let _ = ws.close(None).await;
    Ok(())
}

fn reply(msg: &ServerMsg) -> Message {
    Message::text(msg.to_json())
}
