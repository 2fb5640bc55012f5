//! Live teleoperation over WebSocket. Each connection owns one session that
//! ticks at `1 / dt` in wall-clock time and streams state frames back.
//! Sessions left by a disconnecting client are paused and can be resumed
//! with `{"type":"start","resume":"<id>"}`.

pub mod protocol;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

pub use protocol::{ClientMessage, ServerMessage, StateFrame, Status};
pub use session::{Session, SessionError, SessionFactory};

/// Published JSON schema for every message in both directions.
pub const PROTOCOL_SCHEMA: &str = include_str!("../../../docs/protocol.schema.json");

#[derive(Debug, Default)]
struct Registry {
    paused: Mutex<HashMap<String, Session>>,
    next: AtomicU64,
}

/// Accept connections forever.
pub async fn serve(listener: TcpListener, factory: Arc<SessionFactory>) -> std::io::Result<()> {
    let registry = Arc::new(Registry::default());
    loop {
        let (stream, peer) = listener.accept().await?;
        let factory = factory.clone();
        let registry = registry.clone();
        tokio::spawn(async move {
            if let Err(e) = connection(stream, peer, factory, registry).await {
                eprintln!("connection {peer}: {e}");
            }
        });
    }
}

/// Bind and serve on a single-threaded runtime. Blocks.
pub fn run_blocking(addr: SocketAddr, factory: SessionFactory) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        eprintln!("listening on ws://{}", listener.local_addr()?);
        serve(listener, Arc::new(factory)).await
    })
}

async fn connection(
    stream: TcpStream,
    _peer: SocketAddr,
    factory: Arc<SessionFactory>,
    registry: Arc<Registry>,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut tx, mut rx) = ws.split();
    let id = format!("s{}", registry.next.fetch_add(1, Ordering::Relaxed));
    let mut session = factory.open(id)?;
    let dt = Duration::from_secs_f64(factory.run.dt);
    let mut clock = tokio::time::interval(dt);
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            msg = rx.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None => break,
                    Some(Ok(_)) => continue,
                    Some(Err(e)) => return Err(e.into()),
                };
                let replies = match ClientMessage::parse(&text) {
                    Ok(ClientMessage::Start { resume: Some(rid), .. }) => {
                        let found = registry.paused.lock().expect("registry lock").remove(&rid);
                        match found {
                            Some(mut s) => {
                                s.connected = true;
                                let old = std::mem::replace(&mut session, s);
                                drop(old);
                                vec![ServerMessage::Event { event: "resumed".into(), session: rid, tick: session.episode().tick() }]
                            }
                            None => vec![ServerMessage::Error { message: format!("no paused session '{rid}'") }],
                        }
                    }
                    Ok(m) => session.handle(m),
                    Err(e) => vec![ServerMessage::Error { message: format!("bad message: {e}") }],
                };
                for r in replies {
                    tx.send(Message::text(r.to_json())).await?;
                }
            }
            _ = clock.tick() => {
                let (frame, events) = match session.tick() {
                    Ok(v) => v,
                    Err(e) => {
                        tx.send(Message::text(ServerMessage::Error { message: e.to_string() }.to_json())).await?;
                        continue;
                    }
                };
                for e in events {
                    tx.send(Message::text(e.to_json())).await?;
                }
                tx.send(Message::text(ServerMessage::State(frame).to_json())).await?;
            }
        }
    }
    session.connected = false;
    registry.paused.lock().expect("registry lock").insert(session.id().to_string(), session);
    Ok(())
}
