//! WebSocket frame server.
//!
//! Each connection owns a [`Session`]. The reader task applies control
//! messages and publishes immutable snapshots through a watch channel; one
//! render task per connection always renders the newest snapshot, so control
//! bursts collapse into a single render instead of a queue.

use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use futures_util::{SinkExt, StreamExt};
use relit_core::render::PreparedScene;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::protocol::CloseFrame;
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::{encode_frame, Channel, ClientMessage, Encoding, ServerMessage, PROTOCOL_VERSION};
use crate::session::{message_name, Session, SessionConfig, Snapshot};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Debug)]
struct Control {
    snapshot: Arc<Snapshot>,
    streaming: bool,
    /// Count of `request_frame` messages received so far.
    requests: u64,
}

/// Accept connections until the listener fails.
pub async fn serve(listener: TcpListener, scene: Arc<PreparedScene>, defaults: SessionConfig) -> Result<()> {
    Session::new(scene.clone(), &defaults)?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    loop {
        let (stream, peer) = listener.accept().await?;
        let scene = scene.clone();
        let defaults = defaults.clone();
        tokio::spawn(async move {
            match handle_connection(stream, scene, defaults).await {
                Ok(()) => tracing::info!(%peer, "connection closed"),
                Err(e) => tracing::warn!(%peer, error = %e, "connection failed"),
            }
        });
    }
}

fn text(msg: ServerMessage) -> Message {
    Message::text(msg.to_json())
}

fn error(msg: impl ToString) -> Message {
    text(ServerMessage::Error { msg: msg.to_string() })
}

async fn handle_connection(stream: TcpStream, scene: Arc<PreparedScene>, defaults: SessionConfig) -> Result<()> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut sink, mut incoming) = ws.split();

    let first = tokio::time::timeout(HELLO_TIMEOUT, incoming.next())
        .await
        .context("no hello before timeout")?;
    let hello = match first {
        Some(Ok(Message::Text(t))) => ClientMessage::parse(t.as_str()),
        Some(Ok(_)) => Err(anyhow::anyhow!("expected a text hello message")),
        Some(Err(e)) => return Err(e.into()),
        None => return Ok(()),
    };
    let (encoding, channel) = match hello {
        Ok(ClientMessage::Hello { version, encoding, channel }) if version == PROTOCOL_VERSION => (encoding, channel),
        Ok(ClientMessage::Hello { version, .. }) => {
            let reason = format!("protocol version {version} not supported (server speaks {PROTOCOL_VERSION})");
            return refuse(&mut sink, reason).await;
        }
        Ok(other) => return refuse(&mut sink, format!("expected hello, got {}", message_name(&other))).await,
        Err(e) => return refuse(&mut sink, format!("bad hello: {e}")).await,
    };

    let mut session = Session::new(scene.clone(), &defaults)?;
    sink.send(text(ServerMessage::Hello {
        version: PROTOCOL_VERSION,
        encoding,
        channel,
        frame_id: session.frame_id(),
    }))
    .await?;

    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if sink.send(m).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let (ctl_tx, ctl_rx) = watch::channel(Control {
        snapshot: Arc::new(session.snapshot()),
        streaming: false,
        requests: 0,
    });
    let renderer = tokio::spawn(render_loop(scene, ctl_rx, out_tx.clone(), encoding, channel));

    while let Some(msg) = incoming.next().await {
        let reply = match msg? {
            Message::Text(t) => match ClientMessage::parse(t.as_str()) {
                Ok(m) => handle_message(&mut session, &ctl_tx, &m),
                Err(e) => Some(error(format!("malformed message: {e}"))),
            },
            Message::Binary(_) => Some(error("binary messages are not accepted from clients")),
            Message::Close(_) => break,
            _ => None,
        };
        if let Some(r) = reply {
            if out_tx.send(r).is_err() {
                break;
            }
        }
    }
    drop(ctl_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
    Ok(())
}

async fn refuse<S>(sink: &mut S, reason: String) -> Result<()>
where
    S: SinkExt<Message> + Unpin,
    S::Error: std::error::Error + Send + Sync + 'static,
{
    tracing::warn!(%reason, "refusing connection");
    sink.send(error(&reason)).await?;
    let frame = CloseFrame { code: CloseCode::Policy, reason: reason.into() };
    sink.send(Message::Close(Some(frame))).await?;
    Ok(())
}

fn handle_message(session: &mut Session, ctl: &watch::Sender<Control>, msg: &ClientMessage) -> Option<Message> {
    match msg {
        ClientMessage::Hello { .. } => Some(error("hello is only valid as the first message")),
        ClientMessage::RequestFrame => {
            ctl.send_modify(|c| c.requests += 1);
            None
        }
        ClientMessage::Stream { on } => {
            ctl.send_modify(|c| c.streaming = *on);
            Some(text(ServerMessage::Ack { frame_id: session.frame_id() }))
        }
        _ => match session.apply(msg) {
            Ok(frame_id) => {
                let snapshot = Arc::new(session.snapshot());
                ctl.send_modify(|c| c.snapshot = snapshot);
                Some(text(ServerMessage::Ack { frame_id }))
            }
            Err(e) => Some(error(format!("{}: {e:#}", message_name(msg)))),
        },
    }
}

/// Render the newest snapshot whenever a frame was requested or, while
/// streaming, whenever the state moved past the last frame sent.
async fn render_loop(
    scene: Arc<PreparedScene>,
    mut ctl: watch::Receiver<Control>,
    out: mpsc::UnboundedSender<Message>,
    encoding: Encoding,
    channel: Channel,
) {
    let mut served = 0u64;
    let mut last_sent: Option<u32> = None;
    let mut was_streaming = false;
    loop {
        let c = ctl.borrow_and_update().clone();
        if c.streaming && !was_streaming {
            last_sent = None;
        }
        was_streaming = c.streaming;
        let wanted = c.requests > served || (c.streaming && last_sent != Some(c.snapshot.frame_id));
        if !wanted {
            if ctl.changed().await.is_err() {
                return;
            }
            continue;
        }
        let snap = c.snapshot.clone();
        let scene = scene.clone();
        let started = Instant::now();
        let frame = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> {
            let out = snap.render(&scene)?;
            encode_frame(&out, channel, snap.frame_id, encoding)
        })
        .await;
        served = c.requests;
        last_sent = Some(c.snapshot.frame_id);
        let msg = match frame {
            Ok(Ok(bytes)) => {
                tracing::debug!(frame_id = c.snapshot.frame_id, ms = started.elapsed().as_secs_f64() * 1e3, "frame");
                Message::binary(bytes)
            }
            Ok(Err(e)) => error(format!("render failed: {e:#}")),
            Err(e) => error(format!("render task failed: {e}")),
        };
        if out.send(msg).is_err() {
            return;
        }
    }
}
