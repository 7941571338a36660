use std::collections::HashMap;
use std::net::SocketAddr;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use super::{Duplex, Listener, Transport};
use crate::relay::{RelayAction, RelayConn, RelayCore};
use crate::wire::{Boot, Frame};

pub struct RelayHandle {
    pub addr: String,
    attach: UnboundedSender<Duplex>,
    task: JoinHandle<()>,
}

impl RelayHandle {
    /// Hands the relay a connection that arrived some other way, such as a
    /// websocket.
    pub fn attach(&self, duplex: Duplex) {
        let _ = self.attach.send(duplex);
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

enum Ev {
    Opened(Duplex),
    Line(RelayConn, String),
    Closed(RelayConn),
}

/// Starts a relay listening on `addr`. `seed` drives identity generation
/// (`None` for entropy).
pub async fn spawn_relay(
    transport: Transport,
    addr: &str,
    seed: Option<u64>,
) -> std::io::Result<RelayHandle> {
    let listener = transport.listen(addr).await?;
    let addr = listener.addr().to_owned();
    let (attach, attached) = unbounded_channel();
    let task = tokio::spawn(run(listener, attached, seed));
    Ok(RelayHandle { addr, attach, task })
}

async fn run(
    mut listener: Listener,
    mut attached: tokio::sync::mpsc::UnboundedReceiver<Duplex>,
    seed: Option<u64>,
) {
    let mut rng = match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_os_rng(),
    };
    let mut core = RelayCore::new(move || rng.random());
    let (tx, mut rx) = unbounded_channel::<Ev>();
    let mut next: RelayConn = 1;
    let mut conns: HashMap<RelayConn, UnboundedSender<String>> = HashMap::new();
    let mut readers: HashMap<RelayConn, JoinHandle<()>> = HashMap::new();
    // Lines from connections that sent BIND and wait for their partner.
    let mut held: HashMap<RelayConn, Vec<String>> = HashMap::new();
    let mut spliced: HashMap<RelayConn, RelayConn> = HashMap::new();

    loop {
        let ev = tokio::select! {
            acc = listener.accept() => match acc {
                Ok(d) => Ev::Opened(d),
                Err(e) => { warn!(error = %e, "relay accept failed"); continue; }
            },
            Some(d) = attached.recv() => Ev::Opened(d),
            Some(ev) = rx.recv() => ev,
        };
        match ev {
            Ev::Opened(Duplex {
                tx: out,
                rx: mut lines,
            }) => {
                let conn = next;
                next += 1;
                conns.insert(conn, out);
                core.opened(conn);
                let events = tx.clone();
                readers.insert(
                    conn,
                    tokio::spawn(async move {
                        while let Some(line) = lines.recv().await {
                            if events.send(Ev::Line(conn, line)).is_err() {
                                return;
                            }
                        }
                        let _ = events.send(Ev::Closed(conn));
                    }),
                );
            }
            Ev::Line(conn, line) => {
                if let Some(peer) = spliced.get(&conn) {
                    if let Some(out) = conns.get(peer) {
                        let _ = out.send(line);
                    }
                    continue;
                }
                if let Some(buf) = held.get_mut(&conn) {
                    buf.push(line);
                    continue;
                }
                let frame = match Frame::decode(&line) {
                    Ok(f) => f,
                    Err(e) => {
                        debug!(conn, error = %e, "undecodable line on relay");
                        continue;
                    }
                };
                if matches!(frame, Frame::Boot(Boot::Bind { .. })) {
                    held.insert(conn, Vec::new());
                }
                for action in core.received(conn, frame) {
                    match action {
                        RelayAction::Send(c, f) => {
                            if let Some(out) = conns.get(&c) {
                                let _ = out.send(f.encode());
                            }
                        }
                        RelayAction::Close(c) => {
                            conns.remove(&c);
                            if let Some(r) = readers.remove(&c) {
                                r.abort();
                            }
                            core.closed(c);
                        }
                        RelayAction::Splice(a, b) => {
                            spliced.insert(a, b);
                            spliced.insert(b, a);
                            for (from, to) in [(a, b), (b, a)] {
                                for line in held.remove(&from).unwrap_or_default() {
                                    if let Some(out) = conns.get(&to) {
                                        let _ = out.send(line);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ev::Closed(conn) => {
                conns.remove(&conn);
                readers.remove(&conn);
                held.remove(&conn);
                core.closed(conn);
                if let Some(peer) = spliced.remove(&conn) {
                    spliced.remove(&peer);
                    conns.remove(&peer);
                    if let Some(r) = readers.remove(&peer) {
                        r.abort();
                    }
                }
            }
        }
    }
}

const PAGE: &str = r#"<!doctype html>
<html>
<head><meta charset="utf-8"><title>Pando volunteer</title></head>
<body>
<h1>Pando volunteer</h1>
<p>Keep this tab open to contribute computing power to the running job.</p>
<p>Jobs completed: <span id="done">0</span></p>
<script src="volunteer.js"></script>
</body>
</html>
"#;

#[derive(Clone)]
struct HttpState {
    attach: UnboundedSender<Duplex>,
    script: Option<String>,
}

/// Serves the volunteer page on `/`, an optional client script on
/// `/volunteer.js`, and the relay's websocket endpoint on `/ws`, which
/// carries the same line grammar as the socket endpoint (one text message
/// per line).
pub async fn serve_http(
    relay: &RelayHandle,
    addr: &str,
    script: Option<String>,
) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let state = HttpState {
        attach: relay.attach.clone(),
        script,
    };
    let app = Router::new()
        .route("/", get(|| async { Html(PAGE) }))
        .route("/volunteer.js", get(script_handler))
        .route("/ws", get(ws_handler))
        .with_state(state);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            warn!(error = %e, "http server stopped");
        }
    });
    Ok((local, task))
}

async fn script_handler(State(state): State<HttpState>) -> impl IntoResponse {
    match state.script {
        Some(js) => ([("content-type", "text/javascript")], js).into_response(),
        None => (
            axum::http::StatusCode::NOT_FOUND,
            "no volunteer client installed",
        )
            .into_response(),
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<HttpState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| bridge_ws(socket, state.attach))
}

async fn bridge_ws(socket: WebSocket, attach: UnboundedSender<Duplex>) {
    let (mine, theirs) = Duplex::pair();
    if attach.send(theirs).is_err() {
        return;
    }
    let Duplex { tx, mut rx } = mine;
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if sink.send(Message::Text(line.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                for line in text.lines().filter(|l| !l.is_empty()) {
                    if tx.send(line.to_owned()).is_err() {
                        break;
                    }
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    drop(tx);
    writer.abort();
}
