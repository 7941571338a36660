//! Running nodes and the relay for real, on tokio.
//!
//! Everything speaks newline-delimited lines over a [`Duplex`]: a pair of
//! channels bridged either to a TCP stream or, for in-process clusters,
//! directly to the peer's channels. Dropping the sending half closes the
//! connection; the receiving half yields `None` once the peer closed.

mod node_driver;
mod relay_server;

use std::collections::HashMap;
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

pub use node_driver::{
    spawn_root, spawn_volunteer, JobRunner, NodeHandle, NodeInfo, NodeOptions, RootEvent,
};
pub use relay_server::{serve_http, spawn_relay, RelayHandle};

/// One bidirectional line connection.
pub struct Duplex {
    pub tx: UnboundedSender<String>,
    pub rx: UnboundedReceiver<String>,
}

impl Duplex {
    /// Two connected ends.
    pub fn pair() -> (Duplex, Duplex) {
        let (a_tx, b_rx) = unbounded_channel();
        let (b_tx, a_rx) = unbounded_channel();
        (Duplex { tx: a_tx, rx: a_rx }, Duplex { tx: b_tx, rx: b_rx })
    }

    /// Bridges a TCP stream. The reader and writer tasks end when the
    /// stream closes or the corresponding channel half is dropped.
    pub fn from_tcp(stream: TcpStream) -> Duplex {
        let _ = stream.set_nodelay(true);
        let (read, mut write) = stream.into_split();
        let (out_tx, mut out_rx) = unbounded_channel::<String>();
        let (in_tx, in_rx) = unbounded_channel::<String>();
        tokio::spawn(async move {
            while let Some(mut line) = out_rx.recv().await {
                line.push('\n');
                // Batch whatever else is already queued into one write.
                while let Ok(more) = out_rx.try_recv() {
                    line.push_str(&more);
                    line.push('\n');
                }
                if write.write_all(line.as_bytes()).await.is_err() {
                    break;
                }
            }
            let _ = write.shutdown().await;
        });
        tokio::spawn(async move {
            let mut lines = BufReader::new(read).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                if in_tx.send(line).is_err() {
                    break;
                }
            }
        });
        Duplex {
            tx: out_tx,
            rx: in_rx,
        }
    }
}

/// Registry of in-process listeners, addressed by name.
#[derive(Clone, Default)]
pub struct InprocNet {
    listeners: Arc<Mutex<HashMap<String, UnboundedSender<Duplex>>>>,
    next: Arc<AtomicU64>,
}

#[derive(Clone)]
pub enum Transport {
    Tcp,
    Inproc(InprocNet),
}

pub enum Listener {
    Tcp(TcpListener, String),
    Inproc(UnboundedReceiver<Duplex>, String),
}

impl Listener {
    /// The address peers connect to.
    pub fn addr(&self) -> &str {
        match self {
            Listener::Tcp(_, a) | Listener::Inproc(_, a) => a,
        }
    }

    pub async fn accept(&mut self) -> io::Result<Duplex> {
        match self {
            Listener::Tcp(l, _) => {
                let (stream, _) = l.accept().await?;
                Ok(Duplex::from_tcp(stream))
            }
            Listener::Inproc(rx, _) => rx
                .recv()
                .await
                .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "listener closed")),
        }
    }
}

impl Transport {
    /// Listens on `addr` (TCP `host:port`, port 0 for ephemeral; inproc: any
    /// name, empty for a generated one).
    pub async fn listen(&self, addr: &str) -> io::Result<Listener> {
        match self {
            Transport::Tcp => {
                let l = TcpListener::bind(addr).await?;
                let a = l.local_addr()?.to_string();
                Ok(Listener::Tcp(l, a))
            }
            Transport::Inproc(net) => {
                let name = if addr.is_empty() {
                    format!("inproc-{}", net.next.fetch_add(1, Ordering::SeqCst))
                } else {
                    addr.to_owned()
                };
                let (tx, rx) = unbounded_channel();
                let mut map = net.listeners.lock();
                if map.get(&name).is_some_and(|t| !t.is_closed()) {
                    return Err(io::Error::new(io::ErrorKind::AddrInUse, name));
                }
                map.insert(name.clone(), tx);
                Ok(Listener::Inproc(rx, name))
            }
        }
    }

    pub async fn connect(&self, addr: &str) -> io::Result<Duplex> {
        match self {
            Transport::Tcp => Ok(Duplex::from_tcp(TcpStream::connect(addr).await?)),
            Transport::Inproc(net) => {
                let listener = net.listeners.lock().get(addr).cloned();
                let refused = || io::Error::new(io::ErrorKind::ConnectionRefused, addr.to_owned());
                let listener = listener.ok_or_else(refused)?;
                let (mine, theirs) = Duplex::pair();
                listener.send(theirs).map_err(|_| refused())?;
                Ok(mine)
            }
        }
    }
}
