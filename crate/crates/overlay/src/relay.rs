//! The bootstrap relay, without I/O.
//!
//! It hands out identities, forwards join requests from candidates to the
//! root and answers from the root back to candidates, and splices pairs of
//! connections that bind the same token into a virtual channel. Drivers
//! feed it connection events and carry out the returned [`RelayAction`]s.

use std::collections::BTreeMap;

use tracing::{debug, warn};

use crate::id::{NodeId, Token};
use crate::wire::{Boot, Frame, JoinRequest};

/// Relay-side connection handle, chosen by the driver.
pub type RelayConn = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum RelayAction {
    Send(RelayConn, Frame),
    Close(RelayConn),
    /// From now on, forward lines between the two connections verbatim.
    Splice(RelayConn, RelayConn),
}

pub struct RelayCore {
    next_id: Box<dyn FnMut() -> u64 + Send>,
    conns: BTreeMap<RelayConn, Option<NodeId>>,
    ids: BTreeMap<NodeId, RelayConn>,
    root: Option<RelayConn>,
    binds: BTreeMap<Token, RelayConn>,
}

impl RelayCore {
    /// `next_id` supplies candidate identities; tests inject collisions
    /// through it.
    pub fn new(next_id: impl FnMut() -> u64 + Send + 'static) -> Self {
        Self {
            next_id: Box::new(next_id),
            conns: BTreeMap::new(),
            ids: BTreeMap::new(),
            root: None,
            binds: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
            .and_then(|c| self.conns.get(&c).copied().flatten())
    }

    pub fn registered(&self) -> usize {
        self.ids.len()
    }

    pub fn opened(&mut self, conn: RelayConn) {
        self.conns.insert(conn, None);
    }

    pub fn closed(&mut self, conn: RelayConn) {
        if let Some(Some(id)) = self.conns.remove(&conn) {
            self.ids.remove(&id);
        }
        if self.root == Some(conn) {
            self.root = None;
        }
        self.binds.retain(|_, c| *c != conn);
    }

    pub fn received(&mut self, conn: RelayConn, frame: Frame) -> Vec<RelayAction> {
        let Frame::Boot(msg) = frame else {
            warn!(conn, "non-bootstrap frame on relay connection, ignored");
            return vec![];
        };
        match msg {
            Boot::Register { role } => self.register(conn, role.as_deref() == Some("root")),
            Boot::Join(req) => self.join(conn, req),
            Boot::Reject {
                origin: Some(origin),
                reason,
            } if Some(conn) == self.root => match self.ids.get(&origin) {
                Some(&to) => vec![RelayAction::Send(
                    to,
                    Boot::Reject {
                        origin: Some(origin),
                        reason,
                    }
                    .into(),
                )],
                None => vec![],
            },
            Boot::Bind { token } => self.bind(conn, token),
            other => {
                warn!(conn, ?other, "unexpected bootstrap message, ignored");
                vec![]
            }
        }
    }

    fn register(&mut self, conn: RelayConn, as_root: bool) -> Vec<RelayAction> {
        if !self.conns.contains_key(&conn) {
            self.opened(conn);
        }
        if let Some(Some(old)) = self.conns.get(&conn) {
            self.ids.remove(old);
        }
        let id = NodeId((self.next_id)());
        if self.ids.contains_key(&id) {
            debug!(%id, "identity collision, rejecting registration");
            self.conns.insert(conn, None);
            return vec![RelayAction::Send(
                conn,
                Boot::Reject {
                    origin: None,
                    reason: "identity collision".into(),
                }
                .into(),
            )];
        }
        self.conns.insert(conn, Some(id));
        self.ids.insert(id, conn);
        if as_root {
            self.root = Some(conn);
        }
        vec![RelayAction::Send(conn, Boot::Id { id }.into())]
    }

    fn join(&mut self, conn: RelayConn, req: JoinRequest) -> Vec<RelayAction> {
        let sender = self.conns.get(&conn).copied().flatten();
        if Some(conn) == self.root {
            // An answer travelling back to its candidate.
            return match self.ids.get(&req.origin) {
                Some(&to) => vec![RelayAction::Send(to, Boot::Join(req).into())],
                None => {
                    warn!(origin = %req.origin, "answer for unknown candidate dropped");
                    vec![]
                }
            };
        }
        if sender != Some(req.origin) {
            warn!(conn, origin = %req.origin, "join request with a foreign origin dropped");
            return vec![];
        }
        // Only the root keeps a relay connection, so every request enters
        // the tree there; requests carrying a destination are routed down
        // the same path by the nodes themselves.
        match self.root {
            Some(root) => vec![RelayAction::Send(root, Boot::Join(req).into())],
            None => vec![RelayAction::Send(
                conn,
                Boot::Reject {
                    origin: Some(req.origin),
                    reason: "no root registered".into(),
                }
                .into(),
            )],
        }
    }

    fn bind(&mut self, conn: RelayConn, token: Token) -> Vec<RelayAction> {
        match self.binds.remove(&token) {
            Some(other) if other != conn => {
                for c in [conn, other] {
                    if let Some(Some(id)) = self.conns.remove(&c) {
                        self.ids.remove(&id);
                    }
                }
                vec![RelayAction::Splice(other, conn)]
            }
            _ => {
                self.binds.insert(token, conn);
                vec![]
            }
        }
    }
}
