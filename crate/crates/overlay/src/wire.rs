//! The line protocol spoken between relay, nodes and candidates: one JSON
//! object per line, tagged by channel (`ch`) and message `type`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::id::{NodeId, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ch", rename_all = "lowercase")]
pub enum Frame {
    Boot(Boot),
    Ctrl(Ctrl),
    Data(Data),
}

/// Bootstrap channel: registration with the relay and join signaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Boot {
    Register {
        /// `"root"` for the client at the top of the tree.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role: Option<String>,
    },
    Id {
        id: NodeId,
    },
    Join(JoinRequest),
    /// Registration or join refused; the candidate retries later.
    Reject {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        origin: Option<NodeId>,
        reason: String,
    },
    /// Asks the relay to splice this connection with the other one that
    /// binds the same token (virtual channel for peers that cannot accept
    /// connections).
    Bind {
        token: Token,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub origin: NodeId,
    pub signal: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ctrl {
    Heartbeat {
        ts: u64,
    },
    Status {
        leaves: u64,
        /// Size of the reporting subtree, sender included.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nodes: Option<u64>,
    },
    OpenData {
        token: Token,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Data {
    Value { seq: u64, payload: String },
    Result { seq: u64, ok: bool, payload: String },
}

impl Frame {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn decode(line: &str) -> Result<Frame, serde_json::Error> {
        serde_json::from_str(line)
    }
}

impl From<Boot> for Frame {
    fn from(b: Boot) -> Self {
        Frame::Boot(b)
    }
}

impl From<Ctrl> for Frame {
    fn from(c: Ctrl) -> Self {
        Frame::Ctrl(c)
    }
}

impl From<Data> for Frame {
    fn from(d: Data) -> Self {
        Frame::Data(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_come_first() {
        let f = Frame::Ctrl(Ctrl::Status {
            leaves: 3,
            nodes: None,
        });
        assert_eq!(f.encode(), r#"{"ch":"ctrl","type":"STATUS","leaves":3}"#);
        let f = Frame::Boot(Boot::Id { id: NodeId(1) });
        assert_eq!(
            f.encode(),
            r#"{"ch":"boot","type":"ID","id":"0000000000000001"}"#
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(Frame::decode("{}").is_err());
        assert!(Frame::decode(r#"{"ch":"ctrl","type":"NOPE"}"#).is_err());
        assert!(Frame::decode(r#"{"ch":"data","type":"VALUE","seq":-1,"payload":""}"#).is_err());
        assert!(Frame::decode("not json").is_err());
    }
}
