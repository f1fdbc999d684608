//! Messages exchanged between the server, CSGs and gateways. Serialized as
//! internally tagged JSON records, e.g. `{"type":"PING","nonce":3}`.

use serde::{Deserialize, Serialize};

use crate::matcher::SchemaMapping;
use crate::model::{AttributeValue, PeerId};
use crate::overlay::{ClusterKey, LookupMode, LookupRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScEntry {
    pub domain: String,
    pub attribute: String,
    pub head: PeerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub peer: PeerId,
    pub sc_list: Vec<ScEntry>,
    pub mapping: SchemaMapping,
    /// Neighbours sampled for the peer in each cluster it entered.
    pub neighbors: Vec<(ClusterKey, Vec<PeerId>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTuple {
    pub query_id: u64,
    pub peer: PeerId,
    /// One cell per projected global attribute; `None` where the space lacks it.
    pub values: Vec<Option<AttributeValue>>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub query_id: u64,
    pub peer: PeerId,
    pub event: String,
    pub value: bool,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register { address: String, template: String },
    RegisterAck(RegisterAck),
    Update { peer: PeerId, template: String },
    Join { cluster: ClusterKey, peer: PeerId },
    JoinAck { cluster: ClusterKey, peer: PeerId },
    Ping { nonce: u64 },
    Pong { nonce: u64 },
    Lookup(LookupRequest),
    Subscribe(LookupRequest),
    Result(ResultTuple),
    Notify(Notification),
    PeerDown { peer: PeerId },
}

impl Message {
    /// LOOKUP or SUBSCRIBE, depending on what the request asks for.
    pub fn for_request(req: LookupRequest) -> Message {
        match req.mode {
            LookupMode::Subscribe { .. } => Message::Subscribe(req),
            _ => Message::Lookup(req),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::RegisterAck(_) => "REGISTER_ACK",
            Message::Update { .. } => "UPDATE",
            Message::Join { .. } => "JOIN",
            Message::JoinAck { .. } => "JOIN_ACK",
            Message::Ping { .. } => "PING",
            Message::Pong { .. } => "PONG",
            Message::Lookup(_) => "LOOKUP",
            Message::Subscribe(_) => "SUBSCRIBE",
            Message::Result(_) => "RESULT",
            Message::Notify(_) => "NOTIFY",
            Message::PeerDown { .. } => "PEER_DOWN",
        }
    }

    /// Short identifying payload, enough to tell two messages of one kind
    /// apart in a trace.
    pub fn summary(&self) -> String {
        match self {
            Message::Register { address, template } => format!("{address}/{}", template.len()),
            Message::RegisterAck(a) => format!("{}/{}", a.peer, a.sc_list.len()),
            Message::Update { peer, template } => format!("{peer}/{}", template.len()),
            Message::Join { cluster, peer } | Message::JoinAck { cluster, peer } => format!("{cluster}/{peer}"),
            Message::Ping { nonce } | Message::Pong { nonce } => nonce.to_string(),
            Message::Lookup(r) | Message::Subscribe(r) => format!("q{}/{}/ttl{}", r.query_id, r.cluster, r.ttl),
            Message::Result(r) => format!("q{}/{}/{}", r.query_id, r.peer, r.values.len()),
            Message::Notify(n) => format!("q{}/{}/{}", n.query_id, n.peer, n.value),
            Message::PeerDown { peer } => peer.to_string(),
        }
    }
}
