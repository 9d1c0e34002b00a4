//! Resource-level message service: one broker per EC plus one at the CC,
//! joined by long-lasting topic bridges. Every client talks only to its local
//! broker; cross-site traffic exists only where a bridge rule matches
//! (default deny). Local fan-out rides the cluster LAN, bridged copies ride
//! the EC's WAN link, and both are metered through simnet.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::infrastructure::ClusterKind;
use crate::platform::{ClientId, Platform};
use crate::simnet::{transmit, Direction, FlowClass, LinkId, SimTime};
use crate::tracelog::{TrafficRecord, KIND_ADHOC_REPETITIVE, KIND_LONG_LASTING};

// ---------------------------------------------------------------------------
// Topics and patterns
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopicError {
    #[error("malformed topic {0:?}")]
    MalformedTopic(String),
    #[error("malformed pattern {0:?}")]
    MalformedPattern(String),
}

/// A concrete slash-separated topic path. No empty segments, no wildcards.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Topic(String);

impl Topic {
    pub fn parse(s: &str) -> Result<Topic, TopicError> {
        if s.is_empty()
            || s.split('/')
                .any(|seg| seg.is_empty() || seg == "+" || seg == "#")
        {
            return Err(TopicError::MalformedTopic(s.to_string()));
        }
        Ok(Topic(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl std::fmt::Display for Topic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Seg {
    Lit(String),
    Plus,
    Hash,
}

/// A subscription or bridge pattern: `+` matches exactly one segment, a
/// trailing `#` matches any suffix, including the empty one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    raw: String,
    segs: Vec<Seg>,
}

impl TopicPattern {
    pub fn parse(s: &str) -> Result<TopicPattern, TopicError> {
        if s.is_empty() {
            return Err(TopicError::MalformedPattern(s.to_string()));
        }
        let parts: Vec<&str> = s.split('/').collect();
        let mut segs = Vec::with_capacity(parts.len());
        for (i, p) in parts.iter().enumerate() {
            let seg = match *p {
                "" => return Err(TopicError::MalformedPattern(s.to_string())),
                "+" => Seg::Plus,
                "#" => {
                    if i != parts.len() - 1 {
                        return Err(TopicError::MalformedPattern(s.to_string()));
                    }
                    Seg::Hash
                }
                lit => {
                    if lit.contains('+') || lit.contains('#') {
                        return Err(TopicError::MalformedPattern(s.to_string()));
                    }
                    Seg::Lit(lit.to_string())
                }
            };
            segs.push(seg);
        }
        Ok(TopicPattern {
            raw: s.to_string(),
            segs,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// Standard wildcard semantics; the matcher shared by broker fan-out and
    /// bridge forwarding.
    pub fn matches(&self, topic: &Topic) -> bool {
        let mut t = topic.segments();
        for (i, seg) in self.segs.iter().enumerate() {
            match seg {
                Seg::Hash => {
                    debug_assert_eq!(i, self.segs.len() - 1);
                    return true;
                }
                Seg::Plus => {
                    if t.next().is_none() {
                        return false;
                    }
                }
                Seg::Lit(lit) => {
                    if t.next() != Some(lit.as_str()) {
                        return false;
                    }
                }
            }
        }
        t.next().is_none()
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// Message body: real bytes plus an optional opaque tail standing in for
/// workload content (pixels, tensors) whose exact bytes are irrelevant to the
/// run but whose size must be metered faithfully.
#[derive(Debug, Clone)]
pub struct Payload {
    head: Arc<Vec<u8>>,
    opaque: u64,
}

impl Payload {
    pub fn bytes(data: Vec<u8>) -> Payload {
        Payload {
            head: Arc::new(data),
            opaque: 0,
        }
    }

    pub fn json<T: Serialize>(value: &T) -> Payload {
        Payload::bytes(serde_json::to_vec(value).expect("payload serializes"))
    }

    pub fn json_with_opaque<T: Serialize>(value: &T, opaque: u64) -> Payload {
        Payload {
            head: Arc::new(serde_json::to_vec(value).expect("payload serializes")),
            opaque,
        }
    }

    pub fn head(&self) -> &[u8] {
        &self.head
    }

    /// Total wire size: head bytes plus the opaque tail.
    pub fn len(&self) -> u64 {
        self.head.len() as u64 + self.opaque
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub msg_id: String,
    pub topic: Topic,
    pub payload: Payload,
    pub origin: ClientId,
    pub origin_node: HierarchicalId,
    pub publish_time: SimTime,
}

impl Message {
    pub fn payload_size(&self) -> u64 {
        self.payload.len()
    }

    pub fn json_head<T: serde::de::DeserializeOwned>(&self) -> Option<T> {
        serde_json::from_slice(self.payload.head()).ok()
    }
}

// ---------------------------------------------------------------------------
// Broker state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeDirection {
    Up,
    Down,
    Both,
}

impl BridgeDirection {
    fn allows_up(self) -> bool {
        matches!(self, BridgeDirection::Up | BridgeDirection::Both)
    }
    fn allows_down(self) -> bool {
        matches!(self, BridgeDirection::Down | BridgeDirection::Both)
    }
}

#[derive(Debug, Clone)]
pub struct BridgeRule {
    pub id: u64,
    pub ec: HierarchicalId,
    pub patterns: Vec<TopicPattern>,
    pub direction: BridgeDirection,
}

#[derive(Debug, Clone)]
pub struct Subscription {
    pub id: u64,
    pub client: ClientId,
    pub broker: HierarchicalId,
    pub pattern: TopicPattern,
}

#[derive(Debug)]
pub struct Broker {
    pub cluster: HierarchicalId,
    pub kind: Option<ClusterKind>,
    pub subs: BTreeMap<u64, Subscription>,
}

#[derive(Debug, Default)]
pub struct MessagingState {
    brokers: BTreeMap<String, Broker>,
    bridges: BTreeMap<u64, BridgeRule>,
    sub_seq: u64,
    bridge_seq: u64,
}

impl MessagingState {
    pub fn add_broker(&mut self, cluster: HierarchicalId, kind: ClusterKind) {
        self.brokers.insert(
            cluster.to_string(),
            Broker {
                cluster,
                kind: Some(kind),
                subs: BTreeMap::new(),
            },
        );
    }

    pub fn has_broker(&self, cluster: &HierarchicalId) -> bool {
        self.brokers.contains_key(&cluster.to_string())
    }

    pub fn broker(&self, cluster: &HierarchicalId) -> Option<&Broker> {
        self.brokers.get(&cluster.to_string())
    }

    pub fn remove_client(&mut self, client: &ClientId) {
        for b in self.brokers.values_mut() {
            b.subs.retain(|_, s| &s.client != client);
        }
    }

    pub fn bridge_rules(&self) -> impl Iterator<Item = &BridgeRule> {
        self.bridges.values()
    }

    /// Matching subscription IDs at one broker, in subscription order.
    pub fn matching_subs(&self, cluster: &HierarchicalId, topic: &Topic) -> Vec<Subscription> {
        match self.brokers.get(&cluster.to_string()) {
            Some(b) => b
                .subs
                .values()
                .filter(|s| s.pattern.matches(topic))
                .cloned()
                .collect(),
            None => Vec::new(),
        }
    }

    fn bridge_matches_up(&self, ec: &HierarchicalId, topic: &Topic) -> bool {
        self.bridges.values().any(|r| {
            &r.ec == ec && r.direction.allows_up() && r.patterns.iter().any(|p| p.matches(topic))
        })
    }

    fn ecs_matching_down(&self, topic: &Topic) -> Vec<HierarchicalId> {
        let mut out: Vec<HierarchicalId> = self
            .bridges
            .values()
            .filter(|r| r.direction.allows_down() && r.patterns.iter().any(|p| p.matches(topic)))
            .map(|r| r.ec.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PublishError {
    #[error("client {0} is not registered at any broker")]
    UnregisteredClient(String),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("payload of {size} bytes exceeds the {cap} byte message cap; use the file service")]
    PayloadTooLarge { size: u64, cap: u64 },
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
}

// ---------------------------------------------------------------------------
// Platform integration
// ---------------------------------------------------------------------------

impl Platform {
    /// Publish from a registered client. The payload crosses the cluster LAN
    /// once to reach the local broker, fans out to local matching subscribers
    /// (one LAN egress each), and — when a bridge rule matches — exactly one
    /// copy crosses the WAN in the allowed direction and fans out at the far
    /// broker. No rule, no cross-site delivery.
    pub fn publish_from(
        &mut self,
        client: &ClientId,
        topic: &str,
        payload: Payload,
    ) -> Result<String, PublishError> {
        let topic = Topic::parse(topic)?;
        if payload.len() > self.config.msg_cap_bytes {
            return Err(PublishError::PayloadTooLarge {
                size: payload.len(),
                cap: self.config.msg_cap_bytes,
            });
        }
        let cluster = self
            .client_cluster(client)
            .filter(|c| self.messaging.has_broker(c))
            .ok_or_else(|| PublishError::UnregisteredClient(client.clone()))?;
        let origin_node = self.client_node(client).cloned().unwrap();
        let msg = Arc::new(Message {
            msg_id: self.next_msg_id(),
            topic,
            payload,
            origin: client.clone(),
            origin_node,
            publish_time: self.now(),
        });

        // Ingress leg: client to its local broker.
        let lan = LinkId::lan(&cluster);
        let m = msg.clone();
        let dst_cluster = cluster.clone();
        let link_name = lan.to_string();
        let _ = transmit(
            self,
            &lan,
            Direction::Up,
            FlowClass::Message,
            msg.payload_size(),
            move |p: &mut Platform| {
                p.traffic.log(TrafficRecord {
                    msg_id: m.msg_id.clone(),
                    topic: m.topic.as_str().to_string(),
                    bytes: m.payload_size(),
                    src: m.origin.clone(),
                    dst: format!("broker:{dst_cluster}"),
                    t_pub: m.publish_time.as_micros(),
                    t_dlv: p.now().as_micros(),
                    link: link_name,
                    kind: KIND_ADHOC_REPETITIVE,
                });
                p.broker_ingest(&dst_cluster, m, true);
            },
            None,
        );
        Ok(msg.msg_id.clone())
    }

    /// A message reached `cluster`'s broker: egress to local matching
    /// subscribers, and forward across the bridge when it arrived from a
    /// local client (bridged messages are never re-bridged).
    fn broker_ingest(&mut self, cluster: &HierarchicalId, msg: Arc<Message>, may_bridge: bool) {
        let subs = self.messaging.matching_subs(cluster, &msg.topic);
        let lan = LinkId::lan(cluster);
        for sub in subs {
            let m = msg.clone();
            let client = sub.client.clone();
            let sub_id = sub.id;
            let link_name = lan.to_string();
            let _ = transmit(
                self,
                &lan,
                Direction::Up,
                FlowClass::Message,
                m.payload_size(),
                move |p: &mut Platform| {
                    p.traffic.log(TrafficRecord {
                        msg_id: m.msg_id.clone(),
                        topic: m.topic.as_str().to_string(),
                        bytes: m.payload_size(),
                        src: m.origin.clone(),
                        dst: client.clone(),
                        t_pub: m.publish_time.as_micros(),
                        t_dlv: p.now().as_micros(),
                        link: link_name,
                        kind: KIND_ADHOC_REPETITIVE,
                    });
                    p.deliver_to_client(&client, m, sub_id);
                },
                None,
            );
        }
        if may_bridge {
            self.bridge_forward(cluster, msg);
        }
    }

    /// Forward over the WAN where a bridge rule allows it. At most one copy
    /// per message per link, regardless of how many rules match.
    fn bridge_forward(&mut self, origin_cluster: &HierarchicalId, msg: Arc<Message>) {
        let origin_kind = self.messaging.broker(origin_cluster).and_then(|b| b.kind);
        match origin_kind {
            Some(ClusterKind::Ec) => {
                if self.messaging.bridge_matches_up(origin_cluster, &msg.topic) {
                    let infra = origin_cluster.infra_id();
                    let cc = match self.registry.infra(&infra) {
                        Ok(rec) => rec.cc().id.clone(),
                        Err(_) => return,
                    };
                    self.bridge_transmit(origin_cluster, Direction::Up, cc, msg);
                }
            }
            Some(ClusterKind::Cc) => {
                for ec in self.messaging.ecs_matching_down(&msg.topic) {
                    if ec.infra_id() == origin_cluster.infra_id() {
                        self.bridge_transmit(&ec, Direction::Down, ec.clone(), msg.clone());
                    }
                }
            }
            None => {}
        }
    }

    fn bridge_transmit(
        &mut self,
        ec: &HierarchicalId,
        dir: Direction,
        dst_cluster: HierarchicalId,
        msg: Arc<Message>,
    ) {
        let wan = LinkId::wan(ec);
        let link_name = format!("{wan}:{}", dir.tag());
        let m = msg.clone();
        // At-most-once across a partition: a dropped bridged copy is not
        // replayed after restore.
        let _ = transmit(
            self,
            &wan,
            dir,
            FlowClass::Message,
            msg.payload_size(),
            move |p: &mut Platform| {
                p.traffic.log(TrafficRecord {
                    msg_id: m.msg_id.clone(),
                    topic: m.topic.as_str().to_string(),
                    bytes: m.payload_size(),
                    src: m.origin.clone(),
                    dst: dst_cluster.to_string(),
                    t_pub: m.publish_time.as_micros(),
                    t_dlv: p.now().as_micros(),
                    link: link_name,
                    kind: KIND_LONG_LASTING,
                });
                p.broker_ingest(&dst_cluster, m, false);
            },
            None,
        );
    }

    fn deliver_to_client(&mut self, client: &ClientId, msg: Arc<Message>, _sub: u64) {
        self.with_behavior(client, |beh, ctx| beh.on_message(ctx, &msg));
    }

    /// Subscribe `client` at its local broker. Future matching messages are
    /// delivered in per-publisher order; there are no retained messages.
    pub fn subscribe_from(
        &mut self,
        client: &ClientId,
        pattern: &str,
    ) -> Result<u64, PublishError> {
        let pattern = TopicPattern::parse(pattern)?;
        let cluster = self
            .client_cluster(client)
            .filter(|c| self.messaging.has_broker(c))
            .ok_or_else(|| PublishError::UnregisteredClient(client.clone()))?;
        self.messaging.sub_seq += 1;
        let id = self.messaging.sub_seq;
        let broker = self
            .messaging
            .brokers
            .get_mut(&cluster.to_string())
            .expect("broker exists");
        broker.subs.insert(
            id,
            Subscription {
                id,
                client: client.clone(),
                broker: cluster,
                pattern,
            },
        );
        Ok(id)
    }

    /// Install a long-lasting bridge between an EC broker and the CC broker.
    /// Rules stay active for the life of the service; duplicates are
    /// harmless because forwarding is at most once per message per link.
    pub fn configure_bridge(
        &mut self,
        ec: &HierarchicalId,
        patterns: &[&str],
        direction: BridgeDirection,
    ) -> Result<u64, PublishError> {
        if !self.messaging.has_broker(ec) {
            return Err(PublishError::UnknownCluster(ec.to_string()));
        }
        let cc_exists = self
            .registry
            .infra(&ec.infra_id())
            .map(|rec| self.messaging.has_broker(&rec.cc().id))
            .unwrap_or(false);
        if !cc_exists {
            return Err(PublishError::UnknownCluster(format!(
                "{} has no peer CC broker",
                ec.infra_id()
            )));
        }
        let parsed: Result<Vec<TopicPattern>, TopicError> =
            patterns.iter().map(|p| TopicPattern::parse(p)).collect();
        self.messaging.bridge_seq += 1;
        let id = self.messaging.bridge_seq;
        self.messaging.bridges.insert(
            id,
            BridgeRule {
                id,
                ec: ec.clone(),
                patterns: parsed?,
                direction,
            },
        );
        Ok(id)
    }
}
