//! Links with bandwidth, propagation delay and partitions.
//!
//! Each link direction is a FIFO serializer: a payload occupies the pipe for
//! `bytes * 8 / bandwidth` and arrives one propagation delay after it has
//! fully serialized. Concurrent message and bulk-file flows share a direction
//! by round-robin at payload granularity. Partitioning a link drops whatever
//! has not fully serialized; payloads already in flight still arrive.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::queue::EventQueue;
use super::time::{Micros, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub String);

impl LinkId {
    pub fn wan(ec: &crate::ids::HierarchicalId) -> LinkId {
        LinkId(format!("wan:{ec}"))
    }
    pub fn lan(cluster: &crate::ids::HierarchicalId) -> LinkId {
        LinkId(format!("lan:{cluster}"))
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::Up => 0,
            Direction::Down => 1,
        }
    }
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

/// Traffic class sharing a link direction. Fair-queued against each other at
/// payload granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowClass {
    Message,
    FileData,
}

impl FlowClass {
    fn index(self) -> usize {
        match self {
            FlowClass::Message => 0,
            FlowClass::FileData => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkStatus {
    Up,
    Partitioned,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransmitError {
    #[error("link {0} is partitioned")]
    Partitioned(String),
    #[error("unknown link {0}")]
    UnknownLink(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: LinkId,
    /// Endpoint clusters; for a LAN link both are the same cluster.
    pub endpoints: (String, String),
    pub up_mbps: u64,
    pub down_mbps: u64,
    pub one_way_delay_us: Micros,
}

impl LinkSpec {
    fn mbps(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Up => self.up_mbps,
            Direction::Down => self.down_mbps,
        }
    }
}

/// Exact serialization time in microseconds: bits divided by Mbps is µs.
pub fn tx_micros(bytes: u64, mbps: u64) -> Micros {
    (bytes * 8).div_ceil(mbps.max(1))
}

type Callback<W> = Box<dyn FnOnce(&mut W)>;

struct PendingTx<W> {
    bytes: u64,
    deliver: Callback<W>,
    on_drop: Option<Callback<W>>,
}

struct Lane<W> {
    pending: [VecDeque<PendingTx<W>>; 2],
    current: Option<PendingTx<W>>,
    /// Token identifying the current serialization; stale completion events
    /// (whose payload was dropped by a partition) no longer match.
    token: u64,
    last_class: usize,
    pub delivered_bytes: u64,
}

impl<W> Default for Lane<W> {
    fn default() -> Self {
        Lane {
            pending: [VecDeque::new(), VecDeque::new()],
            current: None,
            token: 0,
            last_class: 1,
            delivered_bytes: 0,
        }
    }
}

impl<W> Lane<W> {
    fn next_pending(&mut self) -> Option<PendingTx<W>> {
        // Round robin between classes, FIFO within a class.
        for step in 1..=2 {
            let c = (self.last_class + step) % 2;
            if let Some(tx) = self.pending[c].pop_front() {
                self.last_class = c;
                return Some(tx);
            }
        }
        None
    }
}

pub struct Link<W> {
    pub spec: LinkSpec,
    pub status: LinkStatus,
    lanes: [Lane<W>; 2],
}

pub struct LinkTable<W> {
    links: std::collections::BTreeMap<LinkId, Link<W>>,
}

impl<W> Default for LinkTable<W> {
    fn default() -> Self {
        LinkTable {
            links: std::collections::BTreeMap::new(),
        }
    }
}

impl<W> LinkTable<W> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, spec: LinkSpec) {
        self.links.insert(
            spec.id.clone(),
            Link {
                spec,
                status: LinkStatus::Up,
                lanes: [Lane::default(), Lane::default()],
            },
        );
    }

    pub fn contains(&self, id: &LinkId) -> bool {
        self.links.contains_key(id)
    }

    pub fn status(&self, id: &LinkId) -> Option<LinkStatus> {
        self.links.get(id).map(|l| l.status)
    }

    pub fn spec(&self, id: &LinkId) -> Option<&LinkSpec> {
        self.links.get(id).map(|l| &l.spec)
    }

    pub fn delivered_bytes(&self, id: &LinkId, dir: Direction) -> u64 {
        self.links
            .get(id)
            .map(|l| l.lanes[dir.index()].delivered_bytes)
            .unwrap_or(0)
    }

    pub fn ids(&self) -> impl Iterator<Item = &LinkId> {
        self.links.keys()
    }
}

/// World access required by the link machinery: the event queue and the link
/// table must be reachable from the same mutable world.
pub trait SimWorld: Sized + 'static {
    fn events(&mut self) -> &mut EventQueue<Self>;
    fn links(&mut self) -> &mut LinkTable<Self>;
}

/// Enqueue `bytes` on `link`/`dir`. `deliver` runs when the payload arrives at
/// the far end; `on_drop` runs if a partition destroys it first. Fails fast if
/// the link is already partitioned.
pub fn transmit<W: SimWorld>(
    w: &mut W,
    link: &LinkId,
    dir: Direction,
    class: FlowClass,
    bytes: u64,
    deliver: impl FnOnce(&mut W) + 'static,
    on_drop: Option<Callback<W>>,
) -> Result<(), TransmitError> {
    {
        let table = w.links();
        let l = table
            .links
            .get_mut(link)
            .ok_or_else(|| TransmitError::UnknownLink(link.0.clone()))?;
        if l.status == LinkStatus::Partitioned {
            return Err(TransmitError::Partitioned(link.0.clone()));
        }
        let lane = &mut l.lanes[dir.index()];
        lane.pending[class.index()].push_back(PendingTx {
            bytes,
            deliver: Box::new(deliver),
            on_drop,
        });
        if lane.current.is_some() {
            return Ok(());
        }
    }
    start_next(w, link.clone(), dir);
    Ok(())
}

fn start_next<W: SimWorld>(w: &mut W, link: LinkId, dir: Direction) {
    let (token, done_at) = {
        let now = w.events().now();
        let table = w.links();
        let l = match table.links.get_mut(&link) {
            Some(l) => l,
            None => return,
        };
        let mbps = l.spec.mbps(dir);
        let lane = &mut l.lanes[dir.index()];
        debug_assert!(lane.current.is_none());
        let tx = match lane.next_pending() {
            Some(tx) => tx,
            None => return,
        };
        let t = tx_micros(tx.bytes, mbps);
        lane.token += 1;
        lane.current = Some(tx);
        (lane.token, now + t)
    };
    let link2 = link.clone();
    w.events()
        .schedule_at(done_at, move |w| serialize_done(w, link2, dir, token));
}

fn serialize_done<W: SimWorld>(w: &mut W, link: LinkId, dir: Direction, token: u64) {
    let (deliver, delay) = {
        let table = w.links();
        let l = match table.links.get_mut(&link) {
            Some(l) => l,
            None => return,
        };
        let delay = l.spec.one_way_delay_us;
        let lane = &mut l.lanes[dir.index()];
        if lane.token != token || lane.current.is_none() {
            return; // payload was dropped by a partition while serializing
        }
        let tx = lane.current.take().unwrap();
        lane.delivered_bytes += tx.bytes;
        (tx.deliver, delay)
    };
    // Fully serialized payloads arrive even if the link partitions during
    // propagation.
    w.events().schedule_after(delay, deliver);
    start_next(w, link, dir);
}

/// Change the status of `link` at time `at`. Partitioning flushes everything
/// queued or mid-serialization, invoking each payload's `on_drop`.
pub fn set_status_at<W: SimWorld>(w: &mut W, link: &LinkId, status: LinkStatus, at: SimTime) {
    let link = link.clone();
    w.events().schedule_at(at, move |w| {
        let mut dropped: Vec<Callback<W>> = Vec::new();
        {
            let table = w.links();
            let l = match table.links.get_mut(&link) {
                Some(l) => l,
                None => return,
            };
            l.status = status;
            if status == LinkStatus::Partitioned {
                for lane in l.lanes.iter_mut() {
                    if let Some(cur) = lane.current.take() {
                        lane.token += 1;
                        if let Some(f) = cur.on_drop {
                            dropped.push(f);
                        }
                    }
                    for q in lane.pending.iter_mut() {
                        for tx in q.drain(..) {
                            if let Some(f) = tx.on_drop {
                                dropped.push(f);
                            }
                        }
                    }
                }
            }
        }
        for f in dropped {
            f(w);
        }
    });
}
