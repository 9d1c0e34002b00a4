//! Resource-level file service. Control flow rides the message service on
//! `ace/svc/file/...` topics (small packets); data flows as bulk chunks over
//! WAN links, fair-queued against message traffic. Each site keeps its own
//! object store; fetched copies are cached at the reader's site as
//! temporaries.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::infrastructure::ClusterKind;
use crate::messaging::{Message, Payload, Topic};
use crate::platform::{Actor, ClientId, Ctx, Platform};
use crate::simnet::{transmit, Direction, FlowClass, LinkId, LinkStatus, SimTime};
use crate::tracelog::{TrafficRecord, KIND_ADHOC_ONEOFF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Temporary,
    Permanent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TicketState {
    Announced,
    Transferring,
    Complete,
    Failed,
}

#[derive(Debug, Clone)]
pub struct StoredObject {
    pub key: String,
    pub bytes: Arc<Vec<u8>>,
    pub tier: Tier,
    pub site: HierarchicalId,
    pub checksum: u64,
    pub created_at: SimTime,
    /// False for copies cached by fetch; the authoritative copy lives where
    /// the object was put.
    pub authoritative: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferTicket {
    pub ticket_id: String,
    pub key: String,
    pub src: String,
    pub dst: String,
    pub state: TicketState,
    pub bytes_len: u64,
    pub checksum: u64,
    pub started_at_us: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FileError {
    #[error("key {0:?} already exists at this site")]
    KeyExists(String),
    #[error("site quota exceeded")]
    QuotaExceeded,
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("source site unreachable (WAN partitioned) and no local cache")]
    PartitionedSource,
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("client {0} has no local site")]
    NoLocalSite(String),
    #[error("malformed key {0:?}")]
    MalformedKey(String),
    #[error("transfers run between an EC and the CC; {0} -> {1} is not routable")]
    UnsupportedRoute(String, String),
}

#[derive(Debug, Default)]
pub struct SiteStore {
    pub objects: BTreeMap<String, StoredObject>,
    pub used_bytes: u64,
}

pub type FetchCallback = Box<dyn FnOnce(&mut Platform, Result<Arc<Vec<u8>>, FileError>)>;

#[derive(Default)]
pub struct FileState {
    sites: BTreeMap<String, SiteStore>,
    pub tickets: BTreeMap<String, TransferTicket>,
    ticket_seq: u64,
    pending: BTreeMap<String, FetchCallback>,
}

impl FileState {
    pub fn add_site(&mut self, cluster: &HierarchicalId) {
        self.sites.insert(cluster.to_string(), SiteStore::default());
    }

    pub fn site(&self, cluster: &HierarchicalId) -> Option<&SiteStore> {
        self.sites.get(&cluster.to_string())
    }

    fn site_mut(&mut self, cluster: &HierarchicalId) -> Result<&mut SiteStore, FileError> {
        self.sites
            .get_mut(&cluster.to_string())
            .ok_or_else(|| FileError::UnknownSite(cluster.to_string()))
    }

    pub fn ticket(&self, id: &str) -> Option<&TransferTicket> {
        self.tickets.get(id)
    }
}

/// Control message schema on `ace/svc/file/<site>/<key>`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FileCtl {
    pub op: String,
    pub key: String,
    pub bytes_len: u64,
    pub checksum: u64,
    pub ticket_id: String,
    /// Requesting site for fetch ops.
    #[serde(default)]
    pub dst: String,
}

fn file_topic(site: &HierarchicalId, key: &str) -> String {
    format!("ace/svc/file/{site}/{key}")
}

fn checksum(bytes: &[u8]) -> u64 {
    crate::simnet::rng::fnv1a64(bytes)
}

fn valid_key(key: &str) -> bool {
    Topic::parse(key).is_ok()
}

impl Platform {
    fn client_site(&self, client: &ClientId) -> Result<HierarchicalId, FileError> {
        self.client_cluster(client)
            .ok_or_else(|| FileError::NoLocalSite(client.clone()))
    }

    /// Store an object at the caller's local site and announce it on the
    /// control plane.
    pub fn file_put(
        &mut self,
        client: &ClientId,
        key: &str,
        bytes: Vec<u8>,
        tier: Tier,
    ) -> Result<TransferTicket, FileError> {
        if !valid_key(key) {
            return Err(FileError::MalformedKey(key.to_string()));
        }
        let site = self.client_site(client)?;
        let quota = self.config.site_quota_bytes;
        let now = self.now();
        let store = self.files.site_mut(&site)?;
        if store.objects.contains_key(key) {
            return Err(FileError::KeyExists(key.to_string()));
        }
        if store.used_bytes + bytes.len() as u64 > quota {
            return Err(FileError::QuotaExceeded);
        }
        let sum = checksum(&bytes);
        let len = bytes.len() as u64;
        let obj = StoredObject {
            key: key.to_string(),
            bytes: Arc::new(bytes),
            tier,
            site: site.clone(),
            checksum: sum,
            created_at: now,
            authoritative: true,
        };
        store.used_bytes += len;
        store.objects.insert(key.to_string(), obj);
        self.files.ticket_seq += 1;
        let ticket = TransferTicket {
            ticket_id: format!("put-{}", self.files.ticket_seq),
            key: key.to_string(),
            src: site.to_string(),
            dst: site.to_string(),
            state: TicketState::Complete,
            bytes_len: len,
            checksum: sum,
            started_at_us: now.as_micros(),
        };
        let ctl = FileCtl {
            op: "put".into(),
            key: key.to_string(),
            bytes_len: len,
            checksum: sum,
            ticket_id: ticket.ticket_id.clone(),
            dst: String::new(),
        };
        let svc = file_client_id(&site);
        let _ = self.publish_from(&svc, &file_topic(&site, key), Payload::json(&ctl));
        Ok(ticket)
    }

    /// Fetch `key` whose authoritative copy lives at `src_site`. Local copies
    /// (authoritative or cached) are served without any network traffic.
    /// Remote fetches create a transfer ticket; `done` fires when the ticket
    /// completes or fails. Returns the ticket id for remote fetches.
    pub fn file_fetch(
        &mut self,
        client: &ClientId,
        key: &str,
        src_site: &HierarchicalId,
        done: FetchCallback,
    ) -> Result<Option<String>, FileError> {
        if !valid_key(key) {
            return Err(FileError::MalformedKey(key.to_string()));
        }
        let dst_site = self.client_site(client)?;
        // Local copy first: cache or authoritative, zero WAN bytes.
        if let Some(obj) = self.files.site(&dst_site).and_then(|s| s.objects.get(key)) {
            let bytes = obj.bytes.clone();
            self.events.schedule_after(0, move |p| done(p, Ok(bytes)));
            return Ok(None);
        }
        if self.files.site(src_site).is_none() {
            return Err(FileError::UnknownSite(src_site.to_string()));
        }
        if src_site == &dst_site {
            return Err(FileError::UnknownKey(key.to_string()));
        }
        let (link, _dir) = transfer_route(self, src_site, &dst_site)?;
        if self.links.status(&link) == Some(LinkStatus::Partitioned) {
            return Err(FileError::PartitionedSource);
        }

        self.files.ticket_seq += 1;
        let ticket_id = format!("tk-{}", self.files.ticket_seq);
        let ticket = TransferTicket {
            ticket_id: ticket_id.clone(),
            key: key.to_string(),
            src: src_site.to_string(),
            dst: dst_site.to_string(),
            state: TicketState::Announced,
            bytes_len: 0,
            checksum: 0,
            started_at_us: self.now().as_micros(),
        };
        self.files.tickets.insert(ticket_id.clone(), ticket);
        self.files.pending.insert(ticket_id.clone(), done);

        let ctl = FileCtl {
            op: "fetch".into(),
            key: key.to_string(),
            bytes_len: 0,
            checksum: 0,
            ticket_id: ticket_id.clone(),
            dst: dst_site.to_string(),
        };
        let svc = file_client_id(&dst_site);
        let _ = self.publish_from(&svc, &file_topic(src_site, key), Payload::json(&ctl));
        Ok(Some(ticket_id))
    }

    /// Remove temporary objects at `site` older than `older_than_us`.
    /// Permanent objects are never touched. Idempotent.
    pub fn file_gc_temporary(&mut self, site: &HierarchicalId, older_than_us: u64) -> usize {
        let now = self.now();
        let Ok(store) = self.files.site_mut(site) else {
            return 0;
        };
        let doomed: Vec<String> = store
            .objects
            .values()
            .filter(|o| {
                o.tier == Tier::Temporary && now.saturating_sub(o.created_at) >= older_than_us
            })
            .map(|o| o.key.clone())
            .collect();
        for key in &doomed {
            if let Some(obj) = store.objects.remove(key) {
                store.used_bytes -= obj.bytes.len() as u64;
            }
        }
        doomed.len()
    }

    fn ticket_failed(&mut self, ticket_id: &str, err: FileError) {
        if let Some(t) = self.files.tickets.get_mut(ticket_id) {
            if t.state == TicketState::Complete || t.state == TicketState::Failed {
                return;
            }
            t.state = TicketState::Failed;
        }
        if let Some(cb) = self.files.pending.remove(ticket_id) {
            self.events.schedule_after(0, move |p| cb(p, Err(err)));
        }
    }

    /// Start the data flow for an accepted fetch: bulk chunks on the WAN,
    /// control stays on the message plane.
    fn start_transfer(
        &mut self,
        ticket_id: String,
        key: String,
        src: HierarchicalId,
        dst: HierarchicalId,
        bytes: Arc<Vec<u8>>,
        sum: u64,
    ) {
        let total = bytes.len() as u64;
        let started = self.now().as_micros();
        if let Some(t) = self.files.tickets.get_mut(&ticket_id) {
            t.state = TicketState::Transferring;
            t.bytes_len = total;
            t.checksum = sum;
            t.started_at_us = started;
        }
        let (link, dir) = match transfer_route(self, &src, &dst) {
            Ok(r) => r,
            Err(e) => {
                self.ticket_failed(&ticket_id, e);
                return;
            }
        };
        let chunk = self.config.file_chunk_bytes;
        let n_chunks = total.div_ceil(chunk).max(1);
        for i in 0..n_chunks {
            let size = if i == n_chunks - 1 && total > 0 {
                total - chunk * (n_chunks - 1)
            } else if total == 0 {
                0
            } else {
                chunk
            };
            let last = i == n_chunks - 1;
            let tid = ticket_id.clone();
            let tid_drop = ticket_id.clone();
            let key2 = key.clone();
            let src2 = src.clone();
            let dst2 = dst.clone();
            let bytes2 = bytes.clone();
            let link_name = format!("{link}:{}", dir.tag());
            let res = transmit(
                self,
                &link,
                dir,
                FlowClass::FileData,
                size,
                move |p: &mut Platform| {
                    if last {
                        p.finish_transfer(tid, key2, src2, dst2, bytes2, sum, link_name);
                    }
                },
                Some(Box::new(move |p: &mut Platform| {
                    p.ticket_failed(&tid_drop, FileError::PartitionedSource);
                })),
            );
            if res.is_err() {
                self.ticket_failed(&ticket_id, FileError::PartitionedSource);
                return;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_transfer(
        &mut self,
        ticket_id: String,
        key: String,
        src: HierarchicalId,
        dst: HierarchicalId,
        bytes: Arc<Vec<u8>>,
        sum: u64,
        link_name: String,
    ) {
        let now = self.now();
        let total = bytes.len() as u64;
        debug_assert_eq!(checksum(&bytes), sum);
        if let Ok(store) = self.files.site_mut(&dst) {
            // Cached copy at the reader's site, temporary tier.
            if !store.objects.contains_key(&key) {
                store.used_bytes += total;
                store.objects.insert(
                    key.clone(),
                    StoredObject {
                        key: key.clone(),
                        bytes: bytes.clone(),
                        tier: Tier::Temporary,
                        site: dst.clone(),
                        checksum: sum,
                        created_at: now,
                        authoritative: false,
                    },
                );
            }
        }
        let mut t_pub = now.as_micros();
        if let Some(t) = self.files.tickets.get_mut(&ticket_id) {
            t.state = TicketState::Complete;
            t_pub = t.started_at_us;
        }
        // One accounting record for the whole data flow.
        self.traffic.log(TrafficRecord {
            msg_id: ticket_id.clone(),
            topic: format!("ace/svc/file/data/{key}"),
            bytes: total,
            src: src.to_string(),
            dst: dst.to_string(),
            t_pub,
            t_dlv: now.as_micros(),
            link: link_name,
            kind: KIND_ADHOC_ONEOFF,
        });
        let ctl = FileCtl {
            op: "complete".into(),
            key: key.clone(),
            bytes_len: total,
            checksum: sum,
            ticket_id: ticket_id.clone(),
            dst: dst.to_string(),
        };
        let svc = file_client_id(&dst);
        let _ = self.publish_from(&svc, &file_topic(&dst, &key), Payload::json(&ctl));
        if let Some(cb) = self.files.pending.remove(&ticket_id) {
            self.events.schedule_after(0, move |p| cb(p, Ok(bytes)));
        }
    }
}

/// WAN route between two sites; exactly one endpoint must be the CC.
fn transfer_route(
    p: &Platform,
    src: &HierarchicalId,
    dst: &HierarchicalId,
) -> Result<(LinkId, Direction), FileError> {
    let kind_of = |c: &HierarchicalId| -> Option<ClusterKind> {
        p.registry
            .infra(&c.infra_id())
            .ok()
            .and_then(|r| r.cluster(c))
            .map(|c| c.kind)
    };
    match (kind_of(src), kind_of(dst)) {
        (Some(ClusterKind::Ec), Some(ClusterKind::Cc)) => Ok((LinkId::wan(src), Direction::Up)),
        (Some(ClusterKind::Cc), Some(ClusterKind::Ec)) => Ok((LinkId::wan(dst), Direction::Down)),
        _ => Err(FileError::UnsupportedRoute(
            src.to_string(),
            dst.to_string(),
        )),
    }
}

pub fn file_client_id(site: &HierarchicalId) -> ClientId {
    format!("ace.file.{site}")
}

/// Per-site file service endpoint: answers fetch requests for its site and
/// keeps caches coherent by watching put announcements.
pub struct FileSiteActor {
    pub site: HierarchicalId,
}

impl Actor for FileSiteActor {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let _ = ctx.platform.subscribe_from(&client, "ace/svc/file/#");
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let Some(ctl) = msg.json_head::<FileCtl>() else {
            return;
        };
        let topic = msg.topic.as_str();
        let Some(rest) = topic.strip_prefix("ace/svc/file/") else {
            return;
        };
        let Some((site_str, _key)) = rest.split_once('/') else {
            return;
        };
        match ctl.op.as_str() {
            "fetch" if site_str == self.site.to_string() => {
                // We are the source; serve or nack.
                let obj = ctx
                    .platform
                    .files
                    .site(&self.site)
                    .and_then(|s| s.objects.get(&ctl.key))
                    .map(|o| (o.bytes.clone(), o.checksum));
                let dst: HierarchicalId = match ctl.dst.parse() {
                    Ok(d) => d,
                    Err(_) => return,
                };
                match obj {
                    Some((bytes, sum)) => {
                        ctx.platform.start_transfer(
                            ctl.ticket_id,
                            ctl.key,
                            self.site.clone(),
                            dst,
                            bytes,
                            sum,
                        );
                    }
                    None => {
                        let nack = FileCtl {
                            op: "nack".into(),
                            key: ctl.key.clone(),
                            bytes_len: 0,
                            checksum: 0,
                            ticket_id: ctl.ticket_id.clone(),
                            dst: ctl.dst.clone(),
                        };
                        let svc = ctx.client.clone();
                        let _ = ctx.platform.publish_from(
                            &svc,
                            &file_topic(&self.site, &ctl.key),
                            Payload::json(&nack),
                        );
                    }
                }
            }
            "nack" => {
                // Fails the ticket at whichever side is waiting on it.
                if ctx.platform.files.pending.contains_key(&ctl.ticket_id) {
                    ctx.platform
                        .ticket_failed(&ctl.ticket_id, FileError::UnknownKey(ctl.key.clone()));
                }
            }
            "put" if site_str != self.site.to_string() => {
                // Weak cache coherence: a fresh authoritative announcement
                // with a different checksum invalidates our stale cached copy.
                let store = match ctx.platform.files.site_mut(&self.site) {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let stale = store
                    .objects
                    .get(&ctl.key)
                    .is_some_and(|o| !o.authoritative && o.checksum != ctl.checksum);
                if stale {
                    if let Some(obj) = store.objects.remove(&ctl.key) {
                        store.used_bytes -= obj.bytes.len() as u64;
                    }
                }
            }
            _ => {}
        }
    }
}
