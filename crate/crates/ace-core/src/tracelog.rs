//! Append-only traffic log: one JSON line per link traversal. This is the raw
//! input for bandwidth accounting, and the thing two runs with the same seed
//! must reproduce byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::simnet::rng::fnv1a64;

/// Link taxonomy metadata: how the hop was established. Purely for
/// accounting and reporting.
pub const KIND_ADHOC_REPETITIVE: &str = "adhoc-repetitive";
pub const KIND_ADHOC_ONEOFF: &str = "adhoc-oneoff";
pub const KIND_LONG_LASTING: &str = "long-lasting";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub msg_id: String,
    pub topic: String,
    pub bytes: u64,
    pub src: String,
    pub dst: String,
    /// Publish and delivery times in microseconds of virtual time.
    pub t_pub: u64,
    pub t_dlv: u64,
    pub link: String,
    pub kind: &'static str,
}

#[derive(Debug, Default)]
pub struct TrafficLog {
    records: Vec<TrafficRecord>,
    digest: u64,
}

impl TrafficLog {
    pub fn log(&mut self, rec: TrafficRecord) {
        let line = serde_json::to_string(&rec).expect("record serializes");
        self.digest ^= fnv1a64(line.as_bytes()).rotate_left((self.records.len() % 63) as u32);
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TrafficRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Order-sensitive digest of the serialized log; byte-identical logs have
    /// equal digests.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Total bytes over WAN links, filtered by an optional direction suffix
    /// and a topic predicate.
    pub fn wan_bytes_where(&self, pred: impl Fn(&TrafficRecord) -> bool) -> u64 {
        self.records
            .iter()
            .filter(|r| r.link.starts_with("wan:"))
            .filter(|r| pred(r))
            .map(|r| r.bytes)
            .sum()
    }
}

/// Which plane a topic belongs to. Platform topics (`ace/...`), in-app control
/// and telemetry are control plane; everything else under `app/...` is the
/// workload data plane.
pub fn is_control_plane(topic: &str) -> bool {
    if topic.starts_with("ace/") {
        return true;
    }
    if let Some(rest) = topic.strip_prefix("app/") {
        if let Some((_, sub)) = rest.split_once('/') {
            return sub.starts_with("ctl/")
                || sub == "ctl"
                || sub.starts_with("telemetry/")
                || sub == "telemetry";
        }
    }
    false
}
