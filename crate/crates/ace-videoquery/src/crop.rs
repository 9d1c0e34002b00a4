//! Crop records: the wire metadata that rides with each crop and the
//! per-run trace every component reports into. The trace is observational —
//! it costs no simulated network traffic — and is the raw input for metrics
//! and the JSON-lines audit dump.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

/// Metadata carried in crop messages; the pixel payload itself is an opaque
/// tail of `size` bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropMsg {
    pub crop_id: String,
    pub source: String,
    /// Latent truth, visible only to the classifier models.
    pub latent: bool,
    pub size: u64,
    pub t_extracted_us: u64,
    pub t_od_sent_us: u64,
    /// When the crop was dispatched toward the cloud classifier (either at
    /// the detector for direct uploads or at the controller for escalations).
    #[serde(default)]
    pub t_handoff_us: u64,
    #[serde(default)]
    pub confidence: Option<f64>,
}

/// How a crop was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    Pending,
    /// Identified locally by the edge classifier.
    EocPositive,
    /// Dropped at the controller for low confidence.
    EocDrop,
    /// Escalated from the edge classifier to the cloud.
    Upload,
    /// Sent straight from the detector to the cloud.
    Direct,
}

#[derive(Debug, Clone, Serialize)]
pub struct CropRecord {
    pub crop_id: String,
    pub source: String,
    pub latent: bool,
    pub oracle_positive: bool,
    pub size: u64,
    pub t_extracted_us: u64,
    pub t_od_sent_us: u64,
    pub t_labeled_us: Option<u64>,
    pub predicted: Option<bool>,
    pub route: Route,
    pub path: Vec<&'static str>,
}

#[derive(Debug, Default)]
pub struct RunTrace {
    pub crops: BTreeMap<String, CropRecord>,
}

pub type TraceHandle = Rc<RefCell<RunTrace>>;

pub fn new_trace() -> TraceHandle {
    Rc::new(RefCell::new(RunTrace::default()))
}

impl RunTrace {
    pub fn on_extracted(&mut self, rec: CropRecord) {
        self.crops.insert(rec.crop_id.clone(), rec);
    }

    pub fn on_route(&mut self, crop_id: &str, route: Route, hop: &'static str) {
        if let Some(rec) = self.crops.get_mut(crop_id) {
            rec.route = route;
            rec.path.push(hop);
        }
    }

    pub fn on_hop(&mut self, crop_id: &str, hop: &'static str) {
        if let Some(rec) = self.crops.get_mut(crop_id) {
            rec.path.push(hop);
        }
    }

    /// Final prediction for a crop. Labeling is monotone: the first label
    /// wins, later duplicates are ignored.
    pub fn on_labeled(&mut self, crop_id: &str, at_us: u64, predicted: bool, hop: &'static str) {
        if let Some(rec) = self.crops.get_mut(crop_id) {
            if rec.t_labeled_us.is_none() {
                rec.t_labeled_us = Some(at_us);
                rec.predicted = Some(predicted);
                rec.path.push(hop);
            }
        }
    }

    pub fn unresolved(&self) -> usize {
        self.crops
            .values()
            .filter(|c| c.t_labeled_us.is_none())
            .count()
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// JSON-lines audit dump, one line per crop in id order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.crops.values() {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}
