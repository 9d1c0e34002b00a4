//! The video-query components as simulation actors: data generators feeding
//! object detectors on camera nodes, one edge classifier per EC, the single
//! cloud classifier, result storage, and the in-app controllers carrying the
//! basic and advanced policies.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use ace_core::inapp::{
    ControllerCore, CoreSignal, InstanceCmd, TelemetrySample, WorkloadGate, EPOCH_TIMER_TAG,
};
use ace_core::messaging::{Message, Payload};
use ace_core::platform::{Actor, Ctx};
use ace_core::simnet::rng::fnv1a64;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::crop::{CropMsg, CropRecord, Route, TraceHandle};
use crate::model::{coc_verdict, EocLaw, COC_SERVICE_US, EOC_SERVICE_US};
use crate::paradigm::Paradigm;
use crate::policy::{
    adapt_thresholds, ap_route, bp_route, update_eil, ApDest, BpDecision, EilEstimator,
    PolicyThresholds, NOMINAL_THRESHOLDS,
};

pub const APP: &str = "vq";

/// Everything the components need to know about one experiment run.
#[derive(Debug, Clone)]
pub struct VqConfig {
    pub paradigm: Paradigm,
    pub interval_us: u64,
    pub duration_us: u64,
    /// Crops begin flowing only after this virtual instant, leaving room for
    /// deployment and policy activation to settle.
    pub start_barrier_us: u64,
    pub lambda_crops: f64,
    pub p_pos: f64,
    pub size_median: f64,
    pub size_sigma: f64,
    pub size_cap: u64,
    pub eil_target_us: u64,
    pub epoch_us: u64,
    pub ewma_alpha: f64,
    /// Seed for the cloud verdict oracle (derived from the run seed).
    pub coc_seed: u64,
}

impl VqConfig {
    pub fn sampling_events(&self) -> u64 {
        self.duration_us / self.interval_us
    }
}

fn frames_topic(node: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/frames/{node}")
}

fn crop_eoc_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/crop/eoc/{cluster}")
}

fn crop_up_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/crop/up/{cluster}")
}

fn crop_direct_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/crop/direct/{cluster}")
}

fn eocres_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/eocres/{cluster}")
}

fn result_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/result/{cluster}")
}

fn route_hint_topic(cluster: &ace_core::HierarchicalId) -> String {
    format!("app/{APP}/ctl/{cluster}/route")
}

#[derive(Debug, Serialize, Deserialize)]
struct RouteHint {
    eoc_us: f64,
    coc_us: f64,
    /// Fraction of crops to send straight to the cloud classifier. Saturated
    /// at 0 or 1 whenever one estimate clearly dominates; in between it is
    /// the integral load-balancing realization of the argmin rule.
    divert: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EocResult {
    crop: CropMsg,
    confidence: f64,
    queue_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultMeta {
    crop_id: String,
    positive: bool,
    by: String,
}

const TICK: u64 = 1;
const SERVE: u64 = 2;

// ---------------------------------------------------------------------------
// Data generator: one per camera node, drives its co-located detector.
// ---------------------------------------------------------------------------

pub struct DataGenerator {
    pub cfg: Rc<VqConfig>,
    ticks_left: u64,
}

impl DataGenerator {
    pub fn new(cfg: Rc<VqConfig>) -> Self {
        let ticks_left = cfg.sampling_events();
        DataGenerator { cfg, ticks_left }
    }
}

impl Actor for DataGenerator {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        // Deterministic per-node phase staggers the cameras inside an EC.
        let phase = fnv1a64(ctx.node.to_string().as_bytes()) % self.cfg.interval_us;
        let barrier = self
            .cfg
            .start_barrier_us
            .saturating_sub(ctx.now().as_micros());
        ctx.set_timer(barrier + phase, TICK);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag != TICK || self.ticks_left == 0 {
            return;
        }
        self.ticks_left -= 1;
        let client = ctx.client.clone();
        let topic = frames_topic(&ctx.node);
        let _ =
            ctx.platform
                .publish_from(&client, &topic, Payload::json(&serde_json::json!({"f": 3})));
        if self.ticks_left > 0 {
            ctx.set_timer(self.cfg.interval_us, TICK);
        }
    }
}

// ---------------------------------------------------------------------------
// Object detector: extracts crops on every frame tick and routes them.
// ---------------------------------------------------------------------------

pub struct ObjectDetector {
    pub cfg: Rc<VqConfig>,
    pub trace: TraceHandle,
    gate: WorkloadGate,
    hint: Option<RouteHint>,
    crop_seq: u64,
    sizes: LogNormal<f64>,
    arrivals: Poisson<f64>,
}

impl ObjectDetector {
    pub fn new(cfg: Rc<VqConfig>, trace: TraceHandle) -> Self {
        let sizes = LogNormal::new(cfg.size_median.ln(), cfg.size_sigma).expect("valid law");
        let arrivals = Poisson::new(cfg.lambda_crops).expect("valid rate");
        ObjectDetector {
            cfg,
            trace,
            gate: WorkloadGate::default(),
            hint: None,
            crop_seq: 0,
            sizes,
            arrivals,
        }
    }

    fn destination(&mut self, crop_id: &str) -> ApDest {
        match self.cfg.paradigm {
            Paradigm::Ci => ApDest::Coc,
            Paradigm::Ei | Paradigm::Ace => ApDest::Eoc,
            Paradigm::AcePlus => {
                match &self.hint {
                    // No guidance yet: argmin over the service-time priors.
                    None => ap_route(EOC_SERVICE_US as f64, COC_SERVICE_US as f64),
                    Some(h) if h.divert <= 0.0 => ApDest::Eoc,
                    Some(h) if h.divert >= 1.0 => ApDest::Coc,
                    Some(h) => {
                        // Split the stream per the controller's balance
                        // fraction, deterministically per crop.
                        let u = ace_core::simnet::rng::unit_hash(self.cfg.coc_seed, crop_id, 7);
                        if u < h.divert {
                            ApDest::Coc
                        } else {
                            ApDest::Eoc
                        }
                    }
                }
            }
        }
    }
}

impl Actor for ObjectDetector {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let cluster = ctx.node.cluster_id().expect("detector runs on a node");
        let subs = [
            frames_topic(&ctx.node),
            ace_core::inapp::instance_ctl_topic(APP, &client),
            route_hint_topic(&cluster),
        ];
        for s in subs {
            let _ = ctx.platform.subscribe_from(&client, &s);
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let topic = msg.topic.as_str();
        if let Some(cmd) = msg.json_head::<InstanceCmd>() {
            if topic.starts_with(&format!("app/{APP}/ctl/inst/")) {
                self.gate.apply(&cmd);
                return;
            }
        }
        if topic == route_hint_topic(&ctx.node.cluster_id().unwrap()) {
            if let Some(h) = msg.json_head::<RouteHint>() {
                self.hint = Some(h);
            }
            return;
        }
        if topic != frames_topic(&ctx.node) || self.gate.stopped {
            return;
        }
        // A sampling event: extract a Poisson batch of crops.
        let k = self.arrivals.sample(ctx.rng()) as u64;
        for _ in 0..k {
            let size = (self.sizes.sample(ctx.rng()) as u64)
                .min(self.cfg.size_cap)
                .max(1);
            if !self.gate.admits(size) {
                continue; // filtered crops are never emitted
            }
            let latent = ctx.rng().gen_bool(self.cfg.p_pos);
            self.crop_seq += 1;
            let crop_id = format!("{}/c{}", ctx.node, self.crop_seq);
            let now = ctx.now().as_micros();
            let oracle = coc_verdict(self.cfg.coc_seed, &crop_id, latent);
            let dest = self.destination(&crop_id);
            self.trace.borrow_mut().on_extracted(CropRecord {
                crop_id: crop_id.clone(),
                source: ctx.node.to_string(),
                latent,
                oracle_positive: oracle,
                size,
                t_extracted_us: now,
                t_od_sent_us: now,
                t_labeled_us: None,
                predicted: None,
                route: Route::Pending,
                path: vec!["od"],
            });
            let cluster = ctx.node.cluster_id().unwrap();
            let mut crop = CropMsg {
                crop_id: crop_id.clone(),
                source: ctx.node.to_string(),
                latent,
                size,
                t_extracted_us: now,
                t_od_sent_us: now,
                t_handoff_us: 0,
                confidence: None,
            };
            let client = ctx.client.clone();
            match dest {
                ApDest::Eoc => {
                    let _ = ctx.platform.publish_from(
                        &client,
                        &crop_eoc_topic(&cluster),
                        Payload::json_with_opaque(&crop, size),
                    );
                }
                ApDest::Coc => {
                    crop.t_handoff_us = now;
                    self.trace
                        .borrow_mut()
                        .on_route(&crop_id, Route::Direct, "od-direct");
                    let _ = ctx.platform.publish_from(
                        &client,
                        &crop_direct_topic(&cluster),
                        Payload::json_with_opaque(&crop, size),
                    );
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Edge object classifier: single-server FIFO, calibrated confidence law.
// ---------------------------------------------------------------------------

pub struct EdgeClassifier {
    pub cfg: Rc<VqConfig>,
    pub trace: TraceHandle,
    law: EocLaw,
    queue: VecDeque<CropMsg>,
    busy: bool,
}

impl EdgeClassifier {
    pub fn new(cfg: Rc<VqConfig>, trace: TraceHandle, law: EocLaw) -> Self {
        EdgeClassifier {
            cfg,
            trace,
            law,
            queue: VecDeque::new(),
            busy: false,
        }
    }
}

impl Actor for EdgeClassifier {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let cluster = ctx.node.cluster_id().unwrap();
        let _ = ctx
            .platform
            .subscribe_from(&client, &crop_eoc_topic(&cluster));
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let Some(crop) = msg.json_head::<CropMsg>() else {
            return;
        };
        self.queue.push_back(crop);
        if !self.busy {
            self.busy = true;
            ctx.set_timer(EOC_SERVICE_US, SERVE);
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag != SERVE {
            return;
        }
        let Some(crop) = self.queue.pop_front() else {
            self.busy = false;
            return;
        };
        let confidence = self.law.sample_confidence(crop.latent, ctx.rng());
        self.trace.borrow_mut().on_hop(&crop.crop_id, "eoc");
        let cluster = ctx.node.cluster_id().unwrap();
        let out = EocResult {
            crop,
            confidence,
            queue_len: self.queue.len() as u64,
        };
        let client = ctx.client.clone();
        let _ = ctx
            .platform
            .publish_from(&client, &eocres_topic(&cluster), Payload::json(&out));
        if self.queue.is_empty() {
            self.busy = false;
        } else {
            ctx.set_timer(EOC_SERVICE_US, SERVE);
        }
    }
}

// ---------------------------------------------------------------------------
// Cloud object classifier: single server at the CC; its verdict doubles as
// the post-hoc ground truth.
// ---------------------------------------------------------------------------

pub struct CloudClassifier {
    pub cfg: Rc<VqConfig>,
    pub trace: TraceHandle,
    queue: VecDeque<CropMsg>,
    busy: bool,
}

impl CloudClassifier {
    pub fn new(cfg: Rc<VqConfig>, trace: TraceHandle) -> Self {
        CloudClassifier {
            cfg,
            trace,
            queue: VecDeque::new(),
            busy: false,
        }
    }
}

impl Actor for CloudClassifier {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        for s in [
            format!("app/{APP}/crop/up/#"),
            format!("app/{APP}/crop/direct/#"),
        ] {
            let _ = ctx.platform.subscribe_from(&client, &s);
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let Some(crop) = msg.json_head::<CropMsg>() else {
            return;
        };
        self.queue.push_back(crop);
        if !self.busy {
            self.busy = true;
            ctx.set_timer(COC_SERVICE_US, SERVE);
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag != SERVE {
            return;
        }
        let Some(crop) = self.queue.pop_front() else {
            self.busy = false;
            return;
        };
        let now = ctx.now().as_micros();
        let verdict = coc_verdict(self.cfg.coc_seed, &crop.crop_id, crop.latent);
        self.trace
            .borrow_mut()
            .on_labeled(&crop.crop_id, now, verdict, "coc");
        let cluster = ctx.node.cluster_id().unwrap();
        let client = ctx.client.clone();
        if verdict {
            let meta = ResultMeta {
                crop_id: crop.crop_id.clone(),
                positive: true,
                by: "coc".into(),
            };
            let _ =
                ctx.platform
                    .publish_from(&client, &result_topic(&cluster), Payload::json(&meta));
        }
        // Inference-latency telemetry measured from the cloud handoff, so
        // local controllers can compare routes like for like.
        let sample = TelemetrySample {
            instance: client.clone(),
            queue_len: self.queue.len() as u64,
            busy: 1.0,
            latency_us: Some(now.saturating_sub(crop.t_handoff_us)),
            kind: "coc_leg".into(),
        };
        let _ = ctx.platform.publish_from(
            &client,
            &ace_core::inapp::telemetry_topic(APP, &client),
            Payload::json(&sample),
        );
        if self.queue.is_empty() {
            self.busy = false;
        } else {
            ctx.set_timer(COC_SERVICE_US, SERVE);
        }
    }
}

// ---------------------------------------------------------------------------
// Local in-app controller (one per EC): policy execution point.
// ---------------------------------------------------------------------------

pub struct LocalController {
    pub cfg: Rc<VqConfig>,
    pub trace: TraceHandle,
    core: ControllerCore,
    th: PolicyThresholds,
    ap_active: bool,
    eoc_est: EilEstimator,
    coc_est: EilEstimator,
    divert: f64,
    last_hint_us: u64,
}

impl LocalController {
    pub fn new(cfg: Rc<VqConfig>, trace: TraceHandle, scope: &str) -> Self {
        let core = ControllerCore::new(APP, scope, cfg.epoch_us);
        let alpha = cfg.ewma_alpha;
        LocalController {
            cfg,
            trace,
            core,
            th: NOMINAL_THRESHOLDS,
            ap_active: false,
            eoc_est: EilEstimator::for_eoc(alpha),
            coc_est: EilEstimator::for_coc(alpha),
            divert: 0.0,
            last_hint_us: 0,
        }
    }

    /// Route guidance to the detectors. The epoch drives threshold
    /// adaptation; estimate pushes are more frequent so the load balance
    /// reacts within a few crops instead of oscillating epoch-wide.
    fn push_hint(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now().as_micros();
        if now.saturating_sub(self.last_hint_us) < self.cfg.epoch_us / 40 {
            return;
        }
        self.last_hint_us = now;
        // Integrate the relative estimate gap into the balance fraction:
        // negative feedback through the queues makes this settle where both
        // routes cost the same, and saturate when one dominates outright.
        let eoc_us = self.eoc_est.estimate_us();
        let coc_us = self.coc_est.estimate_us();
        let gap = (eoc_us - coc_us) / eoc_us.max(coc_us).max(1.0);
        self.divert = (self.divert + 0.03 * gap).clamp(0.0, 1.0);
        let cluster = ctx.node.cluster_id().unwrap();
        let client = ctx.client.clone();
        let hint = RouteHint {
            eoc_us,
            coc_us,
            divert: self.divert,
        };
        let _ =
            ctx.platform
                .publish_from(&client, &route_hint_topic(&cluster), Payload::json(&hint));
    }

    fn handle_eoc_result(&mut self, ctx: &mut Ctx<'_>, res: EocResult) {
        let now = ctx.now().as_micros();
        // EIL of the edge path for this crop, measured from detector send.
        update_eil(&mut self.eoc_est, (now - res.crop.t_od_sent_us) as f64);
        if self.ap_active {
            self.push_hint(ctx);
        }
        let cluster = ctx.node.cluster_id().unwrap();
        let client = ctx.client.clone();
        let id = res.crop.crop_id.clone();

        if self.cfg.paradigm == Paradigm::Ei {
            // Edge-only rule: identified iff confident; everything else is
            // non-positive (the uncertain band is dropped).
            let positive = res.confidence > self.th.hi;
            let route = if positive {
                Route::EocPositive
            } else {
                Route::EocDrop
            };
            self.trace.borrow_mut().on_route(&id, route, "lic");
            self.trace
                .borrow_mut()
                .on_labeled(&id, now, positive, "lic");
            if positive {
                let meta = ResultMeta {
                    crop_id: id,
                    positive: true,
                    by: "eoc".into(),
                };
                let _ = ctx.platform.publish_from(
                    &client,
                    &result_topic(&cluster),
                    Payload::json(&meta),
                );
            }
            return;
        }

        match bp_route(res.confidence, &self.th) {
            BpDecision::Positive => {
                self.trace
                    .borrow_mut()
                    .on_route(&id, Route::EocPositive, "lic");
                self.trace.borrow_mut().on_labeled(&id, now, true, "lic");
                let meta = ResultMeta {
                    crop_id: id,
                    positive: true,
                    by: "eoc".into(),
                };
                let _ = ctx.platform.publish_from(
                    &client,
                    &result_topic(&cluster),
                    Payload::json(&meta),
                );
            }
            BpDecision::Drop => {
                self.trace.borrow_mut().on_route(&id, Route::EocDrop, "lic");
                self.trace.borrow_mut().on_labeled(&id, now, false, "lic");
            }
            BpDecision::UploadToCoc => {
                self.trace.borrow_mut().on_route(&id, Route::Upload, "lic");
                let mut crop = res.crop;
                crop.t_handoff_us = now;
                crop.confidence = Some(res.confidence);
                let size = crop.size;
                let _ = ctx.platform.publish_from(
                    &client,
                    &crop_up_topic(&cluster),
                    Payload::json_with_opaque(&crop, size),
                );
            }
        }
    }
}

impl Actor for LocalController {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.core.start(ctx);
        let client = ctx.client.clone();
        let cluster = ctx.node.cluster_id().unwrap();
        let _ = ctx
            .platform
            .subscribe_from(&client, &eocres_topic(&cluster));
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let cluster = ctx.node.cluster_id().unwrap();
        if msg.topic.as_str() == eocres_topic(&cluster) {
            if let Some(res) = msg.json_head::<EocResult>() {
                self.handle_eoc_result(ctx, res);
            }
            return;
        }
        match self.core.observe(ctx, msg) {
            Some(CoreSignal::Telemetry(sample)) => {
                if sample.kind == "coc_leg" {
                    if let Some(lat) = sample.latency_us {
                        update_eil(&mut self.coc_est, lat as f64);
                        if self.ap_active {
                            self.push_hint(ctx);
                        }
                    }
                }
            }
            Some(CoreSignal::Policy(p)) => {
                self.ap_active = p.as_deref() == Some("ap");
                if !self.ap_active {
                    self.th = NOMINAL_THRESHOLDS;
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag != EPOCH_TIMER_TAG {
            return;
        }
        self.core.on_epoch(ctx);
        if self.ap_active {
            let eoc_us = self.eoc_est.estimate_us();
            let coc_us = self.coc_est.estimate_us();
            self.th = adapt_thresholds(&self.th, eoc_us, coc_us, self.cfg.eil_target_us as f64);
            self.last_hint_us = 0;
            self.push_hint(ctx);
        }
    }
}

// ---------------------------------------------------------------------------
// Global in-app controller at the CC: aggregates telemetry fleet-wide.
// ---------------------------------------------------------------------------

pub struct GlobalController {
    core: ControllerCore,
}

impl GlobalController {
    pub fn new(cfg: &VqConfig) -> Self {
        GlobalController {
            core: ControllerCore::new(APP, ace_core::inapp::GLOBAL_SCOPE, cfg.epoch_us),
        }
    }
}

impl Actor for GlobalController {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.core.start(ctx);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let _ = self.core.observe(ctx, msg);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag == EPOCH_TIMER_TAG {
            self.core.on_epoch(ctx);
        }
    }
}

// ---------------------------------------------------------------------------
// Result storage.
// ---------------------------------------------------------------------------

pub struct ResultStorage {
    pub stored: Rc<RefCell<u64>>,
}

impl Actor for ResultStorage {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let _ = ctx
            .platform
            .subscribe_from(&client, &format!("app/{APP}/result/#"));
    }

    fn on_message(&mut self, _ctx: &mut Ctx<'_>, msg: &Message) {
        if msg.json_head::<ResultMeta>().is_some() {
            *self.stored.borrow_mut() += 1;
        }
    }
}
