//! Reusable in-app controller framework: a global controller at the CC plus
//! one local controller per EC, generic control operations (start, filter,
//! aggregate, terminate), component telemetry with EWMA estimation, and
//! policy hooks that applications override while the base behavior remains
//! the fallback.
//!
//! The framework owns the plumbing: control topics, target resolution, ack
//! aggregation, timeout and retry. Application controllers embed
//! [`ControllerCore`] and react to the signals it surfaces.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::DeployStatus;
use crate::infrastructure::ClusterKind;
use crate::messaging::{Message, Payload};
use crate::platform::{Actor, ClientId, Ctx, Platform};
use crate::simnet::Micros;

pub const GLOBAL_SCOPE: &str = "global";

// ---------------------------------------------------------------------------
// EWMA and telemetry
// ---------------------------------------------------------------------------

/// Exponentially weighted moving average; the first sample initializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ewma {
    pub alpha: f64,
    pub value: Option<f64>,
    pub samples: u64,
}

impl Ewma {
    pub fn new(alpha: f64) -> Ewma {
        Ewma {
            alpha,
            value: None,
            samples: 0,
        }
    }

    pub fn update(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            None => sample,
            Some(v) => self.alpha * sample + (1.0 - self.alpha) * v,
        };
        self.value = Some(next);
        self.samples += 1;
        next
    }

    /// Current estimate, or `prior` before any sample has arrived.
    pub fn estimate_or(&self, prior: f64) -> f64 {
        self.value.unwrap_or(prior)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub instance: String,
    pub queue_len: u64,
    /// Busy fraction in [0,1].
    pub busy: f64,
    pub latency_us: Option<u64>,
    /// Application-defined stream tag, e.g. which latency this sample is.
    #[serde(default)]
    pub kind: String,
}

const WINDOW_CAP: usize = 64;

#[derive(Debug, Clone)]
pub struct ComponentTelemetry {
    pub instance: String,
    pub queue_len: u64,
    pub busy: f64,
    pub last_latency_us: Option<u64>,
    pub window: VecDeque<TelemetrySample>,
    pub latency_ewma: Ewma,
}

impl ComponentTelemetry {
    fn new(instance: &str, alpha: f64) -> Self {
        ComponentTelemetry {
            instance: instance.to_string(),
            queue_len: 0,
            busy: 0.0,
            last_latency_us: None,
            window: VecDeque::new(),
            latency_ewma: Ewma::new(alpha),
        }
    }

    pub fn ingest(&mut self, sample: TelemetrySample) {
        self.queue_len = sample.queue_len;
        self.busy = sample.busy.clamp(0.0, 1.0);
        if let Some(lat) = sample.latency_us {
            self.last_latency_us = Some(lat);
            self.latency_ewma.update(lat as f64);
        }
        self.window.push_back(sample);
        if self.window.len() > WINDOW_CAP {
            self.window.pop_front();
        }
    }
}

// ---------------------------------------------------------------------------
// Control operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlOpKind {
    Start,
    Filter,
    Aggregate,
    Terminate,
}

/// What an operation applies to. Component and instance narrow the match;
/// an empty selector is an error (ops never implicitly target everything).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelector {
    #[serde(default)]
    pub component: Option<String>,
    /// Cluster id string, or `global` for CC-side components.
    #[serde(default)]
    pub scope: Option<String>,
    #[serde(default)]
    pub instance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlOp {
    pub kind: ControlOpKind,
    pub target: TargetSelector,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InAppError {
    #[error("target resolves to no instances")]
    UnknownTarget,
    #[error("application {0} is not deployed")]
    UnknownApp(String),
    #[error("override point not supported by the base controller")]
    UnsupportedOverride,
    #[error("unknown policy handle {0}")]
    UnknownHandle(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OpMsg {
    dispatch_id: u64,
    op: ControlOp,
    targets: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OpAck {
    dispatch_id: u64,
    scope: String,
    #[serde(default)]
    data: Option<serde_json::Value>,
}

/// Command forwarded from a scope controller to one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceCmd {
    pub cmd: ControlOpKind,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyMsg {
    active: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DispatchStatus {
    pub id: u64,
    pub op: ControlOp,
    pub expected: BTreeSet<String>,
    pub acked: BTreeMap<String, u64>,
    pub acks_data: BTreeMap<String, serde_json::Value>,
    pub timed_out: BTreeSet<String>,
    pub per_scope: BTreeMap<String, Vec<String>>,
    pub app: String,
}

impl DispatchStatus {
    pub fn complete(&self) -> bool {
        self.expected.iter().all(|s| self.acked.contains_key(s))
    }
}

// ---------------------------------------------------------------------------
// Policy hooks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    OnSample,
    OnTimer,
    OnMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverridePoint {
    Route,
    Thresholds,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyHook {
    pub name: String,
    pub trigger: Trigger,
    pub point: OverridePoint,
}

#[derive(Debug, Clone)]
pub struct PolicyRegistration {
    pub handle: u64,
    pub hook: PolicyHook,
}

#[derive(Debug, Default)]
pub struct InAppState {
    pub dispatches: BTreeMap<u64, DispatchStatus>,
    dispatch_seq: u64,
    pub policies: BTreeMap<String, PolicyRegistration>,
    policy_seq: u64,
    watchers: BTreeSet<String>,
}

// ---------------------------------------------------------------------------
// Platform-level operations
// ---------------------------------------------------------------------------

fn scope_topic(app: &str, scope: &str) -> String {
    format!("app/{app}/ctl/{scope}/op")
}

pub fn instance_ctl_topic(app: &str, instance: &str) -> String {
    format!("app/{app}/ctl/inst/{instance}")
}

pub fn telemetry_topic(app: &str, instance: &str) -> String {
    format!("app/{app}/telemetry/{instance}")
}

fn inapp_watcher_id(app: &str) -> ClientId {
    format!("ace.inapp.{app}")
}

impl Platform {
    /// Resolve a target to `(scope -> instance ids)` against the app's
    /// current deployment record.
    fn resolve_target(
        &self,
        app: &str,
        target: &TargetSelector,
    ) -> Result<BTreeMap<String, Vec<String>>, InAppError> {
        let rec = self
            .control
            .records
            .get(app)
            .filter(|r| r.status != DeployStatus::Removed)
            .ok_or_else(|| InAppError::UnknownApp(app.to_string()))?;
        let infra_id = self.control.infra.clone().expect("infrastructure adopted");
        let infra = self.registry.infra(&infra_id).expect("infra");
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in &rec.plan.topology.components {
            if target.component.as_deref().is_some_and(|t| t != c.name) {
                continue;
            }
            let Some(bindings) = rec.plan.instances.get(&c.name) else {
                continue;
            };
            for (i, node) in bindings.iter().enumerate() {
                let iid = crate::controller::instance_id(app, &c.name, i + 1);
                if target.instance.as_deref().is_some_and(|t| t != iid) {
                    continue;
                }
                let cluster = node.cluster_id().expect("node binding");
                let kind = infra.cluster(&cluster).map(|c| c.kind);
                let scope = match kind {
                    Some(ClusterKind::Cc) => GLOBAL_SCOPE.to_string(),
                    _ => cluster.to_string(),
                };
                if target.scope.as_deref().is_some_and(|t| t != scope) {
                    continue;
                }
                out.entry(scope).or_default().push(iid);
            }
        }
        if out.is_empty() {
            return Err(InAppError::UnknownTarget);
        }
        Ok(out)
    }

    /// Issue a control operation. The CC side resolves targets and forwards
    /// per-scope over bridged topics; scope controllers execute locally and
    /// ack. Unacked scopes are marked timed out at the deadline and retried
    /// until the fleet converges.
    pub fn inapp_dispatch(&mut self, app: &str, op: ControlOp) -> Result<u64, InAppError> {
        let per_scope = self.resolve_target(app, &op.target)?;
        self.ensure_inapp_watcher(app);
        self.inapp.dispatch_seq += 1;
        let id = self.inapp.dispatch_seq;
        let status = DispatchStatus {
            id,
            op: op.clone(),
            expected: per_scope.keys().cloned().collect(),
            acked: BTreeMap::new(),
            acks_data: BTreeMap::new(),
            timed_out: BTreeSet::new(),
            per_scope: per_scope.clone(),
            app: app.to_string(),
        };
        self.inapp.dispatches.insert(id, status);
        self.publish_dispatch(app, id);
        let deadline = self.config.ack_deadline_us;
        self.events
            .schedule_after(deadline, move |p| p.dispatch_deadline(id));
        Ok(id)
    }

    fn publish_dispatch(&mut self, app: &str, id: u64) {
        let Some(d) = self.inapp.dispatches.get(&id) else {
            return;
        };
        let app = app.to_string();
        let sends: Vec<(String, OpMsg)> = d
            .per_scope
            .iter()
            .filter(|(scope, _)| !d.acked.contains_key(*scope))
            .map(|(scope, targets)| {
                (
                    scope_topic(&app, scope),
                    OpMsg {
                        dispatch_id: id,
                        op: d.op.clone(),
                        targets: targets.clone(),
                    },
                )
            })
            .collect();
        let watcher = inapp_watcher_id(&app);
        for (topic, msg) in sends {
            let _ = self.publish_from(&watcher, &topic, Payload::json(&msg));
        }
    }

    fn dispatch_deadline(&mut self, id: u64) {
        let (app, missing): (String, BTreeSet<String>) = {
            let Some(d) = self.inapp.dispatches.get_mut(&id) else {
                return;
            };
            if d.complete() {
                return;
            }
            let missing: BTreeSet<String> = d
                .expected
                .iter()
                .filter(|s| !d.acked.contains_key(*s))
                .cloned()
                .collect();
            d.timed_out.extend(missing.iter().cloned());
            (d.app.clone(), missing)
        };
        if !missing.is_empty() {
            // Retry remaining scopes until the link comes back.
            self.publish_dispatch(&app, id);
            let retry = self.config.retry_every_us;
            self.events
                .schedule_after(retry, move |p| p.dispatch_deadline(id));
        }
    }

    fn ensure_inapp_watcher(&mut self, app: &str) {
        if self.inapp.watchers.contains(app) {
            return;
        }
        self.inapp.watchers.insert(app.to_string());
        let infra_id = self.control.infra.clone().expect("infra adopted");
        let cc = self
            .registry
            .infra(&infra_id)
            .expect("infra")
            .cc()
            .id
            .clone();
        self.attach_client(
            &inapp_watcher_id(app),
            cc,
            Box::new(InAppWatcher {
                app: app.to_string(),
            }),
        );
    }

    /// Register an advanced policy over the base one. Route and threshold
    /// overrides are supported; the base policy keeps handling anything the
    /// override abstains from.
    pub fn inapp_register_policy(
        &mut self,
        app: &str,
        hook: PolicyHook,
    ) -> Result<u64, InAppError> {
        if hook.point == OverridePoint::Custom {
            return Err(InAppError::UnsupportedOverride);
        }
        if !self
            .control
            .records
            .get(app)
            .is_some_and(|r| r.status != DeployStatus::Removed)
        {
            return Err(InAppError::UnknownApp(app.to_string()));
        }
        self.ensure_inapp_watcher(app);
        self.inapp.policy_seq += 1;
        let handle = self.inapp.policy_seq;
        let name = hook.name.clone();
        self.inapp
            .policies
            .insert(app.to_string(), PolicyRegistration { handle, hook });
        self.broadcast_policy(app, Some(name));
        Ok(handle)
    }

    /// Deregister by handle; scope controllers revert to the base policy.
    pub fn inapp_deregister_policy(&mut self, app: &str, handle: u64) -> Result<(), InAppError> {
        match self.inapp.policies.get(app) {
            Some(reg) if reg.handle == handle => {
                self.inapp.policies.remove(app);
                self.broadcast_policy(app, None);
                Ok(())
            }
            _ => Err(InAppError::UnknownHandle(handle)),
        }
    }

    fn broadcast_policy(&mut self, app: &str, active: Option<String>) {
        let watcher = inapp_watcher_id(app);
        let topic = format!("app/{app}/ctl/all/policy");
        let _ = self.publish_from(&watcher, &topic, Payload::json(&PolicyMsg { active }));
    }
}

/// CC-side watcher collecting op acks for the platform's dispatch records.
struct InAppWatcher {
    app: String,
}

impl Actor for InAppWatcher {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let topic = format!("app/{}/ctl/reply/#", self.app);
        let _ = ctx.platform.subscribe_from(&client, &topic);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let Some(ack) = msg.json_head::<OpAck>() else {
            return;
        };
        let at = ctx.now().as_micros();
        if let Some(d) = ctx.platform.inapp.dispatches.get_mut(&ack.dispatch_id) {
            d.acked.entry(ack.scope.clone()).or_insert(at);
            if let Some(data) = ack.data {
                d.acks_data.insert(ack.scope, data);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scope controller core (embedded by application controllers)
// ---------------------------------------------------------------------------

/// What the core surfaced from a message, for the embedding controller to
/// react to after the generic handling ran.
#[derive(Debug)]
pub enum CoreSignal {
    /// A control op was executed in this scope (commands already forwarded,
    /// ack already sent).
    Op(ControlOp),
    /// Telemetry ingested for an instance.
    Telemetry(TelemetrySample),
    /// The active policy changed; `None` reverts to the base policy.
    Policy(Option<String>),
}

pub struct ControllerCore {
    pub app: String,
    /// `global` at the CC, else the cluster id string.
    pub scope: String,
    pub telemetry: BTreeMap<String, ComponentTelemetry>,
    pub active_policy: Option<String>,
    pub ewma_alpha: f64,
    pub epoch_us: Micros,
}

pub const EPOCH_TIMER_TAG: u64 = u64::MAX - 7;

impl ControllerCore {
    pub fn new(app: &str, scope: &str, epoch_us: Micros) -> Self {
        ControllerCore {
            app: app.to_string(),
            scope: scope.to_string(),
            telemetry: BTreeMap::new(),
            active_policy: None,
            ewma_alpha: 0.2,
            epoch_us,
        }
    }

    /// Subscribe to this scope's control and telemetry topics and arm the
    /// control epoch timer.
    pub fn start(&self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let subs = [
            format!("app/{}/ctl/{}/op", self.app, self.scope),
            format!("app/{}/ctl/all/#", self.app),
            format!("app/{}/telemetry/#", self.app),
        ];
        for s in subs {
            let _ = ctx.platform.subscribe_from(&client, &s);
        }
        ctx.set_timer(self.epoch_us, EPOCH_TIMER_TAG);
    }

    /// Generic message handling: ops (execute + ack), policy switches,
    /// telemetry ingestion. Returns a signal when the embedding controller
    /// should react too.
    pub fn observe(&mut self, ctx: &mut Ctx<'_>, msg: &Message) -> Option<CoreSignal> {
        let topic = msg.topic.as_str();
        if topic == scope_topic(&self.app, &self.scope) {
            let op_msg = msg.json_head::<OpMsg>()?;
            let data = self.execute_op(ctx, &op_msg);
            let ack = OpAck {
                dispatch_id: op_msg.dispatch_id,
                scope: self.scope.clone(),
                data,
            };
            let client = ctx.client.clone();
            let reply = format!("app/{}/ctl/reply/{}", self.app, self.scope);
            let _ = ctx
                .platform
                .publish_from(&client, &reply, Payload::json(&ack));
            return Some(CoreSignal::Op(op_msg.op));
        }
        if topic == format!("app/{}/ctl/all/policy", self.app) {
            let p = msg.json_head::<PolicyMsg>()?;
            self.active_policy = p.active.clone();
            return Some(CoreSignal::Policy(p.active));
        }
        if topic.starts_with(&format!("app/{}/telemetry/", self.app)) {
            let sample = msg.json_head::<TelemetrySample>()?;
            let alpha = self.ewma_alpha;
            self.telemetry
                .entry(sample.instance.clone())
                .or_insert_with(|| ComponentTelemetry::new(&sample.instance, alpha))
                .ingest(sample.clone());
            return Some(CoreSignal::Telemetry(sample));
        }
        None
    }

    fn execute_op(&mut self, ctx: &mut Ctx<'_>, op_msg: &OpMsg) -> Option<serde_json::Value> {
        match op_msg.op.kind {
            ControlOpKind::Start | ControlOpKind::Terminate | ControlOpKind::Filter => {
                let cmd = InstanceCmd {
                    cmd: op_msg.op.kind,
                    args: op_msg.op.args.clone(),
                };
                let client = ctx.client.clone();
                for iid in &op_msg.targets {
                    let topic = instance_ctl_topic(&self.app, iid);
                    let _ = ctx
                        .platform
                        .publish_from(&client, &topic, Payload::json(&cmd));
                }
                None
            }
            ControlOpKind::Aggregate => Some(self.aggregate(&op_msg.targets)),
        }
    }

    /// Windowed reduce over telemetry: count, sum and mean of the latency
    /// samples currently in each target's window.
    pub fn aggregate(&self, targets: &[String]) -> serde_json::Value {
        let mut per_instance = serde_json::Map::new();
        for iid in targets {
            if let Some(t) = self.telemetry.get(iid) {
                let lat: Vec<f64> = t
                    .window
                    .iter()
                    .filter_map(|s| s.latency_us.map(|v| v as f64))
                    .collect();
                let count = lat.len() as u64;
                let sum: f64 = lat.iter().sum();
                let mean = if count > 0 { sum / count as f64 } else { 0.0 };
                per_instance.insert(
                    iid.clone(),
                    serde_json::json!({
                        "count": count,
                        "sum_us": sum,
                        "mean_us": mean,
                        "queue_len": t.queue_len,
                        "busy": t.busy,
                    }),
                );
            }
        }
        serde_json::json!({ "scope": self.scope, "instances": per_instance })
    }

    /// Per-epoch duty: EC scopes push their aggregate up to the global
    /// controller. Returns the instances aggregated.
    pub fn on_epoch(&mut self, ctx: &mut Ctx<'_>) {
        if self.scope != GLOBAL_SCOPE {
            let targets: Vec<String> = self.telemetry.keys().cloned().collect();
            let data = self.aggregate(&targets);
            let client = ctx.client.clone();
            let topic = format!("app/{}/ctl/global/aggregate", self.app);
            let _ = ctx
                .platform
                .publish_from(&client, &topic, Payload::json(&data));
        }
        ctx.set_timer(self.epoch_us, EPOCH_TIMER_TAG);
    }
}

/// Workload-side switch honoring start/terminate/filter commands: components
/// consult it before consuming an input.
#[derive(Debug, Default, Clone)]
pub struct WorkloadGate {
    pub stopped: bool,
    pub min_size: Option<u64>,
}

impl WorkloadGate {
    pub fn apply(&mut self, cmd: &InstanceCmd) {
        match cmd.cmd {
            ControlOpKind::Start => self.stopped = false,
            ControlOpKind::Terminate => self.stopped = true,
            ControlOpKind::Filter => {
                self.min_size = cmd.args.get("min_size_bytes").and_then(|v| v.parse().ok());
            }
            ControlOpKind::Aggregate => {}
        }
    }

    pub fn admits(&self, size: u64) -> bool {
        !self.stopped && self.min_size.is_none_or(|m| size >= m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_initialization_and_fixed_point() {
        let mut e = Ewma::new(0.2);
        assert_eq!(e.update(44.0), 44.0);
        for _ in 0..120 {
            e.update(50.0);
        }
        assert!((e.value.unwrap() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn ewma_arithmetic() {
        let mut e = Ewma::new(0.2);
        e.update(100.0);
        assert!((e.update(50.0) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn ewma_alternating_matches_closed_form() {
        // x_{n+1} = a*s + (1-a)*x_n alternating between lo and hi converges to
        // a two-point cycle: x_hi = (a*hi + (1-a)*a*lo) / (1 - (1-a)^2)
        let a = 0.2f64;
        let (lo, hi) = (10.0f64, 90.0f64);
        let mut e = Ewma::new(a);
        let mut last_hi = 0.0;
        for i in 0..10_000 {
            let s = if i % 2 == 0 { hi } else { lo };
            let v = e.update(s);
            if i % 2 == 0 {
                last_hi = v;
            }
        }
        let b = 1.0 - a;
        let fix_hi = (a * hi + b * a * lo) / (1.0 - b * b);
        assert!((last_hi - fix_hi).abs() < 1e-9);
        // The cycle straddles the midpoint.
        let fix_lo = (a * lo + b * a * hi) / (1.0 - b * b);
        assert!(fix_lo < 50.0 && 50.0 < fix_hi);
    }

    #[test]
    fn telemetry_window_caps() {
        let mut t = ComponentTelemetry::new("i", 0.2);
        for i in 0..200u64 {
            t.ingest(TelemetrySample {
                instance: "i".into(),
                queue_len: i,
                busy: 0.5,
                latency_us: Some(1000 + i),
                kind: "svc".into(),
            });
        }
        assert_eq!(t.window.len(), WINDOW_CAP);
        assert_eq!(t.queue_len, 199);
        assert!(t.latency_ewma.value.is_some());
    }

    #[test]
    fn workload_gate_semantics() {
        let mut g = WorkloadGate::default();
        assert!(g.admits(10));
        g.apply(&InstanceCmd {
            cmd: ControlOpKind::Filter,
            args: [("min_size_bytes".to_string(), "100".to_string())].into(),
        });
        assert!(!g.admits(99));
        assert!(g.admits(100));
        g.apply(&InstanceCmd {
            cmd: ControlOpKind::Terminate,
            args: BTreeMap::new(),
        });
        assert!(!g.admits(1000));
        g.apply(&InstanceCmd {
            cmd: ControlOpKind::Start,
            args: BTreeMap::new(),
        });
        assert!(g.admits(1000));
    }
}
