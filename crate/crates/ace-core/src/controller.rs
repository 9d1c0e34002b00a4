//! Platform controller and node agents. The controller turns deployment plans
//! into per-node manifests, ships them to agents over reserved `ace/ctl/...`
//! topics, tracks acks and heartbeats, and answers monitoring queries. Agents
//! reconcile their node against the latest manifest: stop what vanished,
//! start what appeared (after a configurable start delay), restart crashed
//! instances up to a limit, and heartbeat their view back.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::infrastructure::{ClusterKind, NodeStatus};
use crate::messaging::{BridgeDirection, Message, Payload};
use crate::orchestrator::{orchestrate, validate_plan, Commitments, OrchestrateError};
use crate::platform::{Actor, ClientId, Ctx, Platform, SpawnInfo};
use crate::scenario::NetConfig;
use crate::simnet::{self, LinkId, LinkSpec, LinkStatus, SimTime};
use crate::topology::{
    diff, ApplicationTopology, DeploymentPlan, DiffError, Plane, Resources, ServiceKind,
};

pub const CONTROLLER_CLIENT: &str = "ace.controller";

pub fn agent_client_id(node: &HierarchicalId) -> ClientId {
    format!("ace.agent.{node}")
}

fn manifest_topic(node: &HierarchicalId) -> String {
    format!("ace/ctl/{node}")
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub instance_id: String,
    pub app: String,
    pub component: String,
    pub image: String,
    pub plane: Plane,
    pub restart: String,
    pub cpu: u32,
    pub mem: u32,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeManifest {
    pub node: HierarchicalId,
    pub generation: u64,
    pub services: BTreeMap<String, ServiceEntry>,
}

impl NodeManifest {
    /// Compose-style YAML rendering, persisted as `manifests/<node>.yaml`.
    pub fn to_compose_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("manifest serializes")
    }
}

/// Deterministic instance naming: `<app>.<component>.<k>` with `k` the
/// 1-based index into the component's sorted binding list. Unchanged
/// components keep their bindings across incremental updates, so their
/// instance ids are stable.
pub fn instance_id(app: &str, component: &str, k: usize) -> String {
    format!("{app}.{component}.{k}")
}

/// Services per node implied by a plan. Plans must be node-level here;
/// delegated (cluster-level) bindings are resolved before deployment.
fn services_by_node(
    plan: &DeploymentPlan,
    restart_limit: u32,
) -> Result<BTreeMap<HierarchicalId, BTreeMap<String, ServiceEntry>>, DeployError> {
    let app = &plan.topology.app_name;
    let mut out: BTreeMap<HierarchicalId, BTreeMap<String, ServiceEntry>> = BTreeMap::new();
    for c in &plan.topology.components {
        let bindings = plan
            .instances
            .get(&c.name)
            .ok_or_else(|| DeployError::PlanInvalid(vec![format!("{} unbound", c.name)]))?;
        for (i, node) in bindings.iter().enumerate() {
            if !node.is_node() {
                return Err(DeployError::PlanInvalid(vec![format!(
                    "{} bound at cluster granularity ({node}); resolve delegation first",
                    c.name
                )]));
            }
            let id = instance_id(app, &c.name, i + 1);
            out.entry(node.clone()).or_default().insert(
                id.clone(),
                ServiceEntry {
                    instance_id: id,
                    app: app.clone(),
                    component: c.name.clone(),
                    image: c.image.clone(),
                    plane: c.plane,
                    restart: format!("on-failure:{restart_limit}"),
                    cpu: c.resources.cpu,
                    mem: c.resources.mem,
                    params: c.params.clone(),
                },
            );
        }
    }
    Ok(out)
}

/// One fresh manifest (generation 1) per node hosting at least one instance.
pub fn plan_to_instructions(plan: &DeploymentPlan) -> Vec<NodeManifest> {
    let per_node = services_by_node(plan, 3).expect("valid plan");
    per_node
        .into_iter()
        .map(|(node, services)| NodeManifest {
            node,
            generation: 1,
            services,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Records and monitoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeployStatus {
    Deploying,
    Running,
    Degraded,
    Removed,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeploymentRecord {
    pub app_name: String,
    pub version: u64,
    pub plan: DeploymentPlan,
    pub status: DeployStatus,
    /// Desired manifest generation per hosting node.
    pub node_gens: BTreeMap<String, u64>,
    pub deployed_at_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Starting,
    Running,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportedInstance {
    pub component: String,
    pub app: String,
    pub state: InstanceState,
    pub restarts: u32,
}

/// Heartbeat from one node agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentReport {
    pub node: String,
    pub at_us: u64,
    pub instances: BTreeMap<String, ReportedInstance>,
    pub residual_cpu: i64,
    pub residual_mem: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AckMsg {
    node: String,
    gen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapState {
    Pending,
    Starting,
    Running,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceSnapshot {
    pub app: String,
    pub component: String,
    pub node: String,
    pub state: SnapState,
    pub restarts: u32,
    pub stale: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeSnapshot {
    pub status: NodeStatus,
    pub last_seen_us: Option<u64>,
    pub stale: bool,
    pub residual_cpu: i64,
    pub residual_mem: i64,
    pub reported_instances: Vec<String>,
}

/// Point-in-time view assembled from heartbeats: instances of every
/// non-removed app plus per-node agent state, with staleness flags.
#[derive(Debug, Clone, Serialize)]
pub struct MonitoringSnapshot {
    pub at_us: u64,
    pub instances: BTreeMap<String, InstanceSnapshot>,
    pub nodes: BTreeMap<String, NodeSnapshot>,
}

impl MonitoringSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }
}

// ---------------------------------------------------------------------------
// Agent- and controller-side state
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RuntimeInstance {
    pub entry: ServiceEntry,
    pub state: InstanceState,
    pub restarts: u32,
}

#[derive(Debug, Default)]
pub struct NodeRuntime {
    pub gen_applied: u64,
    pub instances: BTreeMap<String, RuntimeInstance>,
    pending_start: BTreeMap<u64, String>,
    timer_seq: u64,
    ack_outstanding: bool,
}

#[derive(Default)]
pub struct ControllerState {
    pub records: BTreeMap<String, DeploymentRecord>,
    pub node_gen: BTreeMap<String, u64>,
    pub desired: BTreeMap<String, NodeManifest>,
    pub acked_gen: BTreeMap<String, u64>,
    pub heartbeats: BTreeMap<String, AgentReport>,
    pub node_runtime: BTreeMap<String, NodeRuntime>,
    pub infra: Option<HierarchicalId>,
}

impl ControllerState {
    /// Resources consumed per node by all non-removed applications.
    pub fn commitments(&self) -> Commitments {
        let mut out = Commitments::new();
        for rec in self.records.values() {
            if rec.status == DeployStatus::Removed {
                continue;
            }
            for c in &rec.plan.topology.components {
                if let Some(bindings) = rec.plan.instances.get(&c.name) {
                    for node in bindings {
                        let e = out
                            .entry(node.clone())
                            .or_insert(Resources { cpu: 0, mem: 0 });
                        e.cpu += c.resources.cpu;
                        e.mem += c.resources.mem;
                    }
                }
            }
        }
        out
    }

    fn commitments_excluding(&self, app: &str, keep_components: &BTreeSet<String>) -> Commitments {
        let mut out = Commitments::new();
        for rec in self.records.values() {
            if rec.status == DeployStatus::Removed {
                continue;
            }
            for c in &rec.plan.topology.components {
                if rec.app_name == app && !keep_components.contains(&c.name) {
                    continue;
                }
                if let Some(bindings) = rec.plan.instances.get(&c.name) {
                    for node in bindings {
                        let e = out
                            .entry(node.clone())
                            .or_insert(Resources { cpu: 0, mem: 0 });
                        e.cpu += c.resources.cpu;
                        e.mem += c.resources.mem;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("application {0} is already deployed")]
    AlreadyDeployed(String),
    #[error("unknown application {0}")]
    UnknownApp(String),
    #[error("no agent reachable for node {0}")]
    AgentUnreachable(String),
    #[error("plan rejected: {0:?}")]
    PlanInvalid(Vec<String>),
    #[error(transparent)]
    Orchestrate(#[from] OrchestrateError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Thorough,
    Incremental,
}

// ---------------------------------------------------------------------------
// Platform bootstrap
// ---------------------------------------------------------------------------

impl Platform {
    /// Wire an already-registered infrastructure into the simulation: LAN and
    /// WAN links, one broker per cluster, platform control bridges, per-site
    /// file services, the platform controller, and agents for any nodes
    /// already present.
    pub fn adopt_infra(&mut self, infra: &HierarchicalId, net: &NetConfig) {
        let rec = self
            .registry
            .infra(infra)
            .expect("infra registered")
            .clone();
        self.control.infra = Some(rec.id.clone());
        let cc = rec.cc().id.clone();
        for cluster in &rec.clusters {
            // The registry's per-cluster LAN setting wins; the scenario
            // supplies it only where the cluster kept the stock default.
            let lan_mbps = match cluster.kind {
                ClusterKind::Cc => net.cc_lan_mbps,
                ClusterKind::Ec if cluster.lan_mbps == 100 => net.lan_mbps,
                ClusterKind::Ec => cluster.lan_mbps,
            };
            self.links.add(LinkSpec {
                id: LinkId::lan(&cluster.id),
                endpoints: (cluster.id.to_string(), cluster.id.to_string()),
                up_mbps: lan_mbps,
                down_mbps: lan_mbps,
                one_way_delay_us: simnet::ms(cluster.lan_delay_ms),
            });
            self.messaging.add_broker(cluster.id.clone(), cluster.kind);
            self.files.add_site(&cluster.id);
            if cluster.kind == ClusterKind::Ec {
                let wan = LinkId::wan(&cluster.id);
                self.links.add(LinkSpec {
                    id: wan.clone(),
                    endpoints: (cluster.id.to_string(), cc.to_string()),
                    up_mbps: net.wan_up_mbps,
                    down_mbps: net.wan_down_mbps,
                    one_way_delay_us: simnet::ms(net.wan_delay_ms),
                });
                let _ = self.registry.set_wan_link(&cluster.id, wan.to_string());
            }
        }
        // Platform control topics bridge both ways on every EC.
        let ec_ids: Vec<HierarchicalId> = rec.ecs().map(|c| c.id.clone()).collect();
        for ec in &ec_ids {
            self.configure_bridge(ec, &["ace/#"], BridgeDirection::Both)
                .expect("platform bridge");
        }
        // Service endpoints and the controller.
        for cluster in &rec.clusters {
            let id = crate::fileservice::file_client_id(&cluster.id);
            self.attach_client(
                &id,
                cluster.id.clone(),
                Box::new(crate::fileservice::FileSiteActor {
                    site: cluster.id.clone(),
                }),
            );
        }
        self.attach_client(CONTROLLER_CLIENT, cc, Box::new(ControllerActor));
        // Agents for nodes registered before adoption.
        let nodes: Vec<HierarchicalId> = rec.nodes().iter().map(|n| n.id.clone()).collect();
        for node in nodes {
            self.spawn_agent(&node);
        }
    }

    /// Register a node and bring up its agent.
    pub fn register_node_live(
        &mut self,
        cluster: &HierarchicalId,
        cpu: u32,
        mem: u32,
        labels: BTreeSet<String>,
    ) -> Result<crate::infrastructure::NodeSpec, crate::infrastructure::InfraError> {
        let spec = self.registry.register_node(cluster, cpu, mem, labels)?;
        self.spawn_agent(&spec.id);
        Ok(spec)
    }

    fn spawn_agent(&mut self, node: &HierarchicalId) {
        self.control
            .node_runtime
            .insert(node.to_string(), NodeRuntime::default());
        self.attach_client(
            &agent_client_id(node),
            node.clone(),
            Box::new(AgentActor { node: node.clone() }),
        );
    }

    /// Apply a scenario's partition schedule to this infrastructure.
    pub fn apply_partitions(
        &mut self,
        infra: &HierarchicalId,
        windows: &[crate::scenario::PartitionWindow],
    ) {
        for w in windows {
            let ec = infra.cluster(w.ec.clone());
            let link = LinkId::wan(&ec);
            simnet::set_status_at(
                self,
                &link,
                LinkStatus::Partitioned,
                SimTime::from_ms(w.from_ms),
            );
            simnet::set_status_at(self, &link, LinkStatus::Up, SimTime::from_ms(w.until_ms));
        }
    }
}

// ---------------------------------------------------------------------------
// Deploy / update / remove / status
// ---------------------------------------------------------------------------

impl Platform {
    pub fn deploy(&mut self, plan: &DeploymentPlan) -> Result<(), DeployError> {
        let app = plan.topology.app_name.clone();
        if self
            .control
            .records
            .get(&app)
            .is_some_and(|r| r.status != DeployStatus::Removed)
        {
            return Err(DeployError::AlreadyDeployed(app));
        }
        let infra_id = self.control.infra.clone().expect("infrastructure adopted");
        let infra = self.registry.infra(&infra_id).expect("infra").clone();
        let commitments = self.control.commitments();
        validate_plan(plan, &infra, &commitments).map_err(DeployError::PlanInvalid)?;
        let per_node = services_by_node(plan, self.config.restart_limit)?;
        for node in per_node.keys() {
            if !self.control.node_runtime.contains_key(&node.to_string()) {
                return Err(DeployError::AgentUnreachable(node.to_string()));
            }
        }

        let mut node_gens = BTreeMap::new();
        for (node, services) in per_node {
            let gen = self.merge_manifest(&node, |all| {
                all.extend(services.clone());
            });
            node_gens.insert(node.to_string(), gen);
        }
        let record = DeploymentRecord {
            app_name: app.clone(),
            version: plan.topology.version,
            plan: plan.clone(),
            status: DeployStatus::Deploying,
            node_gens,
            deployed_at_us: self.now().as_micros(),
        };
        self.control.records.insert(app.clone(), record);
        // In-app control/telemetry bridges for bridged coordination.
        if plan.service_bindings.contains_key(&ServiceKind::Message) {
            let ctl = format!("app/{app}/ctl/#");
            let tel = format!("app/{app}/telemetry/#");
            let ecs: Vec<HierarchicalId> = infra.ecs().map(|c| c.id.clone()).collect();
            for ec in ecs {
                let _ = self.configure_bridge(&ec, &[&ctl, &tel], BridgeDirection::Both);
            }
        }
        let deadline = self.config.ack_deadline_us;
        let app2 = app.clone();
        self.events
            .schedule_after(deadline, move |p| p.recompute_record_status(&app2));
        Ok(())
    }

    /// Bump a node's manifest after editing its service set. Returns the new
    /// generation. No-ops (identical service set) still bump, because callers
    /// only invoke this when something changed or a restart is forced.
    fn merge_manifest(
        &mut self,
        node: &HierarchicalId,
        edit: impl FnOnce(&mut BTreeMap<String, ServiceEntry>),
    ) -> u64 {
        let key = node.to_string();
        let mut services = self
            .control
            .desired
            .get(&key)
            .map(|m| m.services.clone())
            .unwrap_or_default();
        edit(&mut services);
        let gen = self.control.node_gen.entry(key.clone()).or_insert(0);
        *gen += 1;
        let manifest = NodeManifest {
            node: node.clone(),
            generation: *gen,
            services,
        };
        self.control.desired.insert(key, manifest.clone());
        self.send_manifest(&manifest);
        manifest.generation
    }

    fn send_manifest(&mut self, manifest: &NodeManifest) {
        let _ = self.publish_from(
            &CONTROLLER_CLIENT.to_string(),
            &manifest_topic(&manifest.node),
            Payload::json(manifest),
        );
    }

    pub fn update(
        &mut self,
        app: &str,
        new_topology: &ApplicationTopology,
        mode: UpdateMode,
    ) -> Result<(), DeployError> {
        let record = self
            .control
            .records
            .get(app)
            .filter(|r| r.status != DeployStatus::Removed)
            .ok_or_else(|| DeployError::UnknownApp(app.to_string()))?
            .clone();
        let change = diff(&record.plan.topology, new_topology)?;
        let infra_id = self.control.infra.clone().expect("infrastructure adopted");
        let infra = self.registry.infra(&infra_id).expect("infra").clone();

        match mode {
            UpdateMode::Thorough => {
                // Remove everything, then deploy the new topology from scratch.
                self.strip_app_from_manifests(app);
                let commitments = self.control.commitments_excluding(app, &BTreeSet::new());
                let plan = orchestrate(new_topology, &infra, &commitments)?;
                let per_node = services_by_node(&plan, self.config.restart_limit)?;
                let mut node_gens = BTreeMap::new();
                for (node, services) in per_node {
                    let gen = self.merge_manifest(&node, |all| all.extend(services.clone()));
                    node_gens.insert(node.to_string(), gen);
                }
                let rec = self.control.records.get_mut(app).expect("record");
                rec.plan = plan;
                rec.version = new_topology.version;
                rec.node_gens = node_gens;
                rec.status = DeployStatus::Deploying;
            }
            UpdateMode::Incremental => {
                if change.is_noop() {
                    let rec = self.control.records.get_mut(app).expect("record");
                    rec.version = new_topology.version;
                    let mut topo = new_topology.clone();
                    topo.version = new_topology.version;
                    rec.plan.topology = topo;
                    return Ok(());
                }
                // Keep unchanged bindings; re-orchestrate added + modified.
                let mut sub = new_topology.clone();
                sub.components.retain(|c| {
                    change.added.contains(&c.name) || change.modified.contains(&c.name)
                });
                let commitments = self.control.commitments_excluding(app, &change.unchanged);
                let mut instances = BTreeMap::new();
                if !sub.components.is_empty() {
                    let sub_plan = orchestrate(&sub, &infra, &commitments)?;
                    instances.extend(sub_plan.instances);
                }
                for name in &change.unchanged {
                    if let Some(b) = record.plan.instances.get(name) {
                        instances.insert(name.clone(), b.clone());
                    }
                }
                let new_plan = DeploymentPlan {
                    topology: new_topology.clone(),
                    instances,
                    service_bindings: record.plan.service_bindings.clone(),
                };
                // Minimality: touch only nodes whose app service set changed.
                let old_services = services_by_node(&record.plan, self.config.restart_limit)?;
                let new_services = services_by_node(&new_plan, self.config.restart_limit)?;
                let nodes: BTreeSet<HierarchicalId> = old_services
                    .keys()
                    .chain(new_services.keys())
                    .cloned()
                    .collect();
                let mut node_gens = record.node_gens.clone();
                for node in nodes {
                    let old = old_services.get(&node);
                    let new = new_services.get(&node);
                    if old == new {
                        continue;
                    }
                    let app_name = app.to_string();
                    let adds = new.cloned().unwrap_or_default();
                    let gen = self.merge_manifest(&node, |all| {
                        all.retain(|_, e| e.app != app_name);
                        all.extend(adds.clone());
                    });
                    if new.is_some() {
                        node_gens.insert(node.to_string(), gen);
                    } else {
                        node_gens.remove(&node.to_string());
                        node_gens.insert(node.to_string(), gen); // stop must still ack
                    }
                }
                let rec = self.control.records.get_mut(app).expect("record");
                rec.plan = new_plan;
                rec.version = new_topology.version;
                rec.node_gens = node_gens;
                rec.status = DeployStatus::Deploying;
            }
        }
        let deadline = self.config.ack_deadline_us;
        let app2 = app.to_string();
        self.events
            .schedule_after(deadline, move |p| p.recompute_record_status(&app2));
        Ok(())
    }

    fn strip_app_from_manifests(&mut self, app: &str) -> BTreeMap<String, u64> {
        let hosting: Vec<HierarchicalId> = self
            .control
            .desired
            .values()
            .filter(|m| m.services.values().any(|e| e.app == app))
            .map(|m| m.node.clone())
            .collect();
        let mut gens = BTreeMap::new();
        for node in hosting {
            let app_name = app.to_string();
            let gen = self.merge_manifest(&node, |all| {
                all.retain(|_, e| e.app != app_name);
            });
            gens.insert(node.to_string(), gen);
        }
        gens
    }

    /// Instruct all agents to stop the app's instances. The record is kept
    /// for audit; agents on partitioned ECs converge when the link restores.
    pub fn remove(&mut self, app: &str) -> Result<(), DeployError> {
        if !self
            .control
            .records
            .get(app)
            .is_some_and(|r| r.status != DeployStatus::Removed)
        {
            return Err(DeployError::UnknownApp(app.to_string()));
        }
        let gens = self.strip_app_from_manifests(app);
        let rec = self.control.records.get_mut(app).expect("record");
        rec.status = DeployStatus::Removed;
        rec.node_gens = gens;
        Ok(())
    }

    fn recompute_record_status(&mut self, app: &str) {
        let now = self.now().as_micros();
        let Some(rec) = self.control.records.get(app) else {
            return;
        };
        if rec.status == DeployStatus::Removed {
            return;
        }
        let all_acked = rec
            .node_gens
            .iter()
            .all(|(node, gen)| self.control.acked_gen.get(node).copied().unwrap_or(0) >= *gen);
        let any_failed = rec.node_gens.keys().any(|node| {
            self.control
                .heartbeats
                .get(node)
                .map(|hb| {
                    hb.instances
                        .values()
                        .any(|i| i.app == app && i.state == InstanceState::Failed)
                })
                .unwrap_or(false)
        });
        let deadline_passed = now >= rec.deployed_at_us + self.config.ack_deadline_us;
        let status = if any_failed {
            DeployStatus::Degraded
        } else if all_acked {
            DeployStatus::Running
        } else if deadline_passed {
            DeployStatus::Degraded
        } else {
            DeployStatus::Deploying
        };
        self.control.records.get_mut(app).expect("record").status = status;
    }

    /// Assemble the monitoring view from the latest heartbeats. Entries from
    /// agents that have not reported recently (partitioned ECs) are flagged
    /// stale with their last-seen timestamp; instances on shielded nodes are
    /// degraded.
    pub fn collect_status(&self) -> MonitoringSnapshot {
        let now = self.now().as_micros();
        let stale_after = self.config.stale_after_us;
        let infra_id = self.control.infra.clone().expect("infrastructure adopted");
        let infra = self.registry.infra(&infra_id).expect("infra");

        let mut snapshot = MonitoringSnapshot {
            at_us: now,
            instances: BTreeMap::new(),
            nodes: BTreeMap::new(),
        };
        for node in infra.nodes() {
            let key = node.id.to_string();
            let hb = self.control.heartbeats.get(&key);
            let last_seen = hb.map(|h| h.at_us);
            let stale = last_seen.is_none_or(|t| now.saturating_sub(t) > stale_after);
            snapshot.nodes.insert(
                key.clone(),
                NodeSnapshot {
                    status: node.status,
                    last_seen_us: last_seen,
                    stale,
                    residual_cpu: hb
                        .map(|h| h.residual_cpu)
                        .unwrap_or(node.cpu_millicores as i64),
                    residual_mem: hb.map(|h| h.residual_mem).unwrap_or(node.mem_mib as i64),
                    reported_instances: hb
                        .map(|h| h.instances.keys().cloned().collect())
                        .unwrap_or_default(),
                },
            );
        }
        for rec in self.control.records.values() {
            if rec.status == DeployStatus::Removed {
                continue;
            }
            for c in &rec.plan.topology.components {
                let Some(bindings) = rec.plan.instances.get(&c.name) else {
                    continue;
                };
                for (i, node) in bindings.iter().enumerate() {
                    let iid = instance_id(&rec.app_name, &c.name, i + 1);
                    let key = node.to_string();
                    let hb = self.control.heartbeats.get(&key);
                    let reported = hb.and_then(|h| h.instances.get(&iid));
                    let node_shielded = infra
                        .node(node)
                        .map(|n| n.status != NodeStatus::Active)
                        .unwrap_or(true);
                    let stale = hb.is_none_or(|h| now.saturating_sub(h.at_us) > stale_after);
                    let state = if node_shielded {
                        SnapState::Degraded
                    } else {
                        match reported.map(|r| r.state) {
                            Some(InstanceState::Running) => SnapState::Running,
                            Some(InstanceState::Starting) => SnapState::Starting,
                            Some(InstanceState::Failed) => SnapState::Failed,
                            None => SnapState::Pending,
                        }
                    };
                    snapshot.instances.insert(
                        iid,
                        InstanceSnapshot {
                            app: rec.app_name.clone(),
                            component: c.name.clone(),
                            node: key,
                            state,
                            restarts: reported.map(|r| r.restarts).unwrap_or(0),
                            stale,
                        },
                    );
                }
            }
        }
        snapshot
    }

    /// Conservation check used by tests at quiescence: each agent's instance
    /// set equals its latest acked manifest's service set.
    pub fn agents_converged(&self) -> bool {
        self.control.desired.iter().all(|(node, manifest)| {
            let rt = match self.control.node_runtime.get(node) {
                Some(rt) => rt,
                None => return manifest.services.is_empty(),
            };
            let running: BTreeSet<&String> = rt.instances.keys().collect();
            let desired: BTreeSet<&String> = manifest.services.keys().collect();
            running == desired && rt.gen_applied == manifest.generation
        })
    }

    pub(crate) fn handle_instance_crash(&mut self, client: &ClientId) {
        let Some(node) = self.client_node(client).cloned() else {
            return;
        };
        self.detach_client(client);
        let limit = self.config.restart_limit;
        let delay = self.config.agent_start_delay_us;
        let key = node.to_string();
        let Some(rt) = self.control.node_runtime.get_mut(&key) else {
            return;
        };
        let Some(inst) = rt.instances.get_mut(client) else {
            return;
        };
        inst.restarts += 1;
        if inst.restarts > limit {
            inst.state = InstanceState::Failed;
            return;
        }
        inst.state = InstanceState::Starting;
        rt.timer_seq += 1;
        let tag = rt.timer_seq;
        rt.pending_start.insert(tag, client.clone());
        let agent = agent_client_id(&node);
        self.events
            .schedule_after(delay, move |p| p.fire_timer(agent, tag));
    }
}

// ---------------------------------------------------------------------------
// Actors
// ---------------------------------------------------------------------------

const HEARTBEAT_TAG: u64 = 0;

/// Per-node agent: reconciles the node against manifests, starts instances
/// after the configured delay, applies the restart policy, heartbeats state.
pub struct AgentActor {
    pub node: HierarchicalId,
}

impl AgentActor {
    fn ack(&self, ctx: &mut Ctx<'_>) {
        let key = self.node.to_string();
        let gen = ctx
            .platform
            .control
            .node_runtime
            .get(&key)
            .map(|rt| rt.gen_applied)
            .unwrap_or(0);
        let msg = AckMsg {
            node: key.clone(),
            gen,
        };
        let client = ctx.client.clone();
        let _ = ctx.platform.publish_from(
            &client,
            &format!("ace/ctl/reply/{key}"),
            Payload::json(&msg),
        );
    }

    fn heartbeat(&self, ctx: &mut Ctx<'_>) {
        let key = self.node.to_string();
        let (cpu_cap, mem_cap) = ctx
            .platform
            .registry
            .infra(&self.node.infra_id())
            .ok()
            .and_then(|r| r.node(&self.node).map(|n| (n.cpu_millicores, n.mem_mib)))
            .unwrap_or((0, 0));
        let Some(rt) = ctx.platform.control.node_runtime.get(&key) else {
            return;
        };
        let mut used = (0i64, 0i64);
        let mut instances = BTreeMap::new();
        for (id, inst) in &rt.instances {
            if inst.state != InstanceState::Failed {
                used.0 += inst.entry.cpu as i64;
                used.1 += inst.entry.mem as i64;
            }
            instances.insert(
                id.clone(),
                ReportedInstance {
                    component: inst.entry.component.clone(),
                    app: inst.entry.app.clone(),
                    state: inst.state,
                    restarts: inst.restarts,
                },
            );
        }
        let report = AgentReport {
            node: key.clone(),
            at_us: ctx.now().as_micros(),
            instances,
            residual_cpu: cpu_cap as i64 - used.0,
            residual_mem: mem_cap as i64 - used.1,
        };
        let client = ctx.client.clone();
        let _ = ctx.platform.publish_from(
            &client,
            &format!("ace/ctl/status/{key}"),
            Payload::json(&report),
        );
    }
}

impl Actor for AgentActor {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let _ = ctx
            .platform
            .subscribe_from(&client, &manifest_topic(&self.node));
        ctx.set_timer(ctx.platform.config.heartbeat_every_us, HEARTBEAT_TAG);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let Some(manifest) = msg.json_head::<NodeManifest>() else {
            return;
        };
        if manifest.node != self.node {
            return;
        }
        let key = self.node.to_string();
        let start_delay = ctx.platform.config.agent_start_delay_us;
        let mut to_stop: Vec<String> = Vec::new();
        let mut to_start: Vec<(u64, String)> = Vec::new();
        {
            let Some(rt) = ctx.platform.control.node_runtime.get_mut(&key) else {
                return;
            };
            if manifest.generation <= rt.gen_applied {
                // Duplicate delivery or controller retry: re-ack so a reply
                // lost to a partition still converges.
                self.ack(ctx);
                return;
            }
            rt.gen_applied = manifest.generation;
            for (id, inst) in &rt.instances {
                match manifest.services.get(id) {
                    Some(entry) if *entry == inst.entry => {}
                    _ => to_stop.push(id.clone()),
                }
            }
            for (id, entry) in &manifest.services {
                let unchanged = rt
                    .instances
                    .get(id)
                    .is_some_and(|i| &i.entry == entry && i.state != InstanceState::Failed);
                if !unchanged {
                    rt.timer_seq += 1;
                    let tag = rt.timer_seq;
                    rt.pending_start.insert(tag, id.clone());
                    rt.instances.insert(
                        id.clone(),
                        RuntimeInstance {
                            entry: entry.clone(),
                            state: InstanceState::Starting,
                            restarts: 0,
                        },
                    );
                    to_start.push((tag, id.clone()));
                }
            }
            for id in &to_stop {
                if !manifest.services.contains_key(id) {
                    rt.instances.remove(id);
                }
            }
            rt.ack_outstanding = true;
        }
        for id in to_stop {
            ctx.platform.detach_client(&id);
        }
        for (tag, _) in &to_start {
            ctx.set_timer(start_delay, *tag);
        }
        // Nothing to start: the node is already converged, ack right away.
        let idle = ctx
            .platform
            .control
            .node_runtime
            .get(&key)
            .is_some_and(|rt| rt.pending_start.is_empty());
        if idle {
            if let Some(rt) = ctx.platform.control.node_runtime.get_mut(&key) {
                rt.ack_outstanding = false;
            }
            self.ack(ctx);
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag == HEARTBEAT_TAG {
            self.heartbeat(ctx);
            ctx.set_timer(ctx.platform.config.heartbeat_every_us, HEARTBEAT_TAG);
            return;
        }
        let key = self.node.to_string();
        let started: Option<(String, ServiceEntry)> = {
            let Some(rt) = ctx.platform.control.node_runtime.get_mut(&key) else {
                return;
            };
            rt.pending_start
                .remove(&tag)
                .and_then(|id| rt.instances.get(&id).map(|inst| (id, inst.entry.clone())))
        };
        if let Some((id, entry)) = started {
            let info = SpawnInfo {
                app: &entry.app,
                instance_id: &id,
                component: &entry.component,
                node: &self.node,
                params: &entry.params,
            };
            let behavior = ctx.platform.make_behavior(&entry.image, &info);
            ctx.platform.attach_client(&id, self.node.clone(), behavior);
            if let Some(rt) = ctx.platform.control.node_runtime.get_mut(&key) {
                if let Some(inst) = rt.instances.get_mut(&id) {
                    if inst.state == InstanceState::Starting {
                        inst.state = InstanceState::Running;
                    }
                }
            }
        }
        let ack_now = {
            let Some(rt) = ctx.platform.control.node_runtime.get_mut(&key) else {
                return;
            };
            if rt.pending_start.is_empty() && rt.ack_outstanding {
                rt.ack_outstanding = false;
                true
            } else {
                false
            }
        };
        if ack_now {
            self.ack(ctx);
        }
    }
}

const RETRY_TAG: u64 = 1;

/// Controller endpoint at the CC: ingests acks and heartbeats, retries
/// manifest delivery for unacked nodes until the fleet converges.
pub struct ControllerActor;

impl Actor for ControllerActor {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        let _ = ctx.platform.subscribe_from(&client, "ace/ctl/reply/#");
        let _ = ctx.platform.subscribe_from(&client, "ace/ctl/status/#");
        ctx.set_timer(ctx.platform.config.retry_every_us, RETRY_TAG);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        let topic = msg.topic.as_str();
        if topic.starts_with("ace/ctl/reply/") {
            if let Some(ack) = msg.json_head::<AckMsg>() {
                let e = ctx.platform.control.acked_gen.entry(ack.node).or_insert(0);
                *e = (*e).max(ack.gen);
                let apps: Vec<String> = ctx.platform.control.records.keys().cloned().collect();
                for app in apps {
                    ctx.platform.recompute_record_status(&app);
                }
            }
        } else if topic.starts_with("ace/ctl/status/") {
            if let Some(report) = msg.json_head::<AgentReport>() {
                ctx.platform
                    .control
                    .heartbeats
                    .insert(report.node.clone(), report);
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, tag: u64) {
        if tag != RETRY_TAG {
            return;
        }
        let pending: Vec<NodeManifest> = ctx
            .platform
            .control
            .desired
            .values()
            .filter(|m| {
                ctx.platform
                    .control
                    .acked_gen
                    .get(&m.node.to_string())
                    .copied()
                    .unwrap_or(0)
                    < m.generation
            })
            .cloned()
            .collect();
        for manifest in pending {
            ctx.platform.send_manifest(&manifest);
        }
        ctx.set_timer(ctx.platform.config.retry_every_us, RETRY_TAG);
    }
}
