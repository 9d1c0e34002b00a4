//! The application topology file: parse, validate against an infrastructure,
//! diff across versions. Topologies are immutable values; orchestration
//! annotates a replica of one into a deployment plan.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::infrastructure::{ClusterKind, InfrastructureRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Edge,
    Cloud,
    #[default]
    Any,
}

impl Placement {
    pub fn admits(self, kind: ClusterKind) -> bool {
        match self {
            Placement::Edge => kind == ClusterKind::Ec,
            Placement::Cloud => kind == ClusterKind::Cc,
            Placement::Any => true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Control,
    #[default]
    Workload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Message,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub cpu: u32,
    pub mem: u32,
}

fn default_replicas() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    pub image: String,
    #[serde(default = "default_replicas")]
    pub replicas: u32,
    #[serde(default)]
    pub connections: Vec<String>,
    pub resources: Resources,
    #[serde(default)]
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub plane: Plane,
    /// Free-form parameters passed opaquely to the workload.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl ComponentSpec {
    fn canonicalize(&mut self) {
        self.connections.sort();
        self.connections.dedup();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationTopology {
    #[serde(rename = "app")]
    pub app_name: String,
    pub version: u64,
    #[serde(default)]
    pub services: BTreeSet<ServiceKind>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
}

impl ApplicationTopology {
    pub fn component(&self, name: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn component_names(&self) -> BTreeSet<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    fn canonicalize(&mut self) {
        for c in &mut self.components {
            c.canonicalize();
        }
        self.components.sort_by(|a, b| a.name.cmp(&b.name));
    }

    /// Canonical YAML: components sorted by name, map keys lexicographic.
    pub fn to_canonical_yaml(&self) -> String {
        let mut copy = self.clone();
        copy.canonicalize();
        serde_yaml::to_string(&copy).expect("topology serializes")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown field at line {line}: {msg}")]
    UnknownField { line: usize, msg: String },
    #[error("component {0:?} declared more than once")]
    DuplicateComponent(String),
    #[error("component {from:?} connects to undeclared {to:?}")]
    DanglingConnection { from: String, to: String },
    #[error("component {0:?} declares non-positive resources")]
    NonPositiveResource(String),
    #[error("version must be >= 1")]
    InvalidVersion,
}

/// Parse and validate a topology document. Parsing is total: either a fully
/// validated topology or an error, never a partial result.
pub fn parse_topology(text: &str) -> Result<ApplicationTopology, TopologyError> {
    let mut topo: ApplicationTopology = serde_yaml::from_str(text).map_err(|e| {
        let line = e.location().map(|l| l.line()).unwrap_or(0);
        let msg = e.to_string();
        if msg.contains("unknown field") {
            TopologyError::UnknownField { line, msg }
        } else {
            TopologyError::Syntax { line, msg }
        }
    })?;
    check_semantics(&topo)?;
    topo.canonicalize();
    Ok(topo)
}

fn check_semantics(topo: &ApplicationTopology) -> Result<(), TopologyError> {
    if topo.version == 0 {
        return Err(TopologyError::InvalidVersion);
    }
    let mut names = BTreeSet::new();
    for c in &topo.components {
        if !names.insert(c.name.as_str()) {
            return Err(TopologyError::DuplicateComponent(c.name.clone()));
        }
        if c.resources.cpu == 0 || c.resources.mem == 0 || c.replicas == 0 {
            return Err(TopologyError::NonPositiveResource(c.name.clone()));
        }
    }
    for c in &topo.components {
        for conn in &c.connections {
            if !names.contains(conn.as_str()) {
                return Err(TopologyError::DanglingConnection {
                    from: c.name.clone(),
                    to: conn.clone(),
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Static validation against an infrastructure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// No node anywhere has the raw cpu/mem for one replica.
    InsufficientCapacity { component: String },
    /// Capacity exists somewhere, but labels/placement rule every node out.
    NoFeasibleNode { component: String },
}

/// Every violated constraint, never just the first. An empty list means ok.
pub fn validate(topo: &ApplicationTopology, infra: &InfrastructureRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    for c in &topo.components {
        let mut capacity_somewhere = false;
        let mut feasible_somewhere = false;
        for cluster in &infra.clusters {
            for node in &cluster.nodes {
                if !node.is_active() {
                    continue;
                }
                let fits =
                    node.cpu_millicores >= c.resources.cpu && node.mem_mib >= c.resources.mem;
                capacity_somewhere |= fits;
                if fits && node.has_labels(&c.labels) && c.placement.admits(cluster.kind) {
                    feasible_somewhere = true;
                }
            }
        }
        if !capacity_somewhere {
            out.push(Violation::InsufficientCapacity {
                component: c.name.clone(),
            });
        } else if !feasible_somewhere {
            out.push(Violation::NoFeasibleNode {
                component: c.name.clone(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Diff
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChangeSet {
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub modified: BTreeSet<String>,
    pub unchanged: BTreeSet<String>,
}

impl ChangeSet {
    pub fn is_noop(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("app name mismatch: {old:?} vs {new:?}")]
    NameMismatch { old: String, new: String },
    #[error("new version {new} must exceed old version {old}")]
    NonMonotoneVersion { old: u64, new: u64 },
}

/// Partition component names into added/removed/modified/unchanged. A
/// component is modified iff any field differs.
pub fn diff(old: &ApplicationTopology, new: &ApplicationTopology) -> Result<ChangeSet, DiffError> {
    if old.app_name != new.app_name {
        return Err(DiffError::NameMismatch {
            old: old.app_name.clone(),
            new: new.app_name.clone(),
        });
    }
    if new.version <= old.version {
        return Err(DiffError::NonMonotoneVersion {
            old: old.version,
            new: new.version,
        });
    }
    let mut set = ChangeSet::default();
    let old_names = old.component_names();
    let new_names = new.component_names();
    for name in old_names.union(&new_names) {
        match (old.component(name), new.component(name)) {
            (Some(_), None) => {
                set.removed.insert(name.clone());
            }
            (None, Some(_)) => {
                set.added.insert(name.clone());
            }
            (Some(a), Some(b)) => {
                let mut a = a.clone();
                let mut b = b.clone();
                a.canonicalize();
                b.canonicalize();
                if a == b {
                    set.unchanged.insert(name.clone());
                } else {
                    set.modified.insert(name.clone());
                }
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Deployment plan: the orchestrator-annotated topology replica
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub topology: ApplicationTopology,
    /// Component name -> node (or cluster, when node-level orchestration is
    /// delegated to the EC) binding per replica.
    pub instances: BTreeMap<String, Vec<HierarchicalId>>,
    pub service_bindings: BTreeMap<ServiceKind, String>,
}

impl DeploymentPlan {
    /// Canonical JSON (`plan.json`): sorted keys, stable across reruns.
    pub fn to_canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.topology.canonicalize();
        serde_json::to_string_pretty(&copy).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Nodes hosting at least one instance, sorted.
    pub fn hosting_nodes(&self) -> BTreeSet<HierarchicalId> {
        self.instances.values().flatten().cloned().collect()
    }
}
