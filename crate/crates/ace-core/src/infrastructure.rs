//! Registry of a user's edge-cloud infrastructure: one Central Cloud (CC),
//! several Edge Clouds (ECs), and the nodes inside them, all scoped by
//! hierarchical IDs. The registry is a single logical authority; mutations go
//! through it, snapshots can be shared freely.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::simnet::rng::fnv1a64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InfraError {
    #[error("an infrastructure needs at least one EC")]
    ZeroEc,
    #[error("an infrastructure has exactly one CC, got {0}")]
    MultipleCc(usize),
    #[error("duplicate cluster name {0:?}")]
    DuplicateClusterName(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown infrastructure {0}")]
    UnknownInfra(String),
    #[error("capacities must be positive (cpu {cpu}m, mem {mem}MiB)")]
    NonPositiveCapacity { cpu: u32, mem: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Ec,
    Cc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Active,
    Shielded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: HierarchicalId,
    pub cpu_millicores: u32,
    pub mem_mib: u32,
    pub labels: BTreeSet<String>,
    pub status: NodeStatus,
}

impl NodeSpec {
    pub fn is_active(&self) -> bool {
        self.status == NodeStatus::Active
    }

    pub fn has_labels(&self, required: &BTreeSet<String>) -> bool {
        required.is_subset(&self.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub id: HierarchicalId,
    pub kind: ClusterKind,
    /// User-facing name from the declaration; IDs are platform-assigned.
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub lan_mbps: u64,
    pub lan_delay_ms: u64,
    /// Identifier of this EC's WAN link once materialized; the CC has none.
    pub wan_link: Option<String>,
    /// Machine-readable join token handed back at registration; agents present
    /// it instead of running shell instructions.
    pub join_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfrastructureRecord {
    pub id: HierarchicalId,
    pub owner: String,
    pub clusters: Vec<ClusterSpec>,
}

impl InfrastructureRecord {
    pub fn cc(&self) -> &ClusterSpec {
        self.clusters
            .iter()
            .find(|c| c.kind == ClusterKind::Cc)
            .expect("registry invariant: exactly one CC")
    }

    pub fn ecs(&self) -> impl Iterator<Item = &ClusterSpec> {
        self.clusters.iter().filter(|c| c.kind == ClusterKind::Ec)
    }

    pub fn cluster(&self, id: &HierarchicalId) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| &c.id == id)
    }

    pub fn node(&self, id: &HierarchicalId) -> Option<&NodeSpec> {
        let cluster = self.cluster(&id.cluster_id()?)?;
        cluster.nodes.iter().find(|n| &n.id == id)
    }

    /// All nodes in ID order.
    pub fn nodes(&self) -> Vec<&NodeSpec> {
        let mut out: Vec<&NodeSpec> = self.clusters.iter().flat_map(|c| c.nodes.iter()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterDecl<'a> {
    pub kind: ClusterKind,
    pub name: &'a str,
}

/// Optional predicate for `list_nodes`.
#[derive(Debug, Clone, Default)]
pub struct NodeFilter {
    pub labels: BTreeSet<String>,
    pub kind: Option<ClusterKind>,
}

impl NodeFilter {
    pub fn with_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        NodeFilter {
            labels: labels.into_iter().map(Into::into).collect(),
            kind: None,
        }
    }
}

/// The registry itself. IDs come from deterministic per-scope counters, so
/// replaying the same call sequence yields identical IDs.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Registry {
    infra_counter: u64,
    records: std::collections::BTreeMap<String, InfrastructureRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_infrastructure(
        &mut self,
        owner: &str,
        declared: &[ClusterDecl<'_>],
    ) -> Result<&InfrastructureRecord, InfraError> {
        let cc_count = declared
            .iter()
            .filter(|d| d.kind == ClusterKind::Cc)
            .count();
        let ec_count = declared
            .iter()
            .filter(|d| d.kind == ClusterKind::Ec)
            .count();
        if cc_count != 1 {
            return Err(InfraError::MultipleCc(cc_count));
        }
        if ec_count == 0 {
            return Err(InfraError::ZeroEc);
        }
        let mut seen = BTreeSet::new();
        for d in declared {
            if !seen.insert(d.name) {
                return Err(InfraError::DuplicateClusterName(d.name.to_string()));
            }
        }

        self.infra_counter += 1;
        let infra_id = HierarchicalId::infra(format!("inf-{}", self.infra_counter));
        let mut clusters = Vec::new();
        let mut ec_counter = 0u64;
        for d in declared {
            let (token, kind, lan_mbps) = match d.kind {
                ClusterKind::Cc => ("cc".to_string(), ClusterKind::Cc, 1000),
                ClusterKind::Ec => {
                    ec_counter += 1;
                    (format!("ec-{ec_counter}"), ClusterKind::Ec, 100)
                }
            };
            let id = infra_id.cluster(token);
            let join_token = format!("join:{id}:{:08x}", fnv1a64(id.to_string().as_bytes()));
            clusters.push(ClusterSpec {
                id,
                kind,
                name: d.name.to_string(),
                nodes: Vec::new(),
                lan_mbps,
                lan_delay_ms: 1,
                wan_link: None,
                join_token,
            });
        }
        let record = InfrastructureRecord {
            id: infra_id.clone(),
            owner: owner.to_string(),
            clusters,
        };
        self.records.insert(infra_id.to_string(), record);
        Ok(&self.records[&infra_id.to_string()])
    }

    pub fn register_node(
        &mut self,
        cluster: &HierarchicalId,
        cpu_millicores: u32,
        mem_mib: u32,
        labels: BTreeSet<String>,
    ) -> Result<NodeSpec, InfraError> {
        if cpu_millicores == 0 || mem_mib == 0 {
            return Err(InfraError::NonPositiveCapacity {
                cpu: cpu_millicores,
                mem: mem_mib,
            });
        }
        let cluster_spec = self.cluster_mut(cluster)?;
        let node_id = cluster.node(format!("n{}", cluster_spec.nodes.len() + 1));
        let node = NodeSpec {
            id: node_id,
            cpu_millicores,
            mem_mib,
            labels,
            status: NodeStatus::Active,
        };
        cluster_spec.nodes.push(node.clone());
        Ok(node)
    }

    pub fn shield_node(&mut self, node: &HierarchicalId) -> Result<NodeSpec, InfraError> {
        self.set_node_status(node, NodeStatus::Shielded)
    }

    pub fn set_node_status(
        &mut self,
        node: &HierarchicalId,
        status: NodeStatus,
    ) -> Result<NodeSpec, InfraError> {
        let cluster_id = node
            .cluster_id()
            .ok_or_else(|| InfraError::UnknownNode(node.to_string()))?;
        let cluster = self.cluster_mut(&cluster_id)?;
        let spec = cluster
            .nodes
            .iter_mut()
            .find(|n| &n.id == node)
            .ok_or_else(|| InfraError::UnknownNode(node.to_string()))?;
        spec.status = status;
        Ok(spec.clone())
    }

    /// Active nodes of `infra` matching `filter`, sorted by ID. Shielded and
    /// failed nodes never appear.
    pub fn list_nodes(
        &self,
        infra: &HierarchicalId,
        filter: &NodeFilter,
    ) -> Result<Vec<NodeSpec>, InfraError> {
        let record = self.infra(infra)?;
        let mut out: Vec<NodeSpec> = record
            .clusters
            .iter()
            .filter(|c| filter.kind.is_none_or(|k| c.kind == k))
            .flat_map(|c| c.nodes.iter())
            .filter(|n| n.is_active() && n.has_labels(&filter.labels))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn infra(&self, id: &HierarchicalId) -> Result<&InfrastructureRecord, InfraError> {
        self.records
            .get(&id.infra_id().to_string())
            .ok_or_else(|| InfraError::UnknownInfra(id.to_string()))
    }

    pub fn infras(&self) -> impl Iterator<Item = &InfrastructureRecord> {
        self.records.values()
    }

    pub fn set_wan_link(&mut self, ec: &HierarchicalId, link: String) -> Result<(), InfraError> {
        self.cluster_mut(ec)?.wan_link = Some(link);
        Ok(())
    }

    pub fn set_lan(&mut self, cluster: &HierarchicalId, mbps: u64, delay_ms: u64) {
        if let Ok(c) = self.cluster_mut(cluster) {
            c.lan_mbps = mbps;
            c.lan_delay_ms = delay_ms;
        }
    }

    fn cluster_mut(&mut self, id: &HierarchicalId) -> Result<&mut ClusterSpec, InfraError> {
        let infra_key = id.infra_id().to_string();
        let record = self
            .records
            .get_mut(&infra_key)
            .ok_or_else(|| InfraError::UnknownCluster(id.to_string()))?;
        record
            .clusters
            .iter_mut()
            .find(|c| &c.id == id)
            .ok_or_else(|| InfraError::UnknownCluster(id.to_string()))
    }

    /// Canonical JSON snapshot (sorted keys), diff-friendly.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_snapshot_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

// ---------------------------------------------------------------------------
// Declarative infrastructure file (`infra.yaml`)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraFile {
    pub clusters: Vec<InfraFileCluster>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraFileCluster {
    pub name: String,
    pub kind: ClusterKind,
    #[serde(default)]
    pub lan_mbps: Option<u64>,
    #[serde(default)]
    pub nodes: Vec<InfraFileNode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraFileNode {
    pub name: String,
    pub cpu: u32,
    pub mem: u32,
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Error)]
pub enum InfraFileError {
    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error(transparent)]
    Registry(#[from] InfraError),
}

impl Registry {
    /// Register a whole infrastructure from an `infra.yaml` document.
    pub fn register_from_yaml(
        &mut self,
        owner: &str,
        text: &str,
    ) -> Result<HierarchicalId, InfraFileError> {
        let file: InfraFile = serde_yaml::from_str(text)?;
        let decls: Vec<ClusterDecl<'_>> = file
            .clusters
            .iter()
            .map(|c| ClusterDecl {
                kind: c.kind,
                name: &c.name,
            })
            .collect();
        let infra_id = self.register_infrastructure(owner, &decls)?.id.clone();
        // Cluster IDs are assigned in declaration order.
        let cluster_ids: Vec<HierarchicalId> = self
            .infra(&infra_id)?
            .clusters
            .iter()
            .map(|c| c.id.clone())
            .collect();
        for (decl, cid) in file.clusters.iter().zip(cluster_ids) {
            if let Some(mbps) = decl.lan_mbps {
                let delay = self
                    .infra(&infra_id)?
                    .cluster(&cid)
                    .map(|c| c.lan_delay_ms)
                    .unwrap_or(1);
                self.set_lan(&cid, mbps, delay);
            }
            for n in &decl.nodes {
                let labels = n.labels.iter().cloned().collect();
                self.register_node(&cid, n.cpu, n.mem, labels)?;
            }
        }
        Ok(infra_id)
    }
}
