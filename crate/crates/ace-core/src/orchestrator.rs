//! Component placement: bind every replica of every component to a node such
//! that labels, resources and edge/cloud placement all hold.
//!
//! First-fit-decreasing by (cpu, mem) with chronological backtracking, so the
//! search is complete at desk scale. Replicas of one component spread across
//! nodes (soft anti-affinity); ties break toward the node with most residual
//! capacity, then lexicographic ID. Identical inputs give byte-identical
//! plans.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ids::HierarchicalId;
use crate::infrastructure::{ClusterKind, InfrastructureRecord};
use crate::topology::{
    validate, ApplicationTopology, ComponentSpec, DeploymentPlan, Resources, Violation,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeView {
    pub id: HierarchicalId,
    pub cluster: HierarchicalId,
    pub kind: ClusterKind,
    pub labels: std::collections::BTreeSet<String>,
    pub residual_cpu: u32,
    pub residual_mem: u32,
}

/// Snapshot of placement-relevant state: active nodes with residual capacity
/// after existing commitments.
#[derive(Debug, Clone, Default)]
pub struct PlacementProblem {
    pub nodes: Vec<NodeView>,
}

/// Resources already consumed on each node by earlier deployments.
pub type Commitments = BTreeMap<HierarchicalId, Resources>;

impl PlacementProblem {
    pub fn from_infra(infra: &InfrastructureRecord, commitments: &Commitments) -> Self {
        let mut nodes = Vec::new();
        for cluster in &infra.clusters {
            for node in &cluster.nodes {
                if !node.is_active() {
                    continue;
                }
                let used = commitments
                    .get(&node.id)
                    .copied()
                    .unwrap_or(Resources { cpu: 0, mem: 0 });
                nodes.push(NodeView {
                    id: node.id.clone(),
                    cluster: cluster.id.clone(),
                    kind: cluster.kind,
                    labels: node.labels.clone(),
                    residual_cpu: node.cpu_millicores.saturating_sub(used.cpu),
                    residual_mem: node.mem_mib.saturating_sub(used.mem),
                });
            }
        }
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        PlacementProblem { nodes }
    }

    fn restricted_to(&self, cluster: &HierarchicalId) -> PlacementProblem {
        PlacementProblem {
            nodes: self
                .nodes
                .iter()
                .filter(|n| &n.cluster == cluster)
                .cloned()
                .collect(),
        }
    }
}

fn node_admits(node: &NodeView, c: &ComponentSpec) -> bool {
    c.placement.admits(node.kind)
        && c.labels.is_subset(&node.labels)
        && node.residual_cpu >= c.resources.cpu
        && node.residual_mem >= c.resources.mem
}

/// Nodes where one replica of `component` can run right now, best first:
/// most residual cpu, then most residual mem, then lexicographic ID.
pub fn feasible_nodes(
    component: &ComponentSpec,
    problem: &PlacementProblem,
) -> Vec<HierarchicalId> {
    let mut hits: Vec<&NodeView> = problem
        .nodes
        .iter()
        .filter(|n| node_admits(n, component))
        .collect();
    hits.sort_by(|a, b| {
        (b.residual_cpu, b.residual_mem)
            .cmp(&(a.residual_cpu, a.residual_mem))
            .then_with(|| a.id.cmp(&b.id))
    });
    hits.into_iter().map(|n| n.id.clone()).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrchestrateError {
    #[error("topology fails validation: {0:?}")]
    ValidationFailed(Vec<Violation>),
    #[error("no feasible placement for component {component}: {reason}")]
    Infeasible { component: String, reason: String },
}

/// Produce a deployment plan for `topology` on `infra`, leaving prior
/// commitments untouched. Fails without a partial plan when no complete
/// assignment exists.
pub fn orchestrate(
    topology: &ApplicationTopology,
    infra: &InfrastructureRecord,
    commitments: &Commitments,
) -> Result<DeploymentPlan, OrchestrateError> {
    let violations = validate(topology, infra);
    if !violations.is_empty() {
        return Err(OrchestrateError::ValidationFailed(violations));
    }
    let problem = PlacementProblem::from_infra(infra, commitments);
    let assignment = solve(&topology.components, &problem).map_err(|component| {
        OrchestrateError::Infeasible {
            reason: "backtracking search exhausted all node assignments".into(),
            component,
        }
    })?;
    let mut plan = DeploymentPlan {
        topology: topology.clone(),
        instances: assignment,
        service_bindings: topology
            .services
            .iter()
            .map(|s| (*s, infra.id.to_string()))
            .collect(),
    };
    // Keep replica binding lists in a canonical order.
    for bindings in plan.instances.values_mut() {
        bindings.sort();
    }
    Ok(plan)
}

/// Descending (cpu, mem) with name tiebreak: big rocks first.
fn ffd_order(components: &[ComponentSpec]) -> Vec<&ComponentSpec> {
    let mut order: Vec<&ComponentSpec> = components.iter().collect();
    order.sort_by(|a, b| {
        (b.resources.cpu, b.resources.mem)
            .cmp(&(a.resources.cpu, a.resources.mem))
            .then_with(|| a.name.cmp(&b.name))
    });
    order
}

fn solve(
    components: &[ComponentSpec],
    problem: &PlacementProblem,
) -> Result<BTreeMap<String, Vec<HierarchicalId>>, String> {
    let order = ffd_order(components);
    // Flatten into replica slots: (component index in `order`, replica index).
    let mut slots = Vec::new();
    for (ci, c) in order.iter().enumerate() {
        for r in 0..c.replicas {
            slots.push((ci, r));
        }
    }
    let mut nodes = problem.nodes.clone();
    let mut chosen: Vec<usize> = Vec::with_capacity(slots.len()); // node index per filled slot
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(slots.len());

    let mut depth = 0usize;
    loop {
        if depth == slots.len() {
            // Complete assignment.
            let mut out: BTreeMap<String, Vec<HierarchicalId>> = BTreeMap::new();
            for c in components {
                out.insert(c.name.clone(), Vec::new());
            }
            for (slot, node_ix) in slots.iter().zip(&chosen) {
                let name = &order[slot.0].name;
                out.get_mut(name)
                    .expect("slot component exists")
                    .push(nodes[*node_ix].id.clone());
            }
            return Ok(out);
        }
        if candidates.len() == depth {
            let (ci, _) = slots[depth];
            let comp = order[ci];
            // Nodes already used by this component's earlier replicas, for
            // soft anti-affinity.
            let used_by_comp: Vec<usize> = slots[..depth]
                .iter()
                .zip(&chosen)
                .filter(|((c, _), _)| *c == ci)
                .map(|(_, ix)| *ix)
                .collect();
            let mut cand: Vec<usize> = (0..nodes.len())
                .filter(|ix| node_admits(&nodes[*ix], comp))
                .collect();
            cand.sort_by(|a, b| {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let fresh_a = !used_by_comp.contains(a);
                let fresh_b = !used_by_comp.contains(b);
                fresh_b
                    .cmp(&fresh_a) // unused nodes first
                    .then(
                        (nb.residual_cpu, nb.residual_mem).cmp(&(na.residual_cpu, na.residual_mem)),
                    )
                    .then_with(|| na.id.cmp(&nb.id))
            });
            cand.reverse(); // popped from the back, best candidate last
            candidates.push(cand);
        }
        match candidates[depth].pop() {
            Some(node_ix) => {
                let comp = order[slots[depth].0];
                nodes[node_ix].residual_cpu -= comp.resources.cpu;
                nodes[node_ix].residual_mem -= comp.resources.mem;
                chosen.push(node_ix);
                depth += 1;
            }
            None => {
                // Dead end: backtrack.
                candidates.pop();
                if depth == 0 {
                    let failing = order
                        .iter()
                        .find(|c| feasible_nodes(c, problem).len() < c.replicas as usize)
                        .or(order.first())
                        .map(|c| c.name.clone())
                        .unwrap_or_default();
                    return Err(failing);
                }
                depth -= 1;
                let node_ix = chosen.pop().expect("assignment at depth");
                let comp = order[slots[depth].0];
                nodes[node_ix].residual_cpu += comp.resources.cpu;
                nodes[node_ix].residual_mem += comp.resources.mem;
            }
        }
    }
}

/// Resolve an EC's cluster-granularity bindings to concrete nodes, using the
/// same feasibility rules restricted to that EC. On failure the global plan
/// is left untouched.
pub fn delegate_node_level(
    plan: &DeploymentPlan,
    ec: &HierarchicalId,
    infra: &InfrastructureRecord,
    commitments: &Commitments,
) -> Result<DeploymentPlan, OrchestrateError> {
    let problem = PlacementProblem::from_infra(infra, commitments).restricted_to(ec);
    // Build a pseudo component list holding only the replicas delegated to
    // this EC, preserving each component's spec.
    let mut local_components = Vec::new();
    for c in &plan.topology.components {
        let delegated = plan
            .instances
            .get(&c.name)
            .map(|b| b.iter().filter(|id| *id == ec).count() as u32)
            .unwrap_or(0);
        if delegated > 0 {
            let mut sub = c.clone();
            sub.replicas = delegated;
            local_components.push(sub);
        }
    }
    let resolved =
        solve(&local_components, &problem).map_err(|component| OrchestrateError::Infeasible {
            component,
            reason: format!("EC {ec} cannot host its delegated replicas"),
        })?;
    let mut out = plan.clone();
    for (name, mut nodes) in resolved {
        nodes.sort();
        let bindings = out.instances.get_mut(&name).expect("component in plan");
        let mut it = nodes.into_iter();
        for b in bindings.iter_mut() {
            if b == ec {
                *b = it.next().expect("one node per delegated replica");
            }
        }
        bindings.sort();
    }
    Ok(out)
}

/// Replace node-level bindings inside `ec` with the bare cluster ID, handing
/// node-level orchestration to the EC.
pub fn delegate_to_cluster(plan: &DeploymentPlan, ec: &HierarchicalId) -> DeploymentPlan {
    let mut out = plan.clone();
    for bindings in out.instances.values_mut() {
        for b in bindings.iter_mut() {
            if b.cluster_id().as_ref() == Some(ec) {
                *b = ec.clone();
            }
        }
        bindings.sort();
    }
    out
}

/// Production-path plan checker: replica counts, node existence/status,
/// labels, placement, and aggregate capacity including prior commitments.
pub fn validate_plan(
    plan: &DeploymentPlan,
    infra: &InfrastructureRecord,
    commitments: &Commitments,
) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    let mut load: BTreeMap<HierarchicalId, (u64, u64)> = BTreeMap::new();
    for c in &plan.topology.components {
        let bindings = match plan.instances.get(&c.name) {
            Some(b) => b,
            None => {
                errors.push(format!("component {} has no bindings", c.name));
                continue;
            }
        };
        if bindings.len() != c.replicas as usize {
            errors.push(format!(
                "component {} has {} bindings, wants {} replicas",
                c.name,
                bindings.len(),
                c.replicas
            ));
        }
        for b in bindings {
            if !b.is_node() {
                errors.push(format!(
                    "component {} binding {b} is not node-level",
                    c.name
                ));
                continue;
            }
            let node = match infra.node(b) {
                Some(n) => n,
                None => {
                    errors.push(format!("component {} bound to unknown node {b}", c.name));
                    continue;
                }
            };
            if !node.is_active() {
                errors.push(format!("component {} bound to inactive node {b}", c.name));
            }
            if !node.has_labels(&c.labels) {
                errors.push(format!("component {} labels unsatisfied on {b}", c.name));
            }
            let kind = infra
                .cluster(&b.cluster_id().expect("node id has cluster"))
                .map(|cl| cl.kind);
            if !kind.is_some_and(|k| c.placement.admits(k)) {
                errors.push(format!("component {} placement violated on {b}", c.name));
            }
            let e = load.entry(b.clone()).or_default();
            e.0 += c.resources.cpu as u64;
            e.1 += c.resources.mem as u64;
        }
    }
    for (node_id, (cpu, mem)) in &load {
        if let Some(node) = infra.node(node_id) {
            let prior = commitments
                .get(node_id)
                .copied()
                .unwrap_or(Resources { cpu: 0, mem: 0 });
            if cpu + prior.cpu as u64 > node.cpu_millicores as u64
                || mem + prior.mem as u64 > node.mem_mib as u64
            {
                errors.push(format!("node {node_id} over capacity"));
            }
        }
    }
    if plan
        .instances
        .keys()
        .any(|k| plan.topology.component(k).is_none())
    {
        errors.push("plan binds components absent from the topology".into());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
