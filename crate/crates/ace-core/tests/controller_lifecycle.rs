//! Deployment lifecycle on the reference testbed: manifest generation and
//! delivery, ack-driven status, incremental-update minimality, removal with
//! eventual convergence across partitions, shielding, and restart policy.

mod common;

use std::collections::BTreeMap;

use ace_core::controller::{
    instance_id, plan_to_instructions, DeployError, DeployStatus, SnapState, UpdateMode,
};
use ace_core::messaging::Message;
use ace_core::orchestrator::{orchestrate, Commitments};
use ace_core::platform::{Actor, Ctx};
use ace_core::simnet::{set_status_at, LinkId, LinkStatus, SimTime};
use ace_core::topology::{parse_topology, ApplicationTopology, DeploymentPlan};
use common::{net, testbed, Testbed};

const VQ_TOPOLOGY: &str = r#"
app: vq
version: 1
services: [message]
components:
  - name: od
    image: vq/od
    replicas: 9
    resources: {cpu: 500, mem: 256}
    labels: [camera=true]
    placement: edge
  - name: eoc
    image: vq/eoc
    replicas: 3
    resources: {cpu: 2000, mem: 1024}
    labels: [gateway=true]
    placement: edge
  - name: coc
    image: vq/coc
    resources: {cpu: 4000, mem: 4096}
    placement: cloud
  - name: rs
    image: vq/rs
    resources: {cpu: 200, mem: 512}
    placement: cloud
  - name: lic
    image: ace/lic
    replicas: 3
    resources: {cpu: 100, mem: 128}
    labels: [gateway=true]
    placement: edge
    plane: control
"#;

fn planned(t: &Testbed, yaml: &str) -> (ApplicationTopology, DeploymentPlan) {
    let topo = parse_topology(yaml).unwrap();
    let infra = t.p.registry.infra(&t.infra).unwrap();
    let plan = orchestrate(&topo, infra, &Commitments::new()).unwrap();
    (topo, plan)
}

#[test]
fn plan_to_instructions_shapes() {
    let t = testbed(1, &net(0));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    let manifests = plan_to_instructions(&plan);
    assert_eq!(manifests.len(), 13, "9 camera + 3 gateway + 1 CC node");
    let total_services: usize = manifests.iter().map(|m| m.services.len()).sum();
    assert_eq!(total_services, 9 + 3 + 1 + 1 + 3);
    // Grouping: the CC node carries both cloud components in one manifest.
    let cc_manifest = manifests
        .iter()
        .find(|m| m.node.to_string() == "inf-1.cc.n1")
        .unwrap();
    assert_eq!(cc_manifest.services.len(), 2);
    assert!(cc_manifest.services.contains_key("vq.coc.1"));
    assert!(cc_manifest.services.contains_key("vq.rs.1"));
    // Instance ids are unique and deterministic.
    let yaml = cc_manifest.to_compose_yaml();
    assert!(yaml.contains("services:"));
    assert!(yaml.contains("image: vq/coc"));

    // Empty plan, empty instructions.
    let empty = DeploymentPlan {
        topology: parse_topology("app: e\nversion: 1\n").unwrap(),
        instances: BTreeMap::new(),
        service_bindings: BTreeMap::new(),
    };
    assert!(plan_to_instructions(&empty).is_empty());
}

#[test]
fn deploy_reaches_running_and_rejects_duplicates() {
    let mut t = testbed(1, &net(50));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Deploying);
    common::settle(&mut t.p, 5_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Running);
    assert!(t.p.agents_converged(), "agent state equals acked manifests");
    // all instances report running in the snapshot
    let snap = t.p.collect_status();
    assert_eq!(snap.instances.len(), 17);
    assert!(snap
        .instances
        .values()
        .all(|i| i.state == SnapState::Running && !i.stale));

    let err = t.p.deploy(&plan);
    assert!(matches!(err, Err(DeployError::AlreadyDeployed(_))));
}

#[test]
fn deploy_with_partitioned_ec_degrades_then_recovers() {
    let mut t = testbed(1, &net(50));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    // EC-2 is dark from the start.
    set_status_at(
        &mut t.p,
        &LinkId::wan(&t.infra.cluster("ec-2")),
        LinkStatus::Partitioned,
        SimTime::from_ms(10),
    );
    common::settle(&mut t.p, 20);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 6_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Degraded);
    let snap = t.p.collect_status();
    // EC-1/EC-3/CC instances run; EC-2 instances never reported.
    let ec2_pending = snap
        .instances
        .values()
        .filter(|i| i.node.contains(".ec-2."))
        .all(|i| i.state == SnapState::Pending && i.stale);
    let others_running = snap
        .instances
        .values()
        .filter(|i| !i.node.contains(".ec-2."))
        .all(|i| i.state == SnapState::Running);
    assert!(ec2_pending);
    assert!(others_running);

    // Restore: controller retries converge the EC and the record recovers.
    set_status_at(
        &mut t.p,
        &LinkId::wan(&t.infra.cluster("ec-2")),
        LinkStatus::Up,
        SimTime::from_secs(8),
    );
    common::settle(&mut t.p, 16_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Running);
    assert!(t.p.agents_converged());
}

#[test]
fn incremental_update_touches_only_changed_nodes() {
    let mut t = testbed(1, &net(0));
    let (topo, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);
    let gens_before = t.p.control.node_gen.clone();

    // Raise EOC resources only.
    let mut new_topo = topo.clone();
    new_topo.version = 2;
    for c in &mut new_topo.components {
        if c.name == "eoc" {
            c.resources.cpu += 500;
        }
    }
    t.p.update("vq", &new_topo, UpdateMode::Incremental)
        .unwrap();
    common::settle(&mut t.p, 10_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Running);
    assert_eq!(t.p.control.records["vq"].version, 2);

    let gens_after = t.p.control.node_gen.clone();
    let mut bumped: Vec<&String> = gens_after
        .iter()
        .filter(|(node, gen)| gens_before.get(*node).unwrap_or(&0) != *gen)
        .map(|(node, _)| node)
        .collect();
    bumped.sort();
    // Exactly the three gateway nodes hosting EOC.
    assert_eq!(
        bumped,
        vec!["inf-1.ec-1.n1", "inf-1.ec-2.n1", "inf-1.ec-3.n1"]
    );
    // Unchanged components kept their instance ids (still present, same node).
    let snap = t.p.collect_status();
    assert!(snap.instances.contains_key(&instance_id("vq", "od", 5)));
}

#[test]
fn incremental_noop_and_thorough_bump_semantics() {
    let mut t = testbed(1, &net(0));
    let (topo, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);
    let gens_before = t.p.control.node_gen.clone();

    // Version-only bump: incremental update is a no-op.
    let mut v2 = topo.clone();
    v2.version = 2;
    t.p.update("vq", &v2, UpdateMode::Incremental).unwrap();
    common::settle(&mut t.p, 8_000);
    assert_eq!(
        t.p.control.node_gen, gens_before,
        "no manifests regenerated"
    );
    assert_eq!(t.p.control.records["vq"].version, 2);

    // Thorough update with identical content bumps every hosting node.
    let mut v3 = topo.clone();
    v3.version = 3;
    t.p.update("vq", &v3, UpdateMode::Thorough).unwrap();
    common::settle(&mut t.p, 12_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Running);
    for (node, gen) in &t.p.control.node_gen {
        assert!(
            gen > gens_before.get(node).unwrap_or(&0),
            "node {node} not bumped by thorough update"
        );
    }
    assert!(t.p.agents_converged());
}

#[test]
fn update_unknown_app_and_version_rules() {
    let mut t = testbed(1, &net(0));
    let (topo, plan) = planned(&t, VQ_TOPOLOGY);
    let err = t.p.update("vq", &topo, UpdateMode::Incremental);
    assert!(matches!(err, Err(DeployError::UnknownApp(_))));
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);
    // Same version is rejected by the diff precondition.
    let err = t.p.update("vq", &topo, UpdateMode::Incremental);
    assert!(matches!(err, Err(DeployError::Diff(_))));
}

#[test]
fn remove_stops_everything_and_survives_partition() {
    let mut t = testbed(1, &net(50));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);

    // Partition EC-3, then remove the app.
    set_status_at(
        &mut t.p,
        &LinkId::wan(&t.infra.cluster("ec-3")),
        LinkStatus::Partitioned,
        SimTime::from_ms(5_500),
    );
    common::settle(&mut t.p, 5_600);
    t.p.remove("vq").unwrap();
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Removed);
    common::settle(&mut t.p, 9_000);
    // CC and reachable ECs already stopped; EC-3 still runs its instances.
    assert!(!t.p.client_exists(&instance_id("vq", "coc", 1)));
    assert!(
        t.p.client_exists(&instance_id("vq", "od", 7))
            || t.p.client_exists(&instance_id("vq", "od", 8))
            || t.p.client_exists(&instance_id("vq", "od", 9))
    );
    assert!(!t.p.agents_converged());

    // Restoration converges the stragglers.
    set_status_at(
        &mut t.p,
        &LinkId::wan(&t.infra.cluster("ec-3")),
        LinkStatus::Up,
        SimTime::from_secs(10),
    );
    common::settle(&mut t.p, 20_000);
    assert!(t.p.agents_converged());
    let snap = t.p.collect_status();
    assert!(snap.instances.is_empty(), "removed app has no instances");
    for node in snap.nodes.values() {
        assert!(node.reported_instances.is_empty());
    }
    // Double remove is an error; the audit record survives.
    assert!(matches!(t.p.remove("vq"), Err(DeployError::UnknownApp(_))));
    assert!(t.p.control.records.contains_key("vq"));
}

#[test]
fn shield_marks_hosted_instances_degraded() {
    let mut t = testbed(1, &net(0));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);
    let victim = plan.instances["eoc"][0].clone();
    t.p.registry.shield_node(&victim).unwrap();
    common::settle(&mut t.p, 6_000);
    let snap = t.p.collect_status();
    let on_victim: Vec<_> = snap
        .instances
        .values()
        .filter(|i| i.node == victim.to_string())
        .collect();
    assert!(!on_victim.is_empty());
    assert!(on_victim.iter().all(|i| i.state == SnapState::Degraded));
    // Unaffected instances stay running.
    assert!(snap
        .instances
        .values()
        .filter(|i| i.node != victim.to_string())
        .all(|i| i.state == SnapState::Running));
}

/// Behavior that crashes a fixed number of times at startup, then stays up.
struct CrashyActor {
    crashes_left: std::rc::Rc<std::cell::RefCell<u32>>,
}

impl Actor for CrashyActor {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let mut left = self.crashes_left.borrow_mut();
        if *left > 0 {
            *left -= 1;
            ctx.request_crash();
        }
    }
}

fn crashy_testbed(crashes: u32) -> (Testbed, std::rc::Rc<std::cell::RefCell<u32>>) {
    let mut t = testbed(1, &net(0));
    let counter = std::rc::Rc::new(std::cell::RefCell::new(crashes));
    let c2 = counter.clone();
    t.p.register_image(
        "crashy/img",
        Box::new(move |_info| {
            Box::new(CrashyActor {
                crashes_left: c2.clone(),
            })
        }),
    );
    (t, counter)
}

#[test]
fn restart_policy_recovers_transient_crashes() {
    let (mut t, _) = crashy_testbed(2);
    let yaml = "app: c\nversion: 1\ncomponents:\n  - {name: w, image: crashy/img, resources: {cpu: 100, mem: 64}, placement: cloud}\n";
    let (_, plan) = planned(&t, yaml);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 10_000);
    let snap = t.p.collect_status();
    let inst = &snap.instances[&instance_id("c", "w", 1)];
    assert_eq!(inst.state, SnapState::Running);
    assert_eq!(inst.restarts, 2);
    assert_eq!(t.p.control.records["c"].status, DeployStatus::Running);
}

#[test]
fn restart_policy_gives_up_after_limit() {
    let (mut t, _) = crashy_testbed(99);
    let yaml = "app: c\nversion: 1\ncomponents:\n  - {name: w, image: crashy/img, resources: {cpu: 100, mem: 64}, placement: cloud}\n";
    let (_, plan) = planned(&t, yaml);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 15_000);
    let snap = t.p.collect_status();
    let inst = &snap.instances[&instance_id("c", "w", 1)];
    assert_eq!(inst.state, SnapState::Failed);
    assert_eq!(inst.restarts, 4, "three restarts then failed");
    assert_eq!(t.p.control.records["c"].status, DeployStatus::Degraded);
}

/// A workload and a control-plane component must never share topic subtrees;
/// checked from the traffic log after a deploy (plane separation audit).
#[test]
fn control_plane_topics_carry_no_workload_bytes() {
    let mut t = testbed(1, &net(0));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    common::settle(&mut t.p, 5_000);
    for r in t.p.traffic.records() {
        assert!(
            ace_core::tracelog::is_control_plane(&r.topic),
            "unexpected data-plane traffic during bare deploy: {}",
            r.topic
        );
    }
}

/// Messages to agents survive duplicate delivery (controller retries).
struct NullActor;
impl Actor for NullActor {
    fn on_message(&mut self, _ctx: &mut Ctx<'_>, _msg: &Message) {}
}

#[test]
fn manifest_redelivery_is_idempotent() {
    let mut t = testbed(1, &net(0));
    let (_, plan) = planned(&t, VQ_TOPOLOGY);
    t.p.deploy(&plan).unwrap();
    // Let retries happen for a long stretch; generations must not climb and
    // instances must not flap.
    common::settle(&mut t.p, 30_000);
    assert_eq!(t.p.control.records["vq"].status, DeployStatus::Running);
    let gens: Vec<u64> = t.p.control.node_gen.values().copied().collect();
    assert!(gens.iter().all(|g| *g == 1));
    let snap = t.p.collect_status();
    assert!(snap.instances.values().all(|i| i.restarts == 0));
    let _ = NullActor;
}
