//! The four implementation paradigms of the same query task and their
//! declarative topologies: cloud-only, edge-only, and the collaborative
//! platform versions with the basic and advanced policies.

use std::collections::BTreeSet;

use ace_core::topology::{
    ApplicationTopology, ComponentSpec, Placement, Plane, Resources, ServiceKind,
};

use crate::components::VqConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum Paradigm {
    Ci,
    Ei,
    Ace,
    AcePlus,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Ci, Paradigm::Ei, Paradigm::Ace, Paradigm::AcePlus];

    pub fn tag(&self) -> &'static str {
        match self {
            Paradigm::Ci => "CI",
            Paradigm::Ei => "EI",
            Paradigm::Ace => "ACE",
            Paradigm::AcePlus => "ACE+",
        }
    }

    pub fn parse(s: &str) -> Option<Paradigm> {
        match s.to_ascii_uppercase().as_str() {
            "CI" => Some(Paradigm::Ci),
            "EI" => Some(Paradigm::Ei),
            "ACE" => Some(Paradigm::Ace),
            "ACE+" | "ACE_PLUS" | "ACEPLUS" => Some(Paradigm::AcePlus),
            _ => None,
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag())
    }
}

#[allow(clippy::too_many_arguments)]
fn comp(
    name: &str,
    image: &str,
    replicas: u32,
    cpu: u32,
    mem: u32,
    labels: &[&str],
    placement: Placement,
    plane: Plane,
    connections: &[&str],
    params: &[(&str, String)],
) -> ComponentSpec {
    ComponentSpec {
        name: name.into(),
        image: image.into(),
        replicas,
        connections: connections.iter().map(|s| s.to_string()).collect(),
        resources: Resources { cpu, mem },
        labels: labels.iter().map(|s| s.to_string()).collect(),
        placement,
        plane,
        params: params
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    }
}

/// Topology for one paradigm. Detectors and generators go to the nine camera
/// nodes, edge classifiers and local controllers to the EC gateways, cloud
/// components to the CC. Interval and paradigm ride in the detector params.
pub fn build_topology(paradigm: Paradigm, cfg: &VqConfig) -> ApplicationTopology {
    let od_params = [
        ("paradigm", paradigm.tag().to_string()),
        ("interval_us", cfg.interval_us.to_string()),
        ("lambda_milli", format!("{:.0}", cfg.lambda_crops * 1000.0)),
    ];
    let dg_params = [("interval_us", cfg.interval_us.to_string())];
    let edge = Placement::Edge;
    let cloud = Placement::Cloud;
    let wl = Plane::Workload;
    let ctl = Plane::Control;

    let mut components = vec![comp(
        "dg",
        "vq/dg",
        9,
        100,
        128,
        &["camera=true"],
        edge,
        wl,
        &[],
        &dg_params,
    )];
    let mut od_connections: Vec<&str> = vec!["dg"];
    match paradigm {
        Paradigm::Ci => {
            od_connections.extend(["coc"]);
            components.push(comp(
                "coc",
                "vq/coc",
                1,
                4000,
                4096,
                &[],
                cloud,
                wl,
                &["rs"],
                &[],
            ));
            components.push(comp("rs", "vq/rs", 1, 200, 512, &[], cloud, wl, &[], &[]));
            components.push(comp("ic", "vq/ic", 1, 200, 256, &[], cloud, ctl, &[], &[]));
        }
        Paradigm::Ei => {
            od_connections.extend(["eoc", "lic"]);
            components.push(comp(
                "eoc",
                "vq/eoc",
                3,
                2000,
                1024,
                &["gateway=true"],
                edge,
                wl,
                &["lic"],
                &[],
            ));
            components.push(comp(
                "lic",
                "vq/lic",
                3,
                100,
                128,
                &["gateway=true"],
                edge,
                ctl,
                &["rs"],
                &[],
            ));
            // Result storage stays inside each EC: the edge paradigm keeps
            // the WAN free of workload traffic.
            components.push(comp(
                "rs",
                "vq/rs",
                3,
                200,
                512,
                &["gateway=true"],
                edge,
                wl,
                &[],
                &[],
            ));
        }
        Paradigm::Ace | Paradigm::AcePlus => {
            od_connections.extend(["lic", "eoc", "coc"]);
            components.push(comp(
                "eoc",
                "vq/eoc",
                3,
                2000,
                1024,
                &["gateway=true"],
                edge,
                wl,
                &["lic"],
                &[],
            ));
            components.push(comp(
                "lic",
                "vq/lic",
                3,
                100,
                128,
                &["gateway=true"],
                edge,
                ctl,
                &["eoc", "coc", "ic"],
                &[],
            ));
            components.push(comp(
                "coc",
                "vq/coc",
                1,
                4000,
                4096,
                &[],
                cloud,
                wl,
                &["rs"],
                &[],
            ));
            components.push(comp("rs", "vq/rs", 1, 200, 512, &[], cloud, wl, &[], &[]));
            components.push(comp("ic", "vq/ic", 1, 200, 256, &[], cloud, ctl, &[], &[]));
        }
    }
    components.insert(
        1,
        comp(
            "od",
            "vq/od",
            9,
            500,
            256,
            &["camera=true"],
            edge,
            wl,
            &od_connections,
            &od_params,
        ),
    );

    ApplicationTopology {
        app_name: crate::components::APP.into(),
        version: 1,
        services: BTreeSet::from([ServiceKind::Message]),
        components,
    }
}

/// Workload-plane bridge rules per paradigm. Control and telemetry subtrees
/// are bridged by the deployment itself; these are the data flows.
pub fn data_bridges(paradigm: Paradigm) -> (Vec<&'static str>, Vec<&'static str>) {
    let app_up = vec![
        "app/vq/crop/up/#",
        "app/vq/crop/direct/#",
        "app/vq/result/#",
    ];
    match paradigm {
        // Edge-only: crops and results never cross the WAN.
        Paradigm::Ei => (Vec::new(), Vec::new()),
        Paradigm::Ci | Paradigm::Ace | Paradigm::AcePlus => (app_up, Vec::new()),
    }
}

/// Behavior factories for every image referenced by the topologies.
pub fn register_images(
    p: &mut ace_core::Platform,
    cfg: std::rc::Rc<VqConfig>,
    trace: crate::crop::TraceHandle,
    rs_counter: std::rc::Rc<std::cell::RefCell<u64>>,
) {
    use crate::components::*;
    use crate::model::EocLaw;

    let c = cfg.clone();
    p.register_image(
        "vq/dg",
        Box::new(move |_| Box::new(DataGenerator::new(c.clone()))),
    );

    let (c, t) = (cfg.clone(), trace.clone());
    p.register_image(
        "vq/od",
        Box::new(move |_| Box::new(ObjectDetector::new(c.clone(), t.clone()))),
    );

    let (c, t) = (cfg.clone(), trace.clone());
    p.register_image(
        "vq/eoc",
        Box::new(move |_| {
            let law = EocLaw::calibrated(c.p_pos, crate::model::EOC_ERROR_TARGET);
            Box::new(EdgeClassifier::new(c.clone(), t.clone(), law))
        }),
    );

    let (c, t) = (cfg.clone(), trace.clone());
    p.register_image(
        "vq/coc",
        Box::new(move |_| Box::new(CloudClassifier::new(c.clone(), t.clone()))),
    );

    let (c, t) = (cfg.clone(), trace.clone());
    p.register_image(
        "vq/lic",
        Box::new(move |info| {
            let scope = info.node.cluster_id().expect("gateway node").to_string();
            Box::new(LocalController::new(c.clone(), t.clone(), &scope))
        }),
    );

    let c = cfg.clone();
    p.register_image(
        "vq/ic",
        Box::new(move |_| Box::new(GlobalController::new(&c))),
    );

    let rs = rs_counter;
    p.register_image(
        "vq/rs",
        Box::new(move |_| Box::new(ResultStorage { stored: rs.clone() })),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::default_config;

    #[test]
    fn topologies_parse_and_roundtrip() {
        let cfg = default_config(Paradigm::Ace, 500_000, 1);
        for p in Paradigm::ALL {
            let t = build_topology(p, &cfg);
            let yaml = t.to_canonical_yaml();
            let parsed = ace_core::topology::parse_topology(&yaml).unwrap();
            assert_eq!(parsed.to_canonical_yaml(), yaml);
            assert!(parsed.component("od").is_some());
            assert_eq!(parsed.component("od").unwrap().replicas, 9);
        }
    }

    #[test]
    fn paradigm_tags_roundtrip() {
        for p in Paradigm::ALL {
            assert_eq!(Paradigm::parse(p.tag()), Some(p));
        }
        assert_eq!(Paradigm::parse("ace_plus"), Some(Paradigm::AcePlus));
        assert_eq!(Paradigm::parse("bogus"), None);
    }
}
