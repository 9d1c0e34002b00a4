#![allow(dead_code)]

//! Shared test fixture: the reference desk-scale testbed — one CC with a
//! single workstation node, three ECs each with one gateway and three camera
//! nodes — wired into a platform with configurable WAN parameters.

use std::cell::RefCell;
use std::rc::Rc;

use ace_core::infrastructure::{ClusterDecl, ClusterKind};
use ace_core::messaging::Message;
use ace_core::platform::{Actor, Ctx, Platform};
use ace_core::scenario::NetConfig;
use ace_core::simnet::SimTime;
use ace_core::HierarchicalId;

pub struct Testbed {
    pub p: Platform,
    pub infra: HierarchicalId,
}

pub fn net(delay_ms: u64) -> NetConfig {
    NetConfig {
        wan_delay_ms: delay_ms,
        ..NetConfig::default()
    }
}

pub fn testbed(seed: u64, net: &NetConfig) -> Testbed {
    let mut p = Platform::new(seed);
    let decls = vec![
        ClusterDecl {
            kind: ClusterKind::Cc,
            name: "cloud",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-a",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-b",
        },
        ClusterDecl {
            kind: ClusterKind::Ec,
            name: "site-c",
        },
    ];
    let infra = p
        .registry
        .register_infrastructure("u1", &decls)
        .expect("register")
        .id
        .clone();
    p.registry
        .register_node(
            &infra.cluster("cc"),
            16_000,
            65_536,
            ["gpu=true".to_string()].into(),
        )
        .unwrap();
    for ec in ["ec-1", "ec-2", "ec-3"] {
        let cid = infra.cluster(ec);
        p.registry
            .register_node(&cid, 8_000, 16_384, ["gateway=true".to_string()].into())
            .unwrap();
        for _ in 0..3 {
            p.registry
                .register_node(&cid, 4_000, 4_096, ["camera=true".to_string()].into())
                .unwrap();
        }
    }
    p.adopt_infra(&infra, net);
    Testbed { p, infra }
}

/// Run until the platform's periodic timers are the only thing left and the
/// given virtual time has passed.
pub fn settle(p: &mut Platform, until_ms: u64) {
    p.run_until(SimTime::from_ms(until_ms));
}

#[derive(Clone, Debug)]
pub struct Seen {
    pub topic: String,
    pub msg_id: String,
    pub bytes: u64,
    pub at: SimTime,
    pub head: Vec<u8>,
}

/// Records every delivery it receives.
pub struct Recorder {
    pub subs: Vec<String>,
    pub seen: Rc<RefCell<Vec<Seen>>>,
}

impl Recorder {
    pub fn attach(
        p: &mut Platform,
        client: &str,
        node: HierarchicalId,
        subs: &[&str],
    ) -> Rc<RefCell<Vec<Seen>>> {
        let seen = Rc::new(RefCell::new(Vec::new()));
        p.attach_client(
            client,
            node,
            Box::new(Recorder {
                subs: subs.iter().map(|s| s.to_string()).collect(),
                seen: seen.clone(),
            }),
        );
        seen
    }
}

impl Actor for Recorder {
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let client = ctx.client.clone();
        for s in &self.subs {
            ctx.platform.subscribe_from(&client, s).expect("subscribe");
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, msg: &Message) {
        self.seen.borrow_mut().push(Seen {
            topic: msg.topic.as_str().to_string(),
            msg_id: msg.msg_id.clone(),
            bytes: msg.payload_size(),
            at: ctx.now(),
            head: msg.payload.head().to_vec(),
        });
    }
}
